"""Recall metrics, sampled-vs-exact sweeps, synthetic data and the FLOP calculator."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .catalog import (
    CandidateCatalog,
    InteractionRecord,
    ObjectiveSpec,
    default_registry,
    save_catalog,
    save_interactions,
    save_objective_registry,
)
from .neighbor_index import NeighborGraph
from .sampler import SamplerConfig, exact_topk, retrieve_trace
from .scoring import DecomposedMapping, bound_constrain, project_queries, score_items, topk_ids
from .trainer import ToyFeatureGenerator, _encode_records, _gather


def recall_at_k(retrieved: Sequence[int], ground_truth: Iterable[int], k: int) -> float:
    """|top-k(retrieved) & truth| / |truth|."""
    truth = set(ground_truth)
    if not truth:
        raise ValueError("empty ground truth")
    top = set(list(retrieved)[:k])
    return len(top & truth) / len(truth)


def retrieval_precision(sampled_recall: float, oracle_recall: float) -> float:
    """Sampled R@K over exhaustive R@K; NaN when the exhaustive recall is zero."""
    if oracle_recall == 0:
        return float("nan")
    return sampled_recall / oracle_recall


# -- complexity ---------------------------------------------------------------


@dataclass(frozen=True)
class FlopsEstimate:
    sampled: int
    full: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.full, self.sampled)


def flops_estimate(M: int, H: int, D: int, T: int, K: int, max_nbr: int, n_items: int) -> FlopsEstimate:
    """Multiply-accumulate counts: ``M*H*(D + T*K*max_nbr)`` sampled vs ``M*D*|C|`` exhaustive."""
    for name, v in dict(M=M, H=H, D=D, K=K, max_nbr=max_nbr, n_items=n_items).items():
        if int(v) < 1:
            raise ValueError(f"{name} must be a positive integer")
    if int(T) < 0:
        raise ValueError("T must be non-negative")
    M, H, D, T, K, max_nbr, n_items = (int(x) for x in (M, H, D, T, K, max_nbr, n_items))
    return FlopsEstimate(sampled=M * H * (D + T * K * max_nbr), full=M * D * n_items)


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_clusters: int = 20
    items_per_cluster: int = 500
    subclusters: int = 10  # per cluster
    n_users: int = 5000
    history_len: int = 20
    tags: tuple[str, ...] = ("CPR", "PPR", "RSA", "RSB")
    text_dim: int = 32
    n_train_pos: int = 5
    n_test_pos: int = 5
    unseen_frac: float = 0.1
    zipf: float = 1.0
    sub_scale: float = 0.7
    text_noise: float = 0.3
    history_sibling: float = 0.2
    history_noise: float = 0.2
    scenario_shift: float = 0.5
    text_popularity: bool = False
    seed: int = 0


@dataclass
class SyntheticData:
    catalog: CandidateCatalog
    train: list[InteractionRecord]
    test: list[InteractionRecord]
    registry: dict[str, ObjectiveSpec]
    cluster: np.ndarray
    subcluster: np.ndarray
    unseen: np.ndarray  # bool mask of items held out of training

    def write(self, directory: str | os.PathLike) -> dict[str, str]:
        os.makedirs(directory, exist_ok=True)
        paths = {
            "catalog": os.path.join(directory, "catalog.jsonl"),
            "train": os.path.join(directory, "train.jsonl"),
            "test": os.path.join(directory, "test.jsonl"),
            "objectives": os.path.join(directory, "objectives.txt"),
        }
        save_catalog(self.catalog, paths["catalog"])
        save_interactions(self.train, paths["train"])
        save_interactions(self.test, paths["test"])
        save_objective_registry(self.registry, paths["objectives"])
        return paths


def _draw(rng, items, weights, n, exclude=()):
    mask = ~np.isin(items, np.asarray(exclude, dtype=np.int64))
    items, weights = items[mask], weights[mask]
    n = min(n, items.size)
    return rng.choice(items, size=n, replace=False, p=weights / weights.sum())


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticData:
    """Two-level clustered catalog with objective-dependent preferences.

    Items belong to a sub-cluster inside a cluster and carry a Zipf
    popularity within their sub-cluster. Text vectors are the cluster
    centroid plus a sub-cluster offset plus noise (optionally followed by a
    noisy log-popularity coordinate); popularity itself is not in the text.

    A user has a base sub-cluster. History items come from it, from sibling
    sub-clusters of the same cluster and from anywhere, by popularity. For
    every objective the user's home sub-cluster is the base one or, with
    probability ``scenario_shift`` for every objective but the first, one of
    two sub-clusters that objective favours. Train and held-out positives
    are disjoint popularity draws from the home sub-cluster. Items in the
    unseen split never appear in training histories or positives; held-out
    positives may include them.
    """
    rng = np.random.default_rng(spec.seed)
    nc, ipc, ns = spec.n_clusters, spec.items_per_cluster, spec.subclusters
    if ipc % ns:
        raise ValueError("items_per_cluster must be divisible by subclusters")
    n, per_sub, n_sub = nc * ipc, ipc // ns, nc * ns
    cluster = np.repeat(np.arange(nc), ipc)
    sub = np.repeat(np.arange(n_sub), per_sub)
    ranks = np.concatenate([rng.permutation(per_sub) for _ in range(n_sub)])
    pop = (ranks + 1.0) ** -spec.zipf
    n_centroid = spec.text_dim - 1 if spec.text_popularity else spec.text_dim
    centroids = rng.normal(0.0, 1.0, (nc, n_centroid))
    offsets = rng.normal(0.0, spec.sub_scale, (n_sub, n_centroid))
    text = centroids[cluster] + offsets[sub] + rng.normal(0.0, spec.text_noise, (n, n_centroid))
    if spec.text_popularity:
        logpop = np.log(pop)
        logpop = (logpop - logpop.mean()) / logpop.std()
        text = np.concatenate([text, (logpop + rng.normal(0.0, spec.text_noise, n))[:, None]], axis=1)
    text = np.round(text, 4)
    unseen = np.zeros(n, bool)
    unseen[rng.choice(n, size=int(round(spec.unseen_frac * n)), replace=False)] = True

    members = [np.flatnonzero(sub == k) for k in range(n_sub)]
    seen_members = [m[~unseen[m]] for m in members]
    seen_cdf = [np.cumsum(pop[m]) / pop[m].sum() for m in seen_members]
    scenario = {tag: rng.choice(n_sub, size=min(2, n_sub), replace=False) for tag in spec.tags}
    shift = {tag: (0.0 if k == 0 else spec.scenario_shift) for k, tag in enumerate(spec.tags)}

    train, test = [], []
    freq = np.zeros(n, np.int64)
    for u in range(spec.n_users):
        base = int(rng.integers(n_sub))
        r = rng.random(spec.history_len)
        sibling = (base // ns) * ns + rng.integers(ns, size=spec.history_len)
        anywhere = rng.integers(n_sub, size=spec.history_len)
        src = np.where(r < spec.history_noise, anywhere,
                       np.where(r < spec.history_noise + spec.history_sibling, sibling, base))
        u01 = rng.random(spec.history_len)
        hist = [int(seen_members[k][min(np.searchsorted(seen_cdf[k], x), seen_members[k].size - 1)])
                for k, x in zip(src, u01)]
        freq[hist] += 1
        for tag in spec.tags:
            home = base if rng.random() >= shift[tag] else int(rng.choice(scenario[tag]))
            m_seen, m_all = seen_members[home], members[home]
            pos = _draw(rng, m_seen, pop[m_seen], spec.n_train_pos)
            held = _draw(rng, m_all, pop[m_all], spec.n_test_pos, exclude=pos)
            freq[pos] += 1
            user = f"u{u}"
            train.append(InteractionRecord(user, tag, list(hist), sorted(int(i) for i in pos)))
            test.append(InteractionRecord(user, tag, list(hist), sorted(int(i) for i in held)))

    registry = default_registry()
    registry = {t: registry.get(t, ObjectiveSpec(t, f"Please retrieve items for objective {t}.")) for t in spec.tags}
    metadata = tuple(
        {"title": f"item {i}", "category": f"c{cluster[i]}/s{sub[i] % ns}", "price": f"{10 + 90 * pop[i]:.2f}"}
        for i in range(n)
    )
    catalog = CandidateCatalog(frequencies=freq, text_features=text, metadata=metadata)
    return SyntheticData(catalog, train, test, registry, cluster, sub, unseen)


# -- evaluation drivers -------------------------------------------------------


def query_blocks(gen: ToyFeatureGenerator, records: Sequence[InteractionRecord]) -> np.ndarray:
    """Stacked query blocks (b, D, M) for a list of records."""
    tags, hist, pos = _encode_records(records, gen.tag_index)
    hist_flat, hist_rec, _, _ = _gather(np.arange(len(records)), hist, pos)
    F, _ = gen.forward_batch(hist_flat, hist_rec, tags)
    return F


def exact_retrieval(mapping: DecomposedMapping, F_blocks: np.ndarray, k: int, B: float, mode: str = "sum",
                    candidates: np.ndarray | None = None) -> list[np.ndarray]:
    """Exhaustive top-k for every query block, optionally over a candidate subset."""
    V = mapping.item_matrix(mode)
    ids = np.arange(V.shape[0]) if candidates is None else np.asarray(candidates)
    out = []
    for F in F_blocks:
        s = score_items(V[ids], project_queries(mapping, bound_constrain(F, B)))
        out.append(topk_ids(s, k, ids))
    return out


def mean_recall(retrieved: Sequence[Sequence[int]], truths: Sequence[Iterable[int]], k: int) -> float:
    vals = [recall_at_k(r, t, k) for r, t in zip(retrieved, truths) if len(set(t))]
    return float(np.mean(vals)) if vals else float("nan")


def popularity_baseline(catalog: CandidateCatalog, k: int) -> np.ndarray:
    return topk_ids(catalog.frequencies.astype(np.float64), k)


def random_baseline(n_items: int, k: int) -> float:
    return k / n_items


def precision_sweep(
    mapping: DecomposedMapping,
    F_blocks: np.ndarray,
    truths: Sequence[Iterable[int]],
    graph: NeighborGraph,
    config: SamplerConfig,
    T_values: Sequence[int] = (1, 2, 3, 4, 5),
    seeds: Sequence[int] = tuple(range(20)),
):
    """Retrieval precision for every (T, seed): sampled mean R@K over exhaustive mean R@K.

    Returns ``(rows, oracle_recall, mean_by_T)`` where rows are
    ``(T, seed, precision)`` tuples.
    """
    K = config.K
    oracle = [exact_topk(mapping, F, K, config.B, config.mode)[0] for F in F_blocks]
    oracle_recall = mean_recall(oracle, truths, K)
    n_steps = max(T_values)
    rows = []
    for seed in seeds:
        per_T = {t: [] for t in T_values}
        for r, F in enumerate(F_blocks):
            # decorrelate queries while keeping each (seed, query) reproducible
            cfg = config.with_(seed=int(seed) * 1_000_003 + r)
            trace = retrieve_trace(mapping, F, graph, cfg, n_steps)
            for t in T_values:
                per_T[t].append(trace[t - 1][0])
        for t in T_values:
            rows.append((t, int(seed), retrieval_precision(mean_recall(per_T[t], truths, K), oracle_recall)))
    mean_by_T = {t: float(np.mean([p for tt, _, p in rows if tt == t])) for t in T_values}
    return rows, oracle_recall, mean_by_T


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "seed", "precision"])
    for t, seed, p in rows:
        w.writerow([t, seed, repr(float(p))])
    return buf.getvalue()


def ablate_item_representation(
    mapping: DecomposedMapping,
    F_blocks: np.ndarray,
    truths: Sequence[Iterable[int]],
    unseen: np.ndarray,
    k: int,
    mode: str,
    B: float,
) -> tuple[float, float]:
    """(R@k over all held-out positives, R@k over held-out positives that are unseen items).

    Retrieval is exhaustive over the whole catalog using ``mode`` item rows.
    """
    retrieved = exact_retrieval(mapping, F_blocks, k, B, mode)
    r_all = mean_recall(retrieved, truths, k)
    unseen_truths = [[i for i in t if unseen[i]] for t in truths]
    keep = [j for j, t in enumerate(unseen_truths) if t]
    r_unseen = mean_recall([retrieved[j] for j in keep], [unseen_truths[j] for j in keep], k)
    return r_all, r_unseen


# -- reporting ----------------------------------------------------------------


@dataclass
class EvalReport:
    recall_by_objective: dict[str, float] = field(default_factory=dict)
    baselines: dict[str, float] = field(default_factory=dict)
    precision_by_T: dict[int, float] = field(default_factory=dict)
    oracle_recall: float | None = None
    ablation: dict[str, dict[str, float]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["precision_by_T"] = {str(k): v for k, v in self.precision_by_T.items()}
        return json.dumps(_nan_safe(d), indent=2, sort_keys=True, allow_nan=False)

    def to_table(self) -> str:
        lines = []
        if self.recall_by_objective:
            lines.append("objective   R@K")
            lines += [f"{tag:<11} {v:.4f}" for tag, v in sorted(self.recall_by_objective.items())]
        if self.baselines:
            lines.append("")
            lines += [f"baseline {name:<12} {v:.4f}" for name, v in sorted(self.baselines.items())]
        if self.precision_by_T:
            lines.append("")
            lines.append(f"T   retrieval precision   (exhaustive R@K = {self.oracle_recall:.4f})")
            lines += [f"{t:<3} {p:.4f}" for t, p in sorted(self.precision_by_T.items())]
        if self.ablation:
            lines.append("")
            lines.append("mode   R@K(all)  R@K(unseen)")
            lines += [f"{m:<6} {v['all']:.4f}    {v['unseen']:.4f}" for m, v in self.ablation.items()]
        if self.timings:
            lines.append("")
            lines += [f"time {k}: {v:.2f}s" for k, v in self.timings.items()]
        return "\n".join(lines)


def _nan_safe(x):
    """Recursively turn NaN into None (JSON null) and numpy scalars into floats."""
    if isinstance(x, dict):
        return {k: _nan_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_nan_safe(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return None if math.isnan(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x
