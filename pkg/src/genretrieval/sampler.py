"""Iterative probabilistic sampling with neighbor expansion.

Each step scores the current pool, draws K distinct items from the
temperature softmax over the pool and replaces the pool with the drawn
items plus their graph neighbors.

Randomness: every retrieval builds a ``numpy.random.SeedSequence`` from the
64-bit seed and spawns one child per stage (child 0 draws the initial pool,
child t the Gumbel noise of step t). Each child drives a PCG64 generator.
Because children are keyed by index, a run with T steps reproduces the
first T steps of any longer run with the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .neighbor_index import NeighborGraph
from .scoring import (
    DEFAULT_BOUND,
    DEFAULT_TAU,
    DecomposedMapping,
    ShapeError,
    bound_constrain,
    project_queries,
    score_items,
    topk_ids,
)

FINAL_MODES = ("sample", "topk_pool")


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 4
    K: int = 1000
    tau: float = DEFAULT_TAU
    init_subset: int | None = None  # default 10 * K
    seed: int = 0
    B: float = DEFAULT_BOUND
    mode: str = "sum"
    final: str = "sample"

    def __post_init__(self):
        if self.init_subset is None:
            object.__setattr__(self, "init_subset", 10 * self.K)
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.init_subset < self.K:
            raise ValueError("init_subset must be >= K")
        if self.final not in FINAL_MODES:
            raise ValueError(f"final must be one of {FINAL_MODES}")

    def with_(self, **changes) -> "SamplerConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class SamplerState:
    pool: np.ndarray  # N(t), sorted ids
    sampled: np.ndarray | None  # S(t), ids ordered by descending key
    sampled_scores: np.ndarray | None
    step: int


def step_generators(seed: int, n_steps: int) -> list[np.random.Generator]:
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1))
    return [np.random.Generator(np.random.PCG64(child)) for child in seq.spawn(n_steps + 1)]


def init_pool(n_items: int, config: SamplerConfig, rng: np.random.Generator) -> SamplerState:
    if n_items < 1:
        raise ValueError("empty catalog")
    size = min(config.init_subset, n_items)
    if size == n_items:
        pool = np.arange(n_items, dtype=np.int64)
    else:
        pool = np.sort(rng.choice(n_items, size=size, replace=False)).astype(np.int64)
    return SamplerState(pool=pool, sampled=None, sampled_scores=None, step=0)


def gumbel_top_k(scores: np.ndarray, ids: np.ndarray, k: int, tau: float, rng: np.random.Generator):
    """K distinct draws from softmax(scores / tau) without replacement.

    Perturbs ``scores + tau * g`` with iid standard Gumbel ``g`` and keeps the
    K largest keys (ties by smallest id). Returns (ids, scores) in key order.
    """
    if ids.size <= k:
        order = np.lexsort((ids, -scores))
        return ids[order], scores[order]
    keys = scores + tau * rng.gumbel(size=ids.size)
    order = np.lexsort((ids, -keys))[:k]
    return ids[order], scores[order]


def sample_step(
    state: SamplerState,
    item_matrix: np.ndarray,
    F_hat: np.ndarray,
    graph: NeighborGraph,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> SamplerState:
    if state.pool.size == 0:
        raise ValueError("empty candidate pool")
    scores = score_items(item_matrix[state.pool], F_hat)
    ids, s = gumbel_top_k(scores, state.pool, config.K, config.tau, rng)
    return SamplerState(pool=graph.expand(ids), sampled=ids, sampled_scores=s, step=state.step + 1)


def iter_steps(
    mapping: DecomposedMapping,
    F,
    graph: NeighborGraph,
    config: SamplerConfig,
    n_steps: int | None = None,
) -> Iterator[SamplerState]:
    """Yield the sampler state after each of ``n_steps`` (default ``config.T``) steps."""
    n_steps = config.T if n_steps is None else n_steps
    if graph.n_items != mapping.n_items:
        raise ShapeError(f"graph has {graph.n_items} items, mapping has {mapping.n_items}")
    F_hat = project_queries(mapping, bound_constrain(F, config.B))
    V = mapping.item_matrix(config.mode)
    rngs = step_generators(config.seed, n_steps)
    state = init_pool(mapping.n_items, config, rngs[0])
    for t in range(1, n_steps + 1):
        state = sample_step(state, V, F_hat, graph, config, rngs[t])
        yield state


def _finalize(state: SamplerState, V: np.ndarray, F_hat: np.ndarray, config: SamplerConfig):
    if config.final == "topk_pool":
        scores = score_items(V[state.pool], F_hat)
        order = np.lexsort((state.pool, -scores))[: config.K]
        return state.pool[order], scores[order]
    order = np.lexsort((state.sampled, -state.sampled_scores))
    return state.sampled[order], state.sampled_scores[order]


def retrieve(mapping: DecomposedMapping, F, graph: NeighborGraph, config: SamplerConfig):
    """Run T sampling steps; return (ids, scores) sorted by descending score then id."""
    *_, last = iter_steps(mapping, F, graph, config)
    F_hat = project_queries(mapping, bound_constrain(F, config.B))
    return _finalize(last, mapping.item_matrix(config.mode), F_hat, config)


def retrieve_trace(mapping: DecomposedMapping, F, graph: NeighborGraph, config: SamplerConfig, n_steps: int):
    """Final result after each step 1..n_steps, as if ``retrieve`` had been run with T = t."""
    F_hat = project_queries(mapping, bound_constrain(F, config.B))
    V = mapping.item_matrix(config.mode)
    return [_finalize(s, V, F_hat, config) for s in iter_steps(mapping, F, graph, config, n_steps)]


def exact_topk(mapping: DecomposedMapping, F, k: int, B: float = DEFAULT_BOUND, mode: str = "sum"):
    """Top-k of the full-catalog scores (the unsampled reference)."""
    F_hat = project_queries(mapping, bound_constrain(F, B))
    scores = score_items(mapping.item_matrix(mode), F_hat)
    ids = topk_ids(scores, k)
    return ids, scores[ids]
