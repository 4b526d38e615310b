"""NCE training of the decomposed mapping and a small feature generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .catalog import CandidateCatalog, InteractionRecord
from .scoring import DEFAULT_BOUND, RMS_EPS, DecomposedMapping

log = logging.getLogger(__name__)

DEFAULT_POWER = 0.75


class TrainingDiverged(RuntimeError):
    pass


def scatter_rows(index: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[index[k]] += values[k]`` for every k, as one sparse product."""
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0:
        return np.zeros((n_rows,) + values.shape[1:])
    sel = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n_rows, index.size))
    return np.asarray(sel @ values)


# -- negative sampling --------------------------------------------------------


class NegativeSampler:
    """iid item draws with probability proportional to ``freq ** power``."""

    def __init__(self, frequencies, power: float = DEFAULT_POWER):
        freqs = np.asarray(frequencies, dtype=np.float64)
        if (freqs < 0).any():
            raise ValueError("negative frequency")
        weights = np.where(freqs > 0, freqs, 0.0) ** power
        weights[freqs == 0] = 0.0
        total = weights.sum()
        if not total > 0:
            raise ValueError("all sampling weights are zero")
        self.power = power
        self.probabilities = weights / total
        self._cdf = np.cumsum(weights)
        self._total = self._cdf[-1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        u = rng.random(n) * self._total
        return np.minimum(np.searchsorted(self._cdf, u, side="right"), self._cdf.size - 1)


def sample_negatives(sampler: NegativeSampler, n: int, rng: np.random.Generator) -> np.ndarray:
    return sampler.sample(n, rng)


# -- feature generator --------------------------------------------------------


@dataclass
class ToyFeatureGenerator:
    """Mean-pooled history embedding plus an objective embedding, fed to M linear heads.

    ``forward`` maps ``(history, objective)`` to a D x M query block.
    Unknown objectives use the mean of the known objective embeddings.
    """

    item_embed: np.ndarray  # (C, E)
    objective_embed: np.ndarray  # (n_tags, E)
    heads: np.ndarray  # (M, D, E)
    tags: tuple[str, ...]

    @classmethod
    def init(cls, n_items, tags, D, M, E, rng, scale=0.1):
        return cls(
            item_embed=rng.normal(0.0, scale, (n_items, E)),
            objective_embed=rng.normal(0.0, scale, (len(tags), E)),
            heads=rng.normal(0.0, 1.0 / np.sqrt(E), (M, D, E)),
            tags=tuple(tags),
        )

    @property
    def n_queries(self) -> int:
        return self.heads.shape[0]

    @property
    def out_dim(self) -> int:
        return self.heads.shape[1]

    def tag_index(self, tag: str) -> int:
        """Index of ``tag``; -1 for unknown tags (default embedding)."""
        try:
            return self.tags.index(tag)
        except ValueError:
            return -1

    def _objective_rows(self, tag_idx: np.ndarray) -> np.ndarray:
        obj = np.asarray(self.objective_embed, dtype=np.float64)
        default = obj.mean(axis=0)
        return np.where((tag_idx >= 0)[:, None], obj[np.maximum(tag_idx, 0)], default)

    def pooled(self, hist_flat, hist_rec, tag_idx) -> np.ndarray:
        b = tag_idx.size
        E = self.item_embed.shape[1]
        counts = np.bincount(hist_rec, minlength=b).astype(np.float64)
        h = scatter_rows(hist_rec, np.asarray(self.item_embed, dtype=np.float64)[hist_flat], b)
        h /= np.maximum(counts, 1.0)[:, None]
        return h + self._objective_rows(tag_idx)

    def forward_batch(self, hist_flat, hist_rec, tag_idx):
        """Returns (F of shape (b, D, M), pooled h of shape (b, E))."""
        h = self.pooled(hist_flat, hist_rec, tag_idx)
        M, D, E = self.heads.shape
        F = (np.asarray(self.heads, dtype=np.float64).reshape(M * D, E) @ h.T).reshape(M, D, -1)
        return F.transpose(2, 1, 0), h

    def forward(self, history: Sequence[int], tag: str) -> np.ndarray:
        hist = np.asarray(list(history), dtype=np.int64)
        F, _ = self.forward_batch(hist, np.zeros(hist.size, dtype=np.int64), np.array([self.tag_index(tag)]))
        return F[0]

    def backward(self, gF, h, hist_flat, hist_rec, tag_idx) -> dict:
        """Gradients of the generator parameters given dLoss/dF of shape (b, D, M)."""
        b = tag_idx.size
        M, D, E = self.heads.shape
        g_heads = (gF.transpose(2, 1, 0).reshape(M * D, b) @ h).reshape(M, D, E)
        gh = gF.transpose(0, 2, 1).reshape(b, M * D) @ np.asarray(self.heads).reshape(M * D, E)
        g_obj = np.zeros_like(self.objective_embed, dtype=np.float64)
        known = tag_idx >= 0
        np.add.at(g_obj, tag_idx[known], gh[known])
        if (~known).any():
            g_obj += gh[~known].sum(axis=0) / len(self.tags)
        counts = np.bincount(hist_rec, minlength=b).astype(np.float64)
        rows, inv = np.unique(hist_flat, return_inverse=True)
        g_rows = scatter_rows(inv, gh[hist_rec] / counts[hist_rec, None], rows.size)
        return {"heads": g_heads, "objective_embed": g_obj, "item_embed": (rows, g_rows)}


# -- NCE loss and its gradients -----------------------------------------------


@dataclass
class _Params:
    U: np.ndarray
    V_dis: np.ndarray
    P_trans: np.ndarray
    text: np.ndarray
    gain: np.ndarray
    head_norm: bool

    @classmethod
    def of(cls, mapping: DecomposedMapping):
        f = lambda a: np.asarray(a, dtype=np.float64)
        return cls(f(mapping.U), f(mapping.V_dis), f(mapping.P_trans), f(mapping.text_features),
                   f(mapping.rms_gain), mapping.head_norm)


def _rows(p: _Params, ids: np.ndarray, mode: str) -> np.ndarray:
    if mode == "dis":
        return p.V_dis[ids]
    V = p.text[ids] @ p.P_trans
    return V + p.V_dis[ids] if mode == "sum" else V


def nce_forward_backward(
    p: _Params,
    F: np.ndarray,
    pos_rec: np.ndarray,
    pos_item: np.ndarray,
    negatives: np.ndarray,
    B: float = DEFAULT_BOUND,
    mode: str = "sum",
    logit_scale: float = 1.0,
    need_grad: bool = True,
):
    """Summed NCE loss over a batch of query blocks ``F`` (b, D, M).

    Positive k belongs to record ``pos_rec[k]``; every record shares the
    negative list. Each positive's denominator holds itself plus all
    negatives except copies of that same item.
    """
    b, D, M = F.shape
    norms = np.linalg.norm(F, axis=1)  # (b, M)
    scale = np.maximum(norms / B, 1.0)
    Fbar = F / scale[:, None, :]
    Q = p.U.T @ Fbar
    if p.head_norm:
        rms = np.sqrt(np.mean(Q * Q, axis=1, keepdims=True) + RMS_EPS)
        Y = Q / rms
        Qh = p.gain[None, :, None] * Y
    else:
        Qh = Q

    V_pos = _rows(p, pos_item, mode)
    V_neg = _rows(p, negatives, mode)
    S_pos = (V_pos[:, None, :] @ Qh[pos_rec])[:, 0, :]
    j_pos = S_pos.argmax(axis=1)
    s_pos = S_pos[np.arange(pos_item.size), j_pos] * logit_scale
    S_neg = V_neg @ Qh  # (b, n, M)
    j_neg = S_neg.argmax(axis=2)
    s_neg = np.take_along_axis(S_neg, j_neg[..., None], axis=2)[..., 0] * logit_scale

    logits = np.concatenate([s_pos[:, None], s_neg[pos_rec]], axis=1)  # (P, 1 + n)
    logits[:, 1:][negatives[None, :] == pos_item[:, None]] = -np.inf
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    z = ex.sum(axis=1, keepdims=True)
    loss = float(np.sum(np.log(z[:, 0]) + top[:, 0] - s_pos))
    if not need_grad:
        return loss, None

    pi = ex / z
    g_spos = (pi[:, 0] - 1.0) * logit_scale
    H, n = Qh.shape[1], negatives.size
    g_sneg = scatter_rows(pos_rec, pi[:, 1:] * logit_scale, b)

    gQh_pos = scatter_rows(pos_rec * M + j_pos, g_spos[:, None] * V_pos, b * M)
    gQh = gQh_pos.reshape(b, M, H).transpose(0, 2, 1)
    gV_pos = g_spos[:, None] * Qh[pos_rec, :, j_pos]
    route = (j_neg[..., None] == np.arange(M)) * g_sneg[..., None]  # (b, n, M)
    gQh = gQh + V_neg.T @ route
    gV_neg = route.transpose(1, 0, 2).reshape(n, b * M) @ Qh.transpose(0, 2, 1).reshape(b * M, H)

    items = np.concatenate([pos_item, negatives])
    g_items = np.concatenate([gV_pos, gV_neg])
    grads = {}
    rows, inv = np.unique(items, return_inverse=True)
    g_rows = scatter_rows(inv, g_items, rows.size)
    grads["V_dis"] = (rows, g_rows if mode != "trans" else np.zeros_like(g_rows))
    grads["P_trans"] = p.text[rows].T @ g_rows if mode != "dis" else np.zeros_like(p.P_trans)

    if p.head_norm:
        grads["rms_gain"] = (gQh * Y).sum(axis=(0, 2))
        gY = gQh * p.gain[None, :, None]
        gQ = (gY - Y * np.mean(gY * Y, axis=1, keepdims=True)) / rms
    else:
        grads["rms_gain"] = np.zeros_like(p.gain)
        gQ = gQh
    grads["U"] = Fbar.transpose(1, 0, 2).reshape(D, b * M) @ gQ.transpose(0, 2, 1).reshape(b * M, H)
    gFbar = p.U @ gQ
    over = norms > B
    gF = gFbar.copy()
    if over.any():
        bi, mi = np.nonzero(over)
        u = F[bi, :, mi] / norms[bi, mi][:, None]
        g = gFbar[bi, :, mi]
        gF[bi, :, mi] = (B / norms[bi, mi])[:, None] * (g - u * np.einsum("kd,kd->k", u, g)[:, None])
    grads["F"] = gF
    return loss, grads


def _single(F, positives, negatives):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    pos = np.asarray(list(positives), dtype=np.int64)
    if pos.size == 0:
        raise ValueError("positives must be non-empty")
    neg = np.asarray(list(negatives), dtype=np.int64)
    return F[None], np.zeros(pos.size, dtype=np.int64), pos, neg


def nce_loss(mapping: DecomposedMapping, F, positives, negatives, B: float = DEFAULT_BOUND, mode: str = "sum") -> float:
    """Sum over positives of -log softmax of the positive against itself plus the negatives."""
    Fb, rec, pos, neg = _single(F, positives, negatives)
    loss, _ = nce_forward_backward(_Params.of(mapping), Fb, rec, pos, neg, B, mode, need_grad=False)
    return loss


def nce_gradients(mapping: DecomposedMapping, F, positives, negatives, B: float = DEFAULT_BOUND, mode: str = "sum") -> dict:
    """Analytic gradients: dense ``U``, ``P_trans``, ``rms_gain``, ``F`` and dense ``V_dis``."""
    Fb, rec, pos, neg = _single(F, positives, negatives)
    p = _Params.of(mapping)
    _, g = nce_forward_backward(p, Fb, rec, pos, neg, B, mode)
    rows, g_rows = g["V_dis"]
    dense = np.zeros_like(p.V_dis)
    dense[rows] = g_rows
    g["V_dis"] = dense
    g["F"] = g["F"][0]
    return g


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 256
    epochs: int = 5
    seed: int = 0
    n_neg: int = 512
    power: float = DEFAULT_POWER
    pretrained_lr_ratio: float = 0.1
    pretrained: tuple[str, ...] = ()
    B: float = DEFAULT_BOUND
    H: int = 32
    D: int = 128
    M: int = 8
    embed_dim: int = 32
    head_norm: bool = True
    item_mode: str = "sum"
    train_tau: float | None = None
    weight_decay: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.n_neg < 1:
            raise ValueError("learning rate, batch size, epochs and n_neg must be non-negative/positive")


@dataclass
class TrainResult:
    mapping: DecomposedMapping
    generator: ToyFeatureGenerator
    losses: list[float]  # mean loss per positive, per epoch
    step_losses: list[float] = field(default_factory=list)


class _Adam:
    """Adam with lazy (row-sparse) updates for embedding tables."""

    def __init__(self, params: dict, lr: float, lr_scale: dict, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr, self.lr_scale, self.wd = params, lr, lr_scale, weight_decay
        self.b1, self.b2, self.eps = betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for name, g in grads.items():
            lr = self.lr * self.lr_scale.get(name, 1.0)
            if lr == 0:
                continue
            p, m, v = self.params[name], self.m[name], self.v[name]
            if isinstance(g, tuple):
                rows, g = g
                m[rows] = self.b1 * m[rows] + (1 - self.b1) * g
                v[rows] = self.b2 * v[rows] + (1 - self.b2) * g * g
                upd = (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)
                if self.wd:
                    upd = upd + self.wd * p[rows]
                p[rows] -= lr * upd
            else:
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.wd:
                    upd = upd + self.wd * p
                p -= lr * upd


def _encode_records(records, tag_index):
    tags = np.array([tag_index(r.objective_tag) for r in records], dtype=np.int64)
    hist = [np.asarray(r.history, dtype=np.int64) for r in records]
    pos = [np.asarray(sorted(set(r.positives)), dtype=np.int64) for r in records]
    return tags, hist, pos


def _gather(idx, hist, pos):
    hist_flat = np.concatenate([hist[i] for i in idx]) if len(idx) else np.zeros(0, np.int64)
    hist_rec = np.repeat(np.arange(len(idx)), [hist[i].size for i in idx])
    pos_item = np.concatenate([pos[i] for i in idx])
    pos_rec = np.repeat(np.arange(len(idx)), [pos[i].size for i in idx])
    return hist_flat.astype(np.int64), hist_rec, pos_item.astype(np.int64), pos_rec


def init_model(catalog: CandidateCatalog, tags: Sequence[str], config: TrainConfig, rng=None):
    rng = rng or np.random.default_rng(config.seed)
    C, G = catalog.n_items, catalog.text_dim
    H, D = config.H, config.D
    mapping = DecomposedMapping(
        U=rng.normal(0.0, 1.0 / np.sqrt(D), (D, H)),
        V_dis=rng.normal(0.0, config.init_std, (C, H)),
        P_trans=rng.normal(0.0, config.init_std, (G, H)),
        text_features=catalog.text_features,
        head_norm=config.head_norm,
        rms_gain=np.ones(H),
    )
    gen = ToyFeatureGenerator.init(C, tags, D, config.M, config.embed_dim, rng)
    return mapping, gen


def train(
    records: Sequence[InteractionRecord],
    catalog: CandidateCatalog,
    config: TrainConfig | None = None,
    tags: Sequence[str] | None = None,
    init: tuple[DecomposedMapping, ToyFeatureGenerator] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the summed NCE loss; deterministic for a fixed seed."""
    config = config or TrainConfig()
    if not records:
        raise ValueError("no training records")
    tags = tuple(tags) if tags is not None else tuple(sorted({r.objective_tag for r in records}))
    rng = np.random.default_rng(config.seed)
    mapping, gen = init if init is not None else init_model(catalog, tags, config, rng)

    params = {
        "U": np.array(mapping.U, dtype=np.float64),
        "V_dis": np.array(mapping.V_dis, dtype=np.float64),
        "P_trans": np.array(mapping.P_trans, dtype=np.float64),
        "rms_gain": np.array(mapping.rms_gain, dtype=np.float64),
        "item_embed": np.array(gen.item_embed, dtype=np.float64),
        "objective_embed": np.array(gen.objective_embed, dtype=np.float64),
        "heads": np.array(gen.heads, dtype=np.float64),
    }
    p = _Params(params["U"], params["V_dis"], params["P_trans"],
                np.asarray(catalog.text_features, dtype=np.float64), params["rms_gain"], config.head_norm)
    gen = ToyFeatureGenerator(params["item_embed"], params["objective_embed"], params["heads"], gen.tags)
    lr_scale = {k: config.pretrained_lr_ratio for k in config.pretrained}
    if not config.head_norm:
        lr_scale["rms_gain"] = 0.0
    opt = _Adam(params, config.lr, lr_scale, config.weight_decay)
    negs = NegativeSampler(catalog.frequencies, config.power)
    logit_scale = 1.0 / config.train_tau if config.train_tau else 1.0

    tag_idx, hist, pos = _encode_records(records, gen.tag_index)
    n = len(records)
    losses, step_losses = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            hist_flat, hist_rec, pos_item, pos_rec = _gather(idx, hist, pos)
            negatives = negs.sample(config.n_neg, rng)
            F, h = gen.forward_batch(hist_flat, hist_rec, tag_idx[idx])
            loss, g = nce_forward_backward(p, F, pos_rec, pos_item, negatives, config.B,
                                           config.item_mode, logit_scale)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            n_pos = pos_item.size
            gg = gen.backward(g.pop("F"), h, hist_flat, hist_rec, tag_idx[idx])
            grads = {**g, **gg}
            for k, v in grads.items():
                grads[k] = (v[0], v[1] / n_pos) if isinstance(v, tuple) else v / n_pos
            if config.item_mode == "dis":
                grads.pop("P_trans")
            elif config.item_mode == "trans":
                grads.pop("V_dis")
            opt.step(grads)
            total += loss
            count += n_pos
            step_losses.append(loss / n_pos)
        losses.append(total / max(count, 1))
        log.info("epoch %d  mean nce loss %.4f", epoch + 1, losses[-1])

    trained = DecomposedMapping(
        U=params["U"].astype(np.float32),
        V_dis=params["V_dis"].astype(np.float32),
        P_trans=params["P_trans"].astype(np.float32),
        text_features=catalog.text_features,
        head_norm=config.head_norm,
        rms_gain=params["rms_gain"].astype(np.float32),
    )
    gen32 = ToyFeatureGenerator(
        params["item_embed"].astype(np.float32),
        params["objective_embed"].astype(np.float32),
        params["heads"].astype(np.float32),
        gen.tags,
    )
    return TrainResult(trained, gen32, losses, step_losses)


# -- checkpoint helpers -------------------------------------------------------


def generator_sections(gen: ToyFeatureGenerator):
    M, D, E = gen.heads.shape
    extra = {
        "item_embed": gen.item_embed,
        "objective_embed": gen.objective_embed,
        "heads": np.asarray(gen.heads).reshape(M * D, E),
    }
    return extra, {"tags": list(gen.tags), "M": M, "D": D}


def generator_from_sections(extra: dict, meta: dict) -> ToyFeatureGenerator:
    M, D = int(meta["M"]), int(meta["D"])
    heads = extra["heads"].reshape(M, D, -1)
    return ToyFeatureGenerator(extra["item_embed"], extra["objective_embed"], heads, tuple(meta["tags"]))
