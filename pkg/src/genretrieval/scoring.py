"""Score arithmetic for the decomposed item mapping.

Items live in a low-rank space: the effective item matrix is
``V = V_dis + E_text @ P_trans`` and the full mapping is ``W = U V^T``.
A block of M query vectors is norm-capped column-wise, projected by
``U^T`` (optionally RMS-normalized) and an item's score is the max of its
M inner products.

Parameters are stored as float32; every product and reduction is carried
out in float64.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_BOUND = 100.0
DEFAULT_TAU = 0.07
RMS_EPS = 1e-6
ITEM_MODES = ("dis", "trans", "sum")

CHECKPOINT_MAGIC = b"URMM"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class FormatError(ValueError):
    """Corrupt or unrecognised binary file."""


@dataclass(frozen=True)
class DecomposedMapping:
    U: np.ndarray  # (D, H)
    V_dis: np.ndarray  # (C, H)
    P_trans: np.ndarray  # (G, H)
    text_features: np.ndarray  # (C, G), fixed
    head_norm: bool = True
    rms_gain: np.ndarray | None = None  # (H,)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        D, H = self.U.shape
        C, H2 = self.V_dis.shape
        G, H3 = self.P_trans.shape
        if not (H == H2 == H3):
            raise ShapeError(f"rank mismatch: U {self.U.shape}, V_dis {self.V_dis.shape}, P_trans {self.P_trans.shape}")
        if self.text_features.shape != (C, G):
            raise ShapeError(f"text_features {self.text_features.shape} != ({C}, {G})")
        if self.rms_gain is None:
            object.__setattr__(self, "rms_gain", np.ones(H, dtype=np.float32))
        elif self.rms_gain.shape != (H,):
            raise ShapeError("rms_gain must have length H")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(D, H, C, G)"""
        return self.U.shape[0], self.U.shape[1], self.V_dis.shape[0], self.P_trans.shape[0]

    @property
    def n_items(self) -> int:
        return self.V_dis.shape[0]

    def item_matrix(self, mode: str = "sum") -> np.ndarray:
        """Effective item rows for every item, float64, cached per mode."""
        if mode not in ITEM_MODES:
            raise ValueError(f"mode must be one of {ITEM_MODES}, got {mode!r}")
        if mode not in self._cache:
            if mode == "dis":
                V = self.V_dis.astype(np.float64)
            else:
                V = self.text_features.astype(np.float64) @ self.P_trans.astype(np.float64)
                if mode == "sum":
                    V = V + self.V_dis.astype(np.float64)
            if not np.isfinite(V).all():
                raise NumericError("effective item rows are not finite")
            V.setflags(write=False)
            self._cache[mode] = V
        return self._cache[mode]

    def with_params(self, **changes) -> "DecomposedMapping":
        return replace(self, _cache={}, **changes)


def effective_item_row(mapping: DecomposedMapping, item_id: int, mode: str = "sum") -> np.ndarray:
    if not 0 <= item_id < mapping.n_items:
        raise IndexError(f"item id {item_id} out of range")
    return mapping.item_matrix(mode)[item_id]


def _as_block(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.ndim != 2 or F.shape[1] < 1:
        raise ShapeError(f"query block must be D x M with M >= 1, got {F.shape}")
    return F


def bound_constrain(F, B: float = DEFAULT_BOUND) -> np.ndarray:
    """Scale every column whose L2 norm exceeds ``B`` back onto the ball of radius ``B``."""
    if not B > 0:
        raise ValueError("bound B must be positive")
    F = _as_block(F)
    if not np.isfinite(F).all():
        raise NumericError("query block contains non-finite values")
    norms = np.linalg.norm(F, axis=0)
    scale = np.maximum(norms / B, 1.0)
    out = F / scale
    # rounding in the division can leave a norm one ulp above B
    over = norms > B
    while True:
        bad = over & (np.linalg.norm(out, axis=0) > B)
        if not bad.any():
            break
        out[:, bad] *= 1.0 - np.finfo(np.float64).eps
    return out


def rms_normalize(Q: np.ndarray, gain: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(Q * Q, axis=0, keepdims=True) + RMS_EPS)
    return np.asarray(gain, dtype=np.float64)[:, None] * Q / rms


def project_queries(mapping: DecomposedMapping, F_bar) -> np.ndarray:
    """``U^T F_bar``, column-wise RMS-normalized when the mapping's head_norm is set. Returns H x M."""
    F_bar = _as_block(F_bar)
    if F_bar.shape[0] != mapping.U.shape[0]:
        raise ShapeError(f"query dim {F_bar.shape[0]} != U rows {mapping.U.shape[0]}")
    Q = mapping.U.astype(np.float64).T @ F_bar
    if mapping.head_norm:
        Q = rms_normalize(Q, mapping.rms_gain)
    return Q


def score_items(item_rows: np.ndarray, F_hat: np.ndarray) -> np.ndarray:
    """Max over query columns of the inner products; rows x (H) against H x M."""
    item_rows = np.asarray(item_rows, dtype=np.float64)
    if item_rows.shape[0] == 0:
        return np.zeros(0)
    return (item_rows @ np.asarray(F_hat, dtype=np.float64)).max(axis=1)


def softmax_tau(scores, tau: float = DEFAULT_TAU) -> np.ndarray:
    if not tau > 0:
        raise ValueError("temperature must be positive")
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("softmax of an empty score vector")
    z = s / tau
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def full_scores(mapping: DecomposedMapping, F_bar, mode: str = "sum") -> np.ndarray:
    return score_items(mapping.item_matrix(mode), project_queries(mapping, F_bar))


def full_distribution(mapping: DecomposedMapping, F_bar, tau: float = DEFAULT_TAU, mode: str = "sum") -> np.ndarray:
    """Exact softmax over the whole catalog (brute-force reference)."""
    return softmax_tau(full_scores(mapping, F_bar, mode), tau)


def topk_ids(scores: np.ndarray, k: int, ids: np.ndarray | None = None) -> np.ndarray:
    """Top-k by descending score, ties broken by ascending id."""
    scores = np.asarray(scores)
    ids = np.arange(scores.size) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    return ids[order[:k]]


# -- checkpoint I/O -----------------------------------------------------------


def _pack_matrix(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    if a.ndim == 1:
        a = a[None, :]
    return struct.pack("<QQ", a.shape[0], a.shape[1]) + a.tobytes()


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def matrix(self) -> np.ndarray:
        rows, cols = self.unpack("<QQ")
        data = self.take(4 * rows * cols)
        return np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float32)


def check_crc(buf: bytes, magic: bytes, what: str) -> bytes:
    """Validate magic and trailing CRC32; return the payload (everything but the CRC)."""
    if len(buf) < len(magic) + 8:
        raise FormatError(f"{what}: truncated file")
    if buf[:len(magic)] != magic:
        raise FormatError(f"{what}: bad magic {buf[:len(magic)]!r}")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{what}: CRC mismatch")
    return payload


def encode_checkpoint(mapping: DecomposedMapping, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> bytes:
    """Serialize U, V_dis, P_trans, then named extra matrices and a JSON meta block."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts += [_pack_matrix(mapping.U), _pack_matrix(mapping.V_dis), _pack_matrix(mapping.P_trans)]
    extra = {"rms_gain": mapping.rms_gain, **(extra or {})}
    parts.append(struct.pack("<I", len(extra)))
    for name, mat in extra.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, _pack_matrix(mat)]
    meta_raw = json.dumps({"head_norm": bool(mapping.head_norm), **(meta or {})}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta_raw)), meta_raw]
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(buf: bytes, text_features: np.ndarray):
    """Inverse of :func:`encode_checkpoint`. Returns (mapping, extra matrices, meta)."""
    payload = check_crc(buf, CHECKPOINT_MAGIC, "checkpoint")
    r = _Reader(payload, "checkpoint")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}")
    U, V_dis, P_trans = r.matrix(), r.matrix(), r.matrix()
    extra = {}
    (n_extra,) = r.unpack("<I")
    for _ in range(n_extra):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        extra[name] = r.matrix()
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode("utf-8"))
    if r.pos != len(payload):
        raise FormatError("checkpoint: trailing bytes before CRC")
    gain = extra.pop("rms_gain").reshape(-1)
    mapping = DecomposedMapping(
        U=U, V_dis=V_dis, P_trans=P_trans,
        text_features=np.asarray(text_features), head_norm=bool(meta.get("head_norm", True)),
        rms_gain=gain,
    )
    return mapping, extra, meta


def save_checkpoint(path: str | os.PathLike, mapping: DecomposedMapping, extra=None, meta=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(mapping, extra, meta))


def load_checkpoint(path: str | os.PathLike, text_features: np.ndarray):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), text_features)
