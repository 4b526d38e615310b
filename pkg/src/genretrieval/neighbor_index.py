"""Bounded-degree exact k-NN graph over effective item rows."""

from __future__ import annotations

import os
import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .scoring import (
    DecomposedMapping,
    FormatError,
    _Reader,
    check_crc,
    project_queries,
)

DEFAULT_DEGREE = 32
PAD = np.uint32(0xFFFFFFFF)
GRAPH_MAGIC = b"URMG"
GRAPH_VERSION = 1


@dataclass(frozen=True)
class NeighborGraph:
    adjacency: np.ndarray  # (n, degree) uint32, PAD-filled

    @property
    def n_items(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degree(self) -> int:
        return self.adjacency.shape[1]

    def neighbors(self, item_id: int) -> np.ndarray:
        if not 0 <= item_id < self.n_items:
            raise IndexError(f"item id {item_id} out of range")
        row = self.adjacency[item_id]
        return row[row != PAD].astype(np.int64)

    def expand(self, ids: np.ndarray) -> np.ndarray:
        """Sorted union of ``ids`` and all their neighbors."""
        ids = np.asarray(ids, dtype=np.int64)
        rows = self.adjacency[ids].ravel()
        rows = rows[rows != PAD].astype(np.int64)
        return np.union1d(ids, rows)


def neighbors(graph: NeighborGraph, item_id: int) -> np.ndarray:
    return graph.neighbors(item_id)


def _knn_rows(X: np.ndarray, degree: int, block: int) -> np.ndarray:
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    adj = np.full((n, degree), PAD, dtype=np.uint32)
    if degree == 0:
        return adj
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (X[start:stop] @ X.T)
        rows = np.arange(start, stop)
        d2[rows - start, rows] = np.inf
        kth = np.partition(d2, degree - 1, axis=1)[:, degree - 1]
        # slack absorbs cancellation error of the expanded form before the exact re-rank
        slack = 1e-9 * (1.0 + np.abs(kth) + sq[start:stop] + sq.max())
        for r, i in enumerate(rows):
            cand = np.flatnonzero(d2[r] <= kth[r] + slack[r])
            cand = cand[cand != i]
            diff = X[cand] - X[i]
            exact = np.einsum("ij,ij->i", diff, diff)
            order = np.lexsort((cand, exact))[:degree]
            adj[i, : order.size] = cand[order]
    return adj


def build_exact_knn(
    mapping: DecomposedMapping,
    degree: int = DEFAULT_DEGREE,
    mode: str = "sum",
    block: int = 512,
) -> NeighborGraph:
    """k nearest effective rows by L2 for every item, self excluded.

    Neighbor lists are ordered by ascending distance, then ascending id.
    """
    return build_exact_knn_from_rows(mapping.item_matrix(mode), degree, block)


def build_exact_knn_from_rows(rows: np.ndarray, degree: int = DEFAULT_DEGREE, block: int = 512) -> NeighborGraph:
    if degree < 1:
        raise ValueError("degree must be >= 1")
    X = np.asarray(rows, dtype=np.float64)
    n = X.shape[0]
    if degree > n - 1:
        warnings.warn(f"degree {degree} clamped to {n - 1} (catalog has {n} items)", stacklevel=2)
        degree = n - 1
    return NeighborGraph(_knn_rows(X, degree, block))


def neighbor_gap_diagnostic(mapping: DecomposedMapping, graph: NeighborGraph, F_bar, mode: str = "sum"):
    """Largest score gap between any item and one of its neighbors.

    Returns ``(max_score_gap, max_eps_times_bound)`` where the second term is
    ``max ||U v1 - U v2|| * max_j ||F_bar_j||`` over the same edges, the
    ceiling the gap can never exceed when no head normalization is applied.
    """
    V = mapping.item_matrix(mode)
    F_bar = np.asarray(F_bar, dtype=np.float64)
    scores = (V @ project_queries(mapping, F_bar)).max(axis=1)
    src = np.repeat(np.arange(graph.n_items), graph.degree)
    dst = graph.adjacency.ravel()
    keep = dst != PAD
    src, dst = src[keep], dst[keep].astype(np.int64)
    if src.size == 0:
        return 0.0, 0.0
    gap = np.abs(scores[src] - scores[dst]).max()
    W = V @ mapping.U.astype(np.float64).T
    eps = np.linalg.norm(W[src] - W[dst], axis=1).max()
    return float(gap), float(eps * np.linalg.norm(F_bar, axis=0).max())


# -- file format --------------------------------------------------------------


def encode_graph(graph: NeighborGraph) -> bytes:
    payload = (
        GRAPH_MAGIC
        + struct.pack("<IQI", GRAPH_VERSION, graph.n_items, graph.degree)
        + np.ascontiguousarray(graph.adjacency, dtype="<u4").tobytes()
    )
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode_graph(buf: bytes) -> NeighborGraph:
    payload = check_crc(buf, GRAPH_MAGIC, "graph")
    r = _Reader(payload, "graph")
    r.take(4)
    version, n, degree = r.unpack("<IQI")
    if version != GRAPH_VERSION:
        raise FormatError(f"graph: unsupported version {version}")
    adj = np.frombuffer(r.take(4 * n * degree), dtype="<u4").reshape(n, degree).astype(np.uint32)
    if r.pos != len(payload):
        raise FormatError("graph: trailing bytes before CRC")
    valid = adj[adj != PAD]
    if valid.size and valid.max() >= n:
        raise FormatError("graph: neighbor id out of range")
    return NeighborGraph(adj)


def save_graph(graph: NeighborGraph, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_graph(graph))


def load_graph(path: str | os.PathLike) -> NeighborGraph:
    with open(path, "rb") as fh:
        return decode_graph(fh.read())
