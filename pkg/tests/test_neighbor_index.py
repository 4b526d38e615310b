import warnings

import numpy as np
import pytest

from genretrieval.neighbor_index import (
    PAD,
    NeighborGraph,
    build_exact_knn,
    build_exact_knn_from_rows,
    decode_graph,
    encode_graph,
    load_graph,
    neighbor_gap_diagnostic,
    neighbors,
    save_graph,
)
from genretrieval.scoring import DecomposedMapping, FormatError


def brute_force(X, degree):
    n = len(X)
    out = []
    for i in range(n):
        d = [(float(np.sum((X[i] - X[j]) ** 2)), j) for j in range(n) if j != i]
        d.sort()
        out.append([j for _, j in d[:degree]])
    return np.array(out)


def test_collinear_hand_example():
    g = build_exact_knn_from_rows(np.array([[0.0], [1.0], [10.0]]), degree=1)
    assert g.adjacency[:, 0].tolist() == [1, 0, 1]


def test_degree_zero_rejected():
    with pytest.raises(ValueError):
        build_exact_knn_from_rows(np.zeros((3, 2)), degree=0)


def test_identical_rows_fall_back_to_id():
    g = build_exact_knn_from_rows(np.ones((5, 3)), degree=4)
    assert g.neighbors(2).tolist() == [0, 1, 3, 4]
    assert g.neighbors(0).tolist() == [1, 2, 3, 4]


def test_degree_clamped_with_warning():
    with pytest.warns(UserWarning, match="clamped"):
        g = build_exact_knn_from_rows(np.random.default_rng(0).normal(size=(4, 2)), degree=10)
    assert g.degree == 3


def test_matches_brute_force_on_1000_items():
    X = np.random.default_rng(1).normal(size=(1000, 8))
    g = build_exact_knn_from_rows(X, degree=16, block=128)
    np.testing.assert_array_equal(g.adjacency.astype(np.int64), brute_force(X, 16))


def test_exactness_and_no_self_loops_at_reference_scale():
    X = np.random.default_rng(2).normal(size=(10_000, 32)).astype(np.float32).astype(np.float64)
    g = build_exact_knn_from_rows(X, degree=16)
    rng = np.random.default_rng(3)
    for i in rng.choice(10_000, 50, replace=False):
        d = np.sum((X - X[i]) ** 2, axis=1)
        nb = g.neighbors(i)
        assert i not in nb
        farthest = d[nb].max()
        others = np.setdiff1d(np.arange(10_000), np.append(nb, i))
        assert (d[others] >= farthest).all()
        assert (np.diff(d[nb]) >= 0).all()


def test_rebuild_deterministic_with_duplicates():
    X = np.random.default_rng(4).normal(size=(200, 4))
    X[50:60] = X[0]
    a = encode_graph(build_exact_knn_from_rows(X, 8))
    b = encode_graph(build_exact_knn_from_rows(X, 8, block=7))
    assert a == b


def test_neighbors_wrapper_and_range():
    g = build_exact_knn_from_rows(np.random.default_rng(0).normal(size=(40, 3)), degree=32)
    assert len(neighbors(g, 5)) <= 32
    with pytest.raises(IndexError):
        neighbors(g, 40)


def test_expand_is_sorted_union():
    g = build_exact_knn_from_rows(np.array([[0.0], [1.0], [10.0], [11.0]]), degree=1)
    assert g.expand(np.array([0, 3])).tolist() == [0, 1, 2, 3]


def test_build_over_mapping_effective_rows():
    rng = np.random.default_rng(0)
    m = DecomposedMapping(
        U=rng.normal(size=(4, 3)).astype(np.float32),
        V_dis=rng.normal(size=(30, 3)).astype(np.float32),
        P_trans=rng.normal(size=(2, 3)).astype(np.float32),
        text_features=rng.normal(size=(30, 2)),
    )
    g = build_exact_knn(m, degree=5)
    np.testing.assert_array_equal(g.adjacency, build_exact_knn_from_rows(m.item_matrix("sum"), 5).adjacency)
    gap = neighbor_gap_diagnostic(m, g, rng.normal(size=(4, 2)))
    assert np.isfinite(np.asarray(gap, dtype=float)).all()


class TestGraphFile:
    def test_round_trip(self, tmp_path):
        g = build_exact_knn_from_rows(np.random.default_rng(0).normal(size=(50, 3)), 6)
        p = tmp_path / "g.urmg"
        save_graph(g, p)
        g2 = load_graph(p)
        np.testing.assert_array_equal(g2.adjacency, g.adjacency)
        assert encode_graph(g2) == p.read_bytes()

    def test_padding_round_trip(self):
        adj = np.array([[1, PAD], [0, PAD], [0, 1]], dtype=np.uint32)
        g = decode_graph(encode_graph(NeighborGraph(adj)))
        assert g.neighbors(0).tolist() == [1]
        assert g.neighbors(2).tolist() == [0, 1]

    def test_single_item_graph(self, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            g = build_exact_knn_from_rows(np.zeros((1, 2)), degree=32)
        assert g.degree == 0 and g.n_items == 1
        p = tmp_path / "one.urmg"
        save_graph(g, p)
        assert load_graph(p).neighbors(0).tolist() == []

    def test_header(self):
        buf = encode_graph(NeighborGraph(np.array([[1], [0]], dtype=np.uint32)))
        assert buf[:4] == b"URMG"
        assert int.from_bytes(buf[4:8], "little") == 1
        assert int.from_bytes(buf[8:16], "little") == 2
        assert int.from_bytes(buf[16:20], "little") == 1
        assert len(buf) == 20 + 8 + 4

    def test_corruption_and_truncation(self):
        buf = encode_graph(build_exact_knn_from_rows(np.random.default_rng(0).normal(size=(20, 2)), 3))
        bad = bytearray(buf)
        bad[25] ^= 0xFF
        with pytest.raises(FormatError, match="CRC"):
            decode_graph(bytes(bad))
        with pytest.raises(FormatError):
            decode_graph(buf[:30])
        with pytest.raises(FormatError):
            decode_graph(b"XXXX" + buf[4:])
