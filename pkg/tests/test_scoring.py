import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from genretrieval.scoring import (
    DEFAULT_BOUND,
    DEFAULT_TAU,
    DecomposedMapping,
    FormatError,
    NumericError,
    ShapeError,
    bound_constrain,
    decode_checkpoint,
    effective_item_row,
    encode_checkpoint,
    full_distribution,
    full_scores,
    load_checkpoint,
    project_queries,
    save_checkpoint,
    score_items,
    softmax_tau,
    topk_ids,
)


def random_mapping(rng, D=6, H=3, C=20, G=4, head_norm=False):
    return DecomposedMapping(
        U=rng.normal(size=(D, H)).astype(np.float32),
        V_dis=rng.normal(size=(C, H)).astype(np.float32),
        P_trans=rng.normal(size=(G, H)).astype(np.float32),
        text_features=rng.normal(size=(C, G)),
        head_norm=head_norm,
    )


def naive_matmul(A, B):
    n, k = A.shape
    k2, m = B.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(A[i, t]) * float(B[t, j])
            out[i, j] = acc
    return out


def test_defaults():
    assert DEFAULT_BOUND == 100
    assert DEFAULT_TAU == 0.07


class TestBoundConstrain:
    def test_below_bound_unchanged(self):
        F = np.array([[30.0], [40.0]])  # norm 50
        np.testing.assert_array_equal(bound_constrain(F, 100), F)

    def test_above_bound_scaled(self):
        F = np.array([[120.0], [160.0]])  # norm 200
        out = bound_constrain(F, 100)
        np.testing.assert_allclose(out, F * 0.5, rtol=1e-15)
        assert np.linalg.norm(out) <= 100

    def test_per_column(self):
        F = np.array([[300.0, 1.0], [400.0, 0.0]])
        out = bound_constrain(F, 100)
        np.testing.assert_allclose(out[:, 0], [60.0, 80.0])
        np.testing.assert_array_equal(out[:, 1], [1.0, 0.0])

    def test_rejects_bad_bound_and_nan(self):
        with pytest.raises(ValueError):
            bound_constrain(np.ones((2, 1)), 0)
        with pytest.raises(NumericError):
            bound_constrain(np.array([[np.nan], [1.0]]))

    @settings(max_examples=300, deadline=None)
    @given(
        arrays(np.float64, (5, 3), elements=st.floats(-1e4, 1e4)),
        st.floats(1e-3, 1e3),
    )
    def test_cap_idempotence_direction(self, F, B):
        out = bound_constrain(F, B)
        norms = np.linalg.norm(out, axis=0)
        assert (norms <= B).all()
        np.testing.assert_array_equal(bound_constrain(out, B), out)
        orig = np.linalg.norm(F, axis=0)
        keep = orig <= B
        np.testing.assert_array_equal(out[:, keep], F[:, keep])
        for j in np.flatnonzero(~keep):
            np.testing.assert_allclose(out[:, j] / norms[j], F[:, j] / orig[j], atol=1e-12)


class TestProjection:
    def test_identity(self):
        rng = np.random.default_rng(0)
        m = random_mapping(rng, D=3, H=3)
        m = m.with_params(U=np.eye(3, dtype=np.float32))
        F = rng.normal(size=(3, 2))
        np.testing.assert_array_equal(project_queries(m, F), F)

    def test_zero(self):
        rng = np.random.default_rng(0)
        m = random_mapping(rng, D=4, H=2)
        m = m.with_params(U=np.zeros((4, 2), dtype=np.float32))
        assert not project_queries(m, rng.normal(size=(4, 3))).any()

    def test_against_naive_matmul(self):
        rng = np.random.default_rng(7)
        m = random_mapping(rng, D=4, H=2)
        F = rng.normal(size=(4, 3))
        expected = naive_matmul(m.U.T, F)
        np.testing.assert_allclose(project_queries(m, F), expected, atol=1e-6)

    def test_rms_normalized_columns(self):
        rng = np.random.default_rng(1)
        m = random_mapping(rng, D=8, H=4, head_norm=True)
        Q = project_queries(m, rng.normal(size=(8, 3)))
        rms = np.sqrt(np.mean(Q * Q, axis=0))
        np.testing.assert_allclose(rms, 1.0, atol=1e-5)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(1)
        m = random_mapping(rng, D=8, H=4)
        with pytest.raises(ShapeError):
            project_queries(m, np.ones((7, 2)))


class TestScoreItems:
    def test_hand_example(self):
        V = np.array([[1.0, 2.0], [0.0, 1.0], [-1.0, 0.0]])
        F_hat = np.array([[1.0, 0.0], [0.0, 1.0]])  # columns (1,0) and (0,1)
        np.testing.assert_array_equal(score_items(V, F_hat), [2.0, 1.0, 0.0])

    def test_single_query_is_inner_product(self):
        rng = np.random.default_rng(3)
        V = rng.normal(size=(10, 4)).astype(np.float32)
        q = rng.normal(size=(4, 1))
        np.testing.assert_array_equal(score_items(V, q), (V.astype(np.float64) @ q)[:, 0])

    def test_zero_queries(self):
        V = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(score_items(V, np.zeros((3, 4))), np.zeros(5))

    def test_empty_subset(self):
        assert score_items(np.zeros((0, 3)), np.ones((3, 2))).shape == (0,)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_tau([1.0, 1.0, 1.0], 0.3), [1 / 3] * 3, rtol=1e-15)

    def test_dominance(self):
        p = softmax_tau([2.0, 0.0], 0.07)
        assert p[0] > 1 - 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            softmax_tau([], 1.0)
        with pytest.raises(ValueError):
            softmax_tau([1.0], 0.0)

    @settings(max_examples=300, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)),
        st.floats(1e-4, 1e2),
    )
    def test_normalized_positive_argmax(self, s, tau):
        p = softmax_tau(s, tau)
        assert abs(p.sum() - 1.0) <= 1e-9
        assert p.max() > 0 and np.isfinite(p).all()
        assert p[np.argmax(s)] == p.max()


class TestFullDistribution:
    def test_single_item(self):
        rng = np.random.default_rng(0)
        m = random_mapping(rng, C=1)
        np.testing.assert_array_equal(full_distribution(m, rng.normal(size=(6, 2))), [1.0])

    def test_identical_rows_uniform(self):
        rng = np.random.default_rng(0)
        m = random_mapping(rng, C=7)
        m = m.with_params(V_dis=np.ones((7, 3), np.float32), P_trans=np.zeros((4, 3), np.float32))
        np.testing.assert_allclose(full_distribution(m, rng.normal(size=(6, 2))), np.full(7, 1 / 7), rtol=1e-14)

    def test_subset_scores_agree(self):
        rng = np.random.default_rng(5)
        m = random_mapping(rng, C=100, head_norm=True)
        F = bound_constrain(rng.normal(size=(6, 4)) * 50)
        full = full_scores(m, F)
        subset = rng.choice(100, 30, replace=False)
        sub = score_items(m.item_matrix()[subset], project_queries(m, F))
        np.testing.assert_array_equal(sub, full[subset])


class TestItemRows:
    def test_sum_with_zero_projection_is_dis(self):
        rng = np.random.default_rng(0)
        m = random_mapping(rng).with_params(P_trans=np.zeros((4, 3), np.float32))
        np.testing.assert_array_equal(effective_item_row(m, 4, "sum"), m.V_dis[4])

    def test_trans_mode_for_unseen_row(self):
        rng = np.random.default_rng(0)
        m = random_mapping(rng)
        V = m.V_dis.copy()
        V[2] = 0
        m = m.with_params(V_dis=V)
        row = effective_item_row(m, 2, "trans")
        np.testing.assert_allclose(row, m.text_features[2] @ m.P_trans.astype(np.float64))
        assert np.abs(row).sum() > 0
        np.testing.assert_allclose(effective_item_row(m, 2, "sum"), row)

    def test_out_of_range(self):
        m = random_mapping(np.random.default_rng(0))
        with pytest.raises(IndexError):
            effective_item_row(m, 20)
        with pytest.raises(ValueError):
            m.item_matrix("both")


def test_topk_ties_by_id():
    assert topk_ids(np.array([1.0, 3.0, 3.0, 2.0, 3.0]), 3).tolist() == [1, 2, 4]


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        m = random_mapping(rng, head_norm=True)
        extra = {"heads": rng.normal(size=(12, 5)).astype(np.float32)}
        path = tmp_path / "m.urmm"
        save_checkpoint(path, m, extra, {"tags": ["CPR"]})
        m2, extra2, meta = load_checkpoint(path, m.text_features)
        assert encode_checkpoint(m2, extra2, meta) == path.read_bytes()
        np.testing.assert_array_equal(m2.U, m.U)
        np.testing.assert_array_equal(m2.V_dis, m.V_dis)
        np.testing.assert_array_equal(extra2["heads"], extra["heads"])
        assert meta["tags"] == ["CPR"] and m2.head_norm

    def test_layout(self):
        rng = np.random.default_rng(0)
        m = random_mapping(rng, D=2, H=1, C=3, G=2)
        buf = encode_checkpoint(m)
        assert buf[:4] == b"URMM"
        assert int.from_bytes(buf[4:8], "little") == 1
        assert int.from_bytes(buf[8:16], "little") == 2
        assert int.from_bytes(buf[16:24], "little") == 1
        np.testing.assert_array_equal(np.frombuffer(buf[24:32], "<f4"), m.U[:, 0])

    def test_crc_corruption_detected(self):
        m = random_mapping(np.random.default_rng(0))
        buf = bytearray(encode_checkpoint(m))
        buf[40] ^= 0x01
        with pytest.raises(FormatError, match="CRC"):
            decode_checkpoint(bytes(buf), m.text_features)

    def test_truncated(self):
        m = random_mapping(np.random.default_rng(0))
        buf = encode_checkpoint(m)
        with pytest.raises(FormatError):
            decode_checkpoint(buf[:50], m.text_features)
