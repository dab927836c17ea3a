import numpy as np
import pytest

from httn import tensor as tc
from httn.errors import ConfigError, DimensionError
from httn.gtmt import (GtmtParams, aggregate, elstc, elstc_dims, fuse, grouped_covariances, gtmt_param_count,
                       lstc, moment1, solve_aggregator, split_groups, tcov_oracle)
from httn.tensor import Tensor, grad_check


def T64(a, grad=False, name=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, name=name, dtype=np.float64)


def triple_loop(Xt):
    """R[(t,i),(t2,j)] = (1/M) sum_m Xt[t,m,i] Xt[t2,m,j], plain loops."""
    Tp, M, d = Xt.shape
    Y = np.zeros((Tp * d, Tp * d))
    for t in range(Tp):
        for t2 in range(Tp):
            for i in range(d):
                for j in range(d):
                    s = 0.0
                    for m in range(M):
                        s += Xt[t, m, i] * Xt[t2, m, j]
                    Y[t * d + i, t2 * d + j] = s / M
    return Y


def test_moment1_examples(rng):
    np.testing.assert_array_equal(moment1(T64(np.ones((4, 3, 5)))).data, np.ones(5))
    X = np.zeros((2, 3, 4))
    X[0], X[1] = 1.0, 2.0
    np.testing.assert_array_equal(moment1(T64(X)).data, np.full(4, 1.5))
    X = rng.normal(size=(8, 6, 4))
    ref = moment1(T64(X)).data
    np.testing.assert_allclose(moment1(T64(X[rng.permutation(8)][:, rng.permutation(6)])).data, ref, rtol=1e-13)


def test_split_groups_strided():
    X = T64(np.arange(8, dtype=float)[:, None, None] * np.ones((8, 2, 3)))
    groups = split_groups(X, 4)
    frames = [sorted(set(g.data[:, 0, 0].astype(int))) for g in groups]
    assert frames == [[0, 4], [1, 5], [2, 6], [3, 7]]
    gaps = {abs(a - b) for f in frames for a in f for b in f}
    assert gaps == {0, 8 - 4}
    np.testing.assert_array_equal(split_groups(X, 1)[0].data, X.data)
    assert all(g.shape[0] == 1 for g in split_groups(X, 8))
    with pytest.raises(ConfigError):
        split_groups(X, 3)


def test_lstc_simple_cases(rng):
    assert not lstc(T64(np.zeros((2, 3, 4)))).Y.data.any()
    v = rng.normal(size=4)
    R = lstc(T64(v[None, None, :])).Y.data
    np.testing.assert_allclose(R, np.outer(v, v), rtol=1e-14)
    assert np.linalg.matrix_rank(R) == 1


@pytest.mark.parametrize("seed", range(50))
def test_lstc_matches_triple_loop(seed):
    r = np.random.default_rng(seed)
    Tp, M, d = int(r.integers(1, 4)), int(r.integers(1, 9)), int(r.integers(1, 9))
    if seed == 0:
        Tp, M, d = 2, 5, 4
    Xt = r.normal(size=(Tp, M, d))
    np.testing.assert_allclose(lstc(T64(Xt)).Y.data, triple_loop(Xt), rtol=0, atol=1e-6)


def test_lstc_with_channel_map_matches_oracle(rng):
    X, K, b = rng.normal(size=(2, 5, 12)), rng.normal(size=(12, 2)), rng.normal(size=2)
    got = lstc(T64(X), T64(K), T64(b)).Y.data
    np.testing.assert_allclose(got, triple_loop(X @ K + b), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_grouped_matches_per_group_lstc_and_g1_matches_tcov(seed):
    r = np.random.default_rng(seed)
    X, K, b = r.normal(size=(2, 8, 5, 12)), r.normal(size=(12, 3)), r.normal(size=3)
    Ys = grouped_covariances(T64(X), 4, T64(K), T64(b)).data  # [B, S, S, G]
    for e, g in enumerate(split_groups(T64(X), 4)):
        np.testing.assert_allclose(Ys[..., e], lstc(g, T64(K), T64(b)).Y.data, atol=1e-12)
    Y1 = grouped_covariances(T64(X), 1, T64(K), T64(b)).data[..., 0]
    np.testing.assert_allclose(Y1, tcov_oracle(X, K, b), rtol=0, atol=1e-12)


def test_symmetry_and_psd(rng):
    X = rng.normal(size=(8, 7, 24))
    K = rng.normal(size=(24, 4))
    Ys = grouped_covariances(T64(X), 2, T64(K)).data
    for e in range(2):
        Y = Ys[..., e]
        assert np.abs(Y - Y.T).max() <= 1e-12 * np.abs(Y).max()
    cov = lstc(split_groups(T64(X), 2)[0], T64(K))
    for t in range(cov.frames):
        R = cov.block(t, t)
        xs = rng.normal(size=(100, 4))
        assert (np.einsum("ni,ij,nj->n", xs, R, xs) >= -1e-8).all()
        np.testing.assert_array_equal(cov.block(0, t), cov.block(t, 0).T)


def test_scale_equivariance(rng):
    Xt = rng.normal(size=(3, 4, 5))
    np.testing.assert_allclose(lstc(T64(2.5 * Xt)).Y.data, 2.5 ** 2 * lstc(T64(Xt)).Y.data, rtol=1e-13)


def test_order_sensitivity_witness(rng):
    X = rng.normal(size=(8, 4, 12))
    K = rng.normal(size=(12, 2))
    swapped = X.copy()
    swapped[[0, 4]] = X[[4, 0]]  # same group (t mod 4 == 0), different timestamps
    a = grouped_covariances(T64(X), 4, T64(K)).data[..., 0]
    b = grouped_covariances(T64(swapped), 4, T64(K)).data[..., 0]
    d = 2
    assert not np.allclose(a[:d, d:], b[:d, d:])
    np.testing.assert_allclose(moment1(T64(X)).data, moment1(T64(swapped)).data, rtol=1e-13)


def test_elstc_dims_and_tcov_dims():
    assert elstc_dims(8, 384, 6, 1) == (8, 262144, 1)
    assert elstc_dims(8, 384, 6, 2) == (4, 65536, 2)
    assert elstc_dims(8, 384, 6, 4) == (2, 16384, 4)
    assert elstc_dims(8, 384, 6, 8) == (1, 4096, 8)
    with pytest.raises(ConfigError):
        elstc_dims(8, 384, 6, 3)
    with pytest.raises(MemoryError):
        tcov_oracle(np.zeros((8, 1, 384)), np.zeros((384, 64)), cap=262144 - 1)


def test_aggregator_geometry_default():
    g = solve_aggregator(128, 64, 3)
    assert g.mid_size > 0
    p = GtmtParams.init(8, 384, 6, 4, 3, 64, rng=np.random.default_rng(0))
    assert p.agg_w1.shape == (8, 4, 3, 3) and p.agg_w2.shape == (1, 8, 3, 3)
    Ys = Tensor(np.random.default_rng(1).normal(size=(2, 128, 128, 4)).astype(np.float32))
    out = aggregate(Ys, p, train=True)
    assert out.shape == (2, 64, 64)


def test_aggregator_unsolvable_fails_loudly():
    with pytest.raises(ConfigError, match="tried"):
        solve_aggregator(4, 64, 3)
    with pytest.raises(ConfigError):
        GtmtParams.init(8, 24, 6, 8, 3, 64)


def test_aggregate_zero_input_eval_mode_is_zero():
    p = GtmtParams.init(8, 24, 6, 4, 3, 4, rng=np.random.default_rng(0), dtype=np.float64)
    out = aggregate(Tensor(np.zeros((1, 8, 8, 4)), dtype=np.float64), p, train=False)
    assert not out.data.any()
    with pytest.raises(DimensionError):
        aggregate([Tensor(np.zeros((8, 8))), Tensor(np.zeros((6, 6)))], p, train=False)


def test_aggregate_gradients():
    r = np.random.default_rng(3)
    p = GtmtParams.init(8, 24, 6, 4, 3, 4, rng=r, dtype=np.float64)
    for t in (p.bn1_gamma, p.bn1_beta, p.bn2_gamma, p.bn2_beta):
        t.data += r.uniform(-0.2, 0.2, t.shape)
    Ys = Tensor(r.normal(size=(3, 8, 8, 4)), requires_grad=True, name="Y", dtype=np.float64)
    w = Tensor(r.normal(size=(3, 4, 4)), dtype=np.float64)
    inputs = {"Y": Ys, "agg_w1": p.agg_w1, "agg_w2": p.agg_w2, "bn1_gamma": p.bn1_gamma, "bn2_beta": p.bn2_beta}
    report = grad_check(lambda: tc.reduce_sum(aggregate(Ys, p, train=True) * w), inputs, eps=1e-5, tol=1e-3)
    assert report.passed, report.format()


def test_lstc_gradient(rng):
    X = Tensor(rng.normal(size=(2, 4, 12)), requires_grad=True, name="X", dtype=np.float64)
    K = Tensor(rng.normal(size=(12, 2)), requires_grad=True, name="K", dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 4)), dtype=np.float64)
    assert grad_check(lambda: tc.reduce_sum(lstc(X, K).Y * w), [X, K]).passed


def test_fuse_properties(rng):
    M1 = T64(rng.normal(size=(2, 6)))
    M2 = T64(rng.normal(size=(2, 3, 3)))
    H = T64(rng.normal(size=(9, 6)))
    np.testing.assert_array_equal(fuse(T64(np.zeros((2, 3, 3))), M1, H).Z.data, M1.data)
    np.testing.assert_array_equal(fuse(M2, M1, T64(np.zeros((9, 6)))).Z.data, M1.data)
    rep = fuse(M2, M1, H)
    np.testing.assert_allclose(rep.Z.data - M1.data, M2.data.reshape(2, 9) @ H.data, atol=1e-12)
    zero = fuse(M2, T64(np.zeros((2, 6))), H).Z.data
    np.testing.assert_allclose(rep.Z.data - zero, M1.data, atol=1e-12)
    with pytest.raises(DimensionError):
        fuse(M2, M1, T64(np.zeros((8, 6))))


def test_param_count_matches_allocation():
    for C, tau, G, C_M in [(384, 6, 4, 64), (24, 6, 4, 4), (48, 6, 2, 8)]:
        p = GtmtParams.init(8, C, tau, G, 3, C_M, rng=np.random.default_rng(0))
        assert p.num_params() == gtmt_param_count(C, tau, G, 3, C_M)


def test_elstc_runs_end_to_end(rng):
    p = GtmtParams.init(8, 24, 6, 4, 3, 4, rng=rng, dtype=np.float64)
    M2 = elstc(T64(rng.normal(size=(3, 8, 5, 24))), p, train=True)
    assert M2.shape == (3, 4, 4)
    assert (M2.data >= 0).all()
