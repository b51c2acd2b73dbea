import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mkrem.graph import (GraphSpec, LaplacianPack, build_laplacian, feature_windows,
                         markov_matrix, select_power)
from mkrem.linalg import CSRMatrix
from mkrem.phantom import make_brain_like_phantom

from conftest import random_sparse


def test_spec_validation():
    for bad in (dict(window_m=8), dict(window_m=0), dict(knn=0), dict(eps_t=0.0),
                dict(t_max=0), dict(knn=7, knn_graph=5)):
        with pytest.raises(ValueError):
            GraphSpec(**bad)


# -- windows ------------------------------------------------------------------------

def test_windows_trivial(rng):
    Y = feature_windows(np.full((4, 5), 3.0))
    assert Y.shape == (20, 9)
    img = rng.random((4, 5))
    assert np.array_equal(feature_windows(img, 1)[:, 0], img.ravel())
    # interior rows of a constant image coincide
    assert np.all(feature_windows(np.full((5, 5), 3.0)).reshape(5, 5, 9)[1:4, 1:4] == 3.0)


def test_windows_ramp_enumeration():
    img = np.arange(25.0).reshape(5, 5)
    Y = feature_windows(img)
    for i in range(1, 4):
        for j in range(1, 4):
            want = [img[i + dy, j + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
            assert np.array_equal(Y[i * 5 + j], want)
    # corner window is zero-padded
    assert np.array_equal(Y[0], [0, 0, 0, 0, 0, 1, 0, 5, 6])


# -- Markov matrix ---------------------------------------------------------------------

def test_two_pair_hand_oracle():
    Y = np.array([[0.0], [0.0], [1.0], [1.0]])
    # knn=2: b_i is the third smallest distance, 1 for every row
    e = np.exp(-1.0)
    row = np.array([1.0, 1.0, e, e]) / (2 + 2 * e)
    want = np.array([row, row, row[::-1], row[::-1]])
    for dense in (True, False):
        Z = markov_matrix(Y, knn=2, knn_graph=4, dense=dense).to_dense()
        assert np.allclose(Z, want, atol=1e-15)
    # knn=1: the bandwidth collapses onto the duplicate and is floored
    Z = markov_matrix(Y, knn=1, dense=True).to_dense()
    assert np.allclose(Z, np.kron(np.eye(2), np.full((2, 2), 0.5)), atol=1e-15)


def test_constant_image_uniform():
    Y = feature_windows(np.full((4, 4), 2.0), 1)
    Z = markov_matrix(Y, knn=3, dense=True).to_dense()
    assert np.allclose(Z, 1 / 16, atol=1e-15)


def test_knn_precondition():
    with pytest.raises(ValueError):
        markov_matrix(np.zeros((3, 1)), knn=3)


def test_rows_stochastic_on_phantom():
    pri = make_brain_like_phantom(24, 24).priors[0].reshape(24, 24)
    Z = markov_matrix(feature_windows(pri), knn=7, knn_graph=32)
    assert np.max(np.abs(Z.row_sums() - 1)) <= 1e-12
    assert np.all(Z.data >= 0)


def test_sparse_matches_dense_with_full_neighbourhood(rng):
    Y = feature_windows(rng.random((5, 6)))
    Zd = markov_matrix(Y, knn=4, dense=True).to_dense()
    Zs = markov_matrix(Y, knn=4, knn_graph=30).to_dense()
    assert np.max(np.abs(Zd - Zs)) <= 1e-12


# -- power selection ------------------------------------------------------------------

def test_identity_gives_t1(rng):
    assert select_power(CSRMatrix.identity(6), rng.random((6, 3))) == 1


def test_t_max_warns():
    Z = CSRMatrix.from_dense([[0.0, 1.0], [1.0, 0.0]])
    with pytest.warns(RuntimeWarning):
        assert select_power(Z, np.array([1.0, 0.0]), 1e-4, 5) == 5


def _lazy_chain(rng, n):
    W = random_sparse(rng, n, n, 0.5)
    W = np.abs(W + W.T)
    P = W / W.sum(1).max() + np.diag(1 - W.sum(1) / W.sum(1).max())
    return 0.5 * (np.eye(n) + P)


def _ratios(Z, Y, t_max):
    out, prev = [], Y
    for _ in range(t_max):
        cur = Z @ prev
        out.append(np.sum((cur - prev) ** 2) / np.sum(prev ** 2))
        prev = cur
    return np.array(out)


@given(st.integers(0, 10_000))
def test_ratio_monotone_on_reversible_chains(seed):
    rng = np.random.default_rng(seed)
    Z = _lazy_chain(rng, 10)
    assert np.allclose(Z.sum(0), 1) and np.allclose(Z.sum(1), 1)
    Y = rng.standard_normal((10, 3))
    r = _ratios(Z, Y, 12)
    assert np.all(np.diff(r) <= 1e-12 * r[0])
    eps = r[4] * 1.0000001
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        t = select_power(CSRMatrix.from_dense(Z), Y, eps, 12)
    assert t == int(np.argmax(r <= eps)) + 1


def test_select_power_deterministic_on_phantom():
    pri = make_brain_like_phantom(24, 24).priors[0].reshape(24, 24)
    Y = feature_windows(pri)
    Z = markov_matrix(Y)
    assert select_power(Z, Y) == select_power(Z, Y)


# -- Laplacian ------------------------------------------------------------------------

def test_Q_annihilates_constants():
    pri = make_brain_like_phantom(24, 24).priors[0].reshape(24, 24)
    pack = build_laplacian([pri])
    one = np.ones(pack.n)
    assert np.max(np.abs(pack.apply_Q(one))) <= 1e-10
    assert np.max(np.abs(pack.apply_Q(3.5 * one))) <= 1e-10
    Q = pack.Q_matrix()
    assert np.max(np.abs(Q.row_sums())) <= 1e-10


def test_Qa_definition_identity(rng):
    img = rng.random((2, 3))
    K = CSRMatrix.from_dense(np.abs(random_sparse(rng, 6, 6, 0.6)) + np.eye(6))
    pack = build_laplacian([img], K, GraphSpec(knn=2, dense=True))
    Q = pack.Q_matrix().to_dense()
    Kd = K.to_dense()
    for _ in range(5):
        a = rng.standard_normal(6)
        x = Kd @ a
        assert abs(pack.quadratic(a) - x @ Q @ x) <= 1e-10
    assert np.allclose(pack.Qa_matrix().to_dense(), Kd.T @ Q @ Kd, atol=1e-12)
    a = rng.standard_normal(6)
    assert np.allclose(pack.apply_Qa(a), Kd.T @ Q @ Kd @ a, atol=1e-12)


def test_matrix_free_matches_assembled(rng):
    img = rng.random((5, 5))
    pack = build_laplacian([img], spec=GraphSpec(knn=3, dense=True))
    Z = pack.Z.to_dense()
    Zt = np.linalg.matrix_power(Z, pack.t)
    v = rng.standard_normal(25)
    assert np.allclose(pack.apply_Q(v), v - Zt @ v, atol=1e-13)
    assert np.allclose(pack.apply_Qt(v), v - Zt.T @ v, atol=1e-13)
    assert np.allclose(pack.Q_matrix().to_dense(), np.eye(25) - Zt, atol=1e-13)
    sym = LaplacianPack(pack.Z, pack.t, symmetrize=True)
    Qs = sym.Q_matrix().to_dense()
    assert np.allclose(Qs, Qs.T, atol=1e-14)
    assert np.allclose(sym.apply_Q(v), Qs @ v, atol=1e-13)


def test_averaging_over_priors(rng):
    a, b = rng.random((4, 4)), rng.random((4, 4))
    spec = GraphSpec(knn=3, dense=True)
    pack = build_laplacian([a, b], spec=spec)
    Za = markov_matrix(feature_windows(a), 3, dense=True).to_dense()
    Zb = markov_matrix(feature_windows(b), 3, dense=True).to_dense()
    assert np.allclose(pack.Z.to_dense(), 0.5 * (Za + Zb), atol=1e-15)
    assert np.max(np.abs(pack.Z.row_sums() - 1)) <= 1e-12
