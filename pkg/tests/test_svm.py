import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdct_auxnet.svm import RbfSvmModel, rbf_kernel, rbf_kernel_matrix, smo_solve, svm_predict, svm_train


def project(v, y, C):
    """Euclidean projection onto {a : y.a = 0, 0 <= a <= C}.

    ``s(lam) = y . clip(v - lam y, 0, C)`` is piecewise linear and non-increasing,
    so the root lies between two adjacent breakpoints and is found by linear
    interpolation there.
    """
    def s(lam):
        return np.clip(v[None, :] - lam[:, None] * y[None, :], 0, C) @ y

    bps = np.unique(np.concatenate([v * y, (v - C) * y]))
    vals = s(bps)
    if vals[0] <= 0:
        lam = bps[0]
    elif vals[-1] >= 0:
        lam = bps[-1]
    else:
        k = int(np.flatnonzero(vals <= 0)[0])
        l0, l1, s0, s1 = bps[k - 1], bps[k], vals[k - 1], vals[k]
        lam = l0 + (l1 - l0) * s0 / (s0 - s1)
    return np.clip(v - lam * y, 0, C)


def dual_oracle(K, y, C, iters=20000):
    """Projected gradient ascent on e.a - a.Q.a / 2, with the intercept from the KKT conditions."""
    Q = np.outer(y, y) * K
    step = 1.0 / np.linalg.eigvalsh(Q).max()
    a = np.zeros(len(y))
    for _ in range(iters):
        a = project(a + step * (1.0 - Q @ a), y, C)
    g = Q @ a - 1.0
    free = (a > 1e-6 * C) & (a < C * (1 - 1e-6))
    b = float(np.mean(-y[free] * g[free])) if free.any() else 0.0
    return a, b


def decision_oracle(Xtr, y, a, b, gamma, Xte):
    return rbf_kernel_matrix(Xte, Xtr, gamma) @ (a * y) + b


def random_problem(seed, n):
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, 2))
    y = (X[:, 0] * X[:, 1] + 0.3 * r.standard_normal(n) > 0).astype(int)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return X, y


# -- kernel ---------------------------------------------------------------------


def test_kernel_values():
    assert rbf_kernel([0, 0], [1, 1], 0.5) == pytest.approx(math.exp(-1))
    assert rbf_kernel([3.0, -2.0], [3.0, -2.0], 7.0) == 1.0
    assert rbf_kernel([0.0], [1.0], 1e4) < 1e-300


def test_kernel_errors():
    with pytest.raises(ValueError):
        rbf_kernel([0, 0], [0, 0, 0], 1.0)
    with pytest.raises(ValueError):
        rbf_kernel([0], [0], 0.0)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(0.01, 3))
@settings(max_examples=60, deadline=None)
def test_kernel_in_unit_interval(a, b, g):
    v = rbf_kernel(a, b, g)
    assert 0 <= v <= 1


# -- training -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_smo_agrees_with_dual_oracle(seed):
    X, y = random_problem(seed, 16 + seed % 5)
    gamma, C = 0.7, 2.0
    model = svm_train(X, y, C=C, gamma=gamma, tol=1e-6, standardize=False)
    ys = np.where(y == 1, 1.0, -1.0)
    a, b = dual_oracle(rbf_kernel_matrix(X, X, gamma), ys, C)
    grid = np.stack(np.meshgrid(np.linspace(-2, 2, 9), np.linspace(-2, 2, 9)), -1).reshape(-1, 2)
    ours = model.decision_function(grid)
    ref = decision_oracle(X, ys, a, b, gamma, grid)
    assert np.abs(ours - ref).max() < 1e-2


@pytest.mark.parametrize("seed", range(6))
def test_kkt_and_constraints(seed):
    X, y = random_problem(100 + seed, 20)
    tol, C = 1e-3, 1.0
    model = svm_train(X, y, C=C, gamma=1.0, tol=tol, standardize=False)
    assert model.converged
    ys = np.where(y == 1, 1.0, -1.0)
    K = rbf_kernel_matrix(X, X, 1.0)
    alpha, bias, *_ = smo_solve(K, ys, C, tol)
    assert abs(alpha @ ys) < 1e-8
    assert alpha.min() >= -1e-12 and alpha.max() <= C + 1e-12
    margin = ys * (K @ (alpha * ys) + bias)
    zero, bound = alpha <= 1e-12, alpha >= C - 1e-12
    free = ~zero & ~bound
    assert (margin[zero] >= 1 - tol).all()
    assert (np.abs(margin[free] - 1) <= tol).all()
    assert (margin[bound] <= 1 + tol).all()
    np.testing.assert_allclose(model.dual_coefs.sum(), 0, atol=1e-8)
    assert len(model.support_vectors) == int((alpha > 0).sum())


def test_dual_objective_non_decreasing():
    X, y = random_problem(7, 40)
    model = svm_train(X, y, C=1.0, gamma=1.0, tol=1e-5)
    h = np.asarray(model.objective_history)
    assert len(h) > 2
    assert (np.diff(h) >= -1e-10).all()


def test_xor():
    X = np.array([[0, 0], [1, 1], [0, 1], [1, 0]], dtype=float)
    y = np.array([0, 0, 1, 1])
    model = svm_train(X, y, C=10.0, gamma=1.0, standardize=False)
    np.testing.assert_array_equal(model.predict(X), y)


def test_two_points():
    X = np.array([[0.0, 0.0], [2.0, 1.0]])
    model = svm_train(X, [0, 1], C=1e3, gamma=0.3, tol=1e-8, standardize=False)
    assert len(model.support_vectors) == 2
    np.testing.assert_allclose(np.abs(model.dual_coefs[0]), np.abs(model.dual_coefs[1]))
    np.testing.assert_allclose(model.decision_function(X), [-1, 1], atol=1e-6)
    assert model.decision_function((X[0] + X[1]) / 2)[0] == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_separable_sets_fit_perfectly(seed):
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, (40, 2))
    w = r.standard_normal(2)
    y = (X @ w > 0).astype(int)
    X = X + 0.2 * np.sign(X @ w)[:, None] * w / np.linalg.norm(w)  # open a gap
    model = svm_train(X, y, C=100.0, gamma=0.5)
    assert (model.predict(X) == y).all()


def test_duplicated_data_same_decision():
    r = np.random.default_rng(3)
    X = np.concatenate([r.normal(-2, 0.5, (8, 2)), r.normal(2, 0.5, (8, 2))])
    y = np.repeat([0, 1], 8)
    grid = r.uniform(-3, 3, (30, 2))
    a = svm_train(X, y, C=1e4, gamma=0.5, tol=1e-7, standardize=False)
    b = svm_train(np.concatenate([X, X]), np.concatenate([y, y]), C=1e4, gamma=0.5, tol=1e-7, standardize=False)
    np.testing.assert_allclose(a.decision_function(grid), b.decision_function(grid), atol=1e-3)


def test_interior_support_vector_on_margin():
    X, y = random_problem(11, 20)
    model = svm_train(X, y, C=5.0, gamma=1.0, tol=1e-6, standardize=False)
    free = np.abs(model.dual_coefs) < model.C - 1e-9
    sv = model.support_vectors[free]
    labels = np.where(model.dual_coefs[free] > 0, 1, 0)
    np.testing.assert_allclose(np.abs(model.decision_function(sv)), 1.0, atol=1e-5)
    np.testing.assert_array_equal(model.predict(sv), labels)


def test_non_convergence_is_flagged(caplog):
    X, y = random_problem(5, 30)
    model = svm_train(X, y, C=10.0, gamma=2.0, tol=1e-9, max_passes=0)
    assert not model.converged
    assert "without meeting" in caplog.text


def test_single_class_rejected():
    with pytest.raises(ValueError):
        svm_train(np.zeros((3, 2)), [1, 1, 1])


def test_bad_labels_rejected():
    with pytest.raises(ValueError):
        svm_train(np.zeros((3, 2)), [0, 1, 2])


def test_predict_tie_goes_to_cancer():
    model = RbfSvmModel(np.zeros((1, 1)), np.array([0.0]), 0.0, 1.0, 1.0, np.zeros(1), np.ones(1))
    assert svm_predict(model, np.array([0.3])) == 1


def test_predict_dimension_mismatch():
    X, y = random_problem(1, 10)
    model = svm_train(X, y)
    with pytest.raises(ValueError):
        svm_predict(model, np.zeros(3))


def test_scale_gamma_and_standardisation():
    X, y = random_problem(2, 30)
    model = svm_train(X * 1000 + 5, y, tol=1e-9)
    Z = (X * 1000 + 5 - model.mean) / model.scale
    assert model.gamma == pytest.approx(1.0 / (2 * Z.var(axis=0).mean()))
    ref = svm_train(X, y, tol=1e-9)
    np.testing.assert_allclose(model.decision_function(X * 1000 + 5), ref.decision_function(X), atol=1e-6)
