"""RBF-kernel soft-margin SVM trained by sequential minimal optimisation.

The solver works on the dual

    min_a  1/2 a^T Q a - e^T a    s.t.  y^T a = 0,  0 <= a_i <= C,

with ``Q_ij = y_i y_j K(x_i, x_j)`` and picks the maximal violating pair at
every step. Labels are {0, 1} externally and {-1, +1} internally.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

TAU = 1e-12


def rbf_kernel(x1, x2, gamma: float) -> float:
    """``exp(-gamma * ||x1 - x2||^2)``."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x1.shape} vs {x2.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return float(np.exp(-gamma * np.sum((x1 - x2) ** 2)))


def rbf_kernel_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class RbfSvmModel:
    support_vectors: np.ndarray
    dual_coefs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    mean: np.ndarray
    scale: np.ndarray
    converged: bool = True
    n_iter: int = 0
    objective_history: list = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    def _standardize(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return (X - self.mean) / self.scale

    def decision_function(self, X) -> np.ndarray:
        Z = self._standardize(X)
        return rbf_kernel_matrix(Z, self.support_vectors, self.gamma) @ self.dual_coefs + self.bias

    def predict(self, X) -> np.ndarray:
        """Labels in {0, 1}; a decision value of exactly 0 maps to 1."""
        return (self.decision_function(X) >= 0).astype(np.int64)


def _to_signed(y) -> np.ndarray:
    y = np.asarray(y)
    classes = set(np.unique(y).tolist())
    if not classes <= {0, 1}:
        raise ValueError(f"labels must be 0/1, got {sorted(classes)}")
    if len(classes) < 2:
        raise ValueError("svm_train needs both classes present")
    return np.where(y == 1, 1.0, -1.0)


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int = 100_000):
    """Dual solution for a precomputed kernel matrix and labels in {-1, +1}.

    Returns ``(alpha, bias, converged, n_iter, objective_history)``; the
    history holds the dual objective ``e^T a - 1/2 a^T Q a`` after every
    update.
    """
    n = len(y)
    Q = (y[:, None] * y[None, :]) * K
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q a - e
    history = [0.0]
    objective = 0.0
    converged = False
    it = 0
    while it < max_iter:
        vals = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(vals[up])])
        j = int(np.flatnonzero(low)[np.argmin(vals[low])])
        if vals[i] - vals[j] < tol:
            converged = True
            break
        it += 1

        a = K[i, i] + K[j, j] - 2.0 * K[i, j]
        a = a if a > 0 else TAU
        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / a
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            else:
                if ai < 0:
                    ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            else:
                if aj > C:
                    aj, ai = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / a
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            else:
                if aj < 0:
                    aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            else:
                if ai < 0:
                    ai, aj = 0.0, total

        dai, daj = ai - ai_old, aj - aj_old
        alpha[i], alpha[j] = ai, aj
        # objective change from the two-coordinate move, exact for a quadratic
        objective -= grad[i] * dai + grad[j] * daj + 0.5 * (
            Q[i, i] * dai * dai + Q[j, j] * daj * daj + 2.0 * Q[i, j] * dai * daj
        )
        grad += Q[:, i] * dai + Q[:, j] * daj
        history.append(objective)

    bias = _bias_from_gradient(alpha, grad, y, C)
    return alpha, bias, converged, it, history


def _bias_from_gradient(alpha, grad, y, C) -> float:
    vals = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(vals[free].mean())
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    hi = vals[up].max() if up.any() else vals[low].min()
    lo = vals[low].min() if low.any() else vals[up].max()
    return float((hi + lo) / 2.0)


def svm_train(
    X,
    y,
    C: float = 1.0,
    gamma: float | str = "scale",
    tol: float = 1e-3,
    max_passes: int = 200,
    standardize: bool = True,
) -> RbfSvmModel:
    """Fit an RBF SVM on features ``X[n, d]`` with labels in {0, 1}.

    ``gamma="scale"`` uses ``1 / (d * mean per-coordinate variance)`` of the
    (standardised) training features. The iteration budget is
    ``max_passes * n`` pair updates; exhausting it returns the current
    iterate with ``converged=False``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    ys = _to_signed(y)
    if X.shape[0] != ys.shape[0]:
        raise ValueError("X and y differ in length")
    if C <= 0:
        raise ValueError("C must be positive")
    n, d = X.shape
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(d), np.ones(d)
    Z = (X - mean) / scale
    if gamma == "scale":
        var = Z.var(axis=0).mean()
        gamma = 1.0 / (d * var) if var > 0 else 1.0
    gamma = float(gamma)
    if gamma <= 0:
        raise ValueError("gamma must be positive")

    K = rbf_kernel_matrix(Z, Z, gamma)
    alpha, bias, converged, n_iter, history = smo_solve(K, ys, C, tol, max_passes * max(n, 1))
    if not converged:
        log.warning("SMO stopped after %d updates without meeting tol=%g", n_iter, tol)
    sv = alpha > 0
    return RbfSvmModel(
        support_vectors=Z[sv].copy(),
        dual_coefs=(alpha * ys)[sv],
        bias=bias,
        gamma=gamma,
        C=float(C),
        mean=mean,
        scale=scale,
        converged=converged,
        n_iter=n_iter,
        objective_history=history,
    )


def svm_predict(model: RbfSvmModel, x) -> np.ndarray | int:
    """Predicted label(s) in {0, 1}; ties (decision 0) go to class 1."""
    x = np.asarray(x, dtype=np.float64)
    labels = model.predict(x)
    return int(labels[0]) if x.ndim == 1 else labels
