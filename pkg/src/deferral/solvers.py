"""Optimizers used by the calibrators: damped Newton for logistic models and
golden-section search for the one-dimensional temperature fit."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_MAX_HALVINGS = 60


@dataclass(frozen=True)
class FitDiagnostics:
    iterations: int
    objective: float
    gradient_norm: float
    converged: bool
    exit_reason: str
    tolerance: float

    def to_dict(self) -> dict:
        return asdict(self)


def log_loss_terms(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example logistic loss -[y log sigmoid(z) + (1-y) log(1-sigmoid(z))]."""
    return np.logaddexp(0.0, np.where(y > 0.5, -z, z))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_objective(theta, X, y, w, l2) -> float:
    z = X @ theta
    return float(np.dot(w, log_loss_terms(z, y)) / y.size + 0.5 * np.dot(l2, theta * theta))


def newton_logistic(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    l2: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> tuple[np.ndarray, FitDiagnostics]:
    """Minimize mean weighted logistic loss plus a diagonal L2 penalty.

    objective(theta) = sum_i w_i * loss_i(X_i . theta) / N + 0.5 * sum_j l2_j theta_j^2

    Each Newton step is halved until the objective decreases. Separable data
    make the unpenalized optimum infinite; the iteration cap then stops the fit
    with finite parameters and converged=False.
    """
    n, d = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    l2 = np.zeros(d) if l2 is None else np.asarray(l2, dtype=float)
    theta = np.zeros(d)
    obj = logistic_objective(theta, X, y, w, l2)

    it = 0
    reason = "max iterations"
    while True:
        p = sigmoid(X @ theta)
        grad = X.T @ (w * (p - y)) / n + l2 * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            reason = "gradient tolerance"
            break
        if it >= max_iter:
            break
        hess = (X.T * (w * p * (1.0 - p))) @ X / n + np.diag(l2)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            step = grad

        alpha = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = theta - alpha * step
            cand_obj = logistic_objective(cand, X, y, w, l2)
            if cand_obj < obj:
                break
            alpha *= 0.5
        else:
            reason = "no decrease along Newton step"
            break
        theta, obj = cand, cand_obj
        it += 1

    return theta, FitDiagnostics(it, obj, gnorm, gnorm <= tol, reason, tol)


def golden_section(
    f: Callable[[float], float], lo: float, hi: float, xtol: float
) -> tuple[float, int]:
    """Minimize a unimodal function on [lo, hi] until the bracket is <= xtol wide."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
        it += 1
    return (a + b) / 2.0, it
