"""Linearized gradient-flow dynamics on the training set, solved per eigenmode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import GramEigen, eigendecompose


@dataclass(frozen=True, eq=False)
class DynamicsTrace:
    times: np.ndarray
    f_t: np.ndarray      # (len(times), n)
    loss_t: np.ndarray   # ||f_t - Y||^2
    eta: float
    eigen: GramEigen
    Y: np.ndarray


def _check(eigen, Y, eta, times):
    Y = np.asarray(Y, dtype=float).ravel()
    if Y.shape[0] != eigen.n:
        raise ValueError(f"Y has {Y.shape[0]} entries, Gram is {eigen.n}x{eigen.n}")
    if not eta > 0:
        raise ValueError("eta must be positive")
    times = np.asarray(times, dtype=float).ravel()
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    return Y, times


def solve_linearized(eigen: GramEigen, Y, eta, times) -> DynamicsTrace:
    """f_t = sum_i (1 - exp(-eta lambda_i t)) (V_i . Y) V_i."""
    Y, times = _check(eigen, Y, eta, times)
    proj = eigen.project(Y)
    decay = np.exp(-eta * np.outer(times, eigen.eigenvalues))
    f_t = ((1.0 - decay) * proj) @ eigen.eigenvectors.T
    loss = np.sum((f_t - Y) ** 2, axis=1)
    return DynamicsTrace(times, f_t, loss, float(eta), eigen, Y)


def spectral_loss_curve(eigen: GramEigen, Y, eta, times):
    """Loss sum_i exp(-2 eta lambda_i t) (V_i . Y)^2 and its per-mode terms.

    Returns a list of ``(t, loss, modes)`` tuples, ``modes`` ordered like the
    (descending) eigenvalues.
    """
    Y, times = _check(eigen, Y, eta, times)
    proj2 = eigen.project(Y) ** 2
    modes = np.exp(-2.0 * eta * np.outer(times, eigen.eigenvalues)) * proj2
    return [(float(t), float(m.sum()), m) for t, m in zip(times, modes)]


def halving_times(eigen: GramEigen, eta):
    """Time for each mode's residual to halve, ln 2 / (eta lambda_i); inf for zero modes."""
    lam = eigen.eigenvalues
    with np.errstate(divide="ignore"):
        return np.where(lam > 0, np.log(2.0) / (eta * lam), np.inf)


def condition_report(eigen: GramEigen) -> dict:
    """Extreme eigenvalues, kappa = lambda_min / lambda_max and the step-size bound 2/(lambda_min + lambda_max)."""
    if eigen.n == 0:
        raise ValueError("empty eigendecomposition")
    lmax, lmin = eigen.lambda_max, eigen.lambda_min
    if lmax == 0:
        raise ValueError("lambda_max = 0: condition number undefined")
    return {"lambda_min": lmin, "lambda_max": lmax, "kappa": lmin / lmax,
            "eta_max": 2.0 / (lmin + lmax)}


def discrete_gd(K, Y, eta, steps):
    """Linearized gradient descent with unit time step: f <- f - eta K (f - Y).

    Returns predictions at steps 0..steps, computed per eigenmode as
    (1 - (1 - eta lambda)^t) (V . Y) V.
    """
    eigen = K if isinstance(K, GramEigen) else eigendecompose(K)
    Y = np.asarray(Y, dtype=float)
    t = np.arange(steps + 1)
    factor = (1.0 - eta * eigen.eigenvalues)[None, :] ** t[:, None]
    return ((1.0 - factor) * eigen.project(Y)) @ eigen.eigenvectors.T


def trace_table(trace: DynamicsTrace):
    """Columns for CSV export: t, loss, mode_1 .. mode_n."""
    curve = spectral_loss_curve(trace.eigen, trace.Y, trace.eta, trace.times)
    cols = {"t": trace.times, "loss": np.array([c[1] for c in curve])}
    modes = np.array([c[2] for c in curve]).reshape(len(curve), -1)
    for i in range(modes.shape[1]):
        cols[f"mode_{i + 1}"] = modes[:, i]
    return cols
