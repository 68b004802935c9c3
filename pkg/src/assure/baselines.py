"""Plug-in empirical Bayes baselines.

Every plug-in returns a parameter point of the matching decision family, so
the plug-in decision is ``decisions(family, data, point)``. Hyperparameters
are fitted by the method of moments with variance floors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .classes import (
    CloseGaussFamily,
    DecisionFamily,
    EnsembleFamily,
    FayHerriotFamily,
    LinearShrinkFamily,
    TStatFamily,
    ThresholdFamily,
)
from .errors import PreconditionError
from .model import Dataset

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class PluginFit:
    """A fitted parameter point plus diagnostics. ``beta`` is in family coordinates."""

    beta: np.ndarray
    method: str = "mom"
    flags: tuple[str, ...] = ()
    info: dict = field(default_factory=dict)

    def to_config(self, family: DecisionFamily) -> dict:
        return {**family.to_config(), "beta": [float(v) for v in self.beta], "method": self.method, "flags": list(self.flags)}


def _linear_shrink_moments(y, sigma):
    mu0 = float(np.mean(y))
    tau2 = float(np.var(y, ddof=1) - np.mean(sigma**2))
    return mu0, max(tau2, VARIANCE_FLOOR)


def linear_shrink_plugin(data: Dataset) -> PluginFit:
    """Grand mean and moment variance: ``tau^2 = max(s_y^2 - mean(sigma^2), floor)``.

    Returns ``beta = (mu0, tau)``.
    """
    mu0, tau2 = _linear_shrink_moments(data.y, data.sigma)
    flags = ("floor",) if tau2 == VARIANCE_FLOOR else ()
    return PluginFit(np.array([mu0, np.sqrt(tau2)]), flags=flags)


def _collinear_columns(Z):
    bad = []
    keep = np.zeros((Z.shape[0], 0))
    for j in range(Z.shape[1]):
        trial = np.hstack([keep, Z[:, j : j + 1]])
        if np.linalg.matrix_rank(trial) < trial.shape[1]:
            bad.append(j)
        else:
            keep = trial
    return bad


def _wls(Z, y, w):
    Zw = Z * w[:, None]
    return np.linalg.solve(Z.T @ Zw, Zw.T @ y)


def fay_herriot_plugin(data: Dataset, family: FayHerriotFamily | None = None, tol: float = 1e-8, max_iter: int = 100) -> PluginFit:
    """Alternate weighted least squares for the regression and a moment update for ``A``.

    The weights are ``1 / (A + sigma^2)``; the update is
    ``A = max(sum w (n/(n-q) r^2 - sigma^2) / sum w, floor)`` where ``q`` is
    the number of design columns, which makes the intercept-only fit
    coincide with :func:`linear_shrink_plugin`.
    """
    family = family or FayHerriotFamily(p=data.covariate_dim)
    Z = family.design(data.X)
    n, q = Z.shape
    bad = _collinear_columns(Z)
    if bad:
        names = ["intercept" if (family.intercept and j == 0) else f"x{j + (0 if family.intercept else 1)}" for j in bad]
        raise PreconditionError(f"design matrix is rank deficient; collinear columns: {', '.join(names)}")
    if n <= q:
        raise PreconditionError("fay_herriot needs more units than design columns")
    s2 = data.sigma**2
    dof = n / (n - q)
    A = max(float(np.var(data.y, ddof=1) - np.mean(s2)), VARIANCE_FLOOR)
    converged = False
    for it in range(max_iter):
        w = 1.0 / (A + s2)
        coef = _wls(Z, data.y, w)
        r = data.y - Z @ coef
        A_new = max(float(np.sum(w * (dof * r**2 - s2)) / np.sum(w)), VARIANCE_FLOOR)
        if abs(A_new - A) <= tol * max(1.0, A):
            A = A_new
            converged = True
            break
        A = A_new
    w = 1.0 / (A + s2)
    coef = _wls(Z, data.y, w)
    flags = tuple(f for f, on in (("floor", A == VARIANCE_FLOOR), ("not-converged", not converged)) if on)
    return PluginFit(np.concatenate([[A], coef]), flags=flags, info={"iterations": it + 1})


def _fit_prior_variance(r2_excess, logs, w0=None, floor=VARIANCE_FLOOR, iters=50):
    """Fit ``E[r^2 - sigma^2] = exp(b1 + b2 log sigma)`` by weighted least squares.

    Gauss-Newton on the moment residuals, with weights ``w0`` (inverse
    variance of ``r^2``) held fixed. Returns ``(b1, b2, flag)``.
    """
    w0 = np.ones_like(r2_excess) if w0 is None else w0
    m = float(np.sum(w0 * r2_excess) / np.sum(w0))
    if m <= floor:
        return np.log(floor), 0.0, "floor"
    degenerate = np.ptp(logs) < 1e-12
    b = np.array([np.log(m), 0.0])
    G = np.stack([np.ones_like(logs), logs], axis=1)
    for _ in range(iters):
        s = np.exp(G @ b)
        J = G * s[:, None]
        res = r2_excess - s
        if degenerate:
            step = np.array([np.sum(w0 * J[:, 0] * res) / np.sum(w0 * J[:, 0] ** 2), 0.0])
        else:
            step = np.linalg.lstsq(J * np.sqrt(w0)[:, None], res * np.sqrt(w0), rcond=None)[0]
        # damp steps that would overshoot on the log scale
        step = np.clip(step, -2.0, 2.0)
        b = b + step
        if np.max(np.abs(step)) < 1e-10:
            break
    if np.any(np.exp(G @ b) < floor):
        b[0] = max(b[0], np.log(floor) - min(0.0, b[1] * logs.min(), b[1] * logs.max()))
        return b[0], b[1], "floor"
    return b[0], b[1], "degenerate-sigma" if degenerate else ""


def close_gauss_plugin(data: Dataset) -> PluginFit:
    """Moment fit of prior mean ``a1 + a2 sigma`` and prior variance ``exp(b1 + b2 log sigma)``.

    ``m0`` comes from least squares of ``y`` on ``[1, sigma]``. The variance
    model is fitted to the excess squared residuals ``r^2 - sigma^2`` by
    weighted least squares with a log link, weights ``1/(sigma^2 + s0^2)^2``.
    When all ``sigma`` are equal ``a2`` and ``b2`` are fixed to 0.
    """
    if data.n < 10:
        raise PreconditionError(f"close_gauss_plugin needs n >= 10, got {data.n}")
    s = data.sigma
    logs = np.log(s)
    flags = []
    if np.ptp(s) < 1e-12 * s.max():
        a = np.array([np.mean(data.y), 0.0])
        flags.append("degenerate-sigma")
    else:
        G = np.stack([np.ones_like(s), s], axis=1)
        a = np.linalg.lstsq(G, data.y, rcond=None)[0]
    r = data.y - (a[0] + a[1] * s)
    excess = r**2 - s**2
    b1, b2, flag = _fit_prior_variance(excess, logs)
    # one reweighting pass with the fitted variances
    w0 = 1.0 / (s**2 + np.exp(b1 + b2 * logs)) ** 2
    if flag != "floor":
        b1, b2, flag = _fit_prior_variance(excess, logs, w0)
    if flag and flag not in flags:
        flags.append(flag)
    return PluginFit(np.array([a[0], a[1], b1, b2]), flags=tuple(flags))


def empirical_success_rule(data: Dataset) -> np.ndarray:
    """Select exactly the units whose estimate exceeds their cost."""
    return (data.y > data.cost).astype(int)


def p_value_cutoff(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise PreconditionError(f"alpha must lie in (0, 1), got {alpha}")
    return float(special.ndtri(1.0 - alpha))


def p_value_rule(data: Dataset, alpha: float) -> np.ndarray:
    """Select when the one-sided p-value of ``H0: mu <= k`` is below ``alpha``."""
    z = p_value_cutoff(alpha)
    return (data.y > data.cost + z * data.sigma).astype(int)


def plugin_point(family: DecisionFamily, data: Dataset) -> PluginFit | None:
    """Plug-in fit for ``family`` clamped into its box, or None when the family has none."""
    if isinstance(family, LinearShrinkFamily):
        fit = linear_shrink_plugin(data)
    elif isinstance(family, FayHerriotFamily):
        fit = fay_herriot_plugin(data, family)
    elif isinstance(family, CloseGaussFamily):
        fit = close_gauss_plugin(data)
    elif isinstance(family, (ThresholdFamily, TStatFamily)):
        fit = PluginFit(np.zeros(1), method="success-rule")
    elif isinstance(family, EnsembleFamily):
        fit = PluginFit(np.ones(1), method="posterior-mean")
    else:
        return None
    clamped = np.clip(fit.beta, family.lower, family.upper)
    if not np.array_equal(clamped, fit.beta):
        log.debug("plug-in point %s clamped into the box", fit.beta)
        fit = PluginFit(clamped, fit.method, fit.flags + ("clamped",), fit.info)
    return fit


# ---------------------------------------------------------------- ensemble


def _loo_wls(Z, y, w):
    """Leave-one-out WLS predictions ``z_i' b^(-i)`` by rank-one downdating."""
    Zw = Z * w[:, None]
    M = Z.T @ Zw
    Minv = np.linalg.inv(M)
    coef = Minv @ (Zw.T @ y)
    fitted = Z @ coef
    lev = np.einsum("ij,jk,ik->i", Z, Minv, Z) * w
    return fitted - lev * (y - fitted) / (1.0 - lev), coef


def _loo_variance(excess, logs, b, w0):
    """Leave-one-out prior variances from the final Gauss-Newton normal equations."""
    G = np.stack([np.ones_like(logs), logs], axis=1)
    s = np.exp(G @ b)
    J = G * s[:, None]
    res = excess - s
    M = (J * w0[:, None]).T @ J
    Minv = np.linalg.pinv(M)
    g = J * (w0 * res)[:, None]
    # removing unit i: b^(-i) = b - (M - w_i j_i j_i')^{-1} w_i j_i res_i  (Sherman-Morrison)
    Mj = J @ Minv
    lev = np.einsum("ij,ij->i", Mj, J) * w0
    delta_b = -(g @ Minv) / (1.0 - lev)[:, None]
    b_loo = b[None, :] + delta_b
    return np.exp(b_loo[:, 0] + b_loo[:, 1] * logs)


def fit_ensemble(data: Dataset, box=((0.01, 1.0),)) -> EnsembleFamily:
    """Fit the leave-one-out components of the ensemble family.

    Prior mean and variance follow :func:`close_gauss_plugin`; the covariate
    model is WLS of ``y`` on ``[1, X]`` with weights ``1/(sigma^2 + s0^2)``.
    Each unit's components are refitted without that unit by rank-one
    downdating of the normal equations. The variance stage uses the
    full-sample mean residuals of the other units.
    """
    if data.covariate_dim < 1:
        raise PreconditionError("the ensemble family needs at least one covariate")
    s = data.sigma
    logs = np.log(s)
    G = np.stack([np.ones_like(s), s], axis=1)
    degenerate = np.ptp(s) < 1e-12 * s.max()
    if degenerate:
        G = G[:, :1]
    m0_loo, a = _loo_wls(G, data.y, np.ones(data.n))
    r = data.y - G @ a
    excess = r**2 - s**2
    b1, b2, flag = _fit_prior_variance(excess, logs)
    w0 = 1.0 / (s**2 + np.exp(b1 + b2 * logs)) ** 2
    if flag != "floor":
        b1, b2, flag = _fit_prior_variance(excess, logs, w0)
    if flag == "floor":
        s0sq_loo = np.full(data.n, np.exp(b1))
    else:
        s0sq_loo = _loo_variance(excess, logs, np.array([b1, b2]), w0)
    s0sq_loo = np.maximum(s0sq_loo, VARIANCE_FLOOR)

    Z = np.hstack([np.ones((data.n, 1)), data.X])
    w = 1.0 / (s**2 + np.exp(b1 + b2 * logs))
    xb_loo, _ = _loo_wls(Z, data.y, w)
    return EnsembleFamily(m0=m0_loo, s0sq=s0sq_loo, xb=xb_loo, box=box)
