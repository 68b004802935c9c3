"""Welfare estimators and simulation-only oracles.

All estimators depend on the decision rule only through the per-unit
thresholds, and reduce per-unit summands with numpy's pairwise summation in
unit order, so results do not depend on how callers parallelize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import special

from .classes import Contexts, DecisionFamily, integer_thresholds
from .errors import DomainError, PreconditionError, UnsupportedOperationError
from .model import Dataset, GroundTruth, auto_bandwidth
from .specfun import _si_scalar, _sinc_double_prime_scalar, _sinc_prime_scalar, _sinc_scalar

_INV_PI = 1.0 / math.pi
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

METHODS = ("assure", "cb", "poisson")


@dataclass(frozen=True)
class WelfareEstimate:
    value: float
    stderr: float
    n: int
    h: float  # bandwidth (assure), epsilon (cb), 0 for the exact Poisson estimator

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "n": self.n, "h": self.h}


# ---------------------------------------------------------------- kernels


@numba.vectorize(["float64(float64, float64, float64, float64, float64)"], cache=True)
def _assure_w(y, k, sigma, delta, h):
    u = (y - delta) / (sigma * h)
    return (y - k) * (0.5 + _si_scalar(u) * _INV_PI) - sigma / h * _sinc_scalar(u)


@numba.vectorize(["float64(float64, float64, float64, float64, float64)"], cache=True)
def _assure_psi_c(y, k, sigma, delta, h):
    # derivative of the summand in the threshold
    u = (y - delta) / (sigma * h)
    return -(y - k) / (h * sigma) * _sinc_scalar(u) + _sinc_prime_scalar(u) / (h * h)


@numba.vectorize(["float64(float64, float64, float64, float64, float64)"], cache=True)
def _assure_psi_cc(y, k, sigma, delta, h):
    u = (y - delta) / (sigma * h)
    return (y - k) / (h * h * sigma * sigma) * _sinc_prime_scalar(u) - _sinc_double_prime_scalar(u) / (sigma * h * h * h)


@numba.njit(cache=True)
def _poisson_sf_scalar(mu, c):
    # P(Y >= c) for Y ~ Poisson(mu) by direct pmf summation, outward from the
    # largest term so that neither direction starts in underflow
    if c <= 0:
        return 1.0
    if mu <= 0:
        return 0.0
    k0 = max(c, math.floor(mu))
    p0 = math.exp(k0 * math.log(mu) - mu - math.lgamma(k0 + 1.0))
    total = p0
    pmf, k = p0, k0
    while pmf > 1e-17 * total:
        pmf *= mu / (k + 1.0)
        k += 1.0
        total += pmf
    pmf, k = p0, k0
    while k > c and pmf > 1e-17 * total:
        pmf *= k / mu
        k -= 1.0
        total += pmf
    return total


@numba.vectorize(["float64(float64, float64)"], cache=True)
def _poisson_sf(mu, c):
    return _poisson_sf_scalar(mu, c)


def poisson_tail(mu, c):
    """``P(Y >= c)`` for ``Y ~ Poisson(mu)``, elementwise."""
    return _poisson_sf(np.asarray(mu, dtype=float), np.asarray(c, dtype=float))


# ---------------------------------------------------------------- helpers


def _reduce(w: np.ndarray, h: float) -> WelfareEstimate:
    n = w.shape[0]
    value = float(np.sum(w) / n)
    stderr = float(math.sqrt(np.sum((w - value) ** 2)) / n)
    return WelfareEstimate(value, stderr, n, float(h))


def _resolve_h(data: Dataset, h):
    if h is None:
        return auto_bandwidth(data.n).h
    if not h > 0:
        raise PreconditionError(f"bandwidth must be positive, got {h}")
    return float(h)


def default_eps(n: int) -> float:
    """Coupled-bootstrap noise scale ``n^(-1/5)``."""
    return float(n) ** -0.2


def _resolve_eps(data: Dataset, eps):
    if eps is None:
        return default_eps(data.n)
    if not eps > 0:
        raise PreconditionError(f"eps must be positive, got {eps}")
    return float(eps)


def _require_gaussian(data: Dataset, what: str):
    if data.mode != "gaussian":
        raise PreconditionError(f"{what} needs a gaussian-mode dataset")


# ---------------------------------------------------------------- ASSURE


def assure_summand(y, z, delta, h):
    """Sinc-kernel summand ``(y-k) Csinc(u) - (sigma/h) sinc(u)``, ``u = (y-delta)/(sigma h)``.

    ``z`` is anything with ``sigma`` and ``cost`` attributes (a
    :class:`~assure.classes.Context` or column-wise contexts).
    """
    if not h > 0:
        raise PreconditionError(f"bandwidth must be positive, got {h}")
    out = _assure_w(np.asarray(y, float), np.asarray(z.cost, float), np.asarray(z.sigma, float), np.asarray(delta, float), float(h))
    return float(out) if np.ndim(out) == 0 else out


def assure_summands(data: Dataset, family: DecisionFamily, beta, h=None) -> np.ndarray:
    _require_gaussian(data, "assure")
    h = _resolve_h(data, h)
    delta = family.thresholds(data, beta)
    return _assure_w(data.y, data.cost, data.sigma, delta, h)


def assure_estimate(data: Dataset, family: DecisionFamily, beta, h=None) -> WelfareEstimate:
    """Mean of the sinc-kernel summands; ``h`` defaults to ``1/sqrt(2 log n)``."""
    h = _resolve_h(data, h)
    return _reduce(assure_summands(data, family, beta, h), h)


def assure_derivative(data: Dataset, family: DecisionFamily, beta, order: int = 1, h=None) -> np.ndarray:
    """Gradient (``order=1``) or Hessian (``order=2``) of the estimate in ``beta``.

    Chains the threshold derivatives of the summand through the family's
    analytic ``d delta / d beta`` and ``d^2 delta / d beta^2``.
    """
    _require_gaussian(data, "assure_derivative")
    if not family.differentiable:
        raise UnsupportedOperationError(f"{family.kind} family has no derivative in beta")
    if order not in (1, 2):
        raise PreconditionError(f"order must be 1 or 2, got {order}")
    h = _resolve_h(data, h)
    delta = family.thresholds(data, beta)
    J = family.jacobian(data, beta)
    psi_c = _assure_psi_c(data.y, data.cost, data.sigma, delta, h)
    if order == 1:
        return psi_c @ J / data.n
    psi_cc = _assure_psi_cc(data.y, data.cost, data.sigma, delta, h)
    H = family.hessian(data, beta)
    out = (J.T * psi_cc) @ J + np.einsum("i,ijk->jk", psi_c, H)
    out = out / data.n
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------- coupled bootstrap


def cb_summand(y, z, delta, eps):
    """Gaussian-kernel summand ``(y-k) Phi(t) - (sigma/eps) phi(t)``, ``t = (y-delta)/(eps sigma)``."""
    if not eps > 0:
        raise PreconditionError(f"eps must be positive, got {eps}")
    y = np.asarray(y, float)
    sigma = np.asarray(z.sigma, float)
    t = (y - np.asarray(delta, float)) / (eps * sigma)
    out = (y - np.asarray(z.cost, float)) * special.ndtr(t) - sigma / eps * _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    return float(out) if np.ndim(out) == 0 else out


def cb_summands(data: Dataset, family: DecisionFamily, beta, eps=None) -> np.ndarray:
    _require_gaussian(data, "cb")
    eps = _resolve_eps(data, eps)
    return cb_summand(data.y, data, family.thresholds(data, beta), eps)


def cb_estimate(data: Dataset, family: DecisionFamily, beta, eps=None) -> WelfareEstimate:
    eps = _resolve_eps(data, eps)
    return _reduce(cb_summands(data, family, beta, eps), eps)


# ---------------------------------------------------------------- Poisson


def _check_counts(y):
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DomainError("Poisson estimator needs non-negative integer counts")


def poisson_summand(y, cost, cutoff):
    """``y 1{y >= c+1} - k 1{y >= c}`` for integer cutoffs ``c``."""
    y = np.asarray(y, float)
    _check_counts(y)
    c = np.asarray(cutoff, float)
    out = y * (y >= c + 1) - np.asarray(cost, float) * (y >= c)
    return float(out) if np.ndim(out) == 0 else out


def poisson_summands(data: Dataset, family: DecisionFamily, beta) -> np.ndarray:
    c = integer_thresholds(family.thresholds(data, beta))
    return poisson_summand(data.y, data.cost, c)


def poisson_assure(data: Dataset, family: DecisionFamily, beta) -> WelfareEstimate:
    """Exactly unbiased welfare estimate for Poisson counts."""
    return _reduce(poisson_summands(data, family, beta), 0.0)


# ---------------------------------------------------------------- dispatch


def summands(data: Dataset, family: DecisionFamily, beta, method: str = "assure", h=None, eps=None) -> np.ndarray:
    if method == "assure":
        return assure_summands(data, family, beta, h)
    if method == "cb":
        return cb_summands(data, family, beta, eps)
    if method == "poisson":
        return poisson_summands(data, family, beta)
    raise PreconditionError(f"unknown method {method!r}; expected one of {METHODS}")


def estimate(data: Dataset, family: DecisionFamily, beta, method: str = "assure", h=None, eps=None) -> WelfareEstimate:
    if method == "assure":
        return assure_estimate(data, family, beta, h)
    if method == "cb":
        return cb_estimate(data, family, beta, eps)
    if method == "poisson":
        return poisson_assure(data, family, beta)
    raise PreconditionError(f"unknown method {method!r}; expected one of {METHODS}")


def bandwidth_for(data: Dataset, method: str, h=None, eps=None) -> float:
    if method == "assure":
        return _resolve_h(data, h)
    if method == "cb":
        return _resolve_eps(data, eps)
    return 0.0


# ---------------------------------------------------------------- oracles


def oracle_welfare(data: Dataset, truth: GroundTruth, family: DecisionFamily, beta, t_df=None) -> float:
    """Expected welfare of the rule over the observation noise, given the true means.

    Gaussian mode uses ``Phi((mu - delta)/sigma)``; Poisson mode the exact
    tail ``P(Y >= ceil(delta))``. ``t_df`` switches the Gaussian noise to
    ``sigma * t_df`` (used for misspecified simulations).
    """
    mu = truth.check(data)
    delta = family.thresholds(data, beta)
    return _welfare_from_delta(data, mu, delta, t_df)


def _welfare_from_delta(data, mu, delta, t_df=None) -> float:
    if data.mode == "poisson":
        p = poisson_tail(mu, integer_thresholds(delta))
    elif t_df is None:
        p = special.ndtr((mu - delta) / data.sigma)
    else:
        p = special.stdtr(t_df, (mu - delta) / data.sigma)
    return float(np.sum((mu - data.cost) * p) / data.n)


def realized_utility(data: Dataset, truth: GroundTruth, family: DecisionFamily, beta) -> float:
    """Average payoff ``(mu - k)`` of the units the rule actually selects on the observed ``y``."""
    mu = truth.check(data)
    delta = family.thresholds(data, beta)
    return _utility_from_delta(data, mu, delta)


def _utility_from_delta(data, mu, delta) -> float:
    if data.mode == "poisson":
        sel = data.y >= integer_thresholds(delta)
    else:
        sel = data.y > delta
    return float(np.sum((mu - data.cost) * sel) / data.n)
