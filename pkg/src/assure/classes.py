"""Parametric decision-rule families.

Every family maps a unit's context ``(sigma, cost, covariates)`` and a
parameter ``beta`` to a threshold ``delta``; the unit is selected when
``y > delta`` (Gaussian) or ``y >= ceil(delta)`` (Poisson). Families are
vectorized over units and, except for the finite family, expose the
analytic first and second derivatives of ``delta`` in ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import ClassVar, Sequence

import numpy as np

from .errors import ConfigError, DomainError, PreconditionError, UnsupportedOperationError

DEFAULT_M = 10.0
VARIANCE_BOX = (1e-4, 1e4)


@dataclass(frozen=True)
class Context:
    """Context of a single unit. ``index`` is needed only by the ensemble family."""

    sigma: float
    cost: float
    covariates: tuple[float, ...] = ()
    index: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise PreconditionError("sigma must be positive and finite")


@dataclass(frozen=True)
class Contexts:
    """Column-wise contexts for a batch of units."""

    sigma: np.ndarray
    cost: np.ndarray
    X: np.ndarray
    index: np.ndarray | None = None

    @classmethod
    def of(cls, source) -> "Contexts":
        if isinstance(source, Contexts):
            return source
        if isinstance(source, Context):
            idx = None if source.index is None else np.array([source.index])
            return cls(
                np.array([source.sigma], dtype=float),
                np.array([source.cost], dtype=float),
                np.array([source.covariates], dtype=float).reshape(1, len(source.covariates)),
                idx,
            )
        # a Dataset
        return cls(source.sigma, source.cost, source.X, np.arange(source.n))

    @property
    def n(self) -> int:
        return self.sigma.shape[0]


def _box(box, dim):
    arr = np.array(box, dtype=float).reshape(dim, 2)
    if np.any(arr[:, 0] > arr[:, 1]):
        raise ConfigError("box lower bound exceeds upper bound")
    return tuple(map(tuple, arr))


class DecisionFamily:
    """Base class. Subclasses are frozen dataclasses with a ``box`` field."""

    kind: ClassVar[str]
    differentiable: ClassVar[bool] = True

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.box])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.box])

    @property
    def log_coords(self) -> tuple[bool, ...]:
        """Coordinates that are searched and gridded on a log scale."""
        return (False,) * self.dim

    def check(self, beta, in_box: bool = True) -> np.ndarray:
        b = np.atleast_1d(np.asarray(beta, dtype=float))
        if b.shape != (self.dim,):
            raise PreconditionError(f"{self.kind} expects beta of length {self.dim}, got {b.shape[0]}")
        if not np.all(np.isfinite(b)):
            raise PreconditionError("beta must be finite")
        self._check_domain(b)
        if in_box and (np.any(b < self.lower) or np.any(b > self.upper)):
            raise PreconditionError(f"beta {b.tolist()} lies outside the box {list(self.box)}")
        return b

    def _check_domain(self, beta):
        pass

    def thresholds(self, ctx, beta, check: bool = True) -> np.ndarray:
        c = Contexts.of(ctx)
        b = self.check(beta) if check else np.asarray(beta, dtype=float)
        return self._delta(c, b)

    def jacobian(self, ctx, beta) -> np.ndarray:
        """``d delta_i / d beta``, shape ``(n, d)``."""
        return self._jac(Contexts.of(ctx), self.check(beta))

    def hessian(self, ctx, beta) -> np.ndarray:
        """``d^2 delta_i / d beta^2``, shape ``(n, d, d)``."""
        return self._hess(Contexts.of(ctx), self.check(beta))

    def _delta(self, c, b):
        raise NotImplementedError

    def _jac(self, c, b):
        raise UnsupportedOperationError(f"{self.kind} family is not differentiable")

    def _hess(self, c, b):
        raise UnsupportedOperationError(f"{self.kind} family is not differentiable")

    def to_config(self) -> dict:
        return {"kind": self.kind, "box": [list(b) for b in self.box]}


@dataclass(frozen=True)
class ThresholdFamily(DecisionFamily):
    """``delta = k + beta``."""

    box: tuple = ((-DEFAULT_M, DEFAULT_M),)
    kind: ClassVar[str] = "threshold"

    def __post_init__(self):
        object.__setattr__(self, "box", _box(self.box, 1))

    def _delta(self, c, b):
        return c.cost + b[0]

    def _jac(self, c, b):
        return np.ones((c.n, 1))

    def _hess(self, c, b):
        return np.zeros((c.n, 1, 1))


@dataclass(frozen=True)
class TStatFamily(DecisionFamily):
    """``delta = k + beta * sigma``; nests one-sided p-value rules."""

    box: tuple = ((-DEFAULT_M, DEFAULT_M),)
    kind: ClassVar[str] = "tstat"

    def __post_init__(self):
        object.__setattr__(self, "box", _box(self.box, 1))

    def _delta(self, c, b):
        return c.cost + b[0] * c.sigma

    def _jac(self, c, b):
        return c.sigma[:, None].copy()

    def _hess(self, c, b):
        return np.zeros((c.n, 1, 1))


@dataclass(frozen=True)
class LinearShrinkFamily(DecisionFamily):
    """Posterior-mean thresholds under a N(mu0, tau^2) prior; ``beta = (mu0, tau)``."""

    box: tuple = ((-DEFAULT_M, DEFAULT_M), (math.sqrt(VARIANCE_BOX[0]), math.sqrt(VARIANCE_BOX[1])))
    kind: ClassVar[str] = "linear_shrink"

    def __post_init__(self):
        object.__setattr__(self, "box", _box(self.box, 2))

    @property
    def log_coords(self):
        return (False, True)

    def _check_domain(self, b):
        if b[1] <= 0:
            raise DomainError(f"tau must be positive, got {b[1]}")

    def _delta(self, c, b):
        mu0, tau = b
        return c.cost + c.sigma**2 / tau**2 * (c.cost - mu0)

    def _jac(self, c, b):
        mu0, tau = b
        s2 = c.sigma**2
        return np.stack([-s2 / tau**2, -2.0 * s2 * (c.cost - mu0) / tau**3], axis=1)

    def _hess(self, c, b):
        mu0, tau = b
        s2 = c.sigma**2
        H = np.zeros((c.n, 2, 2))
        H[:, 0, 1] = H[:, 1, 0] = 2.0 * s2 / tau**3
        H[:, 1, 1] = 6.0 * s2 * (c.cost - mu0) / tau**4
        return H


@dataclass(frozen=True)
class FayHerriotFamily(DecisionFamily):
    """``delta = k + (sigma^2 / A)(k - x' b)``; ``beta = (A, b)``.

    With ``intercept=True`` the design is ``[1, x1..xp]``, otherwise the
    covariates as given.
    """

    p: int = 1
    intercept: bool = True
    box: tuple | None = None
    kind: ClassVar[str] = "fay_herriot"

    def __post_init__(self):
        q = self.p + int(self.intercept)
        if q < 1:
            raise ConfigError("fay_herriot needs at least one design column")
        box = self.box
        if box is None:
            box = (VARIANCE_BOX,) + ((-DEFAULT_M, DEFAULT_M),) * q
        object.__setattr__(self, "box", _box(box, 1 + q))

    @property
    def log_coords(self):
        return (True,) + (False,) * (self.dim - 1)

    def design(self, X) -> np.ndarray:
        if X.shape[1] != self.p:
            raise PreconditionError(f"fay_herriot family built for p={self.p}, data has p={X.shape[1]}")
        return np.hstack([np.ones((X.shape[0], 1)), X]) if self.intercept else X

    def _check_domain(self, b):
        if b[0] <= 0:
            raise DomainError(f"A must be positive, got {b[0]}")

    def _delta(self, c, b):
        A, coef = b[0], b[1:]
        return c.cost + c.sigma**2 / A * (c.cost - self.design(c.X) @ coef)

    def _jac(self, c, b):
        A, coef = b[0], b[1:]
        Z = self.design(c.X)
        s2 = c.sigma**2
        gap = c.cost - Z @ coef
        return np.hstack([(-s2 * gap / A**2)[:, None], -(s2 / A)[:, None] * Z])

    def _hess(self, c, b):
        A, coef = b[0], b[1:]
        Z = self.design(c.X)
        s2 = c.sigma**2
        H = np.zeros((c.n, self.dim, self.dim))
        H[:, 0, 0] = 2.0 * s2 * (c.cost - Z @ coef) / A**3
        cross = (s2 / A**2)[:, None] * Z
        H[:, 0, 1:] = cross
        H[:, 1:, 0] = cross
        return H

    def to_config(self):
        return {**super().to_config(), "p": self.p, "intercept": self.intercept}


@dataclass(frozen=True)
class CloseGaussFamily(DecisionFamily):
    """Prior mean ``a1 + a2 sigma`` and prior variance ``exp(b1 + b2 log sigma)``."""

    box: tuple = ((-DEFAULT_M, DEFAULT_M),) * 4
    kind: ClassVar[str] = "close_gauss"

    def __post_init__(self):
        object.__setattr__(self, "box", _box(self.box, 4))

    @staticmethod
    def _parts(c, b):
        a1, a2, b1, b2 = b
        logs = np.log(c.sigma)
        ratio = c.sigma**2 * np.exp(-(b1 + b2 * logs))  # sigma^2 / s0^2
        gap = c.cost - (a1 + a2 * c.sigma)
        return logs, ratio, gap

    def _delta(self, c, b):
        _, ratio, gap = self._parts(c, b)
        return c.cost + ratio * gap

    def _jac(self, c, b):
        logs, r, gap = self._parts(c, b)
        return np.stack([-r, -r * c.sigma, -r * gap, -r * logs * gap], axis=1)

    def _hess(self, c, b):
        logs, r, gap = self._parts(c, b)
        s = c.sigma
        H = np.zeros((c.n, 4, 4))
        H[:, 0, 2] = H[:, 2, 0] = r
        H[:, 0, 3] = H[:, 3, 0] = r * logs
        H[:, 1, 2] = H[:, 2, 1] = r * s
        H[:, 1, 3] = H[:, 3, 1] = r * s * logs
        H[:, 2, 2] = r * gap
        H[:, 2, 3] = H[:, 3, 2] = r * logs * gap
        H[:, 3, 3] = r * logs**2 * gap
        return H


@dataclass(frozen=True, eq=False)
class EnsembleFamily(DecisionFamily):
    """Select when ``alpha * m(Y, sigma) + (1 - alpha) * x'b >= k``.

    ``m`` is a Gaussian posterior mean with prior ``N(m0, s0^2)``. The
    per-unit ``m0``, ``s0sq`` and ``xb`` arrays are leave-one-out fits (see
    :func:`assure.baselines.fit_ensemble`), so the family is tied to the
    dataset it was fitted on through the unit index.
    """

    m0: np.ndarray = field(repr=False, default=None)
    s0sq: np.ndarray = field(repr=False, default=None)
    xb: np.ndarray = field(repr=False, default=None)
    box: tuple = ((0.01, 1.0),)
    kind: ClassVar[str] = "ensemble"

    def __post_init__(self):
        box = _box(self.box, 1)
        if box[0][0] <= 0 or box[0][1] > 1:
            raise ConfigError("ensemble alpha box must lie inside (0, 1]")
        object.__setattr__(self, "box", box)
        for name in ("m0", "s0sq", "xb"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.s0sq <= 0):
            raise DomainError("ensemble prior variances must be positive")

    def _check_domain(self, b):
        if not (0 < b[0] <= 1):
            raise DomainError(f"alpha must lie in (0, 1], got {b[0]}")

    def _parts(self, c):
        if c.index is None:
            raise PreconditionError("ensemble thresholds need the unit index in the context")
        idx = c.index
        if idx.size and idx.max() >= self.m0.shape[0]:
            raise PreconditionError("unit index beyond the dataset the ensemble was fitted on")
        r = c.sigma**2 / self.s0sq[idx]
        return r, self.m0[idx], self.xb[idx]

    def _delta(self, c, b):
        (alpha,) = b
        r, m0, xb = self._parts(c)
        return (c.cost - (1.0 - alpha) * xb) / alpha * (1.0 + r) - m0 * r

    def _jac(self, c, b):
        (alpha,) = b
        r, _, xb = self._parts(c)
        return (-(1.0 + r) * (c.cost - xb) / alpha**2)[:, None]

    def _hess(self, c, b):
        (alpha,) = b
        r, _, xb = self._parts(c)
        return (2.0 * (1.0 + r) * (c.cost - xb) / alpha**3)[:, None, None]

    def to_config(self):
        return {**super().to_config(), "fitted": True}


@dataclass(frozen=True)
class FiniteFamily(DecisionFamily):
    """A finite list of threshold rules, each a ``(family, beta)`` pair.

    ``beta`` is the integer index of the member.
    """

    members: tuple = ()
    kind: ClassVar[str] = "finite"
    differentiable: ClassVar[bool] = False

    def __post_init__(self):
        if not self.members:
            raise ConfigError("finite family needs at least one member")
        members = tuple((fam, tuple(np.atleast_1d(np.asarray(b, dtype=float)).tolist())) for fam, b in self.members)
        for fam, b in members:
            fam.check(b)
        object.__setattr__(self, "members", members)

    @property
    def box(self):
        return ((0.0, float(len(self.members) - 1)),)

    def _check_domain(self, b):
        if b[0] != math.floor(b[0]):
            raise DomainError(f"finite family index must be an integer, got {b[0]}")

    def _delta(self, c, b):
        fam, beta = self.members[int(b[0])]
        return fam.thresholds(c, beta)

    def to_config(self):
        return {
            "kind": self.kind,
            "members": [{"family": fam.to_config(), "beta": list(b)} for fam, b in self.members],
        }


FAMILIES = {
    cls.kind: cls
    for cls in (ThresholdFamily, TStatFamily, LinearShrinkFamily, FayHerriotFamily, CloseGaussFamily, EnsembleFamily, FiniteFamily)
}


def family_from_config(cfg: dict, data=None) -> DecisionFamily:
    """Build a family from its JSON config block.

    ``{"kind": ..., "box": [[lo, hi], ...], <kind-specific fields>}``. The
    ensemble family is fitted on ``data``; fay_herriot infers ``p`` from
    ``data`` when the config does not give it.
    """
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigError("family config must be an object with a 'kind' field")
    kind = cfg["kind"]
    if kind not in FAMILIES:
        raise ConfigError(f"unknown family kind {kind!r}; expected one of {sorted(FAMILIES)}")
    box = cfg.get("box")
    kw = {} if box is None else {"box": tuple(map(tuple, box))}
    if kind == "fay_herriot":
        p = cfg.get("p", None if data is None else data.covariate_dim)
        if p is None:
            raise ConfigError("fay_herriot config needs 'p' or a dataset")
        return FayHerriotFamily(p=int(p), intercept=bool(cfg.get("intercept", True)), **kw)
    if kind == "ensemble":
        if data is None:
            raise ConfigError("the ensemble family is fitted on a dataset; none given")
        from .baselines import fit_ensemble

        return fit_ensemble(data, **kw)
    if kind == "finite":
        members = cfg.get("members") or []
        return FiniteFamily(tuple((family_from_config(m["family"], data), m["beta"]) for m in members))
    return FAMILIES[kind](**kw)


def threshold(family: DecisionFamily, z: Context, beta: Sequence[float]) -> float:
    return float(family.thresholds(z, beta)[0])


def decide(family: DecisionFamily, z: Context, beta: Sequence[float], y: float) -> int:
    """Selection decision ``1{y > delta}``; ties are not selected."""
    return int(y > threshold(family, z, beta))


def integer_threshold(family: DecisionFamily, z: Context, beta: Sequence[float]) -> int:
    """Integer cutoff for count data: ``max(ceil(delta), 0)``; select when ``y >= cutoff``."""
    return int(integer_thresholds(family.thresholds(z, beta))[0])


def integer_thresholds(delta: np.ndarray) -> np.ndarray:
    return np.maximum(np.ceil(delta), 0.0)


def decisions(family: DecisionFamily, data, beta) -> np.ndarray:
    """0/1 decisions for every unit of ``data``, honouring its likelihood mode."""
    delta = family.thresholds(data, beta)
    if data.mode == "poisson":
        return (data.y >= integer_thresholds(delta)).astype(int)
    return (data.y > delta).astype(int)
