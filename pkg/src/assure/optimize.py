"""Maximizing estimated welfare over a family's parameter box.

``grid_argmax`` scans a tensor grid (dim <= 2), ``multistart_argmax`` runs
Nelder-Mead from a plug-in start plus scrambled Halton points, and
``optimize`` picks between them. Search happens in unit-cube coordinates,
log-scaled for variance-type coordinates. Every returned value is
recomputed through :func:`assure.estimators.estimate` at ``beta_hat``, so it
equals a direct estimator call exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sopt
from scipy.stats import qmc

from .classes import DecisionFamily, FiniteFamily
from .errors import PreconditionError, UnsupportedOperationError
from .estimators import WelfareEstimate, bandwidth_for, estimate, summands
from .model import Dataset

log = logging.getLogger(__name__)

DEFAULT_GRID = 201


@dataclass(frozen=True)
class OptimizationResult:
    beta_hat: np.ndarray
    value: float
    stderr: float
    evaluations: int
    method: str
    h: float
    trace: list | None = None
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out = {
            "beta_hat": [float(b) for b in self.beta_hat],
            "value": self.value,
            "stderr": self.stderr,
            "evaluations": self.evaluations,
            "method": self.method,
            "h": self.h,
            "flags": list(self.flags),
        }
        if self.trace is not None:
            out["trace"] = [{"beta": [float(b) for b in beta], "value": v} for beta, v in self.trace]
        return out


@dataclass(frozen=True)
class WelfareCurve:
    """Estimated welfare along one coordinate, the others held at ``fixed``."""

    betas: np.ndarray  # (G, d)
    estimates: list[WelfareEstimate]
    method: str
    coordinate: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.betas) != len(self.estimates):
            raise PreconditionError("betas and estimates must have equal lengths")
        if np.any(np.diff(self.betas[:, self.coordinate]) <= 0):
            raise PreconditionError("curve grid must be strictly increasing")

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates])

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([e.stderr for e in self.estimates])

    def write_csv(self, dest) -> None:
        d = self.betas.shape[1]
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow([f"beta_{j + 1}" for j in range(d)] + ["estimate", "stderr"])
        for beta, est in zip(self.betas, self.estimates):
            writer.writerow([f"{v:.17g}" for v in (*beta, est.value, est.stderr)])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "coordinate": self.coordinate,
            **self.meta,
            "betas": self.betas.tolist(),
            "estimates": [e.value for e in self.estimates],
            "stderrs": [e.stderr for e in self.estimates],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------- coordinates


def _tlog(x, logc):
    # log only where the coordinate is log-scaled
    return np.where(logc, np.log(np.where(logc, x, 1.0)), x)


def _to_unit(family: DecisionFamily, beta) -> np.ndarray:
    lo, hi, logc = family.lower, family.upper, np.array(family.log_coords)
    b = np.asarray(beta, float)
    lo_t = _tlog(lo, logc)
    hi_t = _tlog(hi, logc)
    b_t = _tlog(np.maximum(b, lo), logc)
    span = hi_t - lo_t
    return np.where(span > 0, (b_t - lo_t) / np.where(span > 0, span, 1.0), 0.0)


def _from_unit(family: DecisionFamily, u) -> np.ndarray:
    lo, hi, logc = family.lower, family.upper, np.array(family.log_coords)
    u = np.clip(np.asarray(u, float), 0.0, 1.0)
    lo_t = _tlog(lo, logc)
    hi_t = _tlog(hi, logc)
    b = np.where(logc, np.exp(lo_t + u * (hi_t - lo_t)), lo_t + u * (hi_t - lo_t))
    # pin the endpoints exactly so exp(log(.)) round-off cannot leave the box
    return np.clip(np.where(u == 0.0, lo, np.where(u == 1.0, hi, b)), lo, hi)


def coordinate_grid(family: DecisionFamily, j: int, grid_size: int) -> np.ndarray:
    """Increasing grid over coordinate ``j`` of the box (log-spaced for log coordinates)."""
    if isinstance(family, FiniteFamily):
        return np.arange(len(family.members), dtype=float)
    lo, hi = family.box[j]
    if grid_size == 1 or lo == hi:
        return np.array([lo])
    if family.log_coords[j]:
        g = np.exp(np.linspace(math.log(lo), math.log(hi), grid_size))
        g[0], g[-1] = lo, hi
        return g
    return np.linspace(lo, hi, grid_size)


def tensor_grid(family: DecisionFamily, grid_size: int) -> np.ndarray:
    """C-ordered tensor grid, so row order is lexicographic in ``beta``."""
    axes = [coordinate_grid(family, j, grid_size) for j in range(family.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------- evaluation


def batch_values(data: Dataset, family: DecisionFamily, betas: np.ndarray, method: str = "assure", h=None, eps=None) -> np.ndarray:
    """Estimated welfare at each row of ``betas``; each row reduced exactly like ``estimate``."""
    betas = np.atleast_2d(betas)
    out = np.empty(betas.shape[0])
    for i, beta in enumerate(betas):
        w = summands(data, family, beta, method, h, eps)
        out[i] = np.sum(w) / data.n
    return out


def first_argmax(values: np.ndarray) -> int:
    """Index of the first maximum; NaN entries never win."""
    v = np.where(np.isnan(values), -np.inf, values)
    return int(np.argmax(v))


def _result(data, family, beta, method, h, eps, evaluations, trace=None, flags=()):
    est = estimate(data, family, beta, method, h, eps)
    return OptimizationResult(np.asarray(beta, float), est.value, est.stderr, evaluations, method, est.h, trace, tuple(flags))


def grid_argmax(data: Dataset, family: DecisionFamily, method: str = "assure", grid_size: int = DEFAULT_GRID, h=None, eps=None, trace: bool = False) -> OptimizationResult:
    """Exhaustive tensor-grid maximizer; ties go to the lexicographically smallest ``beta``."""
    if family.dim > 2:
        raise UnsupportedOperationError(f"grid search supports dim <= 2, family has dim {family.dim}; use multistart_argmax")
    if grid_size < 2 and not isinstance(family, FiniteFamily):
        raise PreconditionError(f"grid_size must be at least 2, got {grid_size}")
    grid = tensor_grid(family, grid_size)
    values = batch_values(data, family, grid, method, h, eps)
    best = first_argmax(values)
    tr = [(g, float(v)) for g, v in zip(grid, values)] if trace else None
    return _result(data, family, grid[best], method, h, eps, len(grid), tr)


def _halton_starts(family: DecisionFamily, count: int, seed) -> np.ndarray:
    if count <= 0:
        return np.zeros((0, family.dim))
    sampler = qmc.Halton(d=family.dim, scramble=True, seed=np.random.default_rng(seed))
    return sampler.random(count)


def _nelder_mead(objective, u0, dim):
    simplex = np.vstack([u0] + [u0 + np.where(np.arange(dim) == j, np.where(u0[j] > 0.5, -0.05, 0.05), 0.0) for j in range(dim)])
    res = sopt.minimize(
        objective,
        u0,
        method="Nelder-Mead",
        bounds=[(0.0, 1.0)] * dim,
        options={"initial_simplex": simplex, "xatol": 1e-7, "fatol": 1e-12, "maxiter": 400 * dim, "maxfev": 600 * dim},
    )
    return np.clip(res.x, 0.0, 1.0), int(res.nfev)


def _better(cand, best):
    """Higher value wins; exact ties go to the lexicographically smaller beta."""
    if best is None or cand[0] > best[0]:
        return True
    return cand[0] == best[0] and tuple(cand[1]) < tuple(best[1])


def multistart_argmax(
    data: Dataset,
    family: DecisionFamily,
    method: str = "assure",
    starts: int = 8,
    seed=0,
    h=None,
    eps=None,
    start_points=None,
    use_plugin: bool = True,
    trace: bool = False,
) -> OptimizationResult:
    """Nelder-Mead from several starts; returns the best point found.

    The first start is the plug-in empirical Bayes fit when one exists
    (clamped into the box), or ``start_points`` when given; the remainder are
    scrambled Halton points seeded by ``seed``. The returned value is at
    least every start's value.
    """
    if isinstance(family, FiniteFamily):
        raise UnsupportedOperationError("the finite family has no continuous parameter; use grid_argmax")
    if starts < 1:
        raise PreconditionError(f"starts must be at least 1, got {starts}")
    firsts = [np.asarray(p, float) for p in (start_points or [])]
    if use_plugin and not firsts:
        from .baselines import plugin_point

        try:
            fit = plugin_point(family, data)
        except PreconditionError as exc:
            log.debug("no plug-in start: %s", exc)
            fit = None
        if fit is not None:
            firsts.append(fit.beta)
    u_starts = [_to_unit(family, b) for b in firsts[:starts]]
    u_starts += list(_halton_starts(family, starts - len(u_starts), seed))

    evaluations = 0
    tr = [] if trace else None

    def value_at(u):
        return float(np.sum(summands(data, family, _from_unit(family, u), method, h, eps)) / data.n)

    def objective(u):
        nonlocal evaluations
        evaluations += 1
        v = value_at(u)
        if tr is not None:
            tr.append((_from_unit(family, u), v))
        return -v

    best_start = None
    best = None
    for u0 in u_starts:
        b0 = _from_unit(family, u0)
        v0 = value_at(u0)
        evaluations += 1
        if _better((v0, b0), best_start):
            best_start = (v0, b0)
        u1, _ = _nelder_mead(objective, u0, family.dim)
        b1 = _from_unit(family, u1)
        v1 = value_at(u1)
        for cand in ((v0, b0), (v1, b1)):
            if _better(cand, best):
                best = cand
    flags = ("no-improvement",) if best[0] <= best_start[0] else ()
    if flags:
        log.warning("multistart did not improve on the best start")
    return _result(data, family, best[1], method, h, eps, evaluations, tr, flags)


def optimize(
    data: Dataset,
    family: DecisionFamily,
    method: str = "assure",
    grid_size: int | None = None,
    starts: int | None = None,
    seed=0,
    h=None,
    eps=None,
    refine: bool = False,
) -> OptimizationResult:
    """Default search: grid for dim <= 2 (optionally polished by Nelder-Mead), multistart otherwise."""
    if starts is None and (family.dim <= 2 or isinstance(family, FiniteFamily)):
        res = grid_argmax(data, family, method, grid_size or DEFAULT_GRID, h, eps)
        if not refine or isinstance(family, FiniteFamily):
            return res
        ref = multistart_argmax(data, family, method, 1, seed, h, eps, start_points=[res.beta_hat])
        return OptimizationResult(ref.beta_hat, ref.value, ref.stderr, res.evaluations + ref.evaluations, method, ref.h, None, ref.flags)
    return multistart_argmax(data, family, method, starts or 8, seed, h, eps)


def welfare_curve(
    data: Dataset,
    family: DecisionFamily,
    method: str = "assure",
    coordinate: int = 0,
    grid_size: int = DEFAULT_GRID,
    fixed=None,
    h=None,
    eps=None,
) -> WelfareCurve:
    """Vary one coordinate over its box interval with the others held at ``fixed``.

    ``fixed`` defaults to the plug-in fit, or the box midpoint when the
    family has no plug-in.
    """
    if not 0 <= coordinate < family.dim:
        raise PreconditionError(f"coordinate {coordinate} out of range for dim {family.dim}")
    if grid_size < 2 and not isinstance(family, FiniteFamily):
        raise PreconditionError(f"grid_size must be at least 2, got {grid_size}")
    if fixed is None:
        from .baselines import plugin_point

        fit = plugin_point(family, data) if family.dim > 1 else None
        fixed = fit.beta if fit is not None else _from_unit(family, np.full(family.dim, 0.5))
    fixed = family.check(fixed)
    axis = coordinate_grid(family, coordinate, grid_size)
    betas = np.repeat(fixed[None, :], len(axis), axis=0)
    betas[:, coordinate] = axis
    ests = [estimate(data, family, b, method, h, eps) for b in betas]
    meta = {"h": bandwidth_for(data, method, h, eps), "n": data.n, "family": family.kind}
    return WelfareCurve(betas, ests, method, coordinate, meta)


def implied_cost_sweep(data: Dataset, family: DecisionFamily, method: str = "assure", costs=(), **opt) -> list[tuple[float, OptimizationResult]]:
    """Re-optimize with every unit's cost set to each value in ``costs``."""
    costs = [float(k) for k in costs]
    if not costs:
        raise PreconditionError("cost list is empty")
    if not all(math.isfinite(k) for k in costs):
        raise PreconditionError("costs must be finite")
    return [(k, optimize(data.with_cost(k), family, method, **opt)) for k in costs]


def implied_cost(sweep, target: float, coordinate: int = 0) -> float | None:
    """Cost at which the chosen ``beta`` crosses ``target``, linearly interpolated.

    Returns the first crossing along the sweep order, the exact cost when a
    sweep point hits the target, or None when the target is never bracketed.
    """
    pts = [(k, float(r.beta_hat[coordinate])) for k, r in sweep]
    for (k0, b0), (k1, b1) in zip(pts, pts[1:]):
        if b0 == target:
            return k0
        if (b0 - target) * (b1 - target) < 0:
            return k0 + (target - b0) * (k1 - k0) / (b1 - b0)
    if pts and pts[-1][1] == target:
        return pts[-1][0]
    return None
