"""Monte Carlo harness: calibrated scenarios, regret tables and rate checks.

Randomness comes from Philox streams keyed by ``(seed, stream, index)``:
the population (``mu``, ``sigma``, covariates) uses index 0, or the rep
when ``redraw_mu`` is set, and the observation noise of rep ``r`` uses
index ``r``. Reps are therefore independent tasks, and a report is
bit-identical for any number of worker processes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import multiprocessing
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sopt
from scipy import special
from scipy.stats import qmc

from .baselines import p_value_cutoff, plugin_point
from .classes import FAMILIES, DecisionFamily, EnsembleFamily, FiniteFamily, TStatFamily, ThresholdFamily, family_from_config
from .errors import ConfigError, PreconditionError
from .estimators import _assure_w, _utility_from_delta, _welfare_from_delta, estimate
from .jsonio import dumps
from .model import Dataset
from .optimize import _from_unit, coordinate_grid, first_argmax, optimize

log = logging.getLogger(__name__)

# stream tags for the counter-based generator
_MU, _NOISE, _COVARIATES, _SIGMA = 0, 1, 2, 3

ORACLE_GRID = 10_000
ORACLE_STARTS = 64


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream, index])))


def _finite_params(block: dict, what: str):
    for k, v in block.items():
        if isinstance(v, (int, float)) and not isinstance(v, bool) and not math.isfinite(v):
            raise ConfigError(f"{what} parameter {k!r} must be finite")


@dataclass(frozen=True)
class ScenarioSpec:
    """A simulation scenario; JSON-serializable.

    Components are small dicts with a ``kind`` field:

    * ``generator``: ``two_point`` (``h``, ``sign``: every ``mu = sign*h/sqrt(n)``),
      ``gaussian_prior`` (``m``, ``s``), ``bimodal`` (``a``, ``weight``,
      ``center``, ``exact``: exact proportions instead of Bernoulli draws),
      ``from_file`` (``path`` to a CSV with a ``mu`` column).
    * ``sigma_source``: ``constant`` (``s``), ``lognormal`` (``meanlog``, ``sdlog``), ``from_file``.
    * ``cost_source``: ``constant`` (``k``), ``from_file``.
    * ``covariate_model``: ``none``, ``mu_plus_t_noise`` (``scale``, ``df``:
      ``x = mu + scale*sigma*t_df``), ``pure_noise`` (``scale``, ``df``).
    * ``likelihood_misspec``: ``none`` or ``student_t`` (``df``): noise is
      ``sigma * t_df``, not rescaled to unit variance.

    ``families`` maps names used in method ids to family configs; a name
    that is not listed resolves to the default family of that kind.
    """

    n: int = 1000
    reps: int = 40
    seed: int = 0
    mode: str = "gaussian"
    generator: dict = field(default_factory=lambda: {"kind": "gaussian_prior", "m": 0.0, "s": 1.0})
    sigma_source: dict = field(default_factory=lambda: {"kind": "constant", "s": 1.0})
    cost_source: dict = field(default_factory=lambda: {"kind": "constant", "k": 0.0})
    covariate_model: dict = field(default_factory=lambda: {"kind": "none"})
    likelihood_misspec: dict = field(default_factory=lambda: {"kind": "none"})
    families: dict = field(default_factory=dict)
    redraw_mu: bool = False
    grid_size: int = 201
    starts: int = 8
    refine: bool = True
    h: float | None = None
    eps: float | None = None

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 3:
            raise PreconditionError(f"n must be an integer >= 3, got {self.n}")
        if not isinstance(self.reps, int) or self.reps < 1:
            raise PreconditionError(f"reps must be an integer >= 1, got {self.reps}")
        if not 0 <= int(self.seed) < 2**64:
            raise PreconditionError("seed must be a 64-bit unsigned integer")
        if self.mode not in ("gaussian", "poisson"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in ("generator", "sigma_source", "cost_source", "covariate_model", "likelihood_misspec"):
            block = getattr(self, name)
            if not isinstance(block, dict) or "kind" not in block:
                raise ConfigError(f"{name} must be an object with a 'kind' field")
            _finite_params(block, name)
        kinds = {
            "generator": ("two_point", "gaussian_prior", "bimodal", "from_file"),
            "sigma_source": ("constant", "lognormal", "from_file"),
            "cost_source": ("constant", "from_file"),
            "covariate_model": ("none", "mu_plus_t_noise", "pure_noise"),
            "likelihood_misspec": ("none", "student_t"),
        }
        for name, allowed in kinds.items():
            if getattr(self, name)["kind"] not in allowed:
                raise ConfigError(f"{name} kind must be one of {allowed}, got {getattr(self, name)['kind']!r}")
        if self.mode == "poisson" and self.likelihood_misspec["kind"] != "none":
            raise ConfigError("likelihood misspecification applies to gaussian mode only")

    @property
    def t_df(self):
        lm = self.likelihood_misspec
        return float(lm["df"]) if lm["kind"] == "student_t" else None

    def replace(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ScenarioSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(cfg) - names
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**cfg)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSpec":
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from None
        return cls.from_dict(cfg)


# ---------------------------------------------------------------- data generation


@dataclass(frozen=True)
class Population:
    """The fixed part of a scenario: true means and contexts."""

    mu: np.ndarray
    sigma: np.ndarray
    cost: np.ndarray
    X: np.ndarray


def _read_columns(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: no rows")
    return {k.strip().lower(): np.array([float(r[k]) for r in rows]) for k in rows[0]}


def draw_population(spec: ScenarioSpec, index: int = 0) -> Population:
    n = spec.n
    g = spec.generator
    files = {}

    def from_file(block, column):
        path = block.get("path")
        if path is None:
            raise ConfigError(f"{column}: from_file needs a 'path'")
        if path not in files:
            files[path] = _read_columns(path)
        cols = files[path]
        if column not in cols:
            raise ConfigError(f"{path}: missing column {column!r}")
        if cols[column].shape[0] != n:
            raise ConfigError(f"{path}: has {cols[column].shape[0]} rows, scenario n={n}")
        return cols[column]

    rng = _rng(spec.seed, _MU, index)
    kind = g["kind"]
    if kind == "two_point":
        mu = np.full(n, g.get("sign", 1.0) * g.get("h", 1.0) / math.sqrt(n))
    elif kind == "gaussian_prior":
        mu = g.get("m", 0.0) + g.get("s", 1.0) * rng.standard_normal(n)
    elif kind == "bimodal":
        a, w, c = g.get("a", 1.0), g.get("weight", 0.5), g.get("center", 0.0)
        if not 0 <= w <= 1:
            raise ConfigError("bimodal weight must lie in [0, 1]")
        if g.get("exact", False):
            plus = np.arange(n) < int(round(w * n))
        else:
            plus = rng.random(n) < w
        mu = c + np.where(plus, a, -a)
    else:
        mu = from_file(g, "mu")

    s = spec.sigma_source
    if s["kind"] == "constant":
        sigma = np.full(n, float(s.get("s", 1.0)))
    elif s["kind"] == "lognormal":
        sigma = np.exp(s.get("meanlog", 0.0) + s.get("sdlog", 0.5) * _rng(spec.seed, _SIGMA, index).standard_normal(n))
    else:
        sigma = from_file(s, "sigma")

    c = spec.cost_source
    cost = np.full(n, float(c.get("k", 0.0))) if c["kind"] == "constant" else from_file(c, "k")

    if spec.mode == "poisson":
        # counts need non-negative rates
        mu = np.abs(mu)
        sigma = np.ones(n)

    cm = spec.covariate_model
    if cm["kind"] == "none":
        X = np.zeros((n, 0))
    else:
        t = _rng(spec.seed, _COVARIATES, index).standard_t(cm.get("df", 10.0), n)
        scale = cm.get("scale", 1.0)
        X = (mu + scale * sigma * t if cm["kind"] == "mu_plus_t_noise" else scale * t)[:, None]
    return Population(mu, sigma, cost, X)


def draw_dataset(spec: ScenarioSpec, pop: Population, rep: int) -> Dataset:
    rng = _rng(spec.seed, _NOISE, rep)
    if spec.mode == "poisson":
        y = rng.poisson(pop.mu).astype(float)
    elif spec.t_df is not None:
        y = pop.mu + pop.sigma * rng.standard_t(spec.t_df, spec.n)
    else:
        y = pop.mu + pop.sigma * rng.standard_normal(spec.n)
    return Dataset(y, pop.sigma, pop.cost, pop.X, mode=spec.mode)


# ---------------------------------------------------------------- in-class oracle


@dataclass(frozen=True)
class Oracle:
    beta: np.ndarray
    value: float


def true_welfare(data: Dataset, mu, family: DecisionFamily, beta, t_df=None) -> float:
    return _welfare_from_delta(data, mu, family.thresholds(data, beta, check=False), t_df)


def in_class_oracle(data: Dataset, mu, family: DecisionFamily, t_df=None, grid: int = ORACLE_GRID, starts: int = ORACLE_STARTS, seed: int = 0) -> Oracle:
    """Best parameter in the box for the true welfare.

    Dim 1: dense grid, then a bounded scalar polish between the grid
    neighbours of the best point. Higher dims: Nelder-Mead on the true
    welfare from the box centre plus scrambled Halton starts.
    """
    mu = np.asarray(mu, float)
    if family.dim == 1 or isinstance(family, FiniteFamily):
        axis = coordinate_grid(family, 0, grid)
        values = np.array([true_welfare(data, mu, family, [b], t_df) for b in axis])
        i = first_argmax(values)
        best = Oracle(np.array([axis[i]]), float(values[i]))
        if isinstance(family, FiniteFamily) or len(axis) < 3:
            return best
        lo, hi = axis[max(i - 1, 0)], axis[min(i + 1, len(axis) - 1)]
        res = sopt.minimize_scalar(lambda b: -true_welfare(data, mu, family, [b], t_df), bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        v = true_welfare(data, mu, family, [res.x], t_df)
        return Oracle(np.array([res.x]), v) if v > best.value else best

    dim = family.dim
    u_starts = [np.full(dim, 0.5)] + list(qmc.Halton(d=dim, scramble=True, seed=np.random.default_rng(seed)).random(starts - 1))

    def neg(u):
        return -true_welfare(data, mu, family, _from_unit(family, u), t_df)

    best = None
    for u0 in u_starts:
        res = sopt.minimize(neg, u0, method="Nelder-Mead", bounds=[(0.0, 1.0)] * dim, options={"xatol": 1e-9, "fatol": 1e-14, "maxiter": 2000 * dim})
        for u in (u0, res.x):
            b = _from_unit(family, u)
            v = true_welfare(data, mu, family, b, t_df)
            if best is None or v > best.value:
                best = Oracle(b, v)
    return best


# ---------------------------------------------------------------- methods

_FAMILY_METHOD = re.compile(r"^(assure|cb|plugin|poisson_assure):(\w+)$")
_PVALUE = re.compile(r"^pvalue\(([^)]+)\)$")


@dataclass(frozen=True)
class MethodSpec:
    id: str
    kind: str  # assure, cb, plugin, poisson_assure, success_rule, pvalue
    family: str | None = None
    alpha: float | None = None


def parse_method(mid: str, mode: str = "gaussian") -> MethodSpec:
    if mid == "success_rule":
        return MethodSpec(mid, "success_rule", "threshold")
    m = _PVALUE.match(mid)
    if m:
        try:
            alpha = float(m.group(1))
        except ValueError:
            raise ConfigError(f"bad alpha in method {mid!r}") from None
        p_value_cutoff(alpha)
        return MethodSpec(mid, "pvalue", "tstat", alpha)
    m = _FAMILY_METHOD.match(mid)
    if not m:
        raise ConfigError(f"unknown method id {mid!r}")
    kind, fam = m.groups()
    if kind == "poisson_assure" and mode != "poisson":
        raise ConfigError(f"{mid}: poisson_assure needs a poisson-mode scenario")
    if kind in ("assure", "cb") and mode != "gaussian":
        raise ConfigError(f"{mid}: {kind} needs a gaussian-mode scenario")
    return MethodSpec(mid, kind, fam)


def _family_config(spec: ScenarioSpec, name: str) -> dict:
    if name in spec.families:
        return spec.families[name]
    if name in FAMILIES:
        return {"kind": name}
    raise ConfigError(f"method refers to unknown family {name!r}")


def _build_family(spec, ms: MethodSpec, data) -> DecisionFamily:
    if ms.kind == "pvalue":
        z = p_value_cutoff(ms.alpha)
        return TStatFamily(box=((min(-10.0, z), max(10.0, z)),))
    if ms.kind == "success_rule":
        return ThresholdFamily()
    return family_from_config(_family_config(spec, ms.family), data)


def _data_dependent(family) -> bool:
    return isinstance(family, EnsembleFamily)


# ---------------------------------------------------------------- replications


def _choose(spec: ScenarioSpec, ms: MethodSpec, data: Dataset, family: DecisionFamily, rep: int):
    if ms.kind == "success_rule":
        return np.zeros(1)
    if ms.kind == "pvalue":
        return np.array([p_value_cutoff(ms.alpha)])
    if ms.kind == "plugin":
        fit = plugin_point(family, data)
        if fit is None:
            raise ConfigError(f"{family.kind} family has no plug-in baseline")
        return fit.beta
    method = "poisson" if ms.kind == "poisson_assure" else ms.kind
    starts = None if family.dim == 1 or isinstance(family, FiniteFamily) else spec.starts
    res = optimize(data, family, method, spec.grid_size, starts, seed=(int(spec.seed), rep), h=spec.h, eps=spec.eps, refine=spec.refine)
    return res.beta_hat


def _score(data, mu, family, beta, t_df):
    delta = family.thresholds(data, beta, check=False)
    return _welfare_from_delta(data, mu, delta, t_df), _utility_from_delta(data, mu, delta)


def _run_rep(spec: ScenarioSpec, methods: list[MethodSpec], rep: int, pop: Population | None, oracles: dict) -> list[dict]:
    if pop is None:
        pop = draw_population(spec, rep)
    data = draw_dataset(spec, pop, rep)
    t_df = spec.t_df
    rows = []
    for ms in methods:
        family = _build_family(spec, ms, data)
        key = (ms.kind in ("success_rule", "pvalue"), ms.family, ms.alpha)
        oracle = oracles.get(key)
        if oracle is None:
            oracle = in_class_oracle(data, pop.mu, family, t_df, seed=int(spec.seed))
        beta = _choose(spec, ms, data, family, rep)
        welfare, utility = _score(data, pop.mu, family, beta, t_df)
        _, oracle_utility = _score(data, pop.mu, family, oracle.beta, t_df)
        row = {
            "rep": rep,
            "method": ms.id,
            "beta_hat": [float(b) for b in beta],
            "welfare": welfare,
            "utility": utility,
            "oracle_beta": [float(b) for b in oracle.beta],
            "oracle_welfare": oracle.value,
            "oracle_utility": oracle_utility,
            "regret": oracle.value - utility,
            "regret_oracle": oracle.value - welfare,
            "regret_paired": oracle_utility - utility,
        }
        if ms.kind in ("assure", "cb", "poisson_assure"):
            method = "poisson" if ms.kind == "poisson_assure" else ms.kind
            row["estimate"] = estimate(data, family, beta, method, spec.h, spec.eps).value
            fit = plugin_point(family, data) if family.differentiable else None
            if fit is not None:
                row["plugin_beta"] = [float(b) for b in fit.beta]
                row["plugin_estimate"] = estimate(data, family, fit.beta, method, spec.h, spec.eps).value
        rows.append(row)
    return rows


def _run_rep_task(args):
    return _run_rep(*args)


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("ASSURE_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise PreconditionError(f"threads must be >= 1, got {threads}")
    return threads


def _precompute_oracles(spec, methods, pop):
    """In-class oracles that do not depend on the observed data."""
    oracles = {}
    if pop is None:
        return oracles
    # contexts only; y is irrelevant to the thresholds of these families
    ctx = Dataset(np.zeros(spec.n), pop.sigma, pop.cost, pop.X, mode="gaussian")
    ctx = ctx if spec.mode == "gaussian" else ctx.replace(mode="poisson")
    for ms in methods:
        key = (ms.kind in ("success_rule", "pvalue"), ms.family, ms.alpha)
        if key in oracles or (ms.kind not in ("success_rule", "pvalue") and _family_config(spec, ms.family).get("kind") == "ensemble"):
            continue
        family = _build_family(spec, ms, ctx)
        if _data_dependent(family):
            continue
        oracles[key] = in_class_oracle(ctx, pop.mu, family, spec.t_df, seed=int(spec.seed))
    return oracles


def run_reps(spec: ScenarioSpec, methods, threads: int | None = None) -> list[dict]:
    """Per-rep rows for every method, ordered by rep then method."""
    mss = [parse_method(m, spec.mode) for m in methods]
    if not mss:
        raise PreconditionError("no methods given")
    pop = None if spec.redraw_mu else draw_population(spec, 0)
    oracles = _precompute_oracles(spec, mss, pop)
    tasks = [(spec, mss, rep, pop, oracles) for rep in range(spec.reps)]
    threads = resolve_threads(threads)
    if threads == 1 or spec.reps == 1:
        chunks = [_run_rep_task(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(threads, spec.reps), mp_context=ctx) as pool:
            chunks = list(pool.map(_run_rep_task, tasks))
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------- reports


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    if x.size < 2:
        return float(np.mean(x)), 0.0
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size))


_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True)
class SimReport:
    spec: ScenarioSpec
    methods: list
    rows: list
    summary: dict

    @classmethod
    def from_rows(cls, spec, methods, rows) -> "SimReport":
        summary = {}
        for m in methods:
            mine = [r for r in rows if r["method"] == m]
            w = [r["welfare"] for r in mine]
            entry = {}
            for name in ("welfare", "utility", "regret", "regret_oracle", "regret_paired"):
                mean, se = _mean_se([r[name] for r in mine])
                entry[name] = {"mean": mean, "stderr": se}
            entry["welfare"]["quantiles"] = dict(zip((str(q) for q in _QUANTILES), (float(v) for v in np.quantile(w, _QUANTILES))))
            entry["reps"] = len(mine)
            summary[m] = entry
        return cls(spec, list(methods), rows, summary)

    def regret_ok(self) -> dict:
        """Per method: mean regret is at least -2 MC stderr."""
        return {m: s["regret"]["mean"] >= -2.0 * s["regret"]["stderr"] for m, s in self.summary.items()}

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "methods": self.methods, "summary": self.summary, "rows": self.rows}

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def write_csv(self, dest) -> None:
        cols = ["rep", "method", "welfare", "utility", "oracle_welfare", "oracle_utility", "regret", "regret_oracle", "regret_paired", "estimate", "plugin_estimate"]
        width = max(len(r["beta_hat"]) for r in self.rows)
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(cols + [f"beta_{j + 1}" for j in range(width)])
        for r in self.rows:
            vals = [r.get(c, "") for c in cols]
            betas = r["beta_hat"] + [""] * (width - len(r["beta_hat"]))
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in vals + betas])


def run_scenario(spec: ScenarioSpec, methods, threads: int | None = None) -> SimReport:
    """Run every method on ``spec.reps`` replications and summarize."""
    methods = list(methods)
    return SimReport.from_rows(spec, methods, run_reps(spec, methods, threads))


# ---------------------------------------------------------------- rate experiments


def loglog_slope(n_list, means) -> float:
    x, y = np.log(np.asarray(n_list, float)), np.asarray(means, float)
    if np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(x, np.log(y), 1)[0])


def jackknife_slope(n_list, per_rep: np.ndarray) -> tuple[float, float]:
    """Slope of log mean on log n and its leave-one-rep-out jackknife stderr.

    ``per_rep`` has shape ``(len(n_list), reps)``.
    """
    R = per_rep.shape[1]
    slope = loglog_slope(n_list, per_rep.mean(axis=1))
    if R < 2:
        return slope, float("nan")
    total = per_rep.sum(axis=1)
    loo = np.array([loglog_slope(n_list, (total - per_rep[:, r]) / (R - 1)) for r in range(R)])
    se = math.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2))
    return slope, float(se)


@dataclass(frozen=True)
class RateTable:
    n: list
    mean: list
    stderr: list
    slope: float
    slope_stderr: float
    measure: str
    per_rep: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "measure": self.measure,
            "rows": [{"n": n, "mean": m, "stderr": s} for n, m, s in zip(self.n, self.mean, self.stderr)],
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
        }


def _check_n_list(n_list, reps):
    n_list = [int(n) for n in n_list]
    if len(n_list) < 4:
        raise PreconditionError("n_list needs at least 4 sizes")
    if any(n < 3 for n in n_list):
        raise PreconditionError("every n must be >= 3")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise PreconditionError("n_list must be increasing")
    if reps < 1:
        raise PreconditionError(f"reps must be >= 1, got {reps}")
    return n_list


def rate_experiment(template: ScenarioSpec, n_list, reps: int, method: str = "assure:threshold", measure: str = "regret_paired", threads=None) -> RateTable:
    """Mean regret of ``method`` at each ``n`` and the log-log slope.

    ``measure`` picks the per-rep regret column: ``regret`` (in-class best
    welfare minus realized utility), ``regret_paired`` (the same target with
    the oracle rule's realized utility as a control variate; identical
    expectation, far smaller variance) or ``regret_oracle`` (welfare gap).
    """
    n_list = _check_n_list(n_list, reps)
    if measure not in ("regret", "regret_paired", "regret_oracle"):
        raise PreconditionError(f"unknown measure {measure!r}")
    per_rep = np.empty((len(n_list), reps))
    for i, n in enumerate(n_list):
        rows = run_reps(template.replace(n=n, reps=reps), [method], threads)
        per_rep[i] = [r[measure] for r in rows]
    stats = [_mean_se(row) for row in per_rep]
    slope, se = jackknife_slope(n_list, per_rep)
    return RateTable(n_list, [m for m, _ in stats], [s for _, s in stats], slope, se, measure, per_rep)


def sup_gap(data: Dataset, mu, family: DecisionFamily, betas, h=None) -> float:
    """``max_beta |W_hat(beta) - u(beta)|`` over the rows of ``betas``."""
    from .estimators import _resolve_h

    h = _resolve_h(data, h)
    gap = 0.0
    for beta in np.atleast_2d(betas):
        delta = family.thresholds(data, beta, check=False)
        w = float(np.sum(_assure_w(data.y, data.cost, data.sigma, delta, h)) / data.n)
        gap = max(gap, abs(w - _utility_from_delta(data, mu, delta)))
    return gap


def _gap_task(args):
    spec, pop, family, grid, rep = args
    data = draw_dataset(spec, pop if pop is not None else draw_population(spec, rep), rep)
    mu = (pop if pop is not None else draw_population(spec, rep)).mu
    return sup_gap(data, mu, family, grid, spec.h)


def uniform_gap_experiment(template: ScenarioSpec, n_list, reps: int, family: DecisionFamily | None = None, grid_points: int = 501, threads=None) -> RateTable:
    """Mean sup-gap between ASSURE and realized utility over a ``grid_points`` grid, per ``n``."""
    n_list = _check_n_list(n_list, reps)
    family = family or ThresholdFamily()
    if family.dim != 1:
        raise PreconditionError("uniform_gap_experiment needs a dim-1 family")
    grid = coordinate_grid(family, 0, grid_points)[:, None]
    threads = resolve_threads(threads)
    per_rep = np.empty((len(n_list), reps))
    for i, n in enumerate(n_list):
        spec = template.replace(n=n, reps=reps)
        pop = None if spec.redraw_mu else draw_population(spec, 0)
        tasks = [(spec, pop, family, grid, rep) for rep in range(reps)]
        if threads == 1:
            per_rep[i] = [_gap_task(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=threads, mp_context=multiprocessing.get_context("fork")) as pool:
                per_rep[i] = list(pool.map(_gap_task, tasks))
    stats = [_mean_se(row) for row in per_rep]
    slope, se = jackknife_slope(n_list, per_rep)
    return RateTable(n_list, [m for m, _ in stats], [s for _, s in stats], slope, se, "sup_gap", per_rep)


# ---------------------------------------------------------------- bias envelope


def bias_bound(mu, cost, h) -> float:
    """``|mu - k| h^2 exp(-1/(2 h^2))``."""
    return abs(mu - cost) * h * h * math.exp(-0.5 / (h * h))


def assure_bias(mu, sigma, cost, delta, h, nodes: int = 200) -> float:
    """``E w_h(Y) - (mu - k) Phi((mu - delta)/sigma)`` for ``Y ~ N(mu, sigma^2)``, by Gauss-Hermite."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    y = mu + sigma * x
    vals = _assure_w(y, float(cost), float(sigma), float(delta), float(h))
    mean = float(np.dot(w, vals) / math.sqrt(2.0 * math.pi))
    return mean - (mu - cost) * float(special.ndtr((mu - delta) / sigma))


@dataclass(frozen=True)
class BiasTable:
    rows: list  # dicts with h, mu, delta, sigma, bias, bound, ok
    tol: float

    @property
    def passed(self) -> bool:
        return all(r["ok"] for r in self.rows)

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r["ok"]]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tol": self.tol, "rows": self.rows}


def bias_envelope_check(h_list, mu_grid, delta_grid, sigma_grid=(1.0,), cost: float = 0.0, tol: float = 1e-9, nodes: int = 200) -> BiasTable:
    """Check the bias bound on every ``(h, mu, delta, sigma)`` cell."""
    grids = [np.asarray(g, float) for g in (h_list, mu_grid, delta_grid, sigma_grid)]
    if not all(np.all(np.isfinite(g)) for g in grids):
        raise PreconditionError("grids must be finite")
    rows = []
    for h in grids[0]:
        for mu in grids[1]:
            for delta in grids[2]:
                for sigma in grids[3]:
                    b = assure_bias(mu, sigma, cost, delta, h, nodes)
                    bound = bias_bound(mu, cost, h)
                    rows.append({"h": float(h), "mu": float(mu), "delta": float(delta), "sigma": float(sigma), "bias": b, "bound": bound, "ok": abs(b) <= bound + tol})
    return BiasTable(rows, tol)

