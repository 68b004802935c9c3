"""Data model for compound selection problems: units, datasets, bandwidth."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import (
    DatasetError,
    InvalidSigmaError,
    MissingColumnError,
    NonNumericError,
    PreconditionError,
    TooFewUnitsError,
)

MIN_UNITS = 3
MODES = ("gaussian", "poisson")


@dataclass(frozen=True)
class Unit:
    y: float
    sigma: float
    cost: float
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise PreconditionError(f"sigma must be positive and finite, got {self.sigma}")
        if not (math.isfinite(self.y) and math.isfinite(self.cost)):
            raise PreconditionError("y and cost must be finite")
        if not all(math.isfinite(v) for v in self.covariates):
            raise PreconditionError("covariates must be finite")


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered collection of units stored column-wise.

    ``X`` has shape ``(n, p)``; ``p`` may be zero. In Poisson mode ``y`` holds
    non-negative integer counts and ``sigma`` is all ones.
    """

    y: np.ndarray
    sigma: np.ndarray
    cost: np.ndarray
    X: np.ndarray = None
    mode: str = "gaussian"

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float)
        sigma = np.ascontiguousarray(self.sigma, dtype=float)
        cost = np.ascontiguousarray(self.cost, dtype=float)
        n = y.shape[0]
        X = np.zeros((n, 0)) if self.X is None else np.ascontiguousarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or sigma.shape != (n,) or cost.shape != (n,) or X.shape[0] != n:
            raise PreconditionError("y, sigma, cost and X must have matching lengths")
        if n < MIN_UNITS:
            raise TooFewUnitsError(f"need at least {MIN_UNITS} units, got {n}")
        if self.mode not in MODES:
            raise PreconditionError(f"unknown mode {self.mode!r}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(cost)) and np.all(np.isfinite(X))):
            raise PreconditionError("y, cost and covariates must be finite")
        if not (np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
            raise PreconditionError("sigma must be positive and finite")
        for arr in (y, sigma, cost, X):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def covariate_dim(self) -> int:
        return self.X.shape[1]

    @property
    def units(self) -> list[Unit]:
        return [
            Unit(float(self.y[i]), float(self.sigma[i]), float(self.cost[i]), tuple(float(v) for v in self.X[i]))
            for i in range(self.n)
        ]

    @classmethod
    def from_units(cls, units: Iterable[Unit], mode: str = "gaussian") -> "Dataset":
        units = list(units)
        dims = {len(u.covariates) for u in units}
        if len(dims) > 1:
            raise PreconditionError("all units must share covariate_dim")
        p = dims.pop() if dims else 0
        X = np.array([u.covariates for u in units], dtype=float).reshape(len(units), p)
        return cls(
            y=np.array([u.y for u in units]),
            sigma=np.array([u.sigma for u in units]),
            cost=np.array([u.cost for u in units]),
            X=X,
            mode=mode,
        )

    def replace(self, **changes) -> "Dataset":
        fields = dict(y=self.y, sigma=self.sigma, cost=self.cost, X=self.X, mode=self.mode)
        fields.update(changes)
        return Dataset(**fields)

    def with_cost(self, k: float) -> "Dataset":
        return self.replace(cost=np.full(self.n, float(k)))

    def subset(self, mask) -> "Dataset":
        return self.replace(y=self.y[mask], sigma=self.sigma[mask], cost=self.cost[mask], X=self.X[mask])


@dataclass(frozen=True)
class GroundTruth:
    """True means, known only in simulation."""

    mu: np.ndarray = field(repr=False)

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mu, dtype=float)
        if mu.ndim != 1 or not np.all(np.isfinite(mu)):
            raise PreconditionError("mu must be a finite vector")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    def check(self, data: Dataset) -> np.ndarray:
        if self.mu.shape[0] != data.n:
            raise PreconditionError(f"ground truth has length {self.mu.shape[0]}, dataset has {data.n}")
        return self.mu


@dataclass(frozen=True)
class Bandwidth:
    h: float

    def __post_init__(self):
        if not (0 < self.h <= 1):
            raise PreconditionError(f"bandwidth must lie in (0, 1], got {self.h}")

    @property
    def lam(self) -> float:
        return 1.0 / self.h


def auto_bandwidth(n: int) -> Bandwidth:
    """``h = 1 / sqrt(2 log n)``."""
    if n < MIN_UNITS:
        raise PreconditionError(f"bandwidth needs n >= {MIN_UNITS}, got {n}")
    return Bandwidth(1.0 / math.sqrt(2.0 * math.log(n)))


_XCOL = re.compile(r"^x(\d+)$")


def load_dataset(source, format: str = "csv", mode: str = "gaussian") -> Dataset:
    """Parse a dataset from a path, a text stream or a byte stream.

    The header must name ``y``, ``sigma`` and ``k``; covariate columns are
    ``x1 .. xp``. Errors carry the 1-based line number of the offending row.
    ``sigma`` may be omitted in Poisson mode, where it is ignored.
    """
    if format != "csv":
        raise DatasetError(f"unsupported format {format!r}")
    if mode not in MODES:
        raise DatasetError(f"unknown mode {mode!r}")
    if hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()

    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise MissingColumnError("empty file, no header row", line=1) from None

    required = ["y", "k"] if mode == "poisson" else ["y", "sigma", "k"]
    for col in required:
        if col not in header:
            raise MissingColumnError(f"missing column {col!r}", line=1)
    xcols = sorted((int(m.group(1)), j) for j, h in enumerate(header) if (m := _XCOL.match(h)))
    p = len(xcols)
    if [i for i, _ in xcols] != list(range(1, p + 1)):
        raise MissingColumnError("covariate columns must be x1..xp without gaps", line=1)

    iy, ik = header.index("y"), header.index("k")
    isig = header.index("sigma") if "sigma" in header else None
    ys, sigmas, costs, xs = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(f"expected {len(header)} fields, got {len(row)}", line=lineno)

        def num(j, name):
            try:
                v = float(row[j])
            except ValueError:
                raise NonNumericError(f"non-numeric value {row[j]!r} in column {name!r}", line=lineno) from None
            if not math.isfinite(v):
                raise NonNumericError(f"non-finite value in column {name!r}", line=lineno)
            return v

        y = num(iy, "y")
        if mode == "poisson":
            if y < 0 or y != math.floor(y):
                raise NonNumericError(f"Poisson count must be a non-negative integer, got {row[iy]!r}", line=lineno)
            s = 1.0
        else:
            s = num(isig, "sigma")
            if s <= 0:
                raise InvalidSigmaError(f"sigma must be positive, got {row[isig]!r} (row {lineno - 1})", line=lineno)
        ys.append(y)
        sigmas.append(s)
        costs.append(num(ik, "k"))
        xs.append([num(j, f"x{i}") for i, j in xcols])

    if len(ys) < MIN_UNITS:
        raise TooFewUnitsError(f"need at least {MIN_UNITS} rows, got {len(ys)}")
    return Dataset(
        y=np.array(ys),
        sigma=np.array(sigmas),
        cost=np.array(costs),
        X=np.array(xs, dtype=float).reshape(len(ys), p),
        mode=mode,
    )


def write_dataset(data: Dataset, dest: TextIO) -> None:
    """Write ``data`` as CSV; floats use ``repr`` so a reload is bit-exact."""
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["y", "sigma", "k"] + [f"x{j + 1}" for j in range(data.covariate_dim)])
    for i in range(data.n):
        writer.writerow([repr(float(v)) for v in (data.y[i], data.sigma[i], data.cost[i], *data.X[i])])
