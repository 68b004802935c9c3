"""Special functions for the sinc-kernel welfare estimator.

Everything here uses the 1/pi-normalized convention, ``sinc(0) = 1/pi``, so that
``sinc`` integrates to one and ``cumulative_sinc`` is its antiderivative.

The scalar kernels are compiled with numba and exposed as ufuncs; the public
wrappers validate input and accept scalars or arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from llvmlite import binding as llvm
from numba import types
from numba.core import cgutils
from numba.extending import get_cython_function_address, intrinsic
from scipy import special

from .errors import DomainError

__all__ = [
    "AccuracySpec",
    "DEFAULT_ACCURACY",
    "sinc",
    "sinc_prime",
    "sinc_double_prime",
    "sine_integral",
    "cumulative_sinc",
    "normal_cdf",
    "normal_pdf",
]

_PI = math.pi
_HALF_PI = 0.5 * math.pi
_INV_PI = 1.0 / math.pi
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Below this magnitude sinc is evaluated from its Taylor series.
_TAYLOR_SWITCH = 1e-3
# The derivative closed forms cancel like 1/x^2 and 1/x^3, so their series run further out.
_DERIV_SERIES_SWITCH = 1.0
# Si switches from the Maclaurin series to the auxiliary functions f, g above this.
_SI_SWITCH = 4.0


@dataclass(frozen=True)
class AccuracySpec:
    """Numerical control record for the special functions."""

    abs_tol: float = 1e-12
    series_asymptotic_switch: float = _SI_SWITCH

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")
        if not self.series_asymptotic_switch > 0:
            raise ValueError("series_asymptotic_switch must be positive")


DEFAULT_ACCURACY = AccuracySpec()


@numba.njit(cache=True)
def _si_series(x):
    # Si(x) = sum_k (-1)^k x^(2k+1) / ((2k+1) (2k+1)!)
    x2 = x * x
    term = x
    total = x
    k = 0
    while True:
        term *= -x2 / ((2 * k + 2) * (2 * k + 3))
        k += 1
        contrib = term / (2 * k + 1)
        total += contrib
        if abs(contrib) <= 1e-17 * abs(total):
            break
    return total


@intrinsic
def _stack_double(typingctx):
    # a stack slot for one float64, used as an output pointer
    sig = types.CPointer(types.float64)()

    def codegen(context, builder, signature, args):
        return cgutils.alloca_once(builder, context.get_value_type(types.float64))

    return sig, codegen


# Cephes sici from scipy's compiled special-function table: Si above the
# switch point comes from its rational approximations of the auxiliary f, g.
# Bound by symbol name rather than by pointer so compiled kernels stay cacheable.
llvm.add_symbol("assure_cephes_sici", get_cython_function_address("scipy.special.cython_special", "__pyx_fuse_1sici"))
_cephes_sici = types.ExternalFunction(
    "assure_cephes_sici", types.void(types.float64, types.CPointer(types.float64), types.CPointer(types.float64))
)


@numba.njit(cache=True)
def _si_large(x):
    si = _stack_double()
    ci = _stack_double()
    _cephes_sici(x, si, ci)
    return si[0]


@numba.njit(cache=True)
def _si_scalar(x):
    ax = abs(x)
    if ax <= _SI_SWITCH:
        return _si_series(x)
    val = _HALF_PI if ax > 1e17 else _si_large(ax)
    return val if x > 0 else -val


@numba.njit(cache=True)
def _sinc_scalar(x):
    if abs(x) < _TAYLOR_SWITCH:
        x2 = x * x
        return (1.0 - x2 / 6.0 * (1.0 - x2 / 20.0)) * _INV_PI
    return math.sin(x) / (_PI * x)


@numba.njit(cache=True)
def _sinc_prime_scalar(x):
    if abs(x) < _DERIV_SERIES_SWITCH:
        # sum_k (-1)^k 2k x^(2k-1) / (2k+1)!, Horner in x^2 via term ratios
        x2 = x * x
        term = -x / 3.0
        total = term
        for k in range(2, 12):
            term *= -x2 / ((2 * k) * (2 * k + 1)) * (2 * k) / (2 * k - 2)
            total += term
        return total * _INV_PI
    return (x * math.cos(x) - math.sin(x)) / (_PI * x * x)


@numba.njit(cache=True)
def _sinc_double_prime_scalar(x):
    if abs(x) < _DERIV_SERIES_SWITCH:
        # sum_k (-1)^k 2k (2k-1) x^(2k-2) / (2k+1)!
        x2 = x * x
        term = -1.0 / 3.0
        total = term
        for k in range(2, 12):
            term *= -x2 / ((2 * k) * (2 * k + 1)) * ((2 * k) * (2 * k - 1)) / ((2 * k - 2) * (2 * k - 3))
            total += term
        return total * _INV_PI
    s = math.sin(x)
    c = math.cos(x)
    return (2.0 * s - 2.0 * x * c - x * x * s) / (_PI * x * x * x)


@numba.vectorize(["float64(float64)"], cache=True)
def _si_ufunc(x):
    return _si_scalar(x)


@numba.vectorize(["float64(float64)"], cache=True)
def _sinc_ufunc(x):
    return _sinc_scalar(x)


@numba.vectorize(["float64(float64)"], cache=True)
def _sinc_prime_ufunc(x):
    return _sinc_prime_scalar(x)


@numba.vectorize(["float64(float64)"], cache=True)
def _sinc_double_prime_ufunc(x):
    return _sinc_double_prime_scalar(x)


def _checked(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("special functions require finite arguments")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def sinc(x):
    """``sin(x) / (pi x)``, with ``sinc(0) = 1/pi``."""
    arr = _checked(x)
    return _out(_sinc_ufunc(arr), x)


def sinc_prime(x):
    """First derivative of :func:`sinc`: ``(x cos x - sin x) / (pi x^2)``."""
    arr = _checked(x)
    return _out(_sinc_prime_ufunc(arr), x)


def sinc_double_prime(x):
    """Second derivative of :func:`sinc`; equals ``-1/(3 pi)`` at zero."""
    arr = _checked(x)
    return _out(_sinc_double_prime_ufunc(arr), x)


def sine_integral(x):
    """Si(x), the integral of sin(t)/t from 0 to x.

    Maclaurin series for ``|x| <= 4``; above that the Cephes rational
    approximations of the auxiliary functions f and g, called from compiled
    code through scipy's Cython table.
    """
    arr = _checked(x)
    return _out(_si_ufunc(arr), x)


def cumulative_sinc(x):
    """``1/2 + Si(x)/pi``. Not monotone: the sinc density changes sign."""
    arr = _checked(x)
    return _out(0.5 + _si_ufunc(arr) * _INV_PI, x)


def normal_cdf(x):
    arr = _checked(x)
    return _out(special.ndtr(arr), x)


def normal_pdf(x):
    arr = _checked(x)
    return _out(_INV_SQRT_2PI * np.exp(-0.5 * arr * arr), x)
