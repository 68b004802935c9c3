import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from assure.classes import CloseGaussFamily, Context, Contexts, FiniteFamily, LinearShrinkFamily, ThresholdFamily, TStatFamily
from assure.errors import DomainError, PreconditionError, UnsupportedOperationError
from assure.estimators import (
    assure_derivative,
    assure_estimate,
    assure_summand,
    assure_summands,
    cb_estimate,
    cb_summand,
    default_eps,
    estimate,
    oracle_welfare,
    poisson_assure,
    poisson_summand,
    poisson_tail,
    realized_utility,
)
from assure.model import Dataset, GroundTruth
from assure.specfun import sinc, sine_integral

from conftest import make_data

Z0 = Context(sigma=1.0, cost=0.0)
WIDE = ThresholdFamily(box=((-1e7, 1e7),))


def gh_expectation(f, mu, sigma, nodes=64):
    """E f(Y), Y ~ N(mu, sigma^2), by Gauss-Hermite (probabilists') quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(w * f(mu + sigma * x)) / math.sqrt(2 * math.pi))


# ---------------------------------------------------------------- summand


@pytest.mark.parametrize("y", [-3.0, 0.0, 0.7, 12.0])
def test_summand_at_threshold(y):
    assert assure_summand(y, Z0, y, 0.5) == pytest.approx(y / 2 - 0.6366197723675814, abs=1e-15)


def test_summand_reference_value():
    # 5 Csinc(20) - 4 sinc(20), evaluated in mpmath
    assert assure_summand(5.0, Z0, 0.0, 0.25) == pytest.approx(4.90598329845045031, abs=1e-14)


def test_summand_rejects_bad_bandwidth():
    with pytest.raises(PreconditionError):
        assure_summand(1.0, Z0, 0.0, 0.0)


small = st.floats(-20, 20)


@given(small, small, small, st.floats(0.1, 5), st.floats(0.05, 1.0), small)
def test_summand_translation_invariant(y, k, d, s, h, c):
    a = assure_summand(y, Context(s, k), d, h)
    b = assure_summand(y + c, Context(s, k + c), d + c, h)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9 * (1 + abs(c)) / h)


@given(small, small, small, st.floats(0.1, 5), st.floats(0.05, 1.0), st.floats(0.1, 10))
def test_summand_scale_equivariant(y, k, d, s, h, c):
    a = assure_summand(y, Context(s, k), d, h)
    b = assure_summand(c * y, Context(c * s, c * k), c * d, h)
    assert b == pytest.approx(c * a, rel=1e-10, abs=1e-10 * c / h)


@given(small, small, small, st.floats(0.1, 5), st.floats(0.05, 1.0))
def test_summand_matches_psi_form(y, k, d, s, h):
    u = (y - d) / (s * h)
    psi = (y - k) / 2 + (y - k) / math.pi * sine_integral(u) - s / h * sinc(u)
    assert assure_summand(y, Context(s, k), d, h) == pytest.approx(psi, rel=1e-13, abs=1e-13 * (1 + abs(y - k) + s / h))


# ---------------------------------------------------------------- aggregate


def test_select_everything_and_nothing_limits():
    data, _ = make_data(50, seed=3)
    all_in = assure_estimate(data, WIDE, [-1e7]).value
    assert all_in == pytest.approx(np.mean(data.y - data.cost), abs=1e-6)
    assert abs(assure_estimate(data, WIDE, [1e7]).value) <= 1e-6


def test_estimate_is_mean_with_pooled_stderr(data):
    w = assure_summands(data, ThresholdFamily(), [0.3])
    est = assure_estimate(data, ThresholdFamily(), [0.3])
    assert est.value == pytest.approx(w.mean(), rel=1e-14)
    assert est.stderr == pytest.approx(math.sqrt(np.sum((w - w.mean()) ** 2)) / data.n, rel=1e-14)
    assert est.h == pytest.approx(1 / math.sqrt(2 * math.log(data.n)))
    assert assure_estimate(data, ThresholdFamily(), [0.3]) == est


def test_bias_example_within_bound():
    mu, h = 1.0, 0.5
    e = gh_expectation(lambda y: assure_summand(y, Z0, 0.0, h), mu, 1.0)
    ref, _ = integrate.quad(lambda y: assure_summand(y, Z0, 0.0, h) * stats.norm.pdf(y, mu), -np.inf, np.inf, epsabs=1e-13)
    assert e == pytest.approx(ref, abs=1e-10)
    bound = 0.0338338208091531730
    assert abs(mu) * h**2 * math.exp(-1 / (2 * h**2)) == pytest.approx(bound, rel=1e-15)
    assert abs(e - 0.841344746068542949) <= bound


@pytest.mark.parametrize("h", [1.0, 0.5, 0.25])
@pytest.mark.parametrize("mu, delta, sigma", [(1.0, 0.3, 1.0), (-0.5, 0.0, 2.0), (2.0, 1.0, 0.5)])
def test_bias_envelope_and_shrinks_with_h(mu, delta, sigma, h):
    f = lambda y: assure_summand(y, Context(sigma, 0.0), delta, h)
    e = gh_expectation(f, mu, sigma, nodes=200)
    target = mu * stats.norm.cdf((mu - delta) / sigma)
    assert abs(e - target) <= abs(mu) * h**2 * math.exp(-1 / (2 * h**2)) + 1e-12


def test_same_thresholds_give_same_estimates():
    data, _ = make_data(60, seed=5, hetero=False, cost=0.1)
    mu0, tau = 0.7, 1.3
    ls = LinearShrinkFamily()
    # with sigma = 1 the linear-shrink threshold is k + (k - mu0)/tau^2 for every unit
    shift = (0.1 - mu0) / tau**2
    a = assure_estimate(data, ls, [mu0, tau])
    b = assure_estimate(data, ThresholdFamily(), [shift])
    assert a.value == pytest.approx(b.value, rel=1e-13)
    assert cb_estimate(data, ls, [mu0, tau]).value == pytest.approx(cb_estimate(data, ThresholdFamily(), [shift]).value, rel=1e-13)


def test_scale_equivariance_of_estimators():
    data, mu = make_data(40, seed=9, cost=0.2)
    c = 3.5
    scaled = Dataset(c * data.y, c * data.sigma, c * data.cost)
    fam, beta, sbeta = ThresholdFamily(), [0.4], [c * 0.4]
    h = 0.5
    assert assure_estimate(scaled, fam, sbeta, h).value == pytest.approx(c * assure_estimate(data, fam, beta, h).value, rel=1e-12)
    assert cb_estimate(scaled, fam, sbeta, 0.3).value == pytest.approx(c * cb_estimate(data, fam, beta, 0.3).value, rel=1e-12)
    t, st_ = GroundTruth(mu), GroundTruth(c * mu)
    assert oracle_welfare(scaled, st_, fam, sbeta) == pytest.approx(c * oracle_welfare(data, t, fam, beta), rel=1e-12)
    assert realized_utility(scaled, st_, fam, sbeta) == pytest.approx(c * realized_utility(data, t, fam, beta), rel=1e-12)


def test_translation_invariance_of_estimators():
    data, mu = make_data(40, seed=10, cost=0.2)
    c = -1.75
    moved = Dataset(data.y + c, data.sigma, data.cost + c)
    fam = TStatFamily()
    t, tt = GroundTruth(mu), GroundTruth(mu + c)
    for f, args in (
        (lambda d, g: assure_estimate(d, fam, [0.5], 0.5).value, ()),
        (lambda d, g: cb_estimate(d, fam, [0.5], 0.3).value, ()),
        (lambda d, g: oracle_welfare(d, g, fam, [0.5]), ()),
        (lambda d, g: realized_utility(d, g, fam, [0.5]), ()),
    ):
        assert f(moved, tt) == pytest.approx(f(data, t), rel=1e-11, abs=1e-12)


def test_mse_regression_guard():
    """Monte Carlo MSE tracks the pointwise rate (log n)^2/n + log n/n.

    The rate's constant is calibrated at the small n; the larger n must stay
    within 3x of the calibrated rate.
    """
    fam, beta = ThresholdFamily(), [0.5]

    def mse(n, reps=300):
        rng = np.random.default_rng(n)
        mu = rng.normal(0, 1, n)
        sigma = np.ones(n)
        W = float(np.mean(mu * stats.norm.cdf(mu - 0.5)))
        errs = []
        for _ in range(reps):
            d = Dataset(mu + rng.standard_normal(n), sigma, np.zeros(n))
            errs.append(assure_estimate(d, fam, beta).value - W)
        rate = math.log(n) ** 2 / n + math.log(n) / n * 0.25
        return np.mean(np.square(errs)), rate

    m1, r1 = mse(200)
    m2, r2 = mse(3200)
    assert m2 <= 3 * (m1 / r1) * r2


# ---------------------------------------------------------------- derivatives


@pytest.mark.parametrize("y, k, s, d, h", [(1.0, 0.0, 1.0, 0.3, 0.5), (-2.0, 0.5, 2.0, -1.5, 0.25), (0.4, 0.4, 0.7, 0.4001, 1.0)])
def test_threshold_derivatives_of_summand(y, k, s, d, h):
    """The threshold-derivative kernels match finite differences of the summand itself."""
    data = Dataset([y] * 3, [s] * 3, [k] * 3)
    fam = ThresholdFamily()
    beta = d - k
    g = assure_derivative(data, fam, [beta], 1, h)[0]
    step = 1e-5
    f = lambda b: assure_summand(y, Context(s, k), k + b, h)
    assert g == pytest.approx((f(beta + step) - f(beta - step)) / (2 * step), rel=1e-6, abs=1e-8)
    H = assure_derivative(data, fam, [beta], 2, h)[0, 0]
    assert H == pytest.approx((f(beta + step) - 2 * f(beta) + f(beta - step)) / step**2, rel=1e-3, abs=1e-4)


def _fd_grad(data, fam, b, h):
    g = np.zeros(fam.dim)
    for j in range(fam.dim):
        step = 1e-4 * (1 + abs(b[j]))
        e = np.zeros(fam.dim)
        e[j] = step
        g[j] = (assure_estimate(data, fam, b + e, h).value - assure_estimate(data, fam, b - e, h).value) / (2 * step)
    return g


@pytest.mark.parametrize(
    "fam, beta",
    [
        (ThresholdFamily(), [0.4]),
        (TStatFamily(), [-0.8]),
        (LinearShrinkFamily(), [0.3, 1.2]),
        (CloseGaussFamily(), [0.2, 0.1, -0.3, 0.4]),
    ],
)
def test_gradient_and_hessian_match_finite_differences(fam, beta):
    data, _ = make_data(150, seed=12, cost=0.25)
    b = np.array(beta)
    g = assure_derivative(data, fam, b)
    assert np.allclose(g, _fd_grad(data, fam, b, None), rtol=1e-5, atol=1e-7)
    H = assure_derivative(data, fam, b, order=2)
    for j in range(fam.dim):
        step = 1e-4 * (1 + abs(b[j]))
        e = np.zeros(fam.dim)
        e[j] = step
        fd = (assure_derivative(data, fam, b + e) - assure_derivative(data, fam, b - e)) / (2 * step)
        assert np.allclose(H[:, j], fd, rtol=1e-5, atol=1e-6)
    assert np.allclose(H, H.T, atol=1e-8)


def test_threshold_gradient_is_mean_kernel_derivative(data):
    h = 0.4
    g = assure_derivative(data, ThresholdFamily(), [0.2], 1, h)
    step = 1e-6
    w = lambda b: assure_summands(data, ThresholdFamily(), [b], h)
    assert g[0] == pytest.approx(np.mean((w(0.2 + step) - w(0.2 - step)) / (2 * step)), rel=1e-6)


def test_derivative_errors(data):
    fin = FiniteFamily(((ThresholdFamily(), [0.0]),))
    with pytest.raises(UnsupportedOperationError):
        assure_derivative(data, fin, [0])
    with pytest.raises(PreconditionError):
        assure_derivative(data, ThresholdFamily(), [0.0], order=3)


# ---------------------------------------------------------------- coupled bootstrap


@pytest.mark.parametrize("y", [-1.0, 0.0, 2.5])
def test_cb_summand_at_threshold(y):
    assert cb_summand(y, Z0, y, 0.5) == pytest.approx(y / 2 - 0.7978845608028654, abs=1e-15)


def test_cb_rejects_bad_eps(data):
    with pytest.raises(PreconditionError):
        cb_summand(1.0, Z0, 0.0, 0.0)
    with pytest.raises(PreconditionError):
        cb_estimate(data, ThresholdFamily(), [0.0], eps=-1.0)


def test_cb_default_eps(data):
    assert default_eps(32) == pytest.approx(0.5)
    assert cb_estimate(data, ThresholdFamily(), [0.0]).h == pytest.approx(data.n**-0.2)


def test_cb_is_rao_blackwellized_split():
    rng = np.random.default_rng(1)
    y, k, s, d, eps, m = 0.8, 0.2, 1.3, 0.5, 0.4, 200_000
    w = rng.standard_normal(m)
    y1 = y + eps * s * w
    y2 = y - s * w / eps
    sample = (y2 - k) * (y1 > d)
    se = sample.std() / math.sqrt(m)
    assert abs(sample.mean() - cb_summand(y, Context(s, k), d, eps)) <= 4 * se


def test_cb_bias_is_quadratic_in_eps():
    mu, d, s = 1.0, 0.3, 1.0
    target = mu * stats.norm.cdf((mu - d) / s)

    def bias(eps):
        return gh_expectation(lambda y: cb_summand(y, Context(s, 0.0), d, eps), mu, s, nodes=120) - target

    ratio = bias(0.4) / bias(0.2)
    assert 2.5 <= ratio <= 5.5


# ---------------------------------------------------------------- Poisson


@pytest.mark.parametrize("y, k, c, expected", [(3, 1, 2, 2.0), (2, 1, 2, -1.0), (1, 1, 2, 0.0), (0, 0.5, 0, -0.5)])
def test_poisson_summand_examples(y, k, c, expected):
    assert poisson_summand(y, k, c) == expected


def test_poisson_zero_cutoff_is_mean_gain():
    data = Dataset([0, 1, 4, 2, 7], [1.0] * 5, [0.3, 0.1, 0.0, 2.0, 1.0], mode="poisson")
    est = poisson_assure(data, ThresholdFamily(), [-5.0])
    assert est.value == pytest.approx(np.mean(data.y - data.cost), rel=1e-15)
    assert est.h == 0.0


@pytest.mark.parametrize("mu", [0.5, 1.5, 5.0])
@pytest.mark.parametrize("k", [0.0, 0.5])
@pytest.mark.parametrize("c", [0, 1, 2, 5, 10])
def test_poisson_exactly_unbiased(mu, k, c):
    ys = np.arange(0, 81)
    pmf = stats.poisson.pmf(ys, mu)
    e = float(np.sum(pmf * poisson_summand(ys, k, c)))
    assert e == pytest.approx((mu - k) * stats.poisson.sf(c - 1, mu), abs=1e-12)


@given(st.floats(0.01, 200), st.integers(0, 400))
def test_poisson_tail_matches_scipy(mu, c):
    assert poisson_tail(mu, c) == pytest.approx(stats.poisson.sf(c - 1, mu), rel=1e-9, abs=1e-300)


@pytest.mark.parametrize("mu, c", [(1e4, 1), (1e5, 99_000), (0.5, 40), (3.0, 120), (200.0, 400)])
def test_poisson_tail_extremes(mu, c):
    # large rates with low thresholds, and tails down in the subnormal range
    assert poisson_tail(mu, c) == pytest.approx(stats.poisson.sf(c - 1, mu), rel=1e-9, abs=1e-300)


def test_poisson_rejects_non_counts():
    with pytest.raises(DomainError):
        poisson_summand(1.5, 0.0, 1)
    with pytest.raises(DomainError):
        poisson_summand(-1.0, 0.0, 1)


def test_poisson_method_needs_poisson_mode(data):
    with pytest.raises(PreconditionError):
        estimate(data.replace(mode="poisson"), ThresholdFamily(), [0.0], method="assure")


# ---------------------------------------------------------------- oracles


def test_oracle_welfare_example():
    data = Dataset([0.0, 0.0, 0.0, 0.0], [1.0] * 4, [0.0] * 4)
    truth = GroundTruth(np.array([1.0, -1.0, 1.0, -1.0]))
    assert oracle_welfare(data, truth, ThresholdFamily(), [0.0]) == pytest.approx(0.341344746068542949, abs=1e-15)


def test_oracle_welfare_limits():
    data, mu = make_data(30, seed=2, cost=0.4)
    assert oracle_welfare(data, GroundTruth(mu), WIDE, [-1e7]) == pytest.approx(np.mean(mu - 0.4), rel=1e-14)
    flat = GroundTruth(data.cost.copy())
    for b in (-3.0, 0.0, 2.0):
        assert oracle_welfare(data, flat, ThresholdFamily(), [b]) == 0.0


def test_poisson_oracle_uses_integer_tail():
    data = Dataset([0, 1, 2], [1.0] * 3, [0.5] * 3, mode="poisson")
    mu = np.array([0.5, 1.5, 5.0])
    w = oracle_welfare(data, GroundTruth(mu), ThresholdFamily(), [1.2])
    assert w == pytest.approx(np.mean((mu - 0.5) * stats.poisson.sf(1, mu)), rel=1e-14)


def test_realized_utility_matches_loop():
    rng = np.random.default_rng(4)
    for _ in range(20):
        data, mu = make_data(25, seed=int(rng.integers(1e6)), cost=rng.normal())
        b = rng.normal()
        loop = sum((m - k) for y, k, m in zip(data.y, data.cost, mu) if y > k + b) / data.n
        assert realized_utility(data, GroundTruth(mu), ThresholdFamily(), [b]) == pytest.approx(loop, rel=1e-13, abs=1e-15)
    assert realized_utility(data, GroundTruth(mu), WIDE, [1e7]) == 0.0
    assert realized_utility(data, GroundTruth(mu), WIDE, [-1e7]) == pytest.approx(np.mean(mu - data.cost))


def test_truth_length_checked(data):
    with pytest.raises(PreconditionError):
        oracle_welfare(data, GroundTruth(np.zeros(3)), ThresholdFamily(), [0.0])


def test_contexts_summand_vectorizes(data):
    c = Contexts.of(data)
    w = assure_summand(data.y, c, data.cost + 0.3, 0.5)
    assert np.array_equal(w, assure_summands(data, ThresholdFamily(), [0.3], 0.5))
