import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from assure.classes import LinearShrinkFamily, ThresholdFamily
from assure.errors import ConfigError, PreconditionError
from assure.estimators import oracle_welfare
from assure.model import Dataset, GroundTruth
from assure.sim import (
    ScenarioSpec,
    SimReport,
    assure_bias,
    bias_bound,
    bias_envelope_check,
    draw_dataset,
    draw_population,
    in_class_oracle,
    jackknife_slope,
    loglog_slope,
    parse_method,
    rate_experiment,
    run_reps,
    run_scenario,
    sup_gap,
    true_welfare,
    uniform_gap_experiment,
)

SMALL = ScenarioSpec(n=60, reps=3, seed=11, grid_size=41, starts=2)


# ---------------------------------------------------------------- spec


@pytest.mark.parametrize(
    "changes, error",
    [
        ({"n": 2}, PreconditionError),
        ({"reps": 0}, PreconditionError),
        ({"seed": -1}, PreconditionError),
        ({"seed": 2**64}, PreconditionError),
        ({"mode": "binomial"}, ConfigError),
        ({"generator": {"kind": "uniform"}}, ConfigError),
        ({"generator": {"kind": "gaussian_prior", "m": math.inf}}, ConfigError),
        ({"sigma_source": {"s": 1.0}}, ConfigError),
        ({"mode": "poisson", "likelihood_misspec": {"kind": "student_t", "df": 5}}, ConfigError),
    ],
)
def test_spec_validation(changes, error):
    with pytest.raises(error):
        SMALL.replace(**changes)


def test_spec_json_round_trip():
    spec = SMALL.replace(generator={"kind": "bimodal", "a": 1.5, "weight": 0.3}, families={"ls": {"kind": "linear_shrink"}})
    again = ScenarioSpec.from_json(json.dumps(spec.to_dict()))
    assert again == spec
    with pytest.raises(ConfigError):
        ScenarioSpec.from_dict({"n": 10, "bogus": 1})
    with pytest.raises(ConfigError):
        ScenarioSpec.from_json("{not json")


# ---------------------------------------------------------------- generators


def test_population_fixed_and_noise_per_rep():
    pop = draw_population(SMALL, 0)
    again = draw_population(SMALL, 0)
    assert np.array_equal(pop.mu, again.mu)
    d0, d1 = draw_dataset(SMALL, pop, 0), draw_dataset(SMALL, pop, 1)
    assert not np.array_equal(d0.y, d1.y)
    assert np.array_equal(d0.y, draw_dataset(SMALL, pop, 0).y)
    assert not np.array_equal(draw_population(SMALL, 1).mu, pop.mu)


def test_two_point_generator():
    spec = SMALL.replace(n=400, generator={"kind": "two_point", "h": 2.0, "sign": -1.0})
    assert np.all(draw_population(spec).mu == -2.0 / 20.0)


def test_bimodal_exact_proportions():
    spec = SMALL.replace(n=100, generator={"kind": "bimodal", "a": 1.0, "weight": 0.3, "center": 0.5, "exact": True})
    mu = draw_population(spec).mu
    assert np.sum(mu == 1.5) == 30 and np.sum(mu == -0.5) == 70


def test_lognormal_sigma_and_covariates():
    spec = SMALL.replace(
        n=20000,
        sigma_source={"kind": "lognormal", "meanlog": 0.0, "sdlog": 0.5},
        covariate_model={"kind": "mu_plus_t_noise", "scale": 1.0, "df": 10},
    )
    pop = draw_population(spec)
    assert np.mean(np.log(pop.sigma)) == pytest.approx(0.0, abs=0.02)
    assert np.std(np.log(pop.sigma)) == pytest.approx(0.5, abs=0.02)
    t = (pop.X[:, 0] - pop.mu) / pop.sigma
    assert np.var(t) == pytest.approx(10 / 8, rel=0.08)


def test_student_t_noise_is_not_rescaled():
    spec = SMALL.replace(n=50000, likelihood_misspec={"kind": "student_t", "df": 5})
    pop = draw_population(spec)
    d = draw_dataset(spec, pop, 0)
    assert np.var((d.y - pop.mu) / pop.sigma) == pytest.approx(5 / 3, rel=0.1)


def test_from_file_generator(tmp_path):
    path = tmp_path / "pop.csv"
    path.write_text("mu,sigma,k\n" + "".join(f"{i / 10},{1 + i / 100},0.25\n" for i in range(10)))
    spec = SMALL.replace(
        n=10,
        generator={"kind": "from_file", "path": str(path)},
        sigma_source={"kind": "from_file", "path": str(path)},
        cost_source={"kind": "from_file", "path": str(path)},
    )
    pop = draw_population(spec)
    assert pop.mu[3] == 0.3 and pop.sigma[3] == 1.03 and np.all(pop.cost == 0.25)
    with pytest.raises(ConfigError):
        draw_population(spec.replace(n=11))


def test_poisson_population():
    spec = SMALL.replace(mode="poisson", generator={"kind": "gaussian_prior", "m": 0.0, "s": 3.0})
    pop = draw_population(spec)
    assert np.all(pop.mu >= 0) and np.all(pop.sigma == 1.0)
    d = draw_dataset(spec, pop, 0)
    assert d.mode == "poisson" and np.all(d.y == np.floor(d.y))


# ---------------------------------------------------------------- methods and oracles


@pytest.mark.parametrize("mid", ["assure:threshold", "cb:linear_shrink", "plugin:close_gauss", "success_rule", "pvalue(0.05)"])
def test_parse_method_ok(mid):
    assert parse_method(mid).id == mid


@pytest.mark.parametrize("mid, mode", [("assure", "gaussian"), ("foo:threshold", "gaussian"), ("pvalue(x)", "gaussian"), ("pvalue(1.5)", "gaussian"), ("assure:threshold", "poisson"), ("poisson_assure:threshold", "gaussian")])
def test_parse_method_errors(mid, mode):
    with pytest.raises((ConfigError, PreconditionError)):
        parse_method(mid, mode)


def test_unknown_family_name():
    with pytest.raises(ConfigError):
        run_reps(SMALL, ["assure:nope"])


def test_in_class_oracle_beats_dense_scan():
    pop = draw_population(SMALL.replace(n=200))
    data = Dataset(np.zeros(200), pop.sigma, pop.cost)
    fam = ThresholdFamily(box=((-3, 3),))
    orc = in_class_oracle(data, pop.mu, fam)
    scan = max(true_welfare(data, pop.mu, fam, [b]) for b in np.linspace(-3, 3, 3001))
    assert orc.value >= scan
    assert orc.value == pytest.approx(oracle_welfare(data, GroundTruth(pop.mu), fam, orc.beta), rel=1e-15)


def test_in_class_oracle_multidim():
    pop = draw_population(SMALL.replace(n=200))
    data = Dataset(np.zeros(200), pop.sigma, pop.cost)
    fam = LinearShrinkFamily()
    orc = in_class_oracle(data, pop.mu, fam, starts=8)
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = [rng.uniform(-3, 3), math.exp(rng.uniform(math.log(0.01), math.log(100)))]
        assert orc.value >= true_welfare(data, pop.mu, fam, b) - 1e-12


# ---------------------------------------------------------------- scenarios


def test_single_rep_single_method():
    rep = run_scenario(SMALL.replace(reps=1), ["assure:threshold"])
    assert len(rep.rows) == 1 and rep.summary["assure:threshold"]["reps"] == 1


def test_success_rule_welfare_is_threshold_zero():
    spec = SMALL.replace(reps=4)
    rows = run_reps(spec, ["success_rule"])
    pop = draw_population(spec)
    for r in rows:
        d = draw_dataset(spec, pop, r["rep"])
        assert r["welfare"] == oracle_welfare(d, GroundTruth(pop.mu), ThresholdFamily(), [0.0])
        assert r["beta_hat"] == [0.0]


def test_report_is_deterministic_across_workers():
    spec = SMALL.replace(reps=4)
    methods = ["assure:threshold", "cb:tstat", "plugin:linear_shrink"]
    a = run_scenario(spec, methods, threads=1).to_json()
    b = run_scenario(spec, methods, threads=3).to_json()
    assert a == b


def test_regret_sanity_and_summary():
    spec = SMALL.replace(n=200, reps=6, cost_source={"kind": "constant", "k": 0.3})
    methods = ["assure:threshold", "cb:threshold", "assure:linear_shrink", "plugin:linear_shrink", "success_rule", "pvalue(0.05)"]
    rep = run_scenario(spec, methods)
    assert all(rep.regret_ok().values())
    assert [r["rep"] for r in rep.rows] == sorted(r["rep"] for r in rep.rows)
    for r in rep.rows:
        assert r["regret"] == pytest.approx(r["oracle_welfare"] - r["utility"])
        assert r["oracle_welfare"] >= r["welfare"] - 1e-12
    q = rep.summary["assure:threshold"]["welfare"]["quantiles"]
    assert q["0.05"] <= q["0.5"] <= q["0.95"]
    buf = io.StringIO()
    rep.write_csv(buf)
    assert buf.getvalue().splitlines()[0].startswith("rep,method,welfare")
    assert len(buf.getvalue().splitlines()) == 1 + len(rep.rows)


def test_redraw_mu_and_ensemble_scenario():
    spec = SMALL.replace(n=80, reps=2, redraw_mu=True, covariate_model={"kind": "mu_plus_t_noise", "scale": 1.0, "df": 10})
    rep = run_scenario(spec, ["assure:ensemble", "plugin:ensemble"])
    assert len(rep.rows) == 4
    assert rep.rows[0]["oracle_welfare"] != rep.rows[2]["oracle_welfare"]


def test_poisson_scenario():
    spec = SMALL.replace(mode="poisson", generator={"kind": "gaussian_prior", "m": 2.0, "s": 1.0}, cost_source={"kind": "constant", "k": 1.5})
    rep = run_scenario(spec, ["poisson_assure:threshold", "success_rule"])
    assert all(rep.regret_ok().values())


def test_two_point_permissive_edge_and_small_regret():
    # mean regret below 0.05 h / sqrt(n); holds for h >= 5 (see notes for smaller h)
    n, h = 1000, 5.0
    spec = ScenarioSpec(n=n, reps=400, seed=2, generator={"kind": "two_point", "h": h}, grid_size=201)
    rep = run_scenario(spec, ["assure:threshold"])
    assert rep.rows[0]["oracle_beta"] == [-10.0]
    assert rep.summary["assure:threshold"]["regret"]["mean"] <= 0.05 * h / math.sqrt(n)


# ---------------------------------------------------------------- rates


def test_loglog_slope_exact_power_law():
    n = np.array([100, 400, 1600, 6400])
    assert loglog_slope(n, 3.0 * n**-0.5) == pytest.approx(-0.5, rel=1e-12)
    per_rep = (3.0 * n**-1.0)[:, None] * np.ones((4, 5))
    s, se = jackknife_slope(n, per_rep)
    assert s == pytest.approx(-1.0) and se == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(loglog_slope(n, [1.0, 0.0, 1.0, 1.0]))


@pytest.mark.parametrize("n_list, reps", [([100, 200, 400], 2), ([100, 50, 400, 800], 2), ([2, 100, 200, 400], 2), ([100, 200, 400, 800], 0)])
def test_rate_experiment_preconditions(n_list, reps):
    with pytest.raises(PreconditionError):
        rate_experiment(SMALL, n_list, reps)


def test_rate_experiment_table_shape():
    tab = rate_experiment(SMALL, [50, 100, 200, 400], 3)
    assert tab.per_rep.shape == (4, 3) and len(tab.mean) == 4
    assert set(tab.to_dict()) == {"measure", "rows", "slope", "slope_stderr"}


def test_uniform_gap_single_point_is_pointwise_gap():
    spec = SMALL.replace(n=100)
    pop = draw_population(spec)
    d = draw_dataset(spec, pop, 0)
    from assure.estimators import assure_estimate, realized_utility

    g = sup_gap(d, pop.mu, ThresholdFamily(), [[0.3]])
    direct = abs(assure_estimate(d, ThresholdFamily(), [0.3]).value - realized_utility(d, GroundTruth(pop.mu), ThresholdFamily(), [0.3]))
    assert g == pytest.approx(direct, rel=1e-13, abs=1e-15)


@settings(max_examples=20)
@given(st.floats(-5, 5))
def test_uniform_gap_translation_invariant(c):
    spec = SMALL.replace(n=100)
    pop = draw_population(spec)
    d = draw_dataset(spec, pop, 0)
    moved = Dataset(d.y + c, d.sigma, d.cost + c)
    grid = np.linspace(-2, 2, 21)[:, None]
    assert sup_gap(moved, pop.mu + c, ThresholdFamily(), grid) == pytest.approx(sup_gap(d, pop.mu, ThresholdFamily(), grid), rel=1e-9, abs=1e-11)


def test_uniform_gap_experiment_runs():
    tab = uniform_gap_experiment(SMALL, [50, 100, 200, 400], 2, grid_points=21)
    assert tab.measure == "sup_gap" and np.all(tab.per_rep > 0)
    with pytest.raises(PreconditionError):
        uniform_gap_experiment(SMALL, [50, 100, 200, 400], 2, family=LinearShrinkFamily())


# ---------------------------------------------------------------- bias envelope


def test_bias_zero_payoff_cell():
    for h in (1.0, 0.5, 0.25):
        assert abs(assure_bias(0.7, 1.3, 0.7, 0.2, h)) <= 1e-9
        assert bias_bound(0.7, 0.7, h) == 0.0


@pytest.mark.parametrize("h, bound", [(0.5, 0.0338338208091531730), (0.25, 2.09664142439069899e-5)])
def test_bias_bound_values(h, bound):
    assert bias_bound(1.0, 0.0, h) == pytest.approx(bound, rel=1e-15)
    assert abs(assure_bias(1.0, 1.0, 0.0, 0.0, h)) <= bound


def test_bias_matches_quadrature():
    from scipy import integrate

    from assure.estimators import assure_summand
    from assure.classes import Context

    f = lambda y: assure_summand(y, Context(1.0, 0.0), 0.0, 0.5) * stats.norm.pdf(y, 1.0)
    ref = integrate.quad(f, -np.inf, np.inf, epsabs=1e-14)[0] - stats.norm.cdf(1.0)
    assert assure_bias(1.0, 1.0, 0.0, 0.0, 0.5) == pytest.approx(ref, abs=1e-12)


def test_bias_envelope_grid_passes_and_reports_failures():
    table = bias_envelope_check([1.0, 0.5, 0.25], [-2, -1, -0.3, 0, 0.3, 1, 2], [-1, 0, 1], [0.5, 1, 2])
    assert table.passed and len(table.rows) == 189 and table.failures == []
    # a 2-node rule is too crude to resolve the integrand, so cells fail and are listed
    crude = bias_envelope_check([0.25], [2.0], [0.0], nodes=2)
    assert not crude.passed and crude.failures[0]["mu"] == 2.0
    with pytest.raises(PreconditionError):
        bias_envelope_check([math.nan], [0.0], [0.0])
