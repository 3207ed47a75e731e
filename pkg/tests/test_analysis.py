"""Generator evaluation, martingale residuals, drift fitting, and
occupation-measure estimates, each checked against an independent route."""

import math

import numpy as np
import pytest

from latbd.analysis import (
    CylindricalFunction,
    LyapunovValidationError,
    drift_check,
    eval_generator,
    inverse_square_weight,
    martingale_residual,
    occupancy_indicator,
    occupation_measure,
    probe_cylindrical,
    sample_configurations,
    truncated_mass,
    truncated_occupancy,
    validate_lyapunov,
)
from latbd.core import Configuration, FiniteKernel, Window, l1_norm
from latbd.rates import (
    BPDLParams,
    RateModel,
    bpdl_rates,
    contact_rates,
)


def nn_kernel(v):
    return FiniteKernel(1, {(-1,): v, (0,): v, (1,): v})


def desk_bpdl():
    return bpdl_rates(BPDLParams(b0=1.0, m=1.0,
                                 a_plus=nn_kernel(0.3), a_minus=nn_kernel(0.2)))


def frozen_model():
    return RateModel(name="frozen", birth=lambda x, e: 0.0,
                     death=lambda x, e: 0.0, interaction_radius=0, dim=1)


EXP_WEIGHT = lambda x: math.exp(-l1_norm(x))  # noqa: E731


# -- cylindrical observables ------------------------------------------------

def test_probe_accepts_honest_observable():
    win = Window(1, 5)
    rpt = probe_cylindrical(truncated_occupancy((0,), 10), win, seed=1)
    assert rpt["local"] and rpt["increments_bounded"]
    rpt2 = probe_cylindrical(truncated_mass(2, 7), win, seed=2)
    assert rpt2["local"] and rpt2["increments_bounded"]


def test_probe_catches_nonlocal_claim():
    win = Window(1, 5)
    bad = CylindricalFunction(support_radius=0,
                              evaluator=lambda e: float(e.occupancy((3,))),
                              increment_bound=1.0)
    rpt = probe_cylindrical(bad, win, n_probes=500, seed=3)
    assert not rpt["local"]
    assert rpt["first_failure"]["kind"] == "support"


def test_probe_catches_understated_increment():
    win = Window(1, 3)
    bad = CylindricalFunction(support_radius=0,
                              evaluator=lambda e: 2.0 * e.occupancy((0,)),
                              increment_bound=1.0)
    rpt = probe_cylindrical(bad, win, n_probes=500, seed=4)
    assert not rpt["increments_bounded"]


# -- generator evaluation ---------------------------------------------------

def test_generator_of_constant_vanishes():
    const = CylindricalFunction(0, lambda e: 7.7, 0.0)
    win = Window(1, 4)
    rng = np.random.default_rng(5)
    for model in (desk_bpdl(), contact_rates(1.5)):
        for _ in range(20):
            eta = Configuration(win, {(int(i),): 1 + int(rng.integers(0, 3))
                                      for i in rng.integers(-4, 5, 3)})
            assert eval_generator(const, eta, model) == 0.0


def test_generator_contact_neighbor_example():
    lam = 2.0
    win = Window(1, 4)
    eta = Configuration(win, {(1,): 1})
    F = truncated_occupancy((0,), cap=50)
    # only the birth at the origin moves F: rate lam * (one occupied neighbor)
    assert eval_generator(F, eta, contact_rates(lam)) == pytest.approx(lam)


def test_generator_single_site_balance():
    model = bpdl_rates(BPDLParams(b0=1.0, m=1.0, a_plus=FiniteKernel(1, {}),
                                  a_minus=FiniteKernel(1, {})))
    win = Window(1, 0)
    eta = Configuration(win, {(0,): 1})
    F = truncated_occupancy((0,), cap=10)
    # birth raises F by 1 at rate 1, death lowers it by 1 at rate 1
    assert eval_generator(F, eta, model) == pytest.approx(0.0, abs=1e-15)


def test_generator_linear_in_observable():
    win = Window(1, 3)
    F1 = truncated_occupancy((0,), 20)
    F2 = truncated_mass(2, 30)
    rng = np.random.default_rng(6)
    model = desk_bpdl()
    for _ in range(10):
        al, be = rng.normal(size=2)
        combo = CylindricalFunction(
            3, lambda e, al=al, be=be: al * F1(e) + be * F2(e), abs(al) + abs(be))
        eta = Configuration(win, {(int(i),): 1 + int(rng.integers(0, 3))
                                  for i in rng.integers(-3, 4, 2)})
        lhs = eval_generator(combo, eta, model)
        rhs = al * eval_generator(F1, eta, model) \
            + be * eval_generator(F2, eta, model)
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_generator_matches_matrix_route():
    """On a capped instance the pointwise generator must equal the
    generator-matrix row applied to the observable's value vector."""
    from latbd.oracle import CappedStateSpace, build_generator, cap_births

    space = CappedStateSpace(sites=((-1,), (0,), (1,)), cap=3)
    model = cap_births(desk_bpdl(), 3)
    gen = build_generator(space, model)
    for F in (truncated_occupancy((0,), 10), truncated_mass(1, 8),
              occupancy_indicator((1,))):
        f_vec = np.array([F(space.config_of(s)) for s in range(space.n_states)])
        qf = gen.Q @ f_vec
        for s in range(space.n_states):
            direct = eval_generator(F, space.config_of(s), model)
            assert direct == pytest.approx(qf[s], abs=1e-12)


# -- martingale residual ----------------------------------------------------

def test_residual_zero_horizon_exact():
    out = martingale_residual(truncated_occupancy((0,), 10), contact_rates(1.0),
                              Configuration(Window(1, 4), {(0,): 1}),
                              t=0.0, replicates=50, seed=7)
    assert out["residual"] == 0.0
    assert out["stderr"] == 0.0


def test_residual_constant_observable_exact():
    const = CylindricalFunction(0, lambda e: 3.3, 0.0)
    out = martingale_residual(const, desk_bpdl(),
                              Configuration(Window(1, 3), {(0,): 2}),
                              t=0.7, replicates=50, seed=8)
    assert out["residual"] == 0.0


@pytest.mark.parametrize("algorithm", ["gillespie", "thinning"])
def test_residual_contact_within_three_se(algorithm):
    out = martingale_residual(truncated_occupancy((0,), 10), contact_rates(1.0),
                              Configuration(Window(1, 4), {(0,): 1}),
                              t=1.0, replicates=3000, seed=9,
                              algorithm=algorithm)
    assert out["stderr"] > 0.0
    assert abs(out["residual"]) <= 3.0 * out["stderr"]


def test_residual_bpdl_battery_member():
    out = martingale_residual(truncated_mass(2, 30), desk_bpdl(),
                              Configuration(Window(1, 3), {(0,): 1}),
                              t=0.5, replicates=3000, seed=10)
    assert abs(out["residual"]) <= 3.0 * out["stderr"]


def test_residual_detects_wrong_generator():
    """Evaluating the residual with a mismatched model must NOT center on
    zero: the statistic has power, it is not green by construction."""
    from latbd.engine import run

    F = truncated_occupancy((0,), 10)
    window = Window(1, 4)
    eta0 = Configuration(window, {(0,): 1})
    true_model = contact_rates(1.0)
    wrong = contact_rates(2.0)  # rates used for the integral only
    cache = {}

    def lf(counts):
        key = tuple(sorted(counts.items()))
        if key not in cache:
            cache[key] = eval_generator(F, Configuration(window, dict(counts)),
                                        wrong)
        return cache[key]

    reps = 2000
    samples = np.empty(reps)
    for rep in range(reps):
        traj = run(true_model, window, eta0, 1.0, seed=11, replicate=rep)
        counts, integral, prev = eta0.counts_dict(), 0.0, 0.0
        for ev in traj.events:
            integral += lf(counts) * (ev.time - prev)
            counts[ev.site] = counts.get(ev.site, 0) + ev.delta
            if counts[ev.site] == 0:
                del counts[ev.site]
            prev = ev.time
        integral += lf(counts) * (1.0 - prev)
        samples[rep] = F(traj.final) - F(eta0) - integral
    resid = samples.mean()
    se = samples.std(ddof=1) / math.sqrt(reps)
    assert abs(resid) > 3.0 * se


# -- energy weight validation ----------------------------------------------

def test_validate_lyapunov_accepts_inverse_square():
    model = desk_bpdl()
    spec = validate_lyapunov(inverse_square_weight, EXP_WEIGHT,
                             model.dominating_kernel, ball_radius=50)
    assert spec.c_va > 0
    assert spec.c1 is None and spec.c2 is None
    # independent ratio scan for the kernel constant
    a = model.dominating_kernel
    worst = 0.0
    for x in range(-50, 51):
        s = sum(inverse_square_weight((x - z,)) * a((z,)) for z in (-1, 0, 1))
        worst = max(worst, s / inverse_square_weight((x,)))
    assert spec.c_va == pytest.approx(worst, rel=1e-12)


def test_validate_lyapunov_rejects_uneven():
    lopsided = lambda x: math.exp(-l1_norm(x)) * (1.1 if x[0] > 0 else 1.0)  # noqa: E731
    with pytest.raises(LyapunovValidationError, match="even"):
        validate_lyapunov(lopsided, EXP_WEIGHT, nn_kernel(0.1), ball_radius=10)


def test_validate_lyapunov_rejects_nonpositive():
    with pytest.raises(LyapunovValidationError, match="positive"):
        validate_lyapunov(lambda x: 1.0 - 0.2 * l1_norm(x), EXP_WEIGHT,
                          nn_kernel(0.1), ball_radius=10)


def test_validate_lyapunov_rejects_decaying_ratio():
    # energy falling faster than the comparison weight: sublevel sets of the
    # energy no longer confine the configuration
    with pytest.raises(LyapunovValidationError, match="nondecreasing"):
        validate_lyapunov(lambda x: math.exp(-2.0 * l1_norm(x)), EXP_WEIGHT,
                          nn_kernel(0.1), ball_radius=10)


# -- drift check ------------------------------------------------------------

def bpdl_spec():
    model = desk_bpdl()
    return model, validate_lyapunov(inverse_square_weight, EXP_WEIGHT,
                                    model.dominating_kernel, ball_radius=50)


def test_drift_empty_config_frozen_value():
    model, spec = bpdl_spec()
    win = Window(1, 50)
    report = drift_check(spec, model, [Configuration.empty(win)],
                         c2_grid=[1.0])
    v0, lv0 = report.samples[0]
    assert v0 == 0.0
    # oracle: direct summation of the birth intensity times the weight
    direct = math.fsum(inverse_square_weight(x) for x in win.sites)
    assert lv0 == pytest.approx(direct, rel=1e-12)
    assert lv0 == pytest.approx(3.1137506027330697, abs=1e-9)


def test_drift_fit_zero_violations_on_fitting_sample():
    model, spec = bpdl_spec()
    sample = sample_configurations(Window(1, 10), 10_000, seed=3)
    report = drift_check(spec, model, sample)
    assert report.fitted
    assert report.n_checked == 10_000
    assert report.n_violations == 0
    assert report.c1 > 0 and report.c2 > 0
    assert report.worst_margin > -1e-9
    ratios = [row["ratio"] for row in report.fit_table]
    assert report.c1 / report.c2 == pytest.approx(min(ratios))


def test_drift_fitted_constants_transfer_with_headroom():
    # a finite-sample fit can sit a hair under the essential sup, so the
    # transfer claim carries explicit 10% headroom on the level constant
    model, spec = bpdl_spec()
    win = Window(1, 10)
    fit = drift_check(spec, model, sample_configurations(win, 10_000, seed=3))
    fixed = spec.with_constants(1.1 * fit.c1, fit.c2)
    for seed in (99, 1234):
        chk = drift_check(fixed, model, sample_configurations(win, 10_000,
                                                              seed=seed))
        assert not chk.fitted
        assert chk.n_violations == 0, chk.first_violation


def test_drift_frozen_model_trivial_constants():
    model = frozen_model()
    spec = validate_lyapunov(inverse_square_weight, EXP_WEIGHT,
                             nn_kernel(0.1), 20).with_constants(0.0, 0.0)
    sample = sample_configurations(Window(1, 5), 200, seed=12)
    report = drift_check(spec, model, sample)
    assert report.satisfied
    assert report.worst_margin == 0.0  # LV and both constants all vanish


# -- occupation measure -----------------------------------------------------

def occupation_spec(c1, c2):
    return validate_lyapunov(inverse_square_weight, EXP_WEIGHT,
                             nn_kernel(0.1), 20).with_constants(c1, c2)


def test_occupation_frozen_model_full_mass():
    out = occupation_measure(frozen_model(), Window(1, 3), [1.0, 5.0],
                             [0.0, 2.0], occupation_spec(1.0, 1.0),
                             seed=13, replicates=20)
    for row in out["rows"]:
        assert row["mu_hat"] == 1.0
        assert row["se"] == 0.0
    assert out["all_ok"]


def test_occupation_level_above_reach_is_full():
    out = occupation_measure(contact_rates(1.0), Window(1, 3), [2.0], [100.0],
                             occupation_spec(1.0, 1.0), seed=14, replicates=50)
    (row,) = out["rows"]
    assert row["mu_hat"] == 1.0


def test_occupation_requires_constants():
    spec = validate_lyapunov(inverse_square_weight, EXP_WEIGHT,
                             nn_kernel(0.1), 20)
    with pytest.raises(ValueError, match="drift constants"):
        occupation_measure(contact_rates(1.0), Window(1, 3), [1.0], [5.0],
                           spec, seed=15, replicates=5)


def test_occupation_bpdl_clears_drift_floor():
    model, spec = bpdl_spec()
    win = Window(1, 5)
    fit = drift_check(spec, model, sample_configurations(win, 4000, seed=16))
    fixed = spec.with_constants(fit.c1, fit.c2)
    out = occupation_measure(model, win, [10.0, 50.0], [5.0, 10.0, 20.0],
                             fixed, seed=17, replicates=200)
    for row in out["rows"]:
        assert row["ok"], row
    # the floors must not all be vacuous for the check to mean anything
    assert max(row["floor"] for row in out["rows"]) > 0.5


def test_occupation_time_accounting_sums_to_horizon():
    model, spec = bpdl_spec()
    win = Window(1, 3)
    fit = drift_check(spec, model, sample_configurations(win, 1000, seed=18))
    fixed = spec.with_constants(fit.c1, fit.c2)
    out = occupation_measure(model, win, [3.0], [0.5, 1e9], fixed,
                             seed=19, replicates=40)
    rows = {row["r"]: row for row in out["rows"]}
    assert rows[1e9]["mu_hat"] == 1.0
    assert 0.0 < rows[0.5]["mu_hat"] < 1.0
