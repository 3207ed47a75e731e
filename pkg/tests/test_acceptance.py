"""Release acceptance battery: eleven end-to-end checks over the full stack.

Each check prints a single ``[Cnn] ... PASS``/``FAIL`` line (run with
``pytest -v -s`` to see them all) and then asserts its stated tolerance;
checks with a wall-clock budget assert that too.  The 10^5-replicate
trajectory sets are produced once in a module-scoped fixture and shared
between the matrix-oracle check and the engine cross-check.
"""

import hashlib
import math
import os
import time

import numpy as np
import pytest

from latbd import cli
from latbd.analysis import (
    CylindricalFunction,
    drift_check,
    eval_generator,
    inverse_square_weight,
    martingale_battery,
    occupation_measure,
    sample_configurations,
    standard_battery,
    validate_lyapunov,
)
from latbd.core import (
    Configuration,
    FiniteKernel,
    KernelConfigError,
    Window,
    l1_norm,
    make_kernel,
)
from latbd.coupling import (
    contraction_check,
    probe_domination_hypotheses,
    run_coupled_replicates,
)
from latbd.engine import run_replicates
from latbd.oracle import (
    CappedStateSpace,
    build_generator,
    cap_births,
    total_variation,
    transient,
)
from latbd.rates import BPDLParams, bpdl_rates, contact_rates
from latbd.survival import bracket_lambda_c, coupled_survival, estimate_survival

SEED = 20260822

# (C1) marginals vs matrix oracle: shared instances, replicates, tolerances
ORACLE_CASES = {"one-site": ((0,),), "two-site": ((0,), (1,))}
ORACLE_TIMES = (0.1, 0.5, 1.0)
ORACLE_CAP = 5
ORACLE_REPLICATES = 100_000


def _verdict(tag: str, label: str, ok: bool, detail: str) -> None:
    print(f"[{tag}] {label}: {'PASS' if ok else 'FAIL'} ({detail})")


def _desk_bpdl():
    """Crowding model with nearest-neighbour dispersal and competition."""
    return bpdl_rates(BPDLParams(
        b0=1.0, m=1.0,
        a_plus=FiniteKernel.ball_indicator(1, 1, 0.3),
        a_minus=FiniteKernel.ball_indicator(1, 1, 0.2)))


def _self_bpdl():
    """Same rate constants with on-site-only kernels.

    With competition confined to a site's own count, the death rate at any
    site reads nothing but that site's occupancy, so the pairwise death
    comparison needed for order-preserving coupled runs holds exactly; the
    nearest-neighbour variant above fails it (a more crowded neighbourhood
    raises the death rate) and serves as the refusal counterexample.
    """
    return bpdl_rates(BPDLParams(
        b0=1.0, m=1.0,
        a_plus=FiniteKernel(1, {(0,): 0.3}),
        a_minus=FiniteKernel(1, {(0,): 0.2})))


def _within_3se(p_mc: np.ndarray, p_or: np.ndarray, n: int) -> tuple[bool, float]:
    """Per-state 3-sigma comparison of an empirical law against a target.

    The binomial scale is taken from the larger of the two estimates so the
    test stays meaningful at both tails.  Returns (all within, worst z).
    """
    worst = 0.0
    ok = True
    for a, b in zip(p_mc, p_or):
        scale = max(a * (1 - a), b * (1 - b))
        se = math.sqrt(scale / n)
        if abs(a - b) > 3 * se + 1e-12:
            ok = False
        if se > 0:
            worst = max(worst, abs(a - b) / se)
    return ok, worst


@pytest.fixture(scope="module")
def capped_runs():
    """Gillespie marginals of the capped crowding model, per case and time.

    One 10^5-replicate run per window case, reduced on the fly to per-time
    state counts; both the matrix-oracle check and the engine cross-check
    consume these same counts.
    """
    out = {}
    for label, sites in ORACLE_CASES.items():
        space = CappedStateSpace(sites=sites, cap=ORACLE_CAP)
        model = cap_births(_desk_bpdl(), ORACLE_CAP)
        eta0 = Configuration(space.window, {sites[0]: 1})

        def collect(traj, space=space):
            return tuple(
                space.index_of(tuple(traj.snapshot_at(t).occupancy(s)
                                     for s in space.sites))
                for t in ORACLE_TIMES)

        t0 = time.monotonic()
        indices = run_replicates(model, space.window, eta0, max(ORACLE_TIMES),
                                 SEED, ORACLE_REPLICATES, collect=collect)
        counts = {}
        arr = np.asarray(indices)
        for j, t in enumerate(ORACLE_TIMES):
            counts[t] = np.bincount(arr[:, j], minlength=space.n_states)
        out[label] = {
            "space": space, "model": model, "eta0": eta0, "counts": counts,
            "gillespie_seconds": time.monotonic() - t0,
        }
    return out


def test_c01_matrix_oracle_agreement(capped_runs):
    n = ORACLE_REPLICATES
    ok = True
    max_tv = 0.0
    worst_z = 0.0
    slowest = 0.0
    states = 0
    for label, case in capped_runs.items():
        space, model = case["space"], case["model"]
        t0 = time.monotonic()
        gen = build_generator(space, model)
        state0 = tuple(case["eta0"].occupancy(s) for s in space.sites)
        pi0 = space.delta_distribution(state0)
        for t in ORACLE_TIMES:
            p_mc = case["counts"][t] / n
            p_or = transient(gen, pi0, t)
            tv = total_variation(p_mc, p_or)
            max_tv = max(max_tv, tv)
            within, z = _within_3se(p_mc, p_or, n)
            worst_z = max(worst_z, z)
            ok = ok and tv <= 0.02 and within
            states += space.n_states
        case_seconds = case["gillespie_seconds"] + (time.monotonic() - t0)
        slowest = max(slowest, case_seconds)
    ok = ok and slowest <= 120.0
    _verdict("C01", "capped-model marginals match the matrix oracle", ok,
             f"max tv {max_tv:.4f} <= 0.02, {states} state probabilities "
             f"within 3se (worst z {worst_z:.2f}), slowest case "
             f"{slowest:.1f}s <= 120s")
    assert ok


def test_c02_engine_cross_check(capped_runs):
    n = ORACLE_REPLICATES
    ok = True
    max_tv = 0.0
    for label, case in capped_runs.items():
        space, model = case["space"], case["model"]

        def collect(traj, space=space):
            return tuple(
                space.index_of(tuple(traj.snapshot_at(t).occupancy(s)
                                     for s in space.sites))
                for t in ORACLE_TIMES)

        indices = run_replicates(model, space.window, case["eta0"],
                                 max(ORACLE_TIMES), SEED + 1, n,
                                 algorithm="thinning", collect=collect)
        arr = np.asarray(indices)
        for j, t in enumerate(ORACLE_TIMES):
            thin = np.bincount(arr[:, j], minlength=space.n_states) / n
            tv = total_variation(case["counts"][t] / n, thin)
            max_tv = max(max_tv, tv)
            ok = ok and tv <= 0.02
    _verdict("C02", "event-driven and thinning engines agree in law", ok,
             f"max tv {max_tv:.4f} <= 0.02 over "
             f"{len(ORACLE_CASES) * len(ORACLE_TIMES)} marginals, "
             f"10^5 replicates each")
    assert ok


def test_c03_ordered_pair_coupling():
    win = Window(1, 5)
    lower0 = Configuration(win, {(0,): 1})
    upper0 = Configuration(win, {(0,): 2})
    model = _self_bpdl()

    report = run_coupled_replicates(model, model, lower0, upper0, win, 1.0,
                                    SEED, 10_000)
    thinned = run_coupled_replicates(model, model, lower0, upper0, win, 1.0,
                                     SEED + 1, 2_000, method="shared-thinning")
    # the nearest-neighbour competition variant must be refused, not coupled
    # under a domination claim: a more crowded neighbourhood raises the death
    # rate, so ordered starts can genuinely cross
    desk_probe = probe_domination_hypotheses(_desk_bpdl(), _desk_bpdl(), win,
                                             n_pairs=10_000, seed=SEED)
    refused = (not desk_probe.holds
               and desk_probe.first_failure["kind"] == "death")

    ok = (report.hypotheses_verified and report.clean
          and report.birth_times_included and report.replicates == 10_000
          and thinned.hypotheses_verified and thinned.clean
          and thinned.birth_times_included and refused)
    _verdict("C03", "ordered starts stay ordered on shared noise", ok,
             f"0 violations / {report.replicates} joint runs + "
             f"{thinned.replicates} mark-sharing runs, every lower birth "
             "fired upstairs; neighbour-competition variant refused "
             "(death-rate witness)")
    assert ok


def test_c04_cross_model_and_rate_ordering():
    pairs = (
        ("contact", 0.5, "branch", 0.5),
        ("contact", 1.0, "branch", 1.0),
        ("branch", 0.5, "branch", 1.0),
    )
    ok = True
    details = []
    for model_lo, lam_lo, model_up, lam_up in pairs:
        res = coupled_survival(lam_lo, lam_up, model_lower=model_lo,
                               model_upper=model_up, g="quadratic",
                               window_radius=10, horizon=2.0,
                               replicates=10_000, seed=SEED)
        pair_ok = (res["order_violations"] == 0
                   and res["lone_lower_births"] == 0
                   and res["indicator_violations"] == 0)
        ok = ok and pair_ok
        details.append(f"{model_lo}({lam_lo:g})<={model_up}({lam_up:g}): "
                       f"{res['order_violations']} viol")
    _verdict("C04", "cross-model and rate-ordered pairs stay dominated", ok,
             "; ".join(details) + "; 10^4 replicates each, all birth "
             "moments included")
    assert ok


def test_c05_weighted_contraction_bound():
    win = Window(1, 5)
    a0 = Configuration(win, {(0,): 1})
    b0 = Configuration(win, {(0,): 2})
    res = contraction_check(_desk_bpdl(), a0, b0, win, 0.5, 10_000, SEED,
                            times=[0.25, 0.5])
    ok = all(row["ok"] for row in res["rows"])
    detail = ", ".join(
        f"t={row['t']:g}: lhs {row['lhs']:.3f} <= bound {row['bound']:.1f}"
        f" + 3se" for row in res["rows"])
    _verdict("C05", "coupled paths obey the weighted contraction bound", ok,
             detail + f"; constant {res['c_wa']:.3f}, 10^4 replicates")
    assert ok


def test_c06_martingale_battery():
    battery = standard_battery(1)
    win = Window(1, 3)
    eta0 = Configuration(win, {(0,): 1})
    t0 = time.monotonic()
    rows = []
    for model in (contact_rates(1.0), _desk_bpdl()):
        rows.extend(martingale_battery(battery, model, eta0, 1.0, 100_000,
                                       SEED))
    elapsed = time.monotonic() - t0
    worst = max(abs(r["residual"]) / r["stderr"] for r in rows)
    ok = (all(abs(r["residual"]) <= 3.0 * r["stderr"] for r in rows)
          and len(rows) == 10 and elapsed <= 300.0)
    _verdict("C06", "generator residuals vanish for the observable battery",
             ok, f"{len(rows)} model/observable cases, worst |z| "
             f"{worst:.2f} <= 3, 10^5 replicates, {elapsed:.0f}s <= 300s")
    assert ok


def test_c07_drift_fit_and_occupation_floor():
    model = _desk_bpdl()
    win = Window(1, 50)
    spec = validate_lyapunov(inverse_square_weight,
                             lambda x: math.exp(-l1_norm(x)),
                             model.dominating_kernel, ball_radius=50)
    sample = [c for c in sample_configurations(win, 10_000, SEED,
                                               occupancy_cap=4)
              if spec.value(c) <= 100.0]
    fit = drift_check(spec, model, sample)
    occ = occupation_measure(model, win, horizons=[10.0, 50.0],
                             radii=[5.0, 10.0, 20.0],
                             lyapunov=spec.with_constants(fit.c1, fit.c2),
                             seed=SEED, replicates=100)
    worst_slack = min(row["mu_hat"] - (row["floor"] - 3 * row["se"])
                      for row in occ["rows"])
    ok = (fit.fitted and fit.satisfied and fit.n_checked == len(sample)
          and len(sample) == 10_000 and occ["all_ok"])
    _verdict("C07", "fitted energy drift yields real occupation floors", ok,
             f"fit c1 {fit.c1:.3f}, c2 {fit.c2:.3f}, "
             f"{fit.n_violations} violations / {fit.n_checked} configs; "
             f"all {len(occ['rows'])} occupation cells clear their floor "
             f"(min slack {worst_slack:.3f})")
    assert ok


def test_c08_generator_matrix_tie():
    space = CappedStateSpace(sites=((0,), (1,)), cap=4)
    model = cap_births(_desk_bpdl(), 4)
    gen = build_generator(space, model)
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for k in range(20):
        f = rng.standard_normal(space.n_states)
        F = CylindricalFunction(
            support_radius=1,
            evaluator=lambda eta, f=f: float(
                f[space.index_of(tuple(eta.occupancy(s)
                                       for s in space.sites))]),
            increment_bound=float(2.0 * np.abs(f).max()),
            name=f"random-table-{k}")
        qf = gen.Q @ f
        for idx in range(space.n_states):
            lhs = eval_generator(F, space.config_of(idx), model)
            worst = max(worst, abs(lhs - qf[idx]))
    ok = worst <= 1e-12
    _verdict("C08", "direct generator application ties the rate matrix", ok,
             f"20 random observables x {space.n_states} states, "
             f"max |difference| {worst:.2e} <= 1e-12")
    assert ok


def test_c09_survival_regimes_and_bracket():
    t0 = time.monotonic()
    low = estimate_survival(0.1, g="quadratic", window_radius=20,
                            horizon=50.0, replicates=10_000, seed=SEED)
    high = estimate_survival(4.0, g="quadratic", window_radius=20,
                             horizon=50.0, replicates=10_000, seed=SEED)
    bracket = bracket_lambda_c(g="quadratic", window_radius=20, horizon=50.0,
                               replicates=2_000, tol=0.25, seed=SEED,
                               lam_hi=4.0)
    elapsed = time.monotonic() - t0
    width = bracket.hi - bracket.lo
    ok = (low.p_hat < 0.01 and high.p_hat > 0.2 and bracket.clean
          and 0.0 < bracket.lo < bracket.hi < 4.0
          and width <= 0.25 + 1e-12 and elapsed <= 600.0)
    _verdict("C09", "extinction and survival regimes with a clean bracket",
             ok, f"p_hat(0.1) {low.p_hat:.4f} < 0.01, "
             f"p_hat(4.0) {high.p_hat:.3f} > 0.2, bracket "
             f"({bracket.lo:.3f}, {bracket.hi:.3f}) width {width:.3f} "
             f"<= 0.25 in (0, 4), {len(bracket.decisions)} guarded "
             f"decisions, {elapsed:.0f}s <= 600s")
    assert ok


def test_c10_kernel_constant_validation():
    pair = make_kernel("exp-indicator", {"q": 1.0, "c": 1.0, "k": 1}, dim=1)
    expected = math.e + 1.0 + math.exp(-1.0)
    err = abs(pair.c_wa - expected)
    try:
        make_kernel("exp-exp", {"q": 1.0, "p": 0.5, "c": 1.0}, dim=1)
        rejected = False
    except KernelConfigError:
        rejected = True
    ok = err <= 1e-9 and rejected
    _verdict("C10", "kernel constants validate and bad families reject", ok,
             f"|c_wa - (e + 1 + 1/e)| = {err:.2e} <= 1e-9; "
             "exponential family with decay slower than the weight rejected")
    assert ok


def _cli_artifact_digests(tmp_path, name: str, body: str, seed: int,
                          workers: int) -> dict:
    outdir = tmp_path / f"{name}-s{seed}-w{workers}"
    config = tmp_path / f"{name}-s{seed}-w{workers}.toml"
    config.write_text(f'output_dir = "{outdir}"\n{body}')
    rc = cli.main([str(config), "--seed", str(seed),
                   "--workers", str(workers)])
    assert rc == 0
    digests = {}
    for fname in os.listdir(outdir):
        if fname == "manifest.json":
            continue  # echoes the output directory and worker count
        with open(outdir / fname, "rb") as fh:
            digests[fname] = hashlib.sha256(fh.read()).hexdigest()
    return digests


def test_c11_byte_identical_artifacts(tmp_path):
    configs = {
        "compare": (
            'experiment = "oracle-compare"\n'
            'replicates = 4000\ntimes = [0.1, 0.5]\n'
            '[model]\nname = "bpdl"\n'
        ),
        "log": (
            'experiment = "run"\n'
            'replicates = 150\nhorizon = 2.0\n'
            '[model]\nname = "contact"\nlam = 1.5\n'
            '[window]\ndim = 1\nradius = 10\n'
        ),
    }
    ok = True
    total = 0
    for name, body in configs.items():
        first = _cli_artifact_digests(tmp_path, f"{name}-a", body, 7, 1)
        rerun = _cli_artifact_digests(tmp_path, f"{name}-b", body, 7, 1)
        fanned = _cli_artifact_digests(tmp_path, f"{name}-c", body, 7, 4)
        ok = ok and first == rerun == fanned and len(first) > 0
        total += len(first)
    _verdict("C11", "artifacts are byte-identical across reruns and workers",
             ok, f"{total} files x 3 runs (rerun + 4-worker fan-out) over "
             "2 experiment types, all digests equal")
    assert ok
