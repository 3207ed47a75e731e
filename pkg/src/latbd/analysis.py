"""Observable-level analysis of windowed birth-death dynamics.

Four instruments, all built on one generator evaluation:

* :func:`eval_generator` applies the process generator to a local observable
  at a fixed configuration (sum of rate-weighted increments).
* :func:`martingale_residual` Monte-Carlo-tests the dynamics against the
  generator: along the true process, the observable minus the time integral
  of its generator drifts nowhere.
* :func:`drift_check` verifies (or fits) a linear negative-drift inequality
  for a weighted-mass energy function.
* :func:`occupation_measure` estimates the long-run fraction of time the
  process spends at bounded energy and compares it with the lower bound the
  drift constants imply.

Time integrals along trajectories are computed exactly from the event log
(paths are piecewise constant); no quadrature is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import (Configuration, FiniteKernel, Site, Window, l1_norm,
                   validate_kernel, weighted_norm)
from .engine import run
from .rates import RateModel

__all__ = [
    "CylindricalFunction",
    "DriftReport",
    "LyapunovSpec",
    "LyapunovValidationError",
    "drift_check",
    "eval_generator",
    "inverse_square_weight",
    "martingale_battery",
    "martingale_residual",
    "occupancy_indicator",
    "occupation_measure",
    "probe_cylindrical",
    "sample_configurations",
    "standard_battery",
    "truncated_mass",
    "truncated_occupancy",
]


# --------------------------------------------------------------------------
# local observables


@dataclass(frozen=True)
class CylindricalFunction:
    """A real observable that only reads sites within an l1 ball.

    ``support_radius`` bounds the region the evaluator may depend on;
    ``increment_bound`` bounds ``|F(eta +/- one particle) - F(eta)|`` over
    all configurations and sites.  Both claims are randomized-probe-checked
    by :func:`probe_cylindrical` rather than trusted.
    """

    support_radius: int
    evaluator: Callable[[Configuration], float]
    increment_bound: float
    name: str = "F"

    def __call__(self, eta: Configuration) -> float:
        return float(self.evaluator(eta))


def truncated_occupancy(site: Site = (0,), cap: int = 10,
                        name: str | None = None) -> CylindricalFunction:
    """F(eta) = min(eta(site), cap)."""
    return CylindricalFunction(
        support_radius=l1_norm(site),
        evaluator=lambda eta: min(eta.occupancy(site), cap),
        increment_bound=1.0,
        name=name or f"occ{list(site)}^cap{cap}")


def truncated_mass(radius: int, cap: int, dim: int = 1,
                   name: str | None = None) -> CylindricalFunction:
    """F(eta) = min(total occupancy within l1 radius, cap)."""
    def ev(eta: Configuration) -> float:
        return min(sum(n for x, n in eta.items() if l1_norm(x) <= radius), cap)
    return CylindricalFunction(
        support_radius=radius, evaluator=ev, increment_bound=1.0,
        name=name or f"mass<=r{radius}^cap{cap}")


def occupancy_indicator(site: Site = (0,),
                        name: str | None = None) -> CylindricalFunction:
    """F(eta) = 1 if the site holds at least one particle, else 0."""
    return CylindricalFunction(
        support_radius=l1_norm(site),
        evaluator=lambda eta: 1.0 if eta.occupancy(site) > 0 else 0.0,
        increment_bound=1.0,
        name=name or f"occupied{list(site)}")


def standard_battery(dim: int = 1) -> tuple[CylindricalFunction, ...]:
    """Five stock observables exercising distinct shapes: capped origin
    occupancy, origin indicator, capped near-origin mass, an exponential
    origin weight, and an adjacent-pair product."""
    origin = (0,) * dim
    e1 = (1,) + (0,) * (dim - 1)
    exp_weight = CylindricalFunction(
        support_radius=0,
        evaluator=lambda eta: math.exp(-eta.occupancy(origin)),
        increment_bound=1.0 - math.exp(-1.0),
        name="exp-origin")
    pair = CylindricalFunction(
        support_radius=1,
        evaluator=lambda eta: float(min(eta.occupancy(origin), 1)
                                    * min(eta.occupancy(e1), 1)),
        increment_bound=1.0,
        name="adjacent-pair")
    return (truncated_occupancy(origin, cap=10),
            occupancy_indicator(origin),
            truncated_mass(2, cap=10, dim=dim),
            exp_weight,
            pair)


def probe_cylindrical(F: CylindricalFunction, window: Window,
                      n_probes: int = 300, seed: int = 0,
                      occupancy_cap: int = 3) -> dict:
    """Randomized audit of a local observable's declared properties.

    Checks on random configurations that (a) adding a particle strictly
    outside the support radius leaves F unchanged and (b) single-particle
    increments stay within ``increment_bound``.  Returns a report dict with
    ``local``, ``increments_bounded``, and the first counterexample if any.
    """
    rng = np.random.default_rng(seed)
    sites = window.sites
    outside = [s for s in sites if l1_norm(s) > F.support_radius]
    report = {"local": True, "increments_bounded": True, "first_failure": None}

    def random_config() -> Configuration:
        k = int(rng.integers(0, min(6, len(sites)) + 1))
        picks = rng.choice(len(sites), size=k, replace=False) if k else []
        return Configuration(window, {
            sites[int(i)]: int(rng.integers(1, occupancy_cap + 1))
            for i in picks})

    for _ in range(n_probes):
        eta = random_config()
        base = F(eta)
        if outside:
            x = outside[int(rng.integers(len(outside)))]
            if F(eta.with_delta(x, +1)) != base:
                report["local"] = False
                report["first_failure"] = {"kind": "support", "site": list(x)}
        y = sites[int(rng.integers(len(sites)))]
        jump = abs(F(eta.with_delta(y, +1)) - base)
        if eta.occupancy(y) > 0:
            jump = max(jump, abs(F(eta.with_delta(y, -1)) - base))
        if jump > F.increment_bound + 1e-12:
            report["increments_bounded"] = False
            report["first_failure"] = report["first_failure"] or {
                "kind": "increment", "site": list(y), "jump": jump}
    return report


# --------------------------------------------------------------------------
# generator evaluation


def eval_generator(F: CylindricalFunction, eta: Configuration,
                   model: RateModel) -> float:
    """Apply the process generator to F at eta.

    Sum over every window site of the birth rate times the birth increment
    of F plus the death rate times the death increment.  Sites outside F's
    support contribute only through rates multiplying zero increments, so
    the full-window sum is exact for any genuinely local F.
    """
    base = F(eta)
    total = 0.0
    for x in eta.window.sites:
        b = model.birth(x, eta)
        if b > 0.0:
            total += b * (F(eta.with_delta(x, +1)) - base)
        d = model.death(x, eta)
        if d > 0.0:
            total += d * (F(eta.with_delta(x, -1)) - base)
    return total


# --------------------------------------------------------------------------
# martingale residual


def martingale_battery(observables: Sequence[CylindricalFunction],
                       model: RateModel, eta0: Configuration, t: float,
                       replicates: int, seed: int,
                       algorithm: str = "gillespie") -> list[dict]:
    """Estimate E[F(eta_t) - F(eta_0) - integral of (generator F)(eta_s) ds]
    for several observables over one shared set of trajectories.

    For the true dynamics this expectation is zero at every t; each row's
    ``residual`` should sit within a few ``stderr`` of zero.  The time
    integral is accumulated exactly along each piecewise-constant path, and
    generator evaluations are memoized per visited configuration (per
    observable).  Sharing trajectories correlates the rows but leaves each
    row's own test exact.
    """
    window = eta0.window
    obs = list(observables)
    caches: list[dict[tuple, float]] = [{} for _ in obs]
    indices = range(len(obs))

    def lf(i: int, key: tuple, counts: dict) -> float:
        got = caches[i].get(key)
        if got is None:
            got = eval_generator(obs[i], Configuration(window, dict(counts)),
                                 model)
            caches[i][key] = got
        return got

    f0 = [F(eta0) for F in obs]
    samples = np.empty((len(obs), replicates))
    for rep in range(replicates):
        traj = run(model, window, eta0, t, seed, algorithm=algorithm,
                   replicate=rep)
        counts = eta0.counts_dict()
        key = tuple(sorted(counts.items()))
        integrals = [0.0] * len(obs)
        prev = 0.0
        for ev in traj.events:
            dt = ev.time - prev
            for i in indices:
                integrals[i] += lf(i, key, counts) * dt
            counts[ev.site] = counts.get(ev.site, 0) + ev.delta
            if counts[ev.site] == 0:
                del counts[ev.site]
            key = tuple(sorted(counts.items()))
            prev = ev.time
        dt = t - prev
        final = traj.final
        for i, F in enumerate(obs):
            integrals[i] += lf(i, key, counts) * dt
            samples[i, rep] = F(final) - f0[i] - integrals[i]
    rows = []
    for i, F in enumerate(obs):
        residual = float(samples[i].mean())
        stderr = (float(samples[i].std(ddof=1) / math.sqrt(replicates))
                  if replicates > 1 else 0.0)
        rows.append({"residual": residual, "stderr": stderr,
                     "replicates": replicates, "t": t, "observable": F.name,
                     "model": model.name, "seed": seed})
    return rows


def martingale_residual(F: CylindricalFunction, model: RateModel,
                        eta0: Configuration, t: float, replicates: int,
                        seed: int, algorithm: str = "gillespie") -> dict:
    """Single-observable form of :func:`martingale_battery`."""
    (row,) = martingale_battery([F], model, eta0, t, replicates, seed,
                                algorithm=algorithm)
    return row


# --------------------------------------------------------------------------
# energy (Lyapunov) drift


class LyapunovValidationError(ValueError):
    """The proposed energy weight fails a required structural property."""


@dataclass(frozen=True)
class LyapunovSpec:
    """An energy weight v with its kernel-compatibility constant and,
    once known, the linear drift constants.

    ``c_va`` bounds the kernel-smeared weight: sum_y v(y) a(x - y) is at
    most ``c_va * v(x)`` on the validation ball.  ``c1, c2`` (when set)
    assert the sampled drift inequality
    ``(generator V)(eta) <= c1 - c2 * V(eta)`` for V = weighted mass.
    """

    v: Callable[[Site], float]
    c_va: float
    ball_radius: int
    c1: float | None = None
    c2: float | None = None

    def value(self, eta: Configuration) -> float:
        return weighted_norm(eta, self.v)

    def with_constants(self, c1: float, c2: float) -> "LyapunovSpec":
        return replace(self, c1=c1, c2=c2)


def inverse_square_weight(x: Site) -> float:
    """Energy weight 1 / (1 + |x|_1^2): summable, even, slowly decaying."""
    return 1.0 / (1.0 + l1_norm(x) ** 2)


def validate_lyapunov(v: Callable[[Site], float],
                      weight: Callable[[Site], float],
                      kernel: FiniteKernel, ball_radius: int = 50,
                      dim: int = 1) -> LyapunovSpec:
    """Check the structural requirements on an energy weight and compute its
    kernel constant.

    Requires on the validation ball: v positive and even; v / weight
    nondecreasing ring-by-ring (the energy must grow against the comparison
    weight, so sublevel sets of V are genuinely bounded regions); and the
    kernel-smear inequality with finite constant (delegated to the kernel
    validator).
    """
    rings: dict[int, list[float]] = {}
    for x in Window(dim, ball_radius).sites:
        val = v(x)
        if not val > 0.0:
            raise LyapunovValidationError(
                f"energy weight must be positive; v({x}) = {val}")
        if v(tuple(-c for c in x)) != val:
            raise LyapunovValidationError(
                f"energy weight must be even; differs at {x}")
        rings.setdefault(l1_norm(x), []).append(val / weight(x))
    prev_min = None
    for r in sorted(rings):
        ring_min = min(rings[r])
        if prev_min is not None and ring_min < prev_min - 1e-12:
            raise LyapunovValidationError(
                "energy/weight ratio must be nondecreasing in |x|_1; "
                f"drops entering ring {r}")
        prev_min = max(prev_min or 0.0, ring_min)
    check = validate_kernel(v, kernel, ball_radius, dim,
                            a_radius=kernel.radius)
    return LyapunovSpec(v=v, c_va=check.c_wa, ball_radius=ball_radius)


@dataclass(frozen=True)
class DriftReport:
    """Outcome of checking (or fitting) the linear drift inequality on a
    sample of configurations."""

    c1: float
    c2: float
    fitted: bool
    n_checked: int
    n_violations: int
    worst_margin: float
    first_violation: dict | None
    fit_table: tuple[dict, ...] = ()
    samples: tuple[tuple[float, float], ...] = field(default=(), repr=False)

    @property
    def satisfied(self) -> bool:
        return self.n_violations == 0


def sample_configurations(window: Window, n: int, seed: int,
                          occupancy_cap: int = 4,
                          max_sites: int | None = None) -> list[Configuration]:
    """Deterministic batch of random configurations on the window, from the
    empty one up to several occupied sites at occupancies 1..cap."""
    rng = np.random.default_rng(seed)
    sites = window.sites
    top = min(max_sites or 8, len(sites))
    out = [Configuration.empty(window)]
    while len(out) < n:
        k = int(rng.integers(0, top + 1))
        picks = rng.choice(len(sites), size=k, replace=False) if k else []
        out.append(Configuration(window, {
            sites[int(i)]: int(rng.integers(1, occupancy_cap + 1))
            for i in picks}))
    return out[:n]


def _energy_observable(spec: LyapunovSpec, window: Window) -> CylindricalFunction:
    radius = window.radius if window.is_ball else max(
        (l1_norm(s) for s in window.sites), default=0)
    return CylindricalFunction(
        support_radius=radius,
        evaluator=lambda eta: weighted_norm(eta, spec.v),
        increment_bound=max(spec.v(x) for x in window.sites),
        name="energy")


def drift_check(spec: LyapunovSpec, model: RateModel,
                sample: Iterable[Configuration],
                c2_grid: Sequence[float] | None = None,
                tol: float = 1e-9) -> DriftReport:
    """Evaluate V and (generator V) on every sampled configuration and test
    the inequality (generator V) <= c1 - c2 * V.

    With constants already set on ``spec`` this is a pure check.  Without
    them, for each candidate c2 on a grid the smallest feasible
    c1(c2) = max over the sample of (generator V) + c2 * V is computed, and
    the reported pair minimizes c1 / c2 — the figure that controls how much
    time the process can spend at high energy.  A fitted pair is feasible on
    its own sample by construction; refitting on fresh samples is the
    caller's cross-validation.
    """
    configs = list(sample)
    if not configs:
        raise ValueError("drift_check needs at least one configuration")
    window = configs[0].window
    energy = _energy_observable(spec, window)
    pairs = [(spec.value(eta), eval_generator(energy, eta, model))
             for eta in configs]

    fit_table: tuple[dict, ...] = ()
    if spec.c1 is None or spec.c2 is None:
        grid = list(c2_grid) if c2_grid is not None else list(
            np.geomspace(1e-3, 10.0, 29))
        rows = []
        for c2 in grid:
            c1 = max(max(lv + c2 * v for v, lv in pairs), 0.0)
            rows.append({"c2": float(c2), "c1": float(c1),
                         "ratio": float(c1 / c2)})
        best = min(rows, key=lambda r: r["ratio"])
        c1, c2, fitted = best["c1"], best["c2"], True
        fit_table = tuple(rows)
    else:
        c1, c2, fitted = spec.c1, spec.c2, False

    n_violations = 0
    worst = math.inf
    first: dict | None = None
    for (v_val, lv), eta in zip(pairs, configs):
        margin = c1 - c2 * v_val - lv
        worst = min(worst, margin)
        if margin < -tol:
            n_violations += 1
            if first is None:
                first = {"V": v_val, "LV": lv, "margin": margin,
                         "config": eta.to_json_obj()}
    return DriftReport(c1=c1, c2=c2, fitted=fitted, n_checked=len(configs),
                       n_violations=n_violations, worst_margin=worst,
                       first_violation=first, fit_table=fit_table,
                       samples=tuple(pairs))


# --------------------------------------------------------------------------
# occupation measure


def occupation_measure(model: RateModel, window: Window,
                       horizons: Sequence[float], radii: Sequence[float],
                       lyapunov: LyapunovSpec, seed: int, replicates: int,
                       algorithm: str = "gillespie") -> dict:
    """Fraction of time the process started empty spends at energy <= r.

    For each horizon n and level r the estimate is the Monte-Carlo mean of
    (time in {V <= r} during [0, n]) / n with exact time accounting, and the
    drift constants imply the floor 1 - c1/(c2 r) - V(start)/(n c2 r).  Each
    row records estimate, standard error, floor, and whether the estimate
    clears the floor minus three standard errors.
    """
    if lyapunov.c1 is None or lyapunov.c2 is None:
        raise ValueError("occupation_measure needs drift constants; run "
                         "drift_check first and set them on the LyapunovSpec")
    horizons = sorted(float(n) for n in horizons)
    radii = sorted(float(r) for r in radii)
    if not horizons or horizons[0] <= 0:
        raise ValueError("horizons must be positive")
    top = horizons[-1]
    eta0 = Configuration.empty(window)
    v0 = lyapunov.value(eta0)

    below = {(n, r): np.empty(replicates) for n in horizons for r in radii}
    for rep in range(replicates):
        traj = run(model, window, eta0, top, seed, algorithm=algorithm,
                   replicate=rep)
        segments = []
        v_cur, prev = v0, 0.0
        for ev in traj.events:
            segments.append((prev, ev.time, v_cur))
            v_cur += ev.delta * lyapunov.v(ev.site)
            prev = ev.time
        segments.append((prev, top, v_cur))
        for n in horizons:
            for r in radii:
                t_in = sum(min(b, n) - a for a, b, v in segments
                           if a < n and v <= r + 1e-12)
                below[(n, r)][rep] = t_in / n

    rows = []
    for n in horizons:
        for r in radii:
            vals = below[(n, r)]
            mu = float(vals.mean())
            se = (float(vals.std(ddof=1) / math.sqrt(replicates))
                  if replicates > 1 else 0.0)
            if lyapunov.c2 * r > 0:
                floor = 1.0 - lyapunov.c1 / (lyapunov.c2 * r) \
                    - v0 / (n * lyapunov.c2 * r)
            else:
                floor = -math.inf  # no content at level zero
            rows.append({"n": n, "r": r, "mu_hat": mu, "se": se,
                         "floor": floor, "ok": mu >= floor - 3.0 * se})
    return {"rows": rows, "all_ok": all(row["ok"] for row in rows),
            "replicates": replicates, "seed": seed, "model": model.name,
            "c1": lyapunov.c1, "c2": lyapunov.c2}
