"""Coupled simulation of two birth/death processes on shared randomness.

Supports the monotone-comparison machinery: couple a process expected to lie
below another (different rates and/or different initial conditions), watch
the order pointwise at every event, and measure weighted distances between
paths started from different initial conditions.

Two implementations of the same coupling law:

* ``joint-gillespie`` (default): one clock for the pair; per site the six
  joint channels are both-birth at the smaller birth rate, the birth excess
  on whichever side has the larger rate, both-death at the smaller death
  rate, and each side's death excess.  Each marginal sees exactly its own
  rates.
* ``shared-thinning``: both processes read the same candidate points and
  uniform marks (the engine's banded streams); each accepts a candidate
  against its own current rate.

The pairwise rate comparison the order argument needs (lower births never
above upper births across ordered configurations; lower deaths at least
upper deaths at matched occupancy) is never assumed: it is probed on
randomly sampled ordered pairs before the run, and a failed probe downgrades
the result to a diagnostic with no domination claim.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    Configuration,
    KernelPair,
    Site,
    Window,
    validate_kernel,
    weighted_norm,
)
from .engine import (
    BIRTH,
    DEATH,
    EngineError,
    EventRecord,
    NoiseStream,
    ThinningStreams,
    Trajectory,
)
from .rates import RateModel, pure_birth_envelope


def tilde_rates(x: Site, xi: Mapping[Site, int], eta: Mapping[Site, int],
                model1: RateModel, model2: RateModel) -> tuple[float, float]:
    """Joint birth/death rates at a site for the pair (xi under model1,
    eta under model2): the side with strictly larger occupancy at x supplies
    both rates; at equal occupancy births take the larger and deaths the
    smaller of the two."""
    nx = xi.get(x, 0)
    ny = eta.get(x, 0)
    if nx > ny:
        return model1.birth(x, xi), model1.death(x, xi)
    if nx < ny:
        return model2.birth(x, eta), model2.death(x, eta)
    return (max(model1.birth(x, xi), model2.birth(x, eta)),
            min(model1.death(x, xi), model2.death(x, eta)))


# ---------------------------------------------------------------------------
# hypothesis probing


@dataclass(frozen=True)
class HypothesisProbe:
    """Outcome of randomized probing of the pairwise rate comparison."""

    holds: bool
    pairs_checked: int
    first_failure: dict | None


def _sample_ordered_pair(rng, sites, cap_lower, cap_upper):
    lower: dict[Site, int] = {}
    upper: dict[Site, int] = {}
    for s in sites:
        if rng.random() < 0.5:
            continue
        hi = 1 + int(rng.integers(0, cap_upper))
        lo = int(rng.integers(0, min(hi, cap_lower) + 1))
        upper[s] = hi
        if lo:
            lower[s] = lo
    return lower, upper


def probe_domination_hypotheses(model_lower: RateModel, model_upper: RateModel,
                                window: Window, n_pairs: int = 10_000,
                                seed: int = 0, occupancy_cap: int = 4,
                                tol: float = 1e-9) -> HypothesisProbe:
    """Sample ordered configuration pairs from the models' reachable
    occupancies and check, at a random site each time, that the lower birth
    rate never exceeds the upper, and that at matched occupancy the lower
    death rate is at least the upper.

    Each model's ``max_occupancy`` restricts its side of the sampled pairs —
    comparisons are only claimed on states the coupled run can visit.
    """
    rng = np.random.default_rng(seed)
    sites = window.sites
    cap_l = min(occupancy_cap, model_lower.max_occupancy or occupancy_cap)
    cap_u = min(occupancy_cap, model_upper.max_occupancy or occupancy_cap)
    for k in range(n_pairs):
        lower, upper = _sample_ordered_pair(rng, sites, cap_l, cap_u)
        x = sites[int(rng.integers(0, len(sites)))]
        if rng.random() < 0.5:
            # matched occupancy at the probe site (death comparison active)
            n = int(rng.integers(0, min(cap_l, cap_u, upper.get(x, cap_u)) + 1))
            for cfg in (lower, upper):
                if n:
                    cfg[x] = n
                else:
                    cfg.pop(x, None)
        b_lo = model_lower.birth(x, lower)
        b_up = model_upper.birth(x, upper)
        if b_lo > b_up + tol:
            return HypothesisProbe(False, k + 1, {
                "kind": "birth", "site": list(x), "lower": sorted(lower.items()),
                "upper": sorted(upper.items()),
                "lower_rate": b_lo, "upper_rate": b_up})
        if lower.get(x, 0) == upper.get(x, 0):
            d_lo = model_lower.death(x, lower)
            d_up = model_upper.death(x, upper)
            if d_lo < d_up - tol:
                return HypothesisProbe(False, k + 1, {
                    "kind": "death", "site": list(x),
                    "lower": sorted(lower.items()), "upper": sorted(upper.items()),
                    "lower_rate": d_lo, "upper_rate": d_up})
    return HypothesisProbe(True, n_pairs, None)


# ---------------------------------------------------------------------------
# domination bookkeeping


@dataclass
class DominationReport:
    """Order bookkeeping for coupled runs: whether the lower process stayed
    below the upper at every event, the first breach if not, and whether
    every lower birth instant also fired upstairs."""

    clean: bool
    first_violation: dict | None
    replicates: int
    hypotheses_verified: bool = True
    birth_times_included: bool = True

    def to_json_obj(self) -> dict:
        return {"clean": self.clean, "first_violation": self.first_violation,
                "replicates": self.replicates}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True,
                          separators=(",", ":"))

    def merge(self, other: "DominationReport") -> "DominationReport":
        first = self.first_violation
        if first is None:
            first = other.first_violation
        elif other.first_violation is not None:
            if other.first_violation["t"] < first["t"]:
                first = other.first_violation
        return DominationReport(
            clean=self.clean and other.clean,
            first_violation=first,
            replicates=self.replicates + other.replicates,
            hypotheses_verified=self.hypotheses_verified
            and other.hypotheses_verified,
            birth_times_included=self.birth_times_included
            and other.birth_times_included)


class _PairState:
    """Rate cache for a coupled pair on one window."""

    def __init__(self, window: Window, lower0: Configuration,
                 upper0: Configuration):
        self.window = window
        self.lower: dict[Site, int] = dict(lower0.items())
        self.upper: dict[Site, int] = dict(upper0.items())
        n = window.site_count
        self.bL = np.zeros(n)
        self.bU = np.zeros(n)
        self.dL = np.zeros(n)
        self.dU = np.zeros(n)
        self.clock = 0.0
        self.lower_log: list[EventRecord] = []
        self.upper_log: list[EventRecord] = []

    def set_rates(self, m_lo: RateModel, m_up: RateModel, indices) -> None:
        for i in indices:
            x = self.window.sites[i]
            vals = (m_lo.birth(x, self.lower), m_up.birth(x, self.upper),
                    m_lo.death(x, self.lower), m_up.death(x, self.upper))
            if any(not math.isfinite(v) or v < 0 for v in vals):
                raise EngineError(f"unusable coupled rates {vals} at {x}")
            self.bL[i], self.bU[i], self.dL[i], self.dU[i] = vals

    def site_totals(self) -> np.ndarray:
        return np.maximum(self.bL, self.bU) + np.maximum(self.dL, self.dU)

    def apply(self, x: Site, which: str, delta: int, channel: str) -> None:
        for tag, counts, log in (("L", self.lower, self.lower_log),
                                 ("U", self.upper, self.upper_log)):
            if tag not in which:
                continue
            n = counts.get(x, 0)
            if delta == -1 and n < 1:
                raise EngineError(f"coupled death at empty site {x} ({tag})")
            if n + delta:
                counts[x] = n + delta
            else:
                counts.pop(x, None)
            log.append(EventRecord(self.clock, x, delta, channel))


def _step_joint(pair: _PairState, m_lo: RateModel, m_up: RateModel,
                stream: NoiseStream, horizon: float) -> bool:
    """One joint event (or horizon reached).  Returns False once time is up
    or the pair is absorbed."""
    totals = pair.site_totals()
    R = float(np.sum(totals))
    if R <= 0.0:
        pair.clock = horizon
        return False
    dt = stream.exponential() / R
    if pair.clock + dt > horizon:
        pair.clock = horizon
        return False
    pair.clock += dt
    u = stream.uniform() * R
    cum = np.cumsum(totals)
    i = int(np.searchsorted(cum, u, side="right"))
    i = min(i, len(totals) - 1)
    x = pair.window.sites[i]
    bL, bU, dL, dU = pair.bL[i], pair.bU[i], pair.dL[i], pair.dU[i]
    minb, mind = min(bL, bU), min(dL, dU)
    # channel segments: both-birth, lower-only birth, upper-only birth,
    # both-death, lower-only death, upper-only death
    segs = (minb, bL - minb, bU - minb, mind, dL - mind, dU - mind)
    u2 = stream.uniform() * (max(bL, bU) + max(dL, dU))
    acc = 0.0
    pick = None
    for j, s in enumerate(segs):
        acc += s
        if u2 <= acc and s > 0.0:
            pick = j
            break
    if pick is None:  # float-rounding edge: u2 beyond every positive segment
        pick = max(range(len(segs)), key=lambda j: segs[j])
    which, delta, channel = (
        ("LU", +1, BIRTH), ("L", +1, BIRTH), ("U", +1, BIRTH),
        ("LU", -1, DEATH), ("L", -1, DEATH), ("U", -1, DEATH))[pick]
    pair.apply(x, which, delta, channel)
    affected = [pair.window.index_of(y) for y in m_lo.affected_sites(x)
                if y in pair.window]
    up_only = [pair.window.index_of(y) for y in m_up.affected_sites(x)
               if y in pair.window and pair.window.index_of(y) not in affected]
    pair.set_rates(m_lo, m_up, affected + up_only)
    return True


def _step_shared_thinning(pair: _PairState, m_lo: RateModel, m_up: RateModel,
                          env_lo: RateModel, env_up: RateModel,
                          streams: ThinningStreams, horizon: float) -> bool:
    """Advance to the next candidate accepted by either process."""
    while True:
        t_next = streams.peek_time()
        if t_next > horizon:
            pair.clock = horizon
            return False
        t, x, channel, band, mark = streams.pop()
        pair.clock = t
        if channel == NoiseStream.CHANNEL_BIRTH:
            r_lo = m_lo.birth(x, pair.lower)
            r_up = m_up.birth(x, pair.upper)
            bound = max(env_lo.birth(x, pair.lower), env_up.birth(x, pair.upper))
            delta, ch = +1, BIRTH
        else:
            r_lo = m_lo.death(x, pair.lower)
            r_up = m_up.death(x, pair.upper)
            bound = max(r_lo, r_up)
            delta, ch = -1, DEATH
        if max(r_lo, r_up) > streams.n_bands(x, channel) + 1e-9 \
                or max(r_lo, r_up) > bound + 1e-9:
            raise EngineError(
                f"coupled rate bound violated at {x}: rates ({r_lo}, {r_up}) "
                f"exceed coverage {streams.n_bands(x, channel)}")
        which = ""
        if mark <= r_lo:
            which += "L"
        if mark <= r_up:
            which += "U"
        if not which:
            continue
        pair.apply(x, which, delta, ch)
        _refresh_shared(pair, m_lo, m_up, env_lo, env_up, streams,
                        m_lo.affected_sites(x) + m_up.affected_sites(x))
        return True


def _refresh_shared(pair: _PairState, m_lo, m_up, env_lo, env_up,
                    streams: ThinningStreams, sites) -> None:
    seen = set()
    for x in sites:
        if x in seen or x not in pair.window:
            continue
        seen.add(x)
        bound_b = max(env_lo.birth(x, pair.lower), env_up.birth(x, pair.upper))
        bound_d = max(m_lo.death(x, pair.lower), m_up.death(x, pair.upper))
        streams.ensure_bands(x, NoiseStream.CHANNEL_BIRTH,
                             int(math.ceil(bound_b - 1e-12)), pair.clock)
        streams.ensure_bands(x, NoiseStream.CHANNEL_DEATH,
                             int(math.ceil(bound_d - 1e-12)), pair.clock)


def run_coupled(model_lower: RateModel, model_upper: RateModel,
                eta0_lower: Configuration, eta0_upper: Configuration,
                window: Window, horizon: float, seed: int,
                replicate: int = 0, method: str = "joint-gillespie",
                probe: HypothesisProbe | None = None,
                probe_pairs: int = 2000,
                explosion_guard: int = 10_000_000,
                ) -> tuple[Trajectory, Trajectory, DominationReport]:
    """Couple two processes on shared randomness over [0, horizon].

    The rate-comparison hypotheses are probed first (or pass a precomputed
    ``probe`` to amortize across replicates); if they fail, the run still
    executes but the report carries ``hypotheses_verified=False`` and no
    domination claim.  The report records the first pointwise order breach,
    if any, and whether every lower birth time also fired upstairs.
    """
    if method not in ("joint-gillespie", "shared-thinning"):
        raise ValueError(f"unknown coupling method {method!r}")
    if probe is None:
        probe = probe_domination_hypotheses(model_lower, model_upper, window,
                                            n_pairs=probe_pairs, seed=seed)
    pair = _PairState(window, eta0_lower, eta0_upper)
    pair.set_rates(model_lower, model_upper, range(window.site_count))

    violation: dict | None = None

    def check_order(t: float) -> None:
        nonlocal violation
        if violation is not None:
            return
        for x in set(pair.lower) | set(pair.upper):
            if pair.lower.get(x, 0) > pair.upper.get(x, 0):
                violation = {"t": t, "x": list(x)}
                return

    check_order(0.0)
    if method == "joint-gillespie":
        stream = NoiseStream.for_replicate(seed, replicate)
        while pair.clock < horizon:
            if len(pair.lower_log) + len(pair.upper_log) >= explosion_guard:
                raise EngineError("coupled event budget exhausted")
            if not _step_joint(pair, model_lower, model_upper, stream, horizon):
                break
            check_order(pair.clock)
    else:
        env_lo = pure_birth_envelope(model_lower)
        env_up = pure_birth_envelope(model_upper)
        streams = ThinningStreams(seed, replicate)
        _refresh_shared(pair, model_lower, model_upper, env_lo, env_up,
                        streams, window.sites)
        while pair.clock < horizon:
            if len(pair.lower_log) + len(pair.upper_log) >= explosion_guard:
                raise EngineError("coupled event budget exhausted")
            if not _step_shared_thinning(pair, model_lower, model_upper,
                                         env_lo, env_up, streams, horizon):
                break
            check_order(pair.clock)

    lower_births = {ev.time for ev in pair.lower_log if ev.delta == 1}
    upper_births = {ev.time for ev in pair.upper_log if ev.delta == 1}
    report = DominationReport(
        clean=violation is None,
        first_violation=violation,
        replicates=1,
        hypotheses_verified=probe.holds,
        birth_times_included=lower_births <= upper_births)

    def make_traj(log, eta0, model):
        counts = dict(eta0.items())
        for ev in log:
            counts[ev.site] = counts.get(ev.site, 0) + ev.delta
            if counts[ev.site] == 0:
                del counts[ev.site]
        return Trajectory(
            window=window, initial=Configuration(window, dict(eta0.items())),
            final=Configuration(window, counts), events=tuple(log),
            horizon=horizon, seed=seed, replicate=replicate,
            algorithm=f"coupled-{method}", model_name=model.name)

    return (make_traj(pair.lower_log, eta0_lower, model_lower),
            make_traj(pair.upper_log, eta0_upper, model_upper),
            report)


def run_coupled_replicates(model_lower: RateModel, model_upper: RateModel,
                           eta0_lower: Configuration, eta0_upper: Configuration,
                           window: Window, horizon: float, seed: int,
                           n_replicates: int, method: str = "joint-gillespie",
                           probe_pairs: int = 10_000) -> DominationReport:
    """Merge domination reports over replicates 0..n-1 (one shared probe)."""
    probe = probe_domination_hypotheses(model_lower, model_upper, window,
                                        n_pairs=probe_pairs, seed=seed)
    merged: DominationReport | None = None
    for rep in range(n_replicates):
        _, _, rpt = run_coupled(model_lower, model_upper, eta0_lower,
                                eta0_upper, window, horizon, seed,
                                replicate=rep, method=method, probe=probe)
        merged = rpt if merged is None else merged.merge(rpt)
    return merged


# ---------------------------------------------------------------------------
# weighted contraction between paths from different initial conditions


def contraction_check(model: RateModel, eta0_a: Configuration,
                      eta0_b: Configuration, window: Window, horizon: float,
                      replicates: int, seed: int,
                      kernel_pair: KernelPair | None = None,
                      weight=None, times: Sequence[float] | None = None,
                      method: str = "joint-gillespie") -> dict:
    """Estimate the expected weighted pathwise distance between two coupled
    copies of the same model from different initial conditions, against the
    exponential bound (initial distance times exp(4 c t) with c the
    validated weighted-sum constant of the model's dominating kernel).

    Returns per-time rows {t, lhs, se, bound, ok} plus the constant used;
    ``ok`` asserts lhs <= bound + 3 se.
    """
    if kernel_pair is not None:
        w = kernel_pair.w
        c_wa = kernel_pair.c_wa
    else:
        if weight is None:
            def weight(x):
                return math.exp(-sum(abs(c) for c in x))
        w = weight
        if model.dominating_kernel is None:
            raise ValueError("model carries no dominating kernel")
        res = validate_kernel(w, model.dominating_kernel, 50, model.dim,
                              a_radius=model.dominating_kernel.radius)
        c_wa = res.c_wa

    eval_times = sorted(set(times if times is not None else [horizon]))
    if any(t < 0 or t > horizon for t in eval_times):
        raise ValueError("evaluation times must lie in [0, horizon]")

    d0 = sum(w(x) * abs(eta0_a.get(x, 0) - eta0_b.get(x, 0))
             for x in set(eta0_a) | set(eta0_b))
    samples = {t: np.zeros(replicates) for t in eval_times}
    for rep in range(replicates):
        tr_a, tr_b, _ = run_coupled(model, model, eta0_a, eta0_b, window,
                                    horizon, seed, replicate=rep,
                                    method=method,
                                    probe=HypothesisProbe(True, 0, None))
        for t in eval_times:
            ca = tr_a.snapshot_at(t)
            cb = tr_b.snapshot_at(t)
            diff = Configuration(
                window, {x: abs(ca.occupancy(x) - cb.occupancy(x))
                         for x in set(ca) | set(cb)})
            samples[t][rep] = weighted_norm(diff, w)

    rows = []
    for t in eval_times:
        vals = samples[t]
        lhs = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(replicates)) \
            if replicates > 1 else 0.0
        bound = d0 * math.exp(4.0 * c_wa * t)
        rows.append({"t": t, "lhs": lhs, "se": se, "bound": bound,
                     "ok": lhs <= bound + 3.0 * se})
    out = {"c_wa": c_wa, "initial_distance": d0, "rows": rows}
    out.update(rows[-1])  # spec shape: top-level lhs/bound for the horizon
    return out
