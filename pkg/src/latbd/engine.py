"""Event-driven simulation of lattice birth/death dynamics on a finite window.

Two exact, equivalent-in-law algorithms:

* ``gillespie`` — total-rate sampling: exponential holding times at the
  aggregate rate, one event per step picked proportionally to per-site rates.
* ``thinning`` — per-site Poisson candidate points with explicit uniform
  marks, accepted when the mark falls under the current rate.  Slower, but
  the noise is addressable: every (site, channel, band, replicate) tuple
  names an independent random stream, which is what shared-noise coupling
  and cross-window comparisons need.

Candidate marks for a site/channel live in unit-height bands ``[k, k+1)``;
band ``k`` is its own rate-one Poisson stream, activated the first time the
site's rate bound exceeds ``k``.  Streams are generated from time zero with
candidates before the activation instant discarded — exact, because while a
band was inactive the rate stayed below its floor, so those candidates would
all have been rejected anyway.  Bands never deactivate.
"""

from __future__ import annotations

import heapq
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import Configuration, Site, Window
from .rates import RateModel, pure_birth_envelope

BIRTH = "b"
DEATH = "d"

_MASK64 = (1 << 64) - 1


class EngineError(RuntimeError):
    """A model produced an unusable rate (negative/NaN) or state corruption."""


class ExplosionError(RuntimeError):
    """Event budget exhausted before the horizon; carries a diagnosis."""

    def __init__(self, message: str, event_count: int, clock: float, mass: int):
        super().__init__(message)
        self.event_count = event_count
        self.clock = clock
        self.mass = mass


def _zigzag(n: int) -> int:
    return (n << 1) if n >= 0 else ((-n) << 1) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix_key(parts: Sequence[int]) -> int:
    h = len(parts) & _MASK64
    for p in parts:
        h = _splitmix64(h ^ _zigzag(int(p)))
    return h


class NoiseStream:
    """A random stream that is a pure function of (seed, stream_key).

    Backed by a counter-based generator keyed directly by the 128-bit value
    (seed, mix(stream_key)); distinct keys give independent streams.  Keys
    are tuples of integers: (replicate, 0) for a trajectory's holding-time
    and selection draws, (replicate, channel, band, *site) for candidate
    streams, with channel 1 = birth, 2 = death.  Site coordinates enter the
    key as absolute positions, so the same physical site gets the same
    stream in windows of any radius.
    """

    __slots__ = ("seed", "stream_key", "_gen")

    CHANNEL_HOLD = 0
    CHANNEL_BIRTH = 1
    CHANNEL_DEATH = 2

    def __init__(self, seed: int, stream_key: Sequence[int]):
        self.seed = int(seed)
        self.stream_key = tuple(int(p) for p in stream_key)
        key = np.array([self.seed & _MASK64, _mix_key(self.stream_key)],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def for_replicate(cls, seed: int, replicate: int) -> "NoiseStream":
        return cls(seed, (replicate, cls.CHANNEL_HOLD))

    @classmethod
    def for_site(cls, seed: int, replicate: int, channel: int, site: Site,
                 band: int = 0) -> "NoiseStream":
        return cls(seed, (replicate, channel, band, *site))

    def uniform(self) -> float:
        return float(self._gen.random())

    def exponential(self) -> float:
        return float(self._gen.standard_exponential())


@dataclass(frozen=True)
class EventRecord:
    """One jump: at ``time``, occupancy at ``site`` changed by ``delta``."""

    time: float
    site: Site
    delta: int
    channel: str  # "b" | "d"

    def to_json_obj(self) -> dict:
        return {"t": self.time, "x": list(self.site), "d": self.delta,
                "ch": self.channel}


class EngineState:
    """Mutable simulation state: configuration, clock, and the rate cache.

    The cache (per-site birth/death rate arrays indexed like the window's
    site list, plus their total) always equals a fresh recomputation; it is
    maintained incrementally over each event's interaction neighbourhood.
    """

    __slots__ = ("window", "clock", "counts", "birth_rates", "death_rates",
                 "total_rate", "event_log", "absorbed")

    def __init__(self, window: Window, eta0: Configuration):
        if eta0.window != window and not all(s in window for s in eta0.support):
            raise ValueError("initial configuration not supported in the window")
        self.window = window
        self.clock = 0.0
        self.counts: dict[Site, int] = {s: n for s, n in eta0.items()}
        n = window.site_count
        self.birth_rates = np.zeros(n)
        self.death_rates = np.zeros(n)
        self.total_rate = 0.0
        self.event_log: list[EventRecord] = []
        self.absorbed = False

    @property
    def config(self) -> Configuration:
        return Configuration(self.window, self.counts)

    def _set_rates(self, model: RateModel, indices: Iterable[int]) -> None:
        for i in indices:
            x = self.window.sites[i]
            b = model.birth(x, self.counts)
            d = model.death(x, self.counts)
            if not (math.isfinite(b) and math.isfinite(d)) or b < 0 or d < 0:
                raise EngineError(
                    f"model produced unusable rates at {x}: birth={b}, death={d}")
            self.birth_rates[i] = b
            self.death_rates[i] = d

    def recompute_all(self, model: RateModel) -> None:
        self._set_rates(model, range(self.window.site_count))
        self._refresh_total()

    def refresh_neighbourhood(self, model: RateModel, site: Site) -> None:
        idx = [self.window.index_of(x) for x in model.affected_sites(site)
               if x in self.window]
        self._set_rates(model, idx)
        self._refresh_total()

    def _refresh_total(self) -> None:
        self.total_rate = float(np.sum(self.birth_rates) + np.sum(self.death_rates))

    def apply_event(self, site: Site, delta: int, channel: str) -> None:
        n = self.counts.get(site, 0)
        if delta == -1 and n < 1:
            raise EngineError(f"death at empty site {site}")
        new = n + delta
        if new:
            self.counts[site] = new
        else:
            self.counts.pop(site, None)
        self.event_log.append(EventRecord(self.clock, site, delta, channel))


def step_gillespie(state: EngineState, model: RateModel, stream: NoiseStream,
                   horizon: float = math.inf) -> EngineState:
    """Advance by one event (or to the horizon if nothing can fire first).

    Holding time is exponential at the total cached rate; the firing
    site/channel is chosen proportionally to its rate using a single uniform
    draw against the cumulative rate vector.
    """
    R = state.total_rate
    if R <= 0.0:
        if math.isfinite(horizon):
            state.clock = horizon
        state.absorbed = True
        return state
    dt = stream.exponential() / R
    u = stream.uniform() * R
    if state.clock + dt > horizon:
        state.clock = horizon
        return state
    state.clock += dt
    cum = np.cumsum(np.concatenate((state.birth_rates, state.death_rates)))
    k = int(np.searchsorted(cum, u, side="right"))
    n = state.window.site_count
    if k >= 2 * n:  # u == total due to rounding: take the last positive rate
        k = 2 * n - 1
    if k < n:
        site, delta, channel = state.window.sites[k], +1, BIRTH
    else:
        site, delta, channel = state.window.sites[k - n], -1, DEATH
    state.apply_event(site, delta, channel)
    state.refresh_neighbourhood(model, site)
    return state


class ThinningStreams:
    """Banded candidate-point streams for one replicate of one trajectory.

    Maintains a heap of upcoming candidates (time, site, channel, band,
    mark) across all active bands, advancing each band's own stream lazily.
    """

    def __init__(self, seed: int, replicate: int):
        self.seed = int(seed)
        self.replicate = int(replicate)
        self._heap: list[tuple] = []
        self._n_bands: dict[tuple[Site, int], int] = {}
        self._tails: dict[tuple[Site, int, int], tuple[NoiseStream, float]] = {}
        self._seq = 0

    def n_bands(self, site: Site, channel: int) -> int:
        return self._n_bands.get((site, channel), 0)

    def _push(self, site: Site, channel: int, band: int, t: float, u: float):
        heapq.heappush(self._heap, (t, self._seq, site, channel, band, band + u))
        self._seq += 1

    def ensure_bands(self, site: Site, channel: int, needed: int, now: float):
        """Activate bands 0..needed-1; new bands replay from time zero and
        discard candidates at or before ``now`` (all rejectable while the
        band's floor exceeded the rate bound)."""
        current = self._n_bands.get((site, channel), 0)
        if needed <= current:
            return
        for band in range(current, needed):
            stream = NoiseStream.for_site(self.seed, self.replicate, channel,
                                          site, band)
            t = 0.0
            while True:
                t += stream.exponential()
                u = stream.uniform()
                if t > now:
                    break
            self._push(site, channel, band, t, u)
            self._tails[(site, channel, band)] = (stream, t)
        self._n_bands[(site, channel)] = needed

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def pop(self) -> tuple[float, Site, int, int, float]:
        t, _, site, channel, band, mark = heapq.heappop(self._heap)
        stream, last = self._tails[(site, channel, band)]
        nt = last + stream.exponential()
        nu = stream.uniform()
        self._push(site, channel, band, nt, nu)
        self._tails[(site, channel, band)] = (stream, nt)
        return t, site, channel, band, mark


def _thinning_refresh(state: EngineState, model: RateModel,
                      envelope: RateModel, streams: ThinningStreams,
                      sites: Iterable[Site]) -> None:
    for x in sites:
        if x not in state.window:
            continue
        bound_b = envelope.birth(x, state.counts)
        bound_d = model.death(x, state.counts)
        streams.ensure_bands(x, NoiseStream.CHANNEL_BIRTH,
                             int(math.ceil(bound_b - 1e-12)), state.clock)
        streams.ensure_bands(x, NoiseStream.CHANNEL_DEATH,
                             int(math.ceil(bound_d - 1e-12)), state.clock)


def step_thinning(state: EngineState, model: RateModel, envelope: RateModel,
                  streams: ThinningStreams, horizon: float = math.inf) -> EngineState:
    """Advance to the next accepted candidate (one event), or to the horizon.

    Each candidate (t, site, channel, mark) is accepted iff its mark lies
    under the corresponding current rate.  A rate found above its declared
    bound is a hard error — the law would silently be wrong otherwise.
    """
    while True:
        t_next = streams.peek_time()
        if t_next > horizon:
            state.clock = horizon
            return state
        t, site, channel, band, mark = streams.pop()
        state.clock = t
        if channel == NoiseStream.CHANNEL_BIRTH:
            rate = model.birth(site, state.counts)
            bound = envelope.birth(site, state.counts)
            ch, delta = BIRTH, +1
        else:
            rate = model.death(site, state.counts)
            bound = rate
            ch, delta = DEATH, -1
        if not math.isfinite(rate) or rate < 0:
            raise EngineError(f"model produced unusable rate {rate} at {site}")
        if rate > bound + 1e-9 or rate > streams.n_bands(site, channel) + 1e-9:
            raise EngineError(
                f"rate bound violated at {site}: rate {rate} exceeds bound "
                f"{min(bound, streams.n_bands(site, channel))}; stale envelope")
        if mark <= rate:
            state.apply_event(site, delta, ch)
            _thinning_refresh(state, model, envelope, streams,
                              model.affected_sites(site))
            return state


@dataclass(frozen=True)
class Trajectory:
    """One simulated path: the inputs that produced it, every event, and the
    final configuration."""

    window: Window
    initial: Configuration
    final: Configuration
    events: tuple[EventRecord, ...]
    horizon: float
    seed: int
    replicate: int
    algorithm: str
    model_name: str

    def snapshot_at(self, t: float) -> Configuration:
        """Configuration at time t, replayed from the event log."""
        if t < 0 or t > self.horizon:
            raise ValueError("snapshot time outside [0, horizon]")
        counts = self.initial.counts_dict()
        for ev in self.events:
            if ev.time > t:
                break
            counts[ev.site] = counts.get(ev.site, 0) + ev.delta
            if counts[ev.site] == 0:
                del counts[ev.site]
        return Configuration(self.window, counts)

    def mass_at(self, t: float) -> int:
        return self.snapshot_at(t).mass()

    def config_hash(self) -> str:
        payload = json.dumps(
            {"initial": self.initial.to_json_obj(), "model": self.model_name,
             "horizon": self.horizon, "algorithm": self.algorithm,
             "replicate": self.replicate},
            sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_jsonl(self) -> str:
        header = json.dumps(
            {"config_hash": self.config_hash(), "seed": self.seed,
             "model": self.model_name, "algorithm": self.algorithm,
             "horizon": self.horizon, "replicate": self.replicate,
             "initial": self.initial.to_json_obj()},
            sort_keys=True, separators=(",", ":"))
        lines = [header]
        lines.extend(json.dumps(ev.to_json_obj(), sort_keys=True,
                                separators=(",", ":"))
                     for ev in self.events)
        return "\n".join(lines) + "\n"


def run(model: RateModel, window: Window, eta0: Configuration, horizon: float,
        seed: int, algorithm: str = "gillespie", replicate: int = 0,
        explosion_guard: int = 10_000_000,
        envelope: RateModel | None = None) -> Trajectory:
    """Simulate one trajectory on [0, horizon].

    Fully deterministic in its inputs: identical arguments give an identical
    event log.  ``explosion_guard`` bounds the event count; exceeding it
    raises :class:`ExplosionError` with the state of the diagnosis — the
    dynamics' growth bounds make a genuine explosion impossible, so hitting
    the guard means the configuration is far outside desk scale.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if algorithm not in ("gillespie", "thinning"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    state = EngineState(window, eta0)
    state.recompute_all(model)

    if algorithm == "gillespie":
        stream = NoiseStream.for_replicate(seed, replicate)
        while state.clock < horizon and not state.absorbed:
            if len(state.event_log) >= explosion_guard:
                raise ExplosionError(
                    f"event budget {explosion_guard} exhausted at time "
                    f"{state.clock:.6g} with {state.config.mass()} particles",
                    event_count=len(state.event_log), clock=state.clock,
                    mass=state.config.mass())
            step_gillespie(state, model, stream, horizon)
    else:
        env = envelope if envelope is not None else pure_birth_envelope(model)
        streams = ThinningStreams(seed, replicate)
        _thinning_refresh(state, model, env, streams, window.sites)
        while state.clock < horizon:
            if len(state.event_log) >= explosion_guard:
                raise ExplosionError(
                    f"event budget {explosion_guard} exhausted at time "
                    f"{state.clock:.6g} with {state.config.mass()} particles",
                    event_count=len(state.event_log), clock=state.clock,
                    mass=state.config.mass())
            step_thinning(state, model, env, streams, horizon)

    return Trajectory(
        window=window, initial=Configuration(window, eta0.counts_dict()),
        final=state.config, events=tuple(state.event_log), horizon=horizon,
        seed=seed, replicate=replicate, algorithm=algorithm,
        model_name=model.name)


def run_replicates(model: RateModel, window: Window, eta0: Configuration,
                   horizon: float, seed: int, n_replicates: int,
                   algorithm: str = "gillespie",
                   collect: Callable[[Trajectory], object] | None = None,
                   workers: int = 1,
                   explosion_guard: int = 10_000_000) -> list:
    """Run replicates 0..n-1 and return per-replicate results in index order.

    Each replicate's randomness is keyed by its index, so results do not
    depend on scheduling; with ``workers > 1`` replicates run on a thread
    pool.  ``collect`` maps each trajectory to what is kept (default: the
    trajectory itself).
    """
    collect = collect or (lambda tr: tr)
    envelope = pure_birth_envelope(model) if algorithm == "thinning" else None

    def one(rep: int):
        return collect(run(model, window, eta0, horizon, seed,
                           algorithm=algorithm, replicate=rep,
                           envelope=envelope,
                           explosion_guard=explosion_guard))

    if workers <= 1:
        return [one(r) for r in range(n_replicates)]
    from concurrent.futures import ThreadPoolExecutor
    out: list = [None] * n_replicates
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for rep, res in zip(range(n_replicates),
                            pool.map(one, range(n_replicates))):
            out[rep] = res
    return out


def window_convergence(model: RateModel, eta0_counts: dict[Site, int],
                       horizon: float, radii: Sequence[int], seed: int,
                       n_replicates: int = 200,
                       probe_site: Site | None = None) -> list[dict]:
    """Empirical law of the occupancy at a probe site across window radii.

    All radii share one noise protocol: candidate streams are keyed by
    absolute site coordinates, so a larger window only adds sites — the
    common randomness makes successive marginals comparable path by path.
    Returns one row per radius with the empirical distribution and the
    total-variation distance to the previous radius's distribution.
    """
    radii = list(radii)
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly increasing")
    dim = model.dim
    probe = probe_site if probe_site is not None else tuple([0] * dim)
    rows: list[dict] = []
    prev: dict[int, float] | None = None
    for radius in radii:
        window = Window(dim, radius)
        eta0 = Configuration(window, {s: n for s, n in eta0_counts.items()
                                      if s in window})
        tallies: dict[int, int] = {}
        for rep in range(n_replicates):
            tr = run(model, window, eta0, horizon, seed,
                     algorithm="thinning", replicate=rep)
            n = tr.final.occupancy(probe)
            tallies[n] = tallies.get(n, 0) + 1
        dist = {n: c / n_replicates for n, c in sorted(tallies.items())}
        tv = None
        if prev is not None:
            support = set(dist) | set(prev)
            tv = 0.5 * sum(abs(dist.get(n, 0.0) - prev.get(n, 0.0))
                           for n in support)
        rows.append({"radius": radius, "distribution": dist, "tv_prev": tv})
        prev = dist
    return rows
