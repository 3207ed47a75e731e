"""Exact continuous-time Markov chain analysis on tiny capped state spaces.

Everything here is brute force on purpose: enumerate every configuration of a
handful of sites up to a per-site occupancy cap, build the dense generator
matrix, and compute transient laws (uniformization) and stationary laws
(linear solve on the closed communicating class).  Monte-Carlo layers are
validated against these numbers.

The occupancy cap suppresses birth rates at capped sites rather than
truncating jumps, so the capped chain is itself a well-defined model;
:func:`cap_births` exposes the same suppressed-birth model for simulation so
the two sides agree exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .core import Configuration, Site, Window
from .rates import RateModel

MAX_STATES = 4096

State = tuple[int, ...]


class StateSpaceError(ValueError):
    """Raised when the requested enumeration exceeds the verifier's limits."""


class ReducibleChainError(RuntimeError):
    """Raised when the chain has no unique stationary law; carries the
    closed communicating classes found."""

    def __init__(self, message: str, closed_classes: list[list[int]]):
        super().__init__(message)
        self.closed_classes = closed_classes


@dataclass(frozen=True)
class CappedStateSpace:
    """Enumeration of all occupancy vectors on a few sites, capped per site.

    States are tuples aligned with ``sites`` (kept sorted); the index is the
    little-endian mixed-radix encoding with base ``cap + 1``.
    """

    sites: tuple[Site, ...]
    cap: int
    window: Window = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        sites = tuple(sorted(set(map(tuple, self.sites))))
        if not sites:
            raise StateSpaceError("need at least one site")
        if len(sites) > 3:
            raise StateSpaceError("at most 3 active sites")
        if not 1 <= self.cap <= 6:
            raise StateSpaceError("cap must be between 1 and 6")
        if (self.cap + 1) ** len(sites) > MAX_STATES:
            raise StateSpaceError("state space too large for the verifier")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "window", Window.from_sites(sites))

    @property
    def n_states(self) -> int:
        return (self.cap + 1) ** len(self.sites)

    def index_of(self, state: State) -> int:
        if len(state) != len(self.sites):
            raise ValueError("state length does not match site count")
        idx = 0
        for i, n in enumerate(state):
            if not 0 <= n <= self.cap:
                raise ValueError(f"occupancy {n} outside [0, {self.cap}]")
            idx += n * (self.cap + 1) ** i
        return idx

    def state_of(self, idx: int) -> State:
        if not 0 <= idx < self.n_states:
            raise ValueError("state index out of range")
        base = self.cap + 1
        out = []
        for _ in self.sites:
            idx, n = divmod(idx, base)
            out.append(n)
        return tuple(out)

    def config_of(self, idx: int) -> Configuration:
        state = self.state_of(idx)
        return Configuration(self.window,
                             {s: n for s, n in zip(self.sites, state) if n})

    def states(self):
        return itertools.product(range(self.cap + 1), repeat=len(self.sites))

    def delta_distribution(self, state: State) -> np.ndarray:
        pi = np.zeros(self.n_states)
        pi[self.index_of(state)] = 1.0
        return pi


@dataclass(frozen=True)
class GeneratorMatrix:
    """Dense generator of the capped chain: off-diagonals are jump rates
    between states differing by one unit at one site, rows sum to zero."""

    Q: np.ndarray = field(repr=False)
    space: CappedStateSpace

    def __post_init__(self):
        Q = self.Q
        n = self.space.n_states
        if Q.shape != (n, n):
            raise ValueError("generator shape does not match the state space")
        off = Q - np.diag(np.diag(Q))
        if off.min() < 0:
            raise ValueError("negative off-diagonal rate")
        rs = np.abs(Q.sum(axis=1)).max()
        if rs > 1e-12 * max(1.0, np.abs(Q).max()):
            raise ValueError(f"row sums do not vanish (max {rs:.3e})")


def cap_births(model: RateModel, cap: int) -> RateModel:
    """The same model with births suppressed at sites already holding ``cap``
    particles.  Running this in a simulator reproduces the capped oracle chain
    exactly instead of comparing against an uncontrolled truncation."""
    base_birth = model.birth

    def birth(x, eta):
        if eta.get(x, 0) >= cap:
            return 0.0
        return base_birth(x, eta)

    return RateModel(
        name=f"{model.name}+cap{cap}",
        birth=birth,
        death=model.death,
        interaction_radius=model.interaction_radius,
        dim=model.dim,
        dominating_kernel=model.dominating_kernel,
        reference_occupancy=model.reference_occupancy,
        max_occupancy=cap if model.max_occupancy is None
        else min(cap, model.max_occupancy),
    )


def build_generator(space: CappedStateSpace, model: RateModel) -> GeneratorMatrix:
    """Dense generator with birth jumps suppressed at the occupancy cap."""
    n = space.n_states
    Q = np.zeros((n, n))
    base = space.cap + 1
    for state in space.states():
        i = space.index_of(state)
        eta = {s: k for s, k in zip(space.sites, state) if k}
        for j, x in enumerate(space.sites):
            stride = base ** j
            if state[j] < space.cap:
                b = model.birth(x, eta)
                if b < 0 or not math.isfinite(b):
                    raise ValueError(f"bad birth rate {b} at {x}, state {state}")
                Q[i, i + stride] += b
            if state[j] > 0:
                d = model.death(x, eta)
                if d < 0 or not math.isfinite(d):
                    raise ValueError(f"bad death rate {d} at {x}, state {state}")
                Q[i, i - stride] += d
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return GeneratorMatrix(Q=Q, space=space)


def transient(gen: GeneratorMatrix, pi0: np.ndarray, t: float,
              tail_tol: float = 1e-10) -> np.ndarray:
    """Distribution at time t from pi0, by uniformization.

    The Poisson jump-count series is truncated adaptively once the remaining
    tail mass drops below ``tail_tol``.
    """
    if t < 0:
        raise ValueError("time must be non-negative")
    pi0 = np.asarray(pi0, dtype=float)
    if pi0.shape != (gen.space.n_states,):
        raise ValueError("initial distribution has the wrong length")
    if abs(pi0.sum() - 1.0) > 1e-9 or pi0.min() < 0:
        raise ValueError("initial distribution must be a probability vector")
    Q = gen.Q
    lam = float(np.max(-np.diag(Q)))
    if t == 0.0 or lam == 0.0:
        return pi0.copy()
    P = np.eye(Q.shape[0]) + Q / lam
    mu = lam * t
    # Poisson(mu) weights, accumulated until the tail is negligible
    out = np.zeros_like(pi0)
    term = pi0.copy()
    log_weight = -mu  # log P(N = 0)
    weight = math.exp(log_weight)
    cum = weight
    out += weight * term
    k = 0
    # safety bound: mean + 20 sqrt(mean) + 50 dominates the needed cutoff
    k_max = int(mu + 20.0 * math.sqrt(mu) + 50.0)
    while cum < 1.0 - tail_tol and k < k_max:
        k += 1
        term = term @ P
        log_weight += math.log(mu / k)
        weight = math.exp(log_weight)
        out += weight * term
        cum += weight
    # renormalize the truncated series
    out /= out.sum()
    np.clip(out, 0.0, None, out=out)
    return out / out.sum()


def _closed_classes(Q: np.ndarray) -> tuple[np.ndarray, list[list[int]]]:
    """Strongly connected components of the jump graph and the closed ones."""
    adj = csr_matrix((np.abs(Q) > 0).astype(np.int8))
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    # a class is closed when no positive rate leaves it
    closed = []
    for c in range(n_comp):
        members = np.nonzero(labels == c)[0]
        outside = labels != c
        leaving = Q[np.ix_(members, np.nonzero(outside)[0])]
        if leaving.size == 0 or leaving.max() <= 0:
            closed.append([int(m) for m in members])
    return labels, closed


def stationary(gen: GeneratorMatrix) -> np.ndarray:
    """The unique stationary distribution, or a multi-class failure report.

    Transient states are handled by restriction: the solve runs on the single
    closed communicating class and the rest get probability zero.
    """
    Q = gen.Q
    n = Q.shape[0]
    _, closed = _closed_classes(Q)
    if len(closed) != 1:
        detail = "; ".join(
            "{" + ", ".join(str(gen.space.state_of(i)) for i in cls[:8])
            + (", ..." if len(cls) > 8 else "") + "}"
            for cls in closed)
        raise ReducibleChainError(
            f"no unique stationary law: {len(closed)} closed classes {detail}",
            closed_classes=closed)
    members = closed[0]
    sub = Q[np.ix_(members, members)]
    m = len(members)
    # pi @ sub = 0 with sum(pi) = 1: replace one balance equation
    A = sub.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    pi_sub = np.linalg.solve(A, b)
    pi_sub = np.clip(pi_sub, 0.0, None)
    pi_sub /= pi_sub.sum()
    pi = np.zeros(n)
    pi[members] = pi_sub
    return pi


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance between two distributions on the same space."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions live on different spaces")
    return 0.5 * float(np.abs(p - q).sum())
