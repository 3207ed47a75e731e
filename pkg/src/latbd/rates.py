"""Birth/death rate models on the lattice.

A rate model packages per-site birth and death rates as functions of the
current configuration, plus the metadata event-driven simulation needs:
the interaction radius (how far one event's influence reaches), a dominating
kernel certifying Lipschitz control of the rates, and optional closed-form
birth envelopes.

Rate callables accept any ``Mapping[Site, int]`` with missing sites read as
zero occupancy, so both :class:`~latbd.core.Configuration` objects and the
plain dicts used inside simulation loops work.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping

from .core import FiniteKernel, Site, ball_sites, site_add, site_sub

Occupancy = Mapping[Site, int]
RateFn = Callable[[Site, Occupancy], float]

#: occupancy level at which Lipschitz metadata for occupancy-weighted death
#: rates is certified; probe tests stay at or below this level
DEFAULT_REFERENCE_OCCUPANCY = 6


@lru_cache(maxsize=64)
def _ball_offsets(dim: int, radius: int) -> tuple[Site, ...]:
    return ball_sites(dim, radius)


@dataclass(frozen=True)
class RateModel:
    """Immutable bundle of birth/death rates and their locality metadata.

    ``death(x, eta)`` must vanish whenever ``eta(x) == 0``; ``birth`` and
    ``death`` may depend on ``eta`` only through sites within
    ``interaction_radius`` of ``x``.  ``dominating_kernel`` is an even,
    finite-range kernel ``a`` such that rate differences between
    configurations are controlled by ``sum_y a(x-y) |diff(y)|`` (death-side
    control certified up to ``reference_occupancy`` for occupancy-weighted
    deaths).  ``max_occupancy`` marks models that preserve a hard per-site
    cap when started below it (e.g. 0/1 for the contact model).
    ``birth_sup``, when present, is the closed-form supremum of the birth
    rate over all sub-configurations.
    """

    name: str
    birth: RateFn = field(repr=False)
    death: RateFn = field(repr=False)
    interaction_radius: int
    dim: int
    dominating_kernel: FiniteKernel | None = field(default=None, repr=False)
    reference_occupancy: int = DEFAULT_REFERENCE_OCCUPANCY
    max_occupancy: int | None = None
    birth_sup: RateFn | None = field(default=None, repr=False)

    def affected_sites(self, site: Site) -> tuple[Site, ...]:
        """Sites whose rates can change after an event at ``site``.

        Unclipped; callers intersect with their window.
        """
        return tuple(site_add(site, z)
                     for z in _ball_offsets(self.dim, self.interaction_radius))


def _kernel_sum(kernel: FiniteKernel, site: Site, eta: Occupancy) -> float:
    """sum_y kernel(site - y) eta(y), iterating over the kernel support."""
    total = 0.0
    for z, v in kernel.support():
        n = eta.get(site_sub(site, z), 0)
        if n:
            total += v * n
    return total


# ---------------------------------------------------------------------------
# spatial logistic (immigration + dispersal births, density-dependent deaths)


@dataclass(frozen=True)
class BPDLParams:
    """Immigration rate, intrinsic mortality, dispersal and competition kernels."""

    b0: float
    m: float
    a_plus: FiniteKernel
    a_minus: FiniteKernel

    def __post_init__(self):
        if self.b0 < 0:
            raise ValueError("immigration rate b0 must be non-negative")
        if self.m < 0:
            raise ValueError("intrinsic mortality m must be non-negative")
        if self.a_plus.dim != self.a_minus.dim:
            raise ValueError("dispersal and competition kernels must share a dimension")


def bpdl_rates(p: BPDLParams,
               reference_occupancy: int = DEFAULT_REFERENCE_OCCUPANCY) -> RateModel:
    """Birth = immigration plus dispersal pressure; death = occupancy times
    (mortality plus competition pressure)."""
    dim = p.a_plus.dim

    def birth(x: Site, eta: Occupancy) -> float:
        return p.b0 + _kernel_sum(p.a_plus, x, eta)

    def death(x: Site, eta: Occupancy) -> float:
        n = eta.get(x, 0)
        if n == 0:
            return 0.0
        return n * (p.m + _kernel_sum(p.a_minus, x, eta))

    # Lipschitz control: birth differences are exactly a_plus-weighted; death
    # differences at occupancy <= M need M*a_minus plus an on-site term
    # covering the occupancy factor itself.
    M = reference_occupancy
    a_minus_mass = sum(v for _, v in p.a_minus.support())
    onsite = p.m + M * a_minus_mass
    dom = p.a_plus.plus(p.a_minus.scaled(M))
    if onsite > 0:
        dom = dom.plus(FiniteKernel.singleton(dim, onsite))

    return RateModel(
        name="bpdl",
        birth=birth,
        death=death,
        interaction_radius=max(p.a_plus.radius, p.a_minus.radius),
        dim=dim,
        dominating_kernel=dom,
        reference_occupancy=M,
        birth_sup=birth,  # affine increasing: supremum over sub-configs is at eta
    )


# ---------------------------------------------------------------------------
# aggregation (crowding lowers the death rate)


@dataclass(frozen=True)
class AggregationParams:
    """Strength c, neighbourhood weight phi, and the model variant switches.

    ``birth_mode``: "constant" (birth rate identically c) or "bpdl"
    (immigration + dispersal, using ``b0``/``a_plus``).
    ``death_form``: "exponential" (exp of minus the weighted crowding) or
    "reciprocal" (one over one plus the weighted crowding).
    """

    c: float
    phi: FiniteKernel
    birth_mode: str = "constant"
    death_form: str = "exponential"
    b0: float = 0.0
    a_plus: FiniteKernel | None = None

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("aggregation strength c must be positive")
        if self.birth_mode not in ("constant", "bpdl"):
            raise ValueError(f"unknown birth_mode {self.birth_mode!r}")
        if self.death_form not in ("exponential", "reciprocal"):
            raise ValueError(f"unknown death_form {self.death_form!r}")
        if self.birth_mode == "bpdl" and self.a_plus is None:
            raise ValueError("bpdl birth_mode needs an a_plus kernel")
        if self.birth_mode == "bpdl" and self.a_plus.dim != self.phi.dim:
            raise ValueError("a_plus and phi must share a dimension")


def aggregation_rates(p: AggregationParams) -> RateModel:
    """Deaths shrink with weighted local crowding; births constant or
    dispersal-driven.

    The death rate carries an explicit occupied-site indicator: the bare
    exponential/reciprocal forms would be positive on empty sites, which
    would let occupancy go negative.
    """
    dim = p.phi.dim
    c = p.c

    if p.birth_mode == "constant":
        def birth(x: Site, eta: Occupancy) -> float:
            return c
        birth_kernel = FiniteKernel(dim, {})
        birth_radius = 0
    else:
        a_plus = p.a_plus

        def birth(x: Site, eta: Occupancy) -> float:
            return p.b0 + _kernel_sum(a_plus, x, eta)
        birth_kernel = a_plus
        birth_radius = a_plus.radius

    if p.death_form == "exponential":
        def death(x: Site, eta: Occupancy) -> float:
            if eta.get(x, 0) == 0:
                return 0.0
            return math.exp(-c * _kernel_sum(p.phi, x, eta))
    else:
        def death(x: Site, eta: Occupancy) -> float:
            if eta.get(x, 0) == 0:
                return 0.0
            return 1.0 / (1.0 + c * _kernel_sum(p.phi, x, eta))

    # both death forms are c-Lipschitz in the weighted crowding; the on-site
    # indicator jump is at most 1 per unit occupancy change
    dom = birth_kernel.plus(p.phi.scaled(c)).plus(FiniteKernel.singleton(dim, 1.0))

    return RateModel(
        name="aggregation",
        birth=birth,
        death=death,
        interaction_radius=max(birth_radius, p.phi.radius),
        dim=dim,
        dominating_kernel=dom,
        birth_sup=birth,  # constant, or affine increasing
    )


# ---------------------------------------------------------------------------
# contact model (0/1 occupancy, nearest-neighbour infection)


def contact_rates(lam: float, dim: int = 1) -> RateModel:
    """Empty sites get filled at lam times the number of occupied neighbours;
    occupied sites empty at rate one.  Started from a 0/1 configuration the
    occupancy stays 0/1."""
    if lam <= 0:
        raise ValueError("infection rate must be positive")

    def birth(x: Site, eta: Occupancy) -> float:
        if eta.get(x, 0) != 0:
            return 0.0
        total = 0
        for z in _ball_offsets(dim, 1):
            total += eta.get(site_add(x, z), 0)
        return lam * total

    def death(x: Site, eta: Occupancy) -> float:
        return 1.0 if eta.get(x, 0) > 0 else 0.0

    def birth_sup(x: Site, eta: Occupancy) -> float:
        # supremum over sub-configurations: emptying x removes the blocking
        # indicator and only drops eta(x) from the neighbour sum
        total = 0
        for z in _ball_offsets(dim, 1):
            total += eta.get(site_add(x, z), 0)
        return lam * (total - eta.get(x, 0))

    return RateModel(
        name="contact",
        birth=birth,
        death=death,
        interaction_radius=1,
        dim=dim,
        dominating_kernel=FiniteKernel.ball_indicator(dim, 1, lam).plus(
            FiniteKernel.singleton(dim, 1.0)),
        max_occupancy=1,
        birth_sup=birth_sup,
    )


# ---------------------------------------------------------------------------
# local branching (neighbour-driven births, occupancy-driven deaths)


@dataclass(frozen=True)
class BranchLocalParams:
    """Branching rate and the per-site death schedule g.

    g must satisfy g(0)=0, g(1)=1, be non-decreasing, and grow at least
    linearly; checked on 0..check_range.
    """

    lam: float
    g: Callable[[int], float] = lambda n: float(n * n)
    check_range: int = 64

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("branching rate must be positive")
        g = self.g
        if g(0) != 0:
            raise ValueError("death schedule must vanish at occupancy 0")
        if g(1) != 1:
            raise ValueError("death schedule must equal 1 at occupancy 1")
        prev = 0.0
        for n in range(1, self.check_range + 1):
            v = g(n)
            if v < prev:
                raise ValueError(f"death schedule decreases at occupancy {n}")
            if v < n:
                raise ValueError(f"death schedule below linear at occupancy {n}")
            prev = v


def branch_local_rates(p: BranchLocalParams, dim: int = 1) -> RateModel:
    """Births at lam times the occupied neighbourhood mass (self included);
    deaths at g(occupancy)."""
    lam = p.lam
    g = p.g

    def birth(x: Site, eta: Occupancy) -> float:
        total = 0
        for z in _ball_offsets(dim, 1):
            total += eta.get(site_add(x, z), 0)
        return lam * total

    def death(x: Site, eta: Occupancy) -> float:
        return float(g(eta.get(x, 0)))

    # death differences g(n)-g(n') are on-site only; certified up to the
    # reference occupancy by the worst local increment of g
    M = DEFAULT_REFERENCE_OCCUPANCY
    worst_step = max(g(n + 1) - g(n) for n in range(0, M))
    dom = FiniteKernel.ball_indicator(dim, 1, lam).plus(
        FiniteKernel.singleton(dim, worst_step))

    return RateModel(
        name="branch-local",
        birth=birth,
        death=death,
        interaction_radius=1,
        dim=dim,
        dominating_kernel=dom,
        reference_occupancy=M,
        birth_sup=birth,  # affine increasing
    )


# ---------------------------------------------------------------------------
# pure-birth envelope


class EnvelopeSearchError(RuntimeError):
    """Raised when the brute-force sub-configuration search would exceed its cap."""


def pure_birth_envelope(model: RateModel, probe_cap: int = 200_000) -> RateModel:
    """Replace births by their supremum over all sub-configurations and drop
    deaths entirely.

    Uses the model's closed form when it carries one; otherwise brute-forces
    the supremum over every configuration dominated by the current one,
    restricted to the interaction neighbourhood.  The number of candidate
    sub-configurations is capped by ``probe_cap``.
    """
    if model.birth_sup is not None:
        sup_fn = model.birth_sup
    else:
        radius = model.interaction_radius
        base_birth = model.birth
        dim = model.dim

        def sup_fn(x: Site, eta: Occupancy) -> float:
            local = [(site_add(x, z), eta.get(site_add(x, z), 0))
                     for z in _ball_offsets(dim, radius)]
            local = [(s, n) for s, n in local if n > 0]
            combos = 1
            for _, n in local:
                combos *= n + 1
                if combos > probe_cap:
                    raise EnvelopeSearchError(
                        f"{combos}+ sub-configurations to probe at {x}, "
                        f"cap is {probe_cap}")
            best = 0.0
            sites = [s for s, _ in local]
            for counts in itertools.product(*(range(n + 1) for _, n in local)):
                alpha = {s: k for s, k in zip(sites, counts) if k > 0}
                best = max(best, base_birth(x, alpha))
            return best

    def dead(x: Site, eta: Occupancy) -> float:
        return 0.0

    return RateModel(
        name=f"{model.name}+pure-birth",
        birth=sup_fn,
        death=dead,
        interaction_radius=model.interaction_radius,
        dim=model.dim,
        dominating_kernel=model.dominating_kernel,
        reference_occupancy=model.reference_occupancy,
        birth_sup=sup_fn,
    )
