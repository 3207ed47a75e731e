"""Lattice geometry, finite windows, sparse configurations, kernel validation.

Sites are plain int tuples in Z^d.  A Window is the finite active region
(an l1 ball by default, or an explicit site list); occupancy outside the
window is frozen at zero and no events ever fire there.  Configurations are
immutable sparse occupancy maps supported inside a window; they implement
the Mapping protocol so rate functions can use ``eta.get(x, 0)`` uniformly
on Configurations and plain dicts.

A KernelPair bundles a weight w and an even summable interaction kernel a
together with the validated constant c_wa such that

    sum_y w(y) a(x - y) <= c_wa * w(x)

for every x in the validation ball.  ``make_kernel`` builds the built-in
families; ``validate_kernel`` computes c_wa for arbitrary pairs and detects
ratio divergence at the ball boundary.
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import convolve as _convolve

Site = tuple[int, ...]

__all__ = [
    "Site",
    "Window",
    "Configuration",
    "FiniteKernel",
    "KernelPair",
    "KernelValidation",
    "KernelConfigError",
    "KernelValidationError",
    "l1_norm",
    "l1_distance",
    "ball_sites",
    "weighted_norm",
    "make_kernel",
    "validate_kernel",
]

# Relative tail tolerance certified by the built-in families' truncation margins.
TAIL_TOL = 1e-12


def l1_norm(x: Site) -> int:
    return sum(abs(c) for c in x)


def l1_distance(x: Site, y: Site) -> int:
    """l1 (graph) distance between two sites of equal dimension."""
    if len(x) != len(y):
        raise ValueError(f"dimension mismatch: {len(x)} vs {len(y)}")
    return sum(abs(a - b) for a, b in zip(x, y))


def site_add(x: Site, z: Site) -> Site:
    return tuple(a + b for a, b in zip(x, z))


def site_sub(x: Site, z: Site) -> Site:
    return tuple(a - b for a, b in zip(x, z))


def ball_sites(dim: int, radius: int) -> tuple[Site, ...]:
    """All sites with |x|_1 <= radius, sorted lexicographically."""
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    rng = range(-radius, radius + 1)
    return tuple(
        x for x in itertools.product(rng, repeat=dim) if l1_norm(x) <= radius
    )


class Window:
    """Finite active region of the lattice with frozen-zero boundary.

    Constructed either as the l1 ball of a given radius (default) or from an
    explicit site list (``Window.from_sites``), which the exact-verification
    harness uses for site sets that are not balls.
    """

    boundary_rule = "frozen-zero"

    __slots__ = ("dim", "radius", "sites", "is_ball", "_site_set", "_index")

    def __init__(self, dim: int, radius: int, sites: Iterable[Site] | None = None):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        if radius < 0:
            raise ValueError("radius must be >= 0")
        self.dim = int(dim)
        self.radius = int(radius)
        if sites is None:
            self.sites = ball_sites(dim, radius)
            self.is_ball = True
        else:
            norm = sorted({tuple(int(c) for c in s) for s in sites})
            if not norm:
                raise ValueError("window needs at least one site")
            for s in norm:
                if len(s) != dim:
                    raise ValueError(f"site {s} has dimension {len(s)}, expected {dim}")
            self.sites = tuple(norm)
            self.is_ball = False
        self._site_set = frozenset(self.sites)
        self._index = {s: i for i, s in enumerate(self.sites)}

    @classmethod
    def from_sites(cls, sites: Iterable[Site]) -> "Window":
        sites = [tuple(int(c) for c in s) for s in sites]
        if not sites:
            raise ValueError("window needs at least one site")
        dim = len(sites[0])
        radius = max(l1_norm(s) for s in sites)
        return cls(dim, radius, sites)

    def __contains__(self, x: Site) -> bool:
        return x in self._site_set

    def index_of(self, x: Site) -> int:
        return self._index[x]

    @property
    def site_count(self) -> int:
        return len(self.sites)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Window)
            and self.dim == other.dim
            and self.radius == other.radius
            and self.sites == other.sites
        )

    def __hash__(self) -> int:
        return hash((self.dim, self.radius, self.sites))

    def __repr__(self) -> str:
        if self.is_ball:
            return f"Window(dim={self.dim}, radius={self.radius})"
        return f"Window.from_sites(<{len(self.sites)} sites>, dim={self.dim})"


class Configuration(Mapping):
    """Immutable sparse occupancy map eta: window sites -> positive ints.

    Zero sites are absent from the map.  Mapping iteration runs over occupied
    sites only; ``eta.get(x, 0)`` reads any site's occupancy.
    """

    __slots__ = ("window", "_counts")

    def __init__(self, window: Window, counts: Mapping[Site, int] | Iterable = ()):
        items = counts.items() if isinstance(counts, Mapping) else counts
        cleaned: dict[Site, int] = {}
        for site, n in items:
            site = tuple(int(c) for c in site)
            n = int(n)
            if n < 0:
                raise ValueError(f"negative occupancy {n} at {site}")
            if n == 0:
                continue
            if site not in window:
                raise ValueError(f"site {site} outside the active window")
            cleaned[site] = n
        self.window = window
        self._counts = cleaned

    @classmethod
    def empty(cls, window: Window) -> "Configuration":
        return cls(window, ())

    @classmethod
    def single(cls, window: Window, site: Site, n: int = 1) -> "Configuration":
        return cls(window, {tuple(site): n})

    def __getitem__(self, site: Site) -> int:
        return self._counts[site]

    def __iter__(self) -> Iterator[Site]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def occupancy(self, site: Site) -> int:
        return self._counts.get(site, 0)

    def mass(self) -> int:
        return sum(self._counts.values())

    @property
    def support(self) -> frozenset:
        return frozenset(self._counts)

    def counts_dict(self) -> dict[Site, int]:
        """Mutable copy for engine internals."""
        return dict(self._counts)

    def with_delta(self, site: Site, delta: int) -> "Configuration":
        site = tuple(site)
        if site not in self.window:
            raise ValueError(f"site {site} outside the active window")
        n = self._counts.get(site, 0) + delta
        if n < 0:
            raise ValueError(f"occupancy would go negative at {site}")
        new = dict(self._counts)
        if n == 0:
            new.pop(site, None)
        else:
            new[site] = n
        return Configuration(self.window, new)

    # -- serialization ------------------------------------------------------

    def to_json_obj(self) -> dict:
        counts = [[list(s), n] for s, n in sorted(self._counts.items())]
        if self.window.is_ball:
            return {"dim": self.window.dim, "radius": self.window.radius,
                    "counts": counts}
        return {"dim": self.window.dim,
                "sites": [list(s) for s in self.window.sites],
                "counts": counts}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":"))

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Configuration":
        if "sites" in obj:
            window = Window.from_sites(tuple(s) for s in obj["sites"])
        else:
            window = Window(int(obj["dim"]), int(obj["radius"]))
        return cls(window, ((tuple(s), n) for s, n in obj["counts"]))

    @classmethod
    def from_json(cls, text: str) -> "Configuration":
        return cls.from_json_obj(json.loads(text))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Configuration)
            and self.window == other.window
            and self._counts == other._counts
        )

    def __hash__(self):
        return hash((self.window, tuple(sorted(self._counts.items()))))

    def __repr__(self) -> str:
        body = ", ".join(f"{s}:{n}" for s, n in sorted(self._counts.items()))
        return f"Configuration({{{body}}})"


def weighted_norm(eta: Mapping[Site, int], w: Callable[[Site], float]) -> float:
    """sum_x w(x) eta(x); summation in sorted site order for reproducibility."""
    return sum(w(s) * n for s, n in sorted(eta.items()))


# ---------------------------------------------------------------------------
# kernels


class KernelConfigError(ValueError):
    """Raised when kernel family parameters violate their constraints."""


class KernelValidationError(ValueError):
    """Raised when the weighted-sum ratio check fails (evenness or divergence)."""


class FiniteKernel:
    """Even, non-negative kernel with finite support, given by offset -> value."""

    __slots__ = ("dim", "radius", "_table")

    def __init__(self, dim: int, table: Mapping[Site, float]):
        cleaned: dict[Site, float] = {}
        for z, v in table.items():
            z = tuple(int(c) for c in z)
            if len(z) != dim:
                raise ValueError(f"offset {z} has dimension {len(z)}, expected {dim}")
            v = float(v)
            if v < 0:
                raise ValueError(f"negative kernel value {v} at {z}")
            if v != 0.0:
                cleaned[z] = v
        for z, v in cleaned.items():
            neg = tuple(-c for c in z)
            if cleaned.get(neg) != v:
                raise ValueError(f"kernel not even: value at {z} is {v}, at {neg} is "
                                 f"{cleaned.get(neg, 0.0)}")
        self.dim = dim
        self._table = cleaned
        self.radius = max((l1_norm(z) for z in cleaned), default=0)

    @classmethod
    def from_pairs(cls, dim: int, pairs: Iterable) -> "FiniteKernel":
        """Build from the config-file form [[offset coords...], value]."""
        table: dict[Site, float] = {}
        for offsets, v in pairs:
            z = tuple(int(c) for c in offsets)
            if z in table and table[z] != float(v):
                raise ValueError(f"conflicting values for offset {z}")
            table[z] = float(v)
        return cls(dim, table)

    @classmethod
    def ball_indicator(cls, dim: int, radius: int, value: float = 1.0) -> "FiniteKernel":
        return cls(dim, {z: value for z in ball_sites(dim, radius)})

    @classmethod
    def singleton(cls, dim: int, value: float) -> "FiniteKernel":
        return cls(dim, {tuple([0] * dim): value})

    def __call__(self, z: Site) -> float:
        return self._table.get(tuple(z), 0.0)

    def support(self) -> tuple[tuple[Site, float], ...]:
        return tuple(sorted(self._table.items()))

    def is_zero(self) -> bool:
        return not self._table

    def scaled(self, factor: float) -> "FiniteKernel":
        return FiniteKernel(self.dim, {z: v * factor for z, v in self._table.items()})

    def plus(self, other: "FiniteKernel") -> "FiniteKernel":
        table = dict(self._table)
        for z, v in other._table.items():
            table[z] = table.get(z, 0.0) + v
        return FiniteKernel(self.dim, table)

    def __repr__(self) -> str:
        return f"FiniteKernel(dim={self.dim}, radius={self.radius}, " \
               f"{len(self._table)} offsets)"


@dataclass(frozen=True)
class KernelValidation:
    c_wa: float
    worst_site: Site


@dataclass(frozen=True)
class KernelPair:
    """Weight w and interaction kernel a with their validated constant."""

    family_tag: str
    w: Callable[[Site], float]
    a: Callable[[Site], float]
    c_wa: float
    worst_site: Site
    dim: int
    # finite interaction radius of a; None means infinite support with a
    # certified truncation margin (built-in decaying families only)
    a_radius: int | None = None
    params: tuple = ()


def _ring_count(dim: int, s: int) -> int:
    """Number of z in Z^d with |z|_1 = s (exact)."""
    if s == 0:
        return 1
    return sum(
        (2 ** j) * math.comb(dim, j) * math.comb(s - 1, j - 1)
        for j in range(1, min(dim, s) + 1)
    )


def _poly_tail_relative(q: float, p: float, c: float, dim: int,
                        ball_radius: int, margin: int) -> float:
    """Upper bound on the relative inner-sum truncation error for the
    polynomial family, at ``margin`` sites beyond the validation ball.

    Dropped terms have |y| > Y (then a(x-y) <= c/(1+(|y|-R)^p)) or
    |x-y| > Y (then w(y) <= 1/(1+(|x-y|-R)^q)); both tails are ring sums
    with two polynomially decaying factors.  Relative to the smallest
    weight on the ball, w(R) = 1/(1+R^q).
    """
    Y = ball_radius + margin
    inv_wmin = 1.0 + float(ball_radius) ** q

    def tail(exp_main: float, exp_shifted: float) -> float:
        # sum over s > Y of ring(d,s) / (1+s^exp_main) / (1+(s-R)^exp_shifted)
        total = 0.0
        s = Y + 1
        while True:
            term = _ring_count(dim, s) / (1.0 + float(s) ** exp_main)
            term /= 1.0 + float(max(s - ball_radius, 0)) ** exp_shifted
            total += term
            if term < 1e-4 * total or s > 100 * Y + 1000:
                total += term * s  # integral-style remainder, conservative
                break
            s += 1
        return total

    return inv_wmin * c * (tail(q, p) + tail(p, q))


def _builtin_margin(family_tag: str, params: dict, dim: int, ball_radius: int) -> int:
    """Truncation margin certifying a relative inner-sum tail below TAIL_TOL."""
    if family_tag == "exp-indicator":
        return int(params["k"])
    if family_tag == "exp-exp":
        q, p, c = params["q"], params["p"], params["c"]
        logs = 44.0 + max(0.0, math.log(c))
        m = max((q * ball_radius + logs) / p, logs / q)
        return int(math.ceil(m)) + 2 * dim
    if family_tag == "polynomial":
        q, p, c = params["q"], params["p"], params["c"]
        margin = ball_radius + 4
        while _poly_tail_relative(q, p, c, dim, ball_radius, margin) > TAIL_TOL:
            margin = int(margin * 1.5) + 1
            if 2 * (ball_radius + margin) + 1 > 3e7:
                raise KernelConfigError(
                    "polynomial family: cannot certify the inner-sum tail "
                    f"with ball radius {ball_radius}; reduce the validation ball"
                )
        return margin
    raise KernelConfigError(f"unknown family tag {family_tag!r}")


def _grid_eval(f: Callable[[Site], float], dim: int, radius: int) -> np.ndarray:
    """Dense evaluation of f on [-radius, radius]^d."""
    n = 2 * radius + 1
    if n ** dim > 3e7:
        raise KernelConfigError(
            f"validation grid of {n}^{dim} points is too large; "
            "reduce the ball radius"
        )
    out = np.empty((n,) * dim)
    for idx in np.ndindex(out.shape):
        out[idx] = f(tuple(i - radius for i in idx))
    return out


def _inner_sums_1d(w_grid: np.ndarray, a: Callable[[Site], float],
                   y_radius: int, ball_radius: int) -> dict[Site, float]:
    """Exact float64 inner sums sum_y w(y) a(x-y) for x in the 1d ball.

    Per-x dot products keep full precision even when w spans many orders of
    magnitude (FFT convolution would not).
    """
    big_r = y_radius + ball_radius
    a_big = np.array([a((z,)) for z in range(-big_r, big_r + 1)])
    out: dict[Site, float] = {}
    for x in range(-ball_radius, ball_radius + 1):
        # slice of a at offsets x - y, y = -Y..Y, reversed to align with w_grid
        lo = x - y_radius + big_r
        sl = a_big[lo:lo + 2 * y_radius + 1][::-1]
        out[(x,)] = float(np.dot(w_grid, sl))
    return out


def validate_kernel(
    w: Callable[[Site], float],
    a: Callable[[Site], float],
    ball_radius: int,
    dim: int = 1,
    *,
    a_radius: int | None = None,
    margin: int | None = None,
) -> KernelValidation:
    """Compute c_wa = max over the ball of sum_y w(y) a(x-y) / w(x).

    ``a_radius`` declares a finite interaction radius (required for custom
    kernels; the inner sum is then exact).  ``margin`` overrides the
    truncation margin for infinite-support kernels.  Raises
    KernelValidationError if w or a fails evenness on the ball, or if the
    ratio grows monotonically at the ball boundary (inequality fails).
    """
    if ball_radius < 1:
        raise ValueError("ball radius must be >= 1")
    if margin is None:
        if a_radius is None:
            raise ValueError(
                "need a finite a_radius or an explicit truncation margin"
            )
        margin = a_radius

    # evenness, checked exactly on the validation ball
    for x in ball_sites(dim, ball_radius):
        neg = tuple(-c for c in x)
        if w(x) != w(neg):
            raise KernelValidationError(f"w not even at {x}")
        if a(x) != a(neg):
            raise KernelValidationError(f"a not even at {x}")

    y_radius = ball_radius + margin
    w_grid = _grid_eval(w, dim, y_radius)
    if np.any(w_grid <= 0):
        raise KernelValidationError("weight w must be strictly positive")

    eff_a_radius = min(y_radius, a_radius) if a_radius is not None else y_radius
    if dim == 1:
        sums = _inner_sums_1d(w_grid, a, y_radius, ball_radius)
        if any(a((z,)) < 0 for z in range(-eff_a_radius, eff_a_radius + 1)):
            raise KernelValidationError("kernel a must be non-negative")
        ratios = {x: sums[x] / w(x) for x in ball_sites(1, ball_radius)}
    else:
        a_grid = _grid_eval(a, dim, eff_a_radius)
        if np.any(a_grid < 0):
            raise KernelValidationError("kernel a must be non-negative")
        if w_grid.size * a_grid.size > 2e9:
            raise KernelConfigError(
                "kernel validation cost too high at this dimension/ball; "
                "reduce the ball radius or the truncation margin"
            )
        # direct method: FFT round-off would swamp exponentially small weights
        conv = _convolve(w_grid, a_grid, mode="full", method="direct")
        a_grid_radius = (a_grid.shape[0] - 1) // 2
        center = y_radius + a_grid_radius
        ratios = {}
        for x in ball_sites(dim, ball_radius):
            idx = tuple(c + center for c in x)
            ratios[x] = float(conv[idx]) / w(x)

    worst_site = max(ratios, key=lambda s: (ratios[s], s))
    c_wa = ratios[worst_site]

    # divergence check: ratio maxima per l1 ring, growing at the boundary.
    # A convergent pair approaches its supremum with geometrically shrinking
    # ring-to-ring increments, so clear increment decay is accepted even when
    # the boundary ring is still the running maximum.
    ring_max = [0.0] * (ball_radius + 1)
    for x, r in ratios.items():
        s = l1_norm(x)
        if r > ring_max[s]:
            ring_max[s] = r
    look = min(5, ball_radius)
    if (
        l1_norm(worst_site) == ball_radius
        and ring_max[ball_radius] > ring_max[ball_radius - look] * (1.0 + 1e-3)
    ):
        gains = [ring_max[i] - ring_max[i - 1]
                 for i in range(ball_radius - look + 1, ball_radius + 1)]
        # lag-2 comparison: the worst site's ring parity can alternate, which
        # makes consecutive gains oscillate even for convergent pairs
        decaying = len(gains) >= 3 and all(
            later <= 0.8 * earlier for earlier, later in zip(gains, gains[2:])
        )
        if not decaying:
            raise KernelValidationError(
                "weighted-sum ratio keeps growing at the ball boundary "
                f"(ring {ball_radius - look}: {ring_max[ball_radius - look]:.6g}, "
                f"ring {ball_radius}: {ring_max[ball_radius]:.6g}); the "
                "domination inequality fails for this pair, or the ball is too "
                "small to certify it -- increase ball_radius to re-check"
            )
    return KernelValidation(c_wa=c_wa, worst_site=worst_site)


_DEFAULT_BALL = {1: 50, 2: 24, 3: 10}


def make_kernel(family_tag: str, params: Mapping[str, float], dim: int,
                ball_radius: int | None = None) -> KernelPair:
    """Build and validate one of the built-in weight/kernel families.

    exp-exp:        w = exp(-q|x|), a = c exp(-p|x|), needs p > q > 0, c > 0
    exp-indicator:  w = exp(-q|x|), a = c I{|x| <= k}, needs q > 0, c > 0, k >= 1
    polynomial:     w = 1/(1+|x|^q), a = c/(1+|x|^p), needs p > q > d, c > 0
    custom:         params carry callables w, a and a finite a_radius
    """
    if dim < 1:
        raise KernelConfigError("dimension must be >= 1")
    if ball_radius is None:
        ball_radius = _DEFAULT_BALL.get(dim, 6)
    p = dict(params)

    if family_tag == "custom":
        w = p.pop("w")
        a = p.pop("a")
        a_radius = p.pop("a_radius", None)
        if a_radius is None and isinstance(a, FiniteKernel):
            a_radius = a.radius
        if a_radius is None:
            raise KernelConfigError(
                "custom kernels must declare a finite interaction radius a_radius"
            )
        if p:
            raise KernelConfigError(f"unknown custom-kernel params {sorted(p)}")
        check = validate_kernel(w, a, ball_radius, dim, a_radius=int(a_radius))
        return KernelPair("custom", w, a, check.c_wa, check.worst_site, dim,
                          a_radius=int(a_radius))

    if family_tag == "exp-exp":
        q, pp, c = (float(p.pop(k, float("nan"))) for k in ("q", "p", "c"))
        _reject_unknown(p)
        if not (c > 0):
            raise KernelConfigError("exp-exp requires c > 0")
        if not (pp > q > 0):
            raise KernelConfigError("exp-exp requires p > q > 0")
        w = lambda x: math.exp(-q * l1_norm(x))          # noqa: E731
        a = lambda x: c * math.exp(-pp * l1_norm(x))     # noqa: E731
        fam_params = {"q": q, "p": pp, "c": c}
        a_radius = None
    elif family_tag == "exp-indicator":
        q = float(p.pop("q", float("nan")))
        c = float(p.pop("c", float("nan")))
        k = p.pop("k", None)
        _reject_unknown(p)
        if not (q > 0):
            raise KernelConfigError("exp-indicator requires q > 0")
        if not (c > 0):
            raise KernelConfigError("exp-indicator requires c > 0")
        if k is None or int(k) != k or int(k) < 1:
            raise KernelConfigError("exp-indicator requires an integer k >= 1")
        k = int(k)
        w = lambda x: math.exp(-q * l1_norm(x))          # noqa: E731
        a = lambda x: c if l1_norm(x) <= k else 0.0      # noqa: E731
        fam_params = {"q": q, "c": c, "k": k}
        a_radius = k
    elif family_tag == "polynomial":
        q, pp, c = (float(p.pop(k, float("nan"))) for k in ("q", "p", "c"))
        _reject_unknown(p)
        if not (c > 0):
            raise KernelConfigError("polynomial requires c > 0")
        if not (pp > q > dim):
            raise KernelConfigError("polynomial requires p > q > d")
        if dim > 1:
            raise KernelConfigError(
                "polynomial family tail certification is limited to d = 1"
            )
        w = lambda x: 1.0 / (1.0 + float(l1_norm(x)) ** q)       # noqa: E731
        a = lambda x: c / (1.0 + float(l1_norm(x)) ** pp)        # noqa: E731
        fam_params = {"q": q, "p": pp, "c": c}
        a_radius = None
    else:
        raise KernelConfigError(f"unknown kernel family {family_tag!r}")

    margin = _builtin_margin(family_tag, fam_params, dim, ball_radius)
    check = validate_kernel(w, a, ball_radius, dim, a_radius=a_radius,
                            margin=margin)
    return KernelPair(
        family_tag, w, a, check.c_wa, check.worst_site, dim,
        a_radius=a_radius, params=tuple(sorted(fam_params.items())),
    )


def _reject_unknown(rest: dict) -> None:
    bad = [k for k, v in rest.items() if v is not None]
    if bad:
        raise KernelConfigError(f"unknown kernel params {sorted(bad)}")
