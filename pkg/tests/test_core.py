"""Core lattice/window/configuration/kernel tests.

Expected kernel constants are frozen from independent brute-force summation
oracles computed in this file (exhaustive ratio maximization with plain
Python loops), not from the library code under test.
"""

import itertools
import json
import math

import numpy as np
import pytest

from latbd.core import (
    Configuration,
    FiniteKernel,
    KernelConfigError,
    KernelValidationError,
    Window,
    ball_sites,
    l1_distance,
    l1_norm,
    make_kernel,
    validate_kernel,
    weighted_norm,
)


def test_l1_distance_examples():
    assert l1_distance((0, 0), (0, 0)) == 0
    assert l1_distance((1, -2), (0, 0)) == 3
    assert l1_distance((2, 3, -1), (-1, 0, 0)) == 7


def test_l1_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        l1_distance((0,), (0, 0))


def test_l1_is_a_metric():
    rng = np.random.default_rng(7)
    for _ in range(500):
        d = int(rng.integers(1, 4))
        x, y, z = (tuple(int(v) for v in rng.integers(-20, 21, d)) for _ in range(3))
        assert l1_distance(x, y) == l1_distance(y, x)
        assert l1_distance(x, y) >= 0
        assert (l1_distance(x, y) == 0) == (x == y)
        assert l1_distance(x, z) <= l1_distance(x, y) + l1_distance(y, z)


def exact_ball_count(d, r):
    # closed form for #{x in Z^d : |x|_1 <= r}
    return sum(2**j * math.comb(d, j) * math.comb(r, j)
               for j in range(0, min(d, r) + 1))


def test_ball_cardinality_matches_closed_form():
    for d in (1, 2, 3):
        for r in (0, 1, 2, 5):
            assert len(ball_sites(d, r)) == exact_ball_count(d, r)


def test_ball_sites_sorted_unique():
    sites = ball_sites(2, 3)
    assert sites == tuple(sorted(set(sites)))


def test_window_basics():
    win = Window(1, 5)
    assert win.boundary_rule == "frozen-zero"
    assert win.site_count == 11
    assert (3,) in win and (6,) not in win
    assert win.index_of((-5,)) == 0
    assert win == Window(1, 5)
    assert hash(win) == hash(Window(1, 5))


def test_window_from_sites():
    win = Window.from_sites([(1,), (0,), (1,)])
    assert win.sites == ((0,), (1,))
    assert not win.is_ball
    assert (0,) in win and (-1,) not in win
    with pytest.raises(ValueError):
        Window.from_sites([])
    with pytest.raises(ValueError):
        Window.from_sites([(0,), (0, 0)])


def test_configuration_validation():
    win = Window(1, 2)
    eta = Configuration(win, {(0,): 2, (1,): 1, (2,): 0})
    assert eta.mass() == 3
    assert eta.occupancy((2,)) == 0  # zero dropped
    assert len(eta) == 2
    assert eta.get((0,), 0) == 2 and eta.get((2,), 0) == 0
    with pytest.raises(ValueError):
        Configuration(win, {(3,): 1})   # outside window
    with pytest.raises(ValueError):
        Configuration(win, {(0,): -1})


def test_configuration_with_delta():
    win = Window(1, 2)
    eta = Configuration.single(win, (0,))
    up = eta.with_delta((0,), 1)
    down = up.with_delta((0,), -1).with_delta((0,), -1)
    assert up.occupancy((0,)) == 2
    assert down.mass() == 0
    assert eta.occupancy((0,)) == 1  # original untouched
    with pytest.raises(ValueError):
        down.with_delta((0,), -1)


def test_configuration_json_roundtrip_and_schema():
    win = Window(1, 5)
    eta = Configuration(win, {(1,): 1, (0,): 2, (-3,): 4})
    obj = json.loads(eta.to_json())
    assert obj == {"dim": 1, "radius": 5,
                   "counts": [[[-3], 4], [[0], 2], [[1], 1]]}
    back = Configuration.from_json(eta.to_json())
    assert back == eta
    # byte-stable regardless of construction order
    eta2 = Configuration(win, {(-3,): 4, (1,): 1, (0,): 2})
    assert eta2.to_json() == eta.to_json()


def test_weighted_norm_examples():
    win = Window(1, 3)
    w = lambda x: math.exp(-abs(x[0]))  # noqa: E731
    assert weighted_norm(Configuration.empty(win), w) == 0.0
    assert weighted_norm(Configuration.single(win, (0,)), w) == 1.0
    eta = Configuration(win, {(0,): 2, (1,): 1})
    assert weighted_norm(eta, w) == pytest.approx(2 + math.exp(-1), abs=1e-15)


def test_weighted_norm_additive_and_monotone():
    win = Window(2, 4)
    rng = np.random.default_rng(11)
    w = lambda x: 1.0 / (1.0 + l1_norm(x))  # noqa: E731
    for _ in range(50):
        sites = [tuple(int(v) for v in rng.integers(-2, 3, 2)) for _ in range(6)]
        half = {s: 1 + int(rng.integers(0, 3)) for s in sites[:3]}
        other = {s: 1 + int(rng.integers(0, 3)) for s in sites[3:] if s not in half}
        a = Configuration(win, half)
        b = Configuration(win, other)
        merged = Configuration(win, {**half, **other})
        assert weighted_norm(merged, w) == pytest.approx(
            weighted_norm(a, w) + weighted_norm(b, w), rel=1e-12)
        bumped = Configuration(win, {**half, sites[0]: half[sites[0]] + 2})
        assert weighted_norm(bumped, w) >= weighted_norm(a, w)


# -- kernel validation ------------------------------------------------------

E_CONST = math.e + 1 + math.exp(-1)  # ratio of the unit exp-indicator family


def brute_force_c_wa(w, a, ball_radius, inner_radius):
    """Independent oracle: exhaustive ratio maximization with plain loops."""
    best, best_site = -1.0, None
    for x in range(-ball_radius, ball_radius + 1):
        s = 0.0
        for y in range(-inner_radius, inner_radius + 1):
            s += w((y,)) * a((x - y,))
        r = s / w((x,))
        if r > best:
            best, best_site = r, (x,)
    return best, best_site


def test_single_point_kernel():
    w = lambda x: 1.0 if x == (0,) else 0.5   # noqa: E731
    a = lambda x: 1.0 if x == (0,) else 0.0   # noqa: E731
    res = validate_kernel(w, a, 3, 1, a_radius=0)
    # ratio is w(x)*1/w(x) = 1 everywhere
    assert res.c_wa == pytest.approx(1.0, abs=1e-12)


def test_exp_indicator_constant():
    kp = make_kernel("exp-indicator", {"q": 1, "c": 1, "k": 1}, 1)
    assert abs(kp.c_wa - E_CONST) < 1e-9
    assert l1_norm(kp.worst_site) >= 1
    # against the independent brute-force oracle
    oracle, _ = brute_force_c_wa(kp.w, kp.a, 50, 51)
    assert abs(kp.c_wa - oracle) < 1e-12


def test_exp_indicator_linearity_in_c():
    kp = make_kernel("exp-indicator", {"q": 1, "c": 2, "k": 1}, 1)
    assert abs(kp.c_wa - 2 * E_CONST) < 1e-9


def test_exp_exp_finite_constant():
    kp = make_kernel("exp-exp", {"q": 1, "p": 2, "c": 1}, 1)
    oracle, _ = brute_force_c_wa(kp.w, kp.a, 50, 120)
    assert kp.c_wa == pytest.approx(oracle, abs=1e-11)


def test_polynomial_family():
    kp = make_kernel("polynomial", {"q": 2, "p": 3, "c": 1}, 1)
    oracle, oracle_site = brute_force_c_wa(kp.w, kp.a, 50, 200_000)
    assert kp.c_wa == pytest.approx(oracle, rel=1e-10)
    # even kernels: the two mirror sites tie, implementations may pick either
    assert l1_norm(kp.worst_site) == l1_norm(oracle_site)


def test_inequality_holds_on_ball():
    # invariant: sum_y w(y) a(x-y) <= c_wa w(x) + 1e-9 for every x in the ball
    for kp, inner in [
        (make_kernel("exp-indicator", {"q": 1, "c": 1, "k": 2}, 1), 54),
        (make_kernel("exp-exp", {"q": 0.8, "p": 1.7, "c": 0.5}, 1), 150),
    ]:
        for x in range(-50, 51):
            s = sum(kp.w((y,)) * kp.a((x - y,)) for y in range(-inner, inner + 1))
            assert s <= kp.c_wa * kp.w((x,)) + 1e-9


def test_parameter_rejection():
    with pytest.raises(KernelConfigError):
        make_kernel("exp-exp", {"q": 2, "p": 1, "c": 1}, 1)   # p < q
    with pytest.raises(KernelConfigError):
        make_kernel("exp-exp", {"q": 1, "p": 1, "c": 1}, 1)   # p == q
    with pytest.raises(KernelConfigError):
        make_kernel("exp-indicator", {"q": 1, "c": 1, "k": 0}, 1)
    with pytest.raises(KernelConfigError):
        make_kernel("polynomial", {"q": 0.5, "p": 3, "c": 1}, 1)  # q <= d
    with pytest.raises(KernelConfigError):
        make_kernel("no-such-family", {}, 1)


def test_divergence_detected_for_slow_kernel():
    # a decays slower than w: ratio grows like e^{(q-p)|x|}
    w = lambda x: math.exp(-1.0 * l1_norm(x))    # noqa: E731
    a = lambda x: math.exp(-0.5 * l1_norm(x))    # noqa: E731
    # oracle: the ratio really does grow along |x| = 10, 20, 40
    vals = []
    for xr in (10, 20, 40):
        s = sum(w((y,)) * a((xr - y,)) for y in range(-200, 201))
        vals.append(s / w((xr,)))
    assert vals[0] < vals[1] < vals[2]
    with pytest.raises(KernelValidationError):
        validate_kernel(w, a, 40, 1, margin=100)


def test_exp_exp_2d_small_ball():
    kp = make_kernel("exp-exp", {"q": 1, "p": 3, "c": 1}, 2, ball_radius=6)
    # independent 2d oracle on a small ball
    best = -1.0
    inner = 24
    for x in ball_sites(2, 6):
        s = 0.0
        for y in itertools.product(range(-inner, inner + 1), repeat=2):
            s += kp.w(y) * kp.a((x[0] - y[0], x[1] - y[1]))
        best = max(best, s / kp.w(x))
    assert kp.c_wa == pytest.approx(best, rel=1e-9)


def test_custom_kernel_requires_radius():
    w = lambda x: math.exp(-l1_norm(x))  # noqa: E731
    with pytest.raises(KernelConfigError):
        make_kernel("custom", {"w": w, "a": lambda x: 0.1}, 1)
    fk = FiniteKernel(1, {(-1,): 0.5, (0,): 1.0, (1,): 0.5})
    kp = make_kernel("custom", {"w": w, "a": fk}, 1)
    oracle, _ = brute_force_c_wa(w, fk, 50, 60)
    assert kp.c_wa == pytest.approx(oracle, abs=1e-12)
    assert kp.a_radius == 1


def test_finite_kernel_validation():
    with pytest.raises(ValueError):
        FiniteKernel(1, {(1,): 0.5})          # not even
    with pytest.raises(ValueError):
        FiniteKernel(1, {(0,): -1.0})         # negative
    fk = FiniteKernel.from_pairs(1, [[[1], 0.3], [[-1], 0.3], [[0], 1.0]])
    assert fk.radius == 1
    assert fk((1,)) == 0.3 and fk((2,)) == 0.0
    combined = fk.plus(FiniteKernel.singleton(1, 2.0))
    assert combined((0,)) == 3.0
