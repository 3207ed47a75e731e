"""Compiled hot loops for the survival experiments.

Explicit-state xoshiro256++ streams seeded per (seed, replicate) drive d=1
Gillespie kernels: a single-run kernel for survival estimates and a
shared-noise coupled-pair kernel for pathwise-domination checks at scale.
Replicates use independent streams and write disjoint output slots, so the
parallel loops give identical results at any thread count.

Event selection uses a Fenwick tree over per-site total rates (logarithmic
select and update); neighbor occupancy sums are maintained incrementally in
integers, so per-site rates are always recomputed exactly and only the tree
accumulates float drift, which a periodic rebuild clears.

Model kinds (integer codes shared with :mod:`latbd.survival`):
0 — branching birth with quadratic local death, 1 — branching birth with
linear local death, 2 — contact (birth only into empty sites, unit death,
occupancy 0/1).
"""

import numba as nb
import numpy as np

U64 = np.uint64

_GOLDEN = U64(0x9E3779B97F4A7C15)
_MIX1 = U64(0xBF58476D1CE4E5B9)
_MIX2 = U64(0x94D049BB133111EB)

KIND_BRANCH_QUADRATIC = 0
KIND_BRANCH_LINEAR = 1
KIND_CONTACT = 2

_REBUILD_EVERY = 4096


@nb.njit(cache=True, inline="always")
def _mix(z):
    z = (z + _GOLDEN)
    z = (z ^ (z >> U64(30))) * _MIX1
    z = (z ^ (z >> U64(27))) * _MIX2
    return z ^ (z >> U64(31))


@nb.njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << k) | (x >> (U64(64) - k))


@nb.njit(cache=True, inline="always")
def _init_state(seed, rep, s):
    z = _mix(U64(seed) * _MIX1 ^ _mix(U64(rep)))
    s[0] = _mix(z)
    s[1] = _mix(s[0])
    s[2] = _mix(s[1])
    s[3] = _mix(s[2])


@nb.njit(cache=True, inline="always")
def _next_u64(s):
    r = _rotl(s[0] + s[3], U64(23)) + s[0]
    t = s[1] << U64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], U64(45))
    return r


@nb.njit(cache=True, inline="always")
def _uniform(s):
    return float(_next_u64(s) >> U64(11)) * 1.1102230246251565e-16


@nb.njit(cache=True, inline="always")
def _birth_from_sum(kind, lam, occ, nbr_sum):
    if kind == 2 and occ > 0:
        return 0.0
    return lam * float(nbr_sum)


@nb.njit(cache=True, inline="always")
def _death_rate(kind, occ):
    if occ == 0:
        return 0.0
    if kind == 0:
        return float(occ * occ)
    return float(occ)


@nb.njit(cache=True, inline="always")
def _tree_add(tree, size, i, delta):
    p = i + 1
    while p <= size:
        tree[p] += delta
        p += p & (-p)


@nb.njit(cache=True, inline="always")
def _tree_rebuild(tree, site_tot, size):
    for p in range(size + 1):
        tree[p] = 0.0
    for i in range(site_tot.shape[0]):
        _tree_add(tree, size, i, site_tot[i])


@nb.njit(cache=True, inline="always")
def _tree_select(tree, size, top_bit, u):
    """First index whose prefix sum exceeds u; also the leftover inside it."""
    pos = 0
    rem = u
    bit = top_bit
    while bit > 0:
        nxt = pos + bit
        if nxt <= size and tree[nxt] <= rem:
            pos = nxt
            rem -= tree[nxt]
        bit >>= 1
    return pos, rem


@nb.njit(cache=True, inline="always")
def _top_bit(size):
    bit = 1
    while (bit << 1) <= size:
        bit <<= 1
    return bit


@nb.njit(cache=True)
def single_run(kind, lam, radius, horizon, seed, rep, max_events):
    """One trajectory from a single particle at the origin.

    Returns (survived, events, final_mass, exploded); ``survived`` is 1 when
    the configuration is nonempty at the horizon.
    """
    length = 2 * radius + 1
    eta = np.zeros(length, np.int64)
    eta[radius] = 1
    nbr = np.zeros(length, np.int64)
    for i in range(max(0, radius - 1), min(length, radius + 2)):
        nbr[i] = 1
    b = np.empty(length)
    d = np.empty(length)
    site_tot = np.empty(length)
    for i in range(length):
        b[i] = _birth_from_sum(kind, lam, eta[i], nbr[i])
        d[i] = _death_rate(kind, eta[i])
        site_tot[i] = b[i] + d[i]
    tree = np.zeros(length + 1)
    _tree_rebuild(tree, site_tot, length)
    top = _top_bit(length)
    total = site_tot.sum()
    state = np.empty(4, U64)
    _init_state(seed, rep, state)
    t = 0.0
    events = 0
    mass = 1
    while True:
        if mass == 0:
            return 0, events, 0, 0
        dt = -np.log1p(-_uniform(state)) / total
        if t + dt > horizon:
            return 1, events, mass, 0
        t += dt
        if events >= max_events:
            return 1, events, mass, 1
        events += 1
        site, rem = _tree_select(tree, length, top, _uniform(state) * total)
        if site >= length:
            site = length - 1
        while site_tot[site] <= 0.0 and site > 0:
            site -= 1
        if rem < b[site]:
            delta = 1
        elif d[site] > 0.0:
            delta = -1
        else:
            delta = 1
        eta[site] += delta
        mass += delta
        lo = site - 1 if site > 0 else 0
        hi = site + 1 if site + 1 < length else length - 1
        for j in range(lo, hi + 1):
            nbr[j] += delta
        for j in range(lo, hi + 1):
            nb_ = _birth_from_sum(kind, lam, eta[j], nbr[j])
            nd = _death_rate(kind, eta[j])
            new_tot = nb_ + nd
            diff = new_tot - site_tot[j]
            b[j] = nb_
            d[j] = nd
            if diff != 0.0:
                site_tot[j] = new_tot
                total += diff
                _tree_add(tree, length, j, diff)
        if events % _REBUILD_EVERY == 0:
            _tree_rebuild(tree, site_tot, length)
            total = site_tot.sum()


@nb.njit(cache=True, parallel=True)
def batch_single(kind, lam, radius, horizon, seed, n_reps, max_events):
    """Per-replicate (survived, events, final_mass, exploded) arrays."""
    survived = np.empty(n_reps, np.int64)
    events = np.empty(n_reps, np.int64)
    masses = np.empty(n_reps, np.int64)
    exploded = np.empty(n_reps, np.int64)
    for rep in nb.prange(n_reps):
        sv, ev, m, ex = single_run(kind, lam, radius, horizon, seed, rep,
                                   max_events)
        survived[rep] = sv
        events[rep] = ev
        masses[rep] = m
        exploded[rep] = ex
    return survived, events, masses, exploded


@nb.njit(cache=True)
def coupled_run(kind_lo, lam_lo, kind_up, lam_up, radius, horizon, seed, rep,
                max_events):
    """Shared-noise pair from a single particle each, joint-rate coupling.

    Per site the joint channels are both-birth = min of the two birth rates,
    each one-sided birth excess, both-death = min of the death rates, and
    each one-sided death excess — so each marginal sees exactly its own
    rates.  After every event the pointwise order at the touched site is
    checked.  Returns (survived_lo, survived_up, order_violations,
    first_violation_time, first_violation_offset, lone_lower_births, events,
    exploded); time is -1 and the origin-relative offset 0 when no violation
    occurred.
    """
    length = 2 * radius + 1
    lo = np.zeros(length, np.int64)
    up = np.zeros(length, np.int64)
    lo[radius] = 1
    up[radius] = 1
    nbr_lo = np.zeros(length, np.int64)
    nbr_up = np.zeros(length, np.int64)
    for i in range(max(0, radius - 1), min(length, radius + 2)):
        nbr_lo[i] = 1
        nbr_up[i] = 1
    bl = np.empty(length)
    bu = np.empty(length)
    dl = np.empty(length)
    du = np.empty(length)
    site_tot = np.empty(length)
    for i in range(length):
        bl[i] = _birth_from_sum(kind_lo, lam_lo, lo[i], nbr_lo[i])
        bu[i] = _birth_from_sum(kind_up, lam_up, up[i], nbr_up[i])
        dl[i] = _death_rate(kind_lo, lo[i])
        du[i] = _death_rate(kind_up, up[i])
        site_tot[i] = max(bl[i], bu[i]) + max(dl[i], du[i])
    tree = np.zeros(length + 1)
    _tree_rebuild(tree, site_tot, length)
    top = _top_bit(length)
    total = site_tot.sum()
    state = np.empty(4, U64)
    _init_state(seed, rep, state)
    t = 0.0
    events = 0
    mass_lo = 1
    mass_up = 1
    violations = 0
    first_t = -1.0
    first_site = 0
    lone_lower_births = 0
    while True:
        if mass_lo == 0 and mass_up == 0:
            return (0, 0, violations, first_t, first_site,
                    lone_lower_births, events, 0)
        dt = -np.log1p(-_uniform(state)) / total
        if t + dt > horizon:
            return (1 if mass_lo > 0 else 0, 1 if mass_up > 0 else 0,
                    violations, first_t, first_site, lone_lower_births,
                    events, 0)
        t += dt
        if events >= max_events:
            return (1 if mass_lo > 0 else 0, 1 if mass_up > 0 else 0,
                    violations, first_t, first_site, lone_lower_births,
                    events, 1)
        events += 1
        site, rem = _tree_select(tree, length, top, _uniform(state) * total)
        if site >= length:
            site = length - 1
        while site_tot[site] <= 0.0 and site > 0:
            site -= 1
        both_b = min(bl[site], bu[site])
        lob = bl[site] - both_b
        upb = bu[site] - both_b
        both_d = min(dl[site], du[site])
        lod = dl[site] - both_d
        upd = du[site] - both_d
        hit_lo = False
        hit_up = False
        if rem < both_b:
            hit_lo = True
            hit_up = True
            delta = 1
        elif rem < both_b + lob:
            hit_lo = True
            delta = 1
            lone_lower_births += 1
        elif rem < both_b + lob + upb:
            hit_up = True
            delta = 1
        elif rem < both_b + lob + upb + both_d:
            hit_lo = True
            hit_up = True
            delta = -1
        elif rem < both_b + lob + upb + both_d + lod:
            hit_lo = True
            delta = -1
        elif rem < both_b + lob + upb + both_d + lod + upd:
            hit_up = True
            delta = -1
        else:
            # float fringe: largest joint segment
            best = both_b
            pick = 0
            if lob > best:
                best = lob
                pick = 1
            if upb > best:
                best = upb
                pick = 2
            if both_d > best:
                best = both_d
                pick = 3
            if lod > best:
                best = lod
                pick = 4
            if upd > best:
                pick = 5
            delta = 1 if pick < 3 else -1
            hit_lo = pick == 0 or pick == 1 or pick == 3 or pick == 4
            hit_up = pick == 0 or pick == 2 or pick == 3 or pick == 5
            if pick == 1:
                lone_lower_births += 1
        left = site - 1 if site > 0 else 0
        right = site + 1 if site + 1 < length else length - 1
        if hit_lo:
            lo[site] += delta
            mass_lo += delta
            for j in range(left, right + 1):
                nbr_lo[j] += delta
        if hit_up:
            up[site] += delta
            mass_up += delta
            for j in range(left, right + 1):
                nbr_up[j] += delta
        if lo[site] > up[site]:
            violations += 1
            if first_t < 0.0:
                first_t = t
                first_site = site - radius
        for j in range(left, right + 1):
            if hit_lo:
                bl[j] = _birth_from_sum(kind_lo, lam_lo, lo[j], nbr_lo[j])
                dl[j] = _death_rate(kind_lo, lo[j])
            if hit_up:
                bu[j] = _birth_from_sum(kind_up, lam_up, up[j], nbr_up[j])
                du[j] = _death_rate(kind_up, up[j])
            new_tot = max(bl[j], bu[j]) + max(dl[j], du[j])
            diff = new_tot - site_tot[j]
            if diff != 0.0:
                site_tot[j] = new_tot
                total += diff
                _tree_add(tree, length, j, diff)
        if events % _REBUILD_EVERY == 0:
            _tree_rebuild(tree, site_tot, length)
            total = site_tot.sum()


@nb.njit(cache=True, parallel=True)
def batch_coupled(kind_lo, lam_lo, kind_up, lam_up, radius, horizon, seed,
                  n_reps, max_events):
    """Per-replicate arrays from :func:`coupled_run`."""
    surv_lo = np.empty(n_reps, np.int64)
    surv_up = np.empty(n_reps, np.int64)
    violations = np.empty(n_reps, np.int64)
    first_t = np.empty(n_reps)
    first_site = np.empty(n_reps, np.int64)
    lone = np.empty(n_reps, np.int64)
    events = np.empty(n_reps, np.int64)
    exploded = np.empty(n_reps, np.int64)
    for rep in nb.prange(n_reps):
        sl, su, vi, ft, fs, lb, ev, ex = coupled_run(
            kind_lo, lam_lo, kind_up, lam_up, radius, horizon, seed, rep,
            max_events)
        surv_lo[rep] = sl
        surv_up[rep] = su
        violations[rep] = vi
        first_t[rep] = ft
        first_site[rep] = fs
        lone[rep] = lb
        events[rep] = ev
        exploded[rep] = ex
    return (surv_lo, surv_up, violations, first_t, first_site, lone, events,
            exploded)
