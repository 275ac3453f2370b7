"""Numba event loops for the voter model, walk pairs, and branching walks.

Sites live in a packed int64 encoding (fixed bits per coordinate, offset so
every field is nonnegative); jump offsets become plain int64 increments. The
occupied set is an open-addressing hash table with backshift deletion plus a
dense array for O(1) uniform site picks. Everything here is deliberately flat:
scalars, preallocated arrays, and a numpy Generator (Philox) for randomness.

Callers are responsible for sizing: `packing_for` picks the coordinate field
width and `check_displacement_budget` refuses configurations that could reach
the field boundary.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

EMPTY = np.int64(-1)

# bits per coordinate field, by dimension (keys stay within 62 bits)
_BITS_BY_D = {2: 31, 3: 21, 4: 15, 5: 12}


def packing_for(d: int) -> tuple[int, int]:
    """(bits, offset) for the packed coordinate encoding in dimension d."""
    if d not in _BITS_BY_D:
        raise ValueError(f"supported dimensions are 2..5, got {d}")
    bits = _BITS_BY_D[d]
    return bits, 1 << (bits - 1)


def pack_point(coords, bits: int, off: int) -> np.int64:
    key = np.int64(0)
    for i, c in enumerate(coords):
        v = int(c) + off
        if not 0 <= v < (1 << bits):
            raise ValueError(f"coordinate {c} outside packed range for {bits}-bit fields")
        key |= np.int64(v) << np.int64(i * bits)
    return key


def unpack_point(key: int, d: int, bits: int, off: int) -> np.ndarray:
    mask = (1 << bits) - 1
    return np.array([((int(key) >> (i * bits)) & mask) - off for i in range(d)],
                    dtype=np.int64)


def pack_deltas(offsets: np.ndarray, bits: int) -> np.ndarray:
    """Jump offsets as packed-key increments (valid while no field saturates)."""
    out = np.zeros(offsets.shape[0], dtype=np.int64)
    for j, off in enumerate(offsets):
        acc = 0
        for i, c in enumerate(off):
            acc += int(c) << (i * bits)
        out[j] = acc
    return out


def build_alias(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Walker alias table: sample j with one uniform (index + acceptance test)."""
    p = np.asarray(probs, dtype=float)
    p = p / p.sum()
    m = p.size
    accept = np.zeros(m)
    alias = np.zeros(m, dtype=np.int64)
    scaled = p * m
    small = [j for j in range(m) if scaled[j] < 1.0]
    large = [j for j in range(m) if scaled[j] >= 1.0]
    while small and large:
        s = small.pop()
        l = large.pop()
        accept[s] = scaled[s]
        alias[s] = l
        scaled[l] = scaled[l] - (1.0 - scaled[s])
        (small if scaled[l] < 1.0 else large).append(l)
    for j in large + small:
        accept[j] = 1.0
        alias[j] = j
    return accept, alias


def check_displacement_budget(d: int, sigma2: float, t_cap: float,
                              start_radius: float, support_radius: int) -> None:
    """Refuse runs that could plausibly reach the packed-field boundary.

    40 diffusive standard deviations plus the starting radius is astronomically
    conservative; hitting it would corrupt packed keys silently, so we refuse
    up front rather than check per event.
    """
    bits, off = packing_for(d)
    reach = start_radius + 40.0 * math.sqrt(sigma2 * max(t_cap, 1.0)) + support_radius + 2
    if reach >= off:
        raise ValueError(
            f"time cap {t_cap} with start radius {start_radius} could exceed the "
            f"{bits}-bit coordinate packing in d={d}; reduce the horizon")


@njit(cache=True, inline="always")
def _hash_key(key, mask):
    z = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    z ^= z >> np.uint64(29)
    return np.int64(z & np.uint64(mask))


@njit(cache=True, inline="always")
def _probe_slot(keys, mask, key):
    """Slot containing ``key``, or the first empty slot of its probe chain."""
    s = _hash_key(key, mask)
    while keys[s] != EMPTY and keys[s] != key:
        s = (s + 1) & mask
    return s


@njit(cache=True, inline="always")
def _table_insert(keys, slotidx, sites, siteslot, mask, s, key, k):
    keys[s] = key
    slotidx[s] = k
    sites[k] = key
    siteslot[k] = s
    return k + 1


@njit(cache=True, inline="always")
def _table_remove(keys, slotidx, sites, siteslot, mask, i, k):
    """Remove dense entry i; backshift-repair the probe chain. Returns k-1."""
    su = siteslot[i]
    last = k - 1
    sites[i] = sites[last]
    siteslot[i] = siteslot[last]
    slotidx[siteslot[i]] = i
    keys[su] = EMPTY
    s2 = (su + 1) & mask
    while keys[s2] != EMPTY:
        kk = keys[s2]
        home = _hash_key(kk, mask)
        if ((s2 - home) & mask) >= ((s2 - su) & mask):
            keys[su] = kk
            slotidx[su] = slotidx[s2]
            siteslot[slotidx[su]] = su
            keys[s2] = EMPTY
            su = s2
        s2 = (s2 + 1) & mask
    return last


@njit(cache=True, inline="always")
def _sample_delta(rng, deltas, accept, alias):
    f = rng.random() * accept.shape[0]
    j = int(f)
    if f - j >= accept[j]:
        j = alias[j]
    return deltas[j]


@njit(cache=True, inline="always")
def _radius_sq(key, d, bits, off):
    mask = (np.int64(1) << np.int64(bits)) - np.int64(1)
    acc = 0.0
    for i in range(d):
        c = float(((key >> np.int64(i * bits)) & mask) - off)
        acc += c * c
    return acc


@njit(cache=True)
def _clear_table(keys, siteslot, k):
    for i in range(k):
        keys[siteslot[i]] = EMPTY


def make_scratch(table_bits: int = 20):
    """Scratch arrays shared across replicas of one driver call."""
    cap = 1 << table_bits
    keys = np.full(cap, EMPTY, dtype=np.int64)
    slotidx = np.empty(cap, dtype=np.int64)
    sites = np.empty(cap // 2, dtype=np.int64)
    siteslot = np.empty(cap // 2, dtype=np.int64)
    return keys, slotidx, sites, siteslot


# ---------------------------------------------------------------------------
# voter model drivers
# ---------------------------------------------------------------------------

@njit(cache=True)
def voter_single_run(rng, deltas, accept, alias, init_keys,
                     target_key, probes, t_cap, stop_on_hit,
                     d, bits, off, track_radius,
                     keys, slotidx, sites, siteslot,
                     probe_mass_out):
    """One voter trajectory from ``init_keys``; the general-purpose run.

    Returns (final_time, alive, hit, first_hit_time, occupation_time,
             max_radius_sq, events, overflow). ``probe_mass_out`` receives
    |xi_t| at each probe time (0 after extinction).
    """
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    k = 0
    for idx in range(init_keys.shape[0]):
        key = init_keys[idx]
        s = _probe_slot(keys, mask, key)
        if keys[s] != key:
            k = _table_insert(keys, slotidx, sites, siteslot, mask, s, key, k)
    t = 0.0
    events = 0
    overflow = False
    hit = False
    first_hit = -1.0
    target_in = False
    enter_t = 0.0
    occ = 0.0
    max_r2 = 0.0
    if track_radius:
        for i in range(k):
            r2 = _radius_sq(sites[i], d, bits, off)
            if r2 > max_r2:
                max_r2 = r2
    # target initially occupied counts as a hit at time 0
    s = _probe_slot(keys, mask, target_key)
    if keys[s] == target_key:
        hit = True
        first_hit = 0.0
        target_in = True
        enter_t = 0.0
        if stop_on_hit:
            for i in range(probes.shape[0]):
                probe_mass_out[i] = k
            _clear_table(keys, siteslot, k)
            return t, k > 0, hit, first_hit, occ, max_r2, events, overflow

    p_idx = 0
    n_probes = probes.shape[0]
    while k > 0:
        t_new = t + rng.exponential() / (2.0 * k)
        while p_idx < n_probes and probes[p_idx] < t_new:
            probe_mass_out[p_idx] = k
            p_idx += 1
        if t_new >= t_cap:
            t = t_cap
            break
        t = t_new
        events += 1
        f = rng.random() * (2.0 * k)
        i = int(f)
        grow = i >= k
        if grow:
            i -= k
        u = sites[i]
        v = u + _sample_delta(rng, deltas, accept, alias)
        s = _probe_slot(keys, mask, v)
        present = keys[s] == v
        if grow:
            if not present:
                if k >= cap_sites:
                    overflow = True
                    break
                k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
                if track_radius:
                    r2 = _radius_sq(v, d, bits, off)
                    if r2 > max_r2:
                        max_r2 = r2
                if v == target_key:
                    if not hit:
                        hit = True
                        first_hit = t
                    target_in = True
                    enter_t = t
                    if stop_on_hit:
                        break
        else:
            if not present:
                if u == target_key and target_in:
                    occ += t - enter_t
                    target_in = False
                k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
    while p_idx < n_probes:
        probe_mass_out[p_idx] = k
        p_idx += 1
    if target_in:
        occ += t - enter_t
    alive = k > 0
    _clear_table(keys, siteslot, k)
    return t, alive, hit, first_hit, occ, max_r2, events, overflow


@njit(cache=True)
def survival_batch(rng, deltas, accept, alias, origin_key, probes, n,
                   keys, slotidx, sites, siteslot):
    """n single-seed runs to max(probes); returns per-probe aggregates.

    Output arrays: alive counts, sum of |xi_t| and sum of |xi_t|^2 at each
    probe (extinct replicas contribute zero mass).
    """
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    n_probes = probes.shape[0]
    alive_counts = np.zeros(n_probes, dtype=np.int64)
    mass_sum = np.zeros(n_probes, dtype=np.float64)
    mass_sq_sum = np.zeros(n_probes, dtype=np.float64)
    overflow_count = 0
    for _ in range(n):
        s = _probe_slot(keys, mask, origin_key)
        k = _table_insert(keys, slotidx, sites, siteslot, mask, s, origin_key, 0)
        t = 0.0
        p_idx = 0
        while k > 0:
            t_new = t + rng.exponential() / (2.0 * k)
            while p_idx < n_probes and probes[p_idx] < t_new:
                alive_counts[p_idx] += 1
                mass_sum[p_idx] += k
                mass_sq_sum[p_idx] += float(k) * k
                p_idx += 1
            if p_idx >= n_probes:
                break
            t = t_new
            f = rng.random() * (2.0 * k)
            i = int(f)
            grow = i >= k
            if grow:
                i -= k
            u = sites[i]
            v = u + _sample_delta(rng, deltas, accept, alias)
            s = _probe_slot(keys, mask, v)
            present = keys[s] == v
            if grow:
                if not present:
                    if k >= cap_sites:
                        overflow_count += 1
                        break
                    k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
            else:
                if not present:
                    k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
        _clear_table(keys, siteslot, k)
    return alive_counts, mass_sum, mass_sq_sum, overflow_count


@njit(cache=True)
def duality_batch(rng, deltas, accept, alias, origin_key, probes, n,
                  box_radius, d, bits, off,
                  keys, slotidx, sites, siteslot):
    """Occupancy counts over the box |y|_inf <= box_radius at each probe time.

    counts[p, cell] = number of replicas with y occupied at probe p, where
    cell enumerates the box in C order. Also returns per-probe alive counts.
    """
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    n_probes = probes.shape[0]
    side = 2 * box_radius + 1
    n_cells = side ** d
    counts = np.zeros((n_probes, n_cells), dtype=np.int64)
    alive_counts = np.zeros(n_probes, dtype=np.int64)
    cmask = (np.int64(1) << np.int64(bits)) - np.int64(1)
    for _ in range(n):
        s = _probe_slot(keys, mask, origin_key)
        k = _table_insert(keys, slotidx, sites, siteslot, mask, s, origin_key, 0)
        t = 0.0
        p_idx = 0
        while k > 0 and p_idx < n_probes:
            t_new = t + rng.exponential() / (2.0 * k)
            while p_idx < n_probes and probes[p_idx] < t_new:
                alive_counts[p_idx] += 1
                for i in range(k):
                    key = sites[i]
                    cell = 0
                    inside = True
                    for ax in range(d):
                        c = int(((key >> np.int64(ax * bits)) & cmask) - off)
                        if c < -box_radius or c > box_radius:
                            inside = False
                            break
                        cell = cell * side + (c + box_radius)
                    if inside:
                        counts[p_idx, cell] += 1
                p_idx += 1
            if p_idx >= n_probes:
                break
            t = t_new
            f = rng.random() * (2.0 * k)
            i = int(f)
            grow = i >= k
            if grow:
                i -= k
            u = sites[i]
            v = u + _sample_delta(rng, deltas, accept, alias)
            s = _probe_slot(keys, mask, v)
            present = keys[s] == v
            if grow:
                if not present:
                    if k >= cap_sites:
                        break
                    k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
            else:
                if not present:
                    k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
        _clear_table(keys, siteslot, k)
    return counts, alive_counts


@njit(cache=True)
def mass_at_time_batch(rng, deltas, accept, alias, origin_key, t_probe, n,
                       keys, slotidx, sites, siteslot):
    """|xi_t| at a single time for each replica (0 = extinct by then)."""
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for r in range(n):
        s = _probe_slot(keys, mask, origin_key)
        k = _table_insert(keys, slotidx, sites, siteslot, mask, s, origin_key, 0)
        t = 0.0
        while k > 0:
            t_new = t + rng.exponential() / (2.0 * k)
            if t_new >= t_probe:
                out[r] = k
                break
            t = t_new
            f = rng.random() * (2.0 * k)
            i = int(f)
            grow = i >= k
            if grow:
                i -= k
            u = sites[i]
            v = u + _sample_delta(rng, deltas, accept, alias)
            s = _probe_slot(keys, mask, v)
            present = keys[s] == v
            if grow:
                if not present:
                    if k >= cap_sites:
                        break
                    k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
            else:
                if not present:
                    k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
        _clear_table(keys, siteslot, k)
    return out


@njit(cache=True)
def hitting_batch(rng, deltas, accept, alias, origin_key, target_key,
                  t_cap, n,
                  keys, slotidx, sites, siteslot):
    """Hit-of-target runs with stop-on-hit.

    Returns (hits, alive_unhit_at_cap, sum_first_hit, events_total).
    ``alive_unhit_at_cap`` counts censored replicas that could still hit.
    """
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    hits = 0
    censored = 0
    sum_first_hit = 0.0
    events = 0
    for _ in range(n):
        s = _probe_slot(keys, mask, origin_key)
        k = _table_insert(keys, slotidx, sites, siteslot, mask, s, origin_key, 0)
        t = 0.0
        if origin_key == target_key:
            hits += 1
            _clear_table(keys, siteslot, k)
            continue
        while k > 0:
            t_new = t + rng.exponential() / (2.0 * k)
            if t_new >= t_cap:
                censored += 1
                break
            t = t_new
            events += 1
            f = rng.random() * (2.0 * k)
            i = int(f)
            grow = i >= k
            if grow:
                i -= k
            u = sites[i]
            v = u + _sample_delta(rng, deltas, accept, alias)
            s = _probe_slot(keys, mask, v)
            present = keys[s] == v
            if grow:
                if not present:
                    if k >= cap_sites:
                        break
                    k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
                    if v == target_key:
                        hits += 1
                        sum_first_hit += t
                        break
            else:
                if not present:
                    k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
        _clear_table(keys, siteslot, k)
    return hits, censored, sum_first_hit, events


@njit(cache=True)
def occupation_batch(rng, deltas, accept, alias, origin_key, target_key,
                     t_cap, n,
                     keys, slotidx, sites, siteslot):
    """Occupation time of the target site on [0, t_cap] for each replica."""
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    occ_out = np.zeros(n, dtype=np.float64)
    hit_out = np.zeros(n, dtype=np.uint8)
    for r in range(n):
        s = _probe_slot(keys, mask, origin_key)
        k = _table_insert(keys, slotidx, sites, siteslot, mask, s, origin_key, 0)
        t = 0.0
        occ = 0.0
        target_in = origin_key == target_key
        enter_t = 0.0
        hit = target_in
        while k > 0:
            t_new = t + rng.exponential() / (2.0 * k)
            if t_new >= t_cap:
                t = t_cap
                break
            t = t_new
            f = rng.random() * (2.0 * k)
            i = int(f)
            grow = i >= k
            if grow:
                i -= k
            u = sites[i]
            v = u + _sample_delta(rng, deltas, accept, alias)
            s = _probe_slot(keys, mask, v)
            present = keys[s] == v
            if grow:
                if not present:
                    if k >= cap_sites:
                        break
                    k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
                    if v == target_key:
                        hit = True
                        if not target_in:
                            target_in = True
                            enter_t = t
            else:
                if not present:
                    if u == target_key and target_in:
                        occ += t - enter_t
                        target_in = False
                    k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
        if target_in:
            occ += t - enter_t
        occ_out[r] = occ
        hit_out[r] = 1 if hit else 0
        _clear_table(keys, siteslot, k)
    return occ_out, hit_out


@njit(cache=True)
def escape_radius_batch(rng, deltas, accept, alias, origin_key, alpha,
                        radii_sq, n_target_conditioned, attempt_cap,
                        d, bits, off,
                        keys, slotidx, sites, siteslot):
    """Sup-radius exceedance counts over [0, 2 alpha] for the escape tail.

    Runs until ``n_target_conditioned`` replicas survive to time alpha (or the
    attempt cap is reached). For each threshold radii_sq[j], counts replicas
    whose running sup of |x|^2 over sites ever exceeds it, both conditioned
    (survived to alpha) and unconditioned.
    """
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    n_thr = radii_sq.shape[0]
    cond_counts = np.zeros(n_thr, dtype=np.int64)
    uncond_counts = np.zeros(n_thr, dtype=np.int64)
    n_cond = 0
    attempts = 0
    t_cap = 2.0 * alpha
    while n_cond < n_target_conditioned and attempts < attempt_cap:
        attempts += 1
        s = _probe_slot(keys, mask, origin_key)
        k = _table_insert(keys, slotidx, sites, siteslot, mask, s, origin_key, 0)
        t = 0.0
        max_r2 = 0.0
        survived_alpha = False
        while k > 0:
            t_new = t + rng.exponential() / (2.0 * k)
            if not survived_alpha and t_new >= alpha:
                survived_alpha = True
            if t_new >= t_cap:
                break
            t = t_new
            f = rng.random() * (2.0 * k)
            i = int(f)
            grow = i >= k
            if grow:
                i -= k
            u = sites[i]
            v = u + _sample_delta(rng, deltas, accept, alias)
            s = _probe_slot(keys, mask, v)
            present = keys[s] == v
            if grow:
                if not present:
                    if k >= cap_sites:
                        break
                    k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
                    r2 = _radius_sq(v, d, bits, off)
                    if r2 > max_r2:
                        max_r2 = r2
            else:
                if not present:
                    k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
        _clear_table(keys, siteslot, k)
        for j in range(n_thr):
            if max_r2 > radii_sq[j]:
                uncond_counts[j] += 1
        if survived_alpha:
            n_cond += 1
            for j in range(n_thr):
                if max_r2 > radii_sq[j]:
                    cond_counts[j] += 1
    return cond_counts, uncond_counts, n_cond, attempts


@njit(cache=True)
def annulus_batch(rng, deltas, accept, alias, init_keys, origin_key, t_cap, n,
                  keys, slotidx, sites, siteslot):
    """Runs from an initial site set; counts replicas that ever occupy 0."""
    mask = keys.shape[0] - 1
    cap_sites = sites.shape[0]
    hits = 0
    censored = 0
    for _ in range(n):
        k = 0
        for idx in range(init_keys.shape[0]):
            key = init_keys[idx]
            s = _probe_slot(keys, mask, key)
            if keys[s] != key:
                k = _table_insert(keys, slotidx, sites, siteslot, mask, s, key, k)
        t = 0.0
        if k == 0:
            continue
        while k > 0:
            t_new = t + rng.exponential() / (2.0 * k)
            if t_new >= t_cap:
                censored += 1
                break
            t = t_new
            f = rng.random() * (2.0 * k)
            i = int(f)
            grow = i >= k
            if grow:
                i -= k
            u = sites[i]
            v = u + _sample_delta(rng, deltas, accept, alias)
            s = _probe_slot(keys, mask, v)
            present = keys[s] == v
            if grow:
                if not present:
                    if k >= cap_sites:
                        break
                    k = _table_insert(keys, slotidx, sites, siteslot, mask, s, v, k)
                    if v == origin_key:
                        hits += 1
                        break
            else:
                if not present:
                    k = _table_remove(keys, slotidx, sites, siteslot, mask, i, k)
        _clear_table(keys, siteslot, k)
    return hits, censored


# ---------------------------------------------------------------------------
# random walk / coalescing pair drivers
# ---------------------------------------------------------------------------

@njit(cache=True)
def walk_position(rng, deltas, accept, alias, start_key, duration):
    """Endpoint of a rate-1 walk run for ``duration`` from ``start_key``."""
    pos = start_key
    t = rng.exponential()
    while t < duration:
        pos += _sample_delta(rng, deltas, accept, alias)
        t += rng.exponential()
    return pos


@njit(cache=True)
def pair_t1_batch(rng, deltas, accept, alias, y_key, zero_key, horizon, n):
    """Meeting times of walks from 0 and y via the rate-2 difference walk.

    Returns T1 samples; censored runs carry +inf.
    """
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        pos = y_key  # difference walk starts at y (= Z2 - Z1 start offset)
        t = 0.0
        t1 = np.inf
        while True:
            t += rng.exponential() / 2.0
            if t >= horizon:
                break
            pos += _sample_delta(rng, deltas, accept, alias)
            if pos == zero_key:
                t1 = t
                break
        out[r] = t1
    return out


@njit(cache=True)
def pair_direct_t1_batch(rng, deltas, accept, alias, zero_key, y_key, horizon, n):
    """Oracle: two explicit rate-1 walks, meeting checked after every jump."""
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        z1 = zero_key
        z2 = y_key
        t = 0.0
        t1 = np.inf
        while True:
            t += rng.exponential() / 2.0
            if t >= horizon:
                break
            if rng.random() < 0.5:
                z1 += _sample_delta(rng, deltas, accept, alias)
            else:
                z2 += _sample_delta(rng, deltas, accept, alias)
            if z1 == z2:
                t1 = t
                break
        out[r] = t1
    return out


@njit(cache=True)
def pair_z1_at_time(rng, deltas, accept, alias, y_key, zero_key, duration):
    """(met, z1_final): difference walk to min(T1, duration), then the merged walk.

    Z1's jumps are the fair-coin-marked subset of the difference jumps (each
    difference jump is Z1 moving by the step, or Z2 moving by its negation),
    so Z1 is reconstructed marginally without simulating the pair.
    """
    diff = y_key
    z1 = zero_key
    t = 0.0
    met = False
    while True:
        dt = rng.exponential() / 2.0
        if t + dt >= duration:
            t = duration
            break
        t += dt
        step = _sample_delta(rng, deltas, accept, alias)
        if rng.random() < 0.5:
            z1 += step
            diff += step
        else:
            diff -= step
        if diff == zero_key:
            met = True
            break
    if met:
        # merged: a single rate-1 walk for the remaining time
        rem = duration - t
        tt = rng.exponential()
        while tt < rem:
            z1 += _sample_delta(rng, deltas, accept, alias)
            tt += rng.exponential()
    return met, z1


@njit(cache=True)
def boundcoal_batch(rng, deltas, accept, alias, y_key, zero_key, target_key,
                    c2, T, n):
    """Uniform-time estimator of the coalescing-pair integral.

    Per sample: draw t ~ U(0, T), run the pair from (0, y) for c^2 t, and
    test {T1 <= c^2 t and Z1 at the target}. Mean * T estimates the integral.
    """
    hits = 0
    for _ in range(n):
        t = rng.random() * T
        met, z1 = pair_z1_at_time(rng, deltas, accept, alias, y_key, zero_key, c2 * t)
        if met and z1 == target_key:
            hits += 1
    return hits


@njit(cache=True)
def u2_dual_batch(rng, deltas, accept, alias, zero_key, target_key, c2, T, n):
    """Dual estimator samples for the second occupation-time moment.

    Per sample: (t, s) uniform on the triangle {t + s <= T}, y drawn by running
    a rate-1 walk for c^2 s from 0, then the pair event as in boundcoal_batch.
    Returns the hit count; mean * T^2 estimates E[U_T^2] (the Jacobian T^2/2
    times the factor 2 from symmetrizing the double integral).
    """
    hits = 0
    for _ in range(n):
        a = rng.random() * T
        b = rng.random() * T
        if a + b > T:
            a = T - a
            b = T - b
        t = a
        s = b
        y_key = walk_position(rng, deltas, accept, alias, zero_key, c2 * s)
        met, z1 = pair_z1_at_time(rng, deltas, accept, alias, y_key, zero_key, c2 * t)
        if met and z1 == target_key:
            hits += 1
    return hits


@njit(cache=True)
def escape_mc_batch(rng, deltas, accept, alias, zero_key, horizon, n):
    """Count walks from 0 with no return to 0 by the horizon."""
    no_return = 0
    for _ in range(n):
        pos = zero_key
        t = rng.exponential()
        returned = False
        while t < horizon:
            pos += _sample_delta(rng, deltas, accept, alias)
            if pos == zero_key:
                returned = True
                break
            t += rng.exponential()
        if not returned:
            no_return += 1
    return no_return


# ---------------------------------------------------------------------------
# coalescing system with >= 3 walkers (direct event-driven simulation)
# ---------------------------------------------------------------------------

@njit(cache=True)
def coalescing_system_run(rng, deltas, accept, alias, start_keys, horizon,
                          probe_times):
    """Direct simulation of n coalescing walkers; classes move together.

    Returns (class_id per walker, positions at probes per walker, final time,
    final class count). Class representatives are union-find roots done with
    simple path halving over a parent array.
    """
    n = start_keys.shape[0]
    parent = np.empty(n, dtype=np.int64)
    pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        parent[i] = i
        pos[i] = start_keys[i]
    n_probes = probe_times.shape[0]
    probe_pos = np.zeros((n_probes, n), dtype=np.int64)
    t = 0.0
    p_idx = 0
    # count live classes
    n_classes = n
    # merge initially-coincident walkers
    for i in range(n):
        for j in range(i + 1, n):
            ri = _uf_find(parent, i)
            rj = _uf_find(parent, j)
            if ri != rj and pos[ri] == pos[rj]:
                parent[rj] = ri
                n_classes -= 1
    while True:
        rate = 1.0 * n_classes
        dt = rng.exponential() / rate
        t_new = t + dt
        while p_idx < n_probes and probe_times[p_idx] < t_new:
            for i in range(n):
                probe_pos[p_idx, i] = pos[_uf_find(parent, i)]
            p_idx += 1
        if t_new >= horizon or n_classes == 1 and p_idx >= n_probes:
            t = min(t_new, horizon)
            break
        t = t_new
        # pick a live class uniformly: rejection over walker roots
        while True:
            cand = int(rng.random() * n)
            if _uf_find(parent, cand) == cand:
                break
        pos[cand] += _sample_delta(rng, deltas, accept, alias)
        for j in range(n):
            rj = _uf_find(parent, j)
            if rj != cand and pos[rj] == pos[cand]:
                parent[rj] = cand
                n_classes -= 1
    while p_idx < n_probes:
        for i in range(n):
            probe_pos[p_idx, i] = pos[_uf_find(parent, i)]
        p_idx += 1
    roots = np.empty(n, dtype=np.int64)
    for i in range(n):
        roots[i] = _uf_find(parent, i)
    return roots, probe_pos, t, n_classes


@njit(cache=True, inline="always")
def _uf_find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


# ---------------------------------------------------------------------------
# critical branching random walk (super-Brownian approximation)
# ---------------------------------------------------------------------------

@njit(cache=True)
def gw_survival_batch(rng, max_gen, n):
    """Critical binary Galton-Watson: per-generation alive counts over n runs.

    Returns alive_at[g] = number of runs with Z_g > 0, for g = 0..max_gen.
    """
    alive_at = np.zeros(max_gen + 1, dtype=np.int64)
    for _ in range(n):
        z = 1
        alive_at[0] += 1
        for g in range(1, max_gen + 1):
            nxt = 0
            for _ in range(z):
                if rng.random() < 0.5:
                    nxt += 2
            z = nxt
            if z == 0:
                break
            alive_at[g] += 1
    return alive_at


@njit(cache=True)
def brw_excursion_batch(rng, d, step_sd, x_target, max_gen, n,
                        pos_buf, child_buf, explosion_cap, lattice_mode,
                        deltas_unit, accept, alias, offsets_flat):
    """Spatial critical branching walk; per-run min distance to the target.

    One particle starts at 0; each generation every particle dies or splits in
    two (probability 1/2 each), children move by independent Gaussian steps of
    sd ``step_sd`` per coordinate (or by kernel offsets scaled by ``step_sd``
    per coordinate unit when ``lattice_mode``). Tracks min over all particles
    and generations of |pos - x_target|^2 and the last generation alive.

    Returns (min_dist2, survived_to, flagged) arrays; ``flagged`` marks runs
    aborted by the explosion cap.
    """
    min_d2 = np.empty(n, dtype=np.float64)
    survived = np.empty(n, dtype=np.int64)
    flagged = np.zeros(n, dtype=np.uint8)
    n_off = accept.shape[0]
    for r in range(n):
        n_alive = 1
        for ax in range(d):
            pos_buf[0, ax] = 0.0
        best = 0.0
        for ax in range(d):
            dd = 0.0 - x_target[ax]
            best += dd * dd
        g_last = 0
        g = 0
        while n_alive > 0 and g < max_gen:
            g += 1
            n_child = 0
            for i in range(n_alive):
                if rng.random() < 0.5:
                    continue
                if n_child + 2 > explosion_cap:
                    flagged[r] = 1
                    break
                for _ in range(2):
                    d2 = 0.0
                    if lattice_mode:
                        f = rng.random() * n_off
                        j = int(f)
                        if f - j >= accept[j]:
                            j = alias[j]
                        for ax in range(d):
                            c = pos_buf[i, ax] + step_sd * offsets_flat[j, ax]
                            child_buf[n_child, ax] = c
                            dd = c - x_target[ax]
                            d2 += dd * dd
                    else:
                        for ax in range(d):
                            c = pos_buf[i, ax] + step_sd * rng.standard_normal()
                            child_buf[n_child, ax] = c
                            dd = c - x_target[ax]
                            d2 += dd * dd
                    if d2 < best:
                        best = d2
                    n_child += 1
            if flagged[r] == 1:
                break
            tmp = pos_buf
            pos_buf = child_buf
            child_buf = tmp
            n_alive = n_child
            if n_alive > 0:
                g_last = g
        min_d2[r] = best
        survived[r] = g_last
    return min_d2, survived, flagged
