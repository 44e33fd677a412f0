"""Compiled kernels shared by the simulation modules.

The update stream is counter based: the events of site ``v`` in the unit
epoch ``(k, k+1]`` are a pure function of ``(seed, v, k)``. Every consumer
(materialized streams, forward runs, coupled runs, coupling from the past
and backward walks) regenerates events through :func:`site_epoch_events`,
so all of them see bit-identical randomness.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
S30 = np.uint64(30)
S27 = np.uint64(27)
S31 = np.uint64(31)
S11 = np.uint64(11)
INV53 = 1.0 / 9007199254740992.0

RULE_HEAT_BATH = 0
RULE_METROPOLIS = 1
RULE_COPY = 2

# Poisson(1) inverse-CDF table; the last entry is forced to 1 so the
# search always terminates (the dropped tail mass is below 1e-24).
POISSON_MAX = 24


def _poisson_cdf() -> np.ndarray:
    cdf = np.empty(POISSON_MAX, dtype=np.float64)
    acc = 0.0
    term = math.exp(-1.0)
    for k in range(POISSON_MAX):
        acc += term
        cdf[k] = acc
        term /= k + 1
    cdf[-1] = 1.0
    return cdf


POISSON_CDF = _poisson_cdf()
_C0, _C1, _C2, _C3, _C4, _C5 = (float(c) for c in POISSON_CDF[:6])


@nb.njit(inline="always")
def mix64(z):
    z = (z ^ (z >> S30)) * MIX1
    z = (z ^ (z >> S27)) * MIX2
    return z ^ (z >> S31)


SITE_MULT = np.uint64(0xD1B54A32D192ED03)
EPOCH_MULT = np.uint64(0xAEF17502108EF2D9)


@nb.njit(inline="always")
def stream_key(seed):
    return mix64(np.uint64(seed) + GOLDEN)


@nb.njit(inline="always")
def site_epoch_key(skey, site, epoch):
    z = skey + np.uint64(site) * SITE_MULT + np.uint64(epoch) * EPOCH_MULT
    return mix64(z)


@nb.njit(inline="always")
def key_uniform(key, j):
    x = mix64(key + np.uint64(j + 1) * GOLDEN)
    return np.float64(np.int64(x >> S11)) * INV53


@nb.njit(inline="always")
def site_epoch_events(skey, site, epoch, out_t, out_u):
    """Write the events of ``site`` in ``(epoch, epoch + 1]`` sorted by time.

    ``skey`` is :func:`stream_key` of the seed. Returns the event count;
    ``out_t`` and ``out_u`` need room for ``POISSON_MAX`` entries.
    """
    key = site_epoch_key(skey, site, epoch)
    u0 = key_uniform(key, 0)
    # Branch-free inversion for the common counts, loop for the rare tail.
    cnt = (np.int64(u0 >= _C0) + np.int64(u0 >= _C1) + np.int64(u0 >= _C2)
           + np.int64(u0 >= _C3) + np.int64(u0 >= _C4) + np.int64(u0 >= _C5))
    if cnt == 6:
        while u0 >= POISSON_CDF[cnt]:
            cnt += 1
    for j in range(cnt):
        t = np.float64(epoch) + (1.0 - key_uniform(key, 1 + 2 * j))
        u = key_uniform(key, 2 + 2 * j)
        i = j
        while i > 0 and out_t[i - 1] > t:
            out_t[i] = out_t[i - 1]
            out_u[i] = out_u[i - 1]
            i -= 1
        out_t[i] = t
        out_u[i] = u
    return cnt


@nb.njit(cache=True)
def epoch_events(seed, nsites, epoch, t_lo, t_hi, buf_t, buf_s, buf_u, tmp_t, tmp_s, tmp_u):
    """All events of the epoch with ``t_lo < T <= t_hi``, sorted by (time, site).

    Events are bucketed by time into ``nsites`` equal slots (counting sort,
    stable in site order) and finished with an insertion sort, which is
    linear on average because each slot holds one event in expectation.
    """
    one_t = np.empty(POISSON_MAX, dtype=np.float64)
    one_u = np.empty(POISSON_MAX, dtype=np.float64)
    nb_ = max(nsites, 1)
    counts = np.zeros(nb_ + 1, dtype=np.int64)
    base = np.float64(epoch)
    skey = stream_key(seed)
    cnt = 0
    for v in range(nsites):
        c = site_epoch_events(skey, v, epoch, one_t, one_u)
        for j in range(c):
            t = one_t[j]
            if t > t_lo and t <= t_hi:
                tmp_t[cnt] = t
                tmp_s[cnt] = v
                tmp_u[cnt] = one_u[j]
                cnt += 1
    for i in range(cnt):
        b = int((tmp_t[i] - base) * nb_)
        b = min(max(b, 0), nb_ - 1)
        counts[b + 1] += 1
    for b in range(nb_):
        counts[b + 1] += counts[b]
    for i in range(cnt):
        t = tmp_t[i]
        b = int((t - base) * nb_)
        b = min(max(b, 0), nb_ - 1)
        pos = counts[b]
        counts[b] += 1
        buf_t[pos] = t
        buf_s[pos] = tmp_s[i]
        buf_u[pos] = tmp_u[i]
    for i in range(1, cnt):
        t = buf_t[i]
        if buf_t[i - 1] <= t:
            continue
        s_ = buf_s[i]
        u_ = buf_u[i]
        j = i
        while j > 0 and buf_t[j - 1] > t:
            buf_t[j] = buf_t[j - 1]
            buf_s[j] = buf_s[j - 1]
            buf_u[j] = buf_u[j - 1]
            j -= 1
        buf_t[j] = t
        buf_s[j] = s_
        buf_u[j] = u_
    return cnt


@nb.njit(cache=True)
def materialize(seed, nsites, t_lo, t_hi):
    """Every event with ``t_lo < T <= t_hi`` as arrays sorted by (time, site)."""
    e0 = int(math.floor(t_lo))
    e1 = int(math.ceil(t_hi)) - 1
    if t_hi <= t_lo:
        return (np.empty(0, np.float64), np.empty(0, np.int64), np.empty(0, np.float64))
    total_cap = (e1 - e0 + 1) * nsites * 2 + 64
    times = np.empty(total_cap, dtype=np.float64)
    sites = np.empty(total_cap, dtype=np.int64)
    units = np.empty(total_cap, dtype=np.float64)
    size = nsites * POISSON_MAX
    bt = np.empty(size, np.float64)
    bs = np.empty(size, np.int64)
    bu = np.empty(size, np.float64)
    tt = np.empty(size, np.float64)
    ts = np.empty(size, np.int64)
    tu = np.empty(size, np.float64)
    n = 0
    for epoch in range(e0, e1 + 1):
        c = epoch_events(seed, nsites, epoch, t_lo, t_hi, bt, bs, bu, tt, ts, tu)
        if n + c > times.shape[0]:
            grow = max(times.shape[0] * 2, n + c)
            times2 = np.empty(grow, np.float64)
            sites2 = np.empty(grow, np.int64)
            units2 = np.empty(grow, np.float64)
            times2[:n] = times[:n]
            sites2[:n] = sites[:n]
            units2[:n] = units[:n]
            times, sites, units = times2, sites2, units2
        times[n : n + c] = bt[:c]
        sites[n : n + c] = bs[:c]
        units[n : n + c] = bu[:c]
        n += c
    return times[:n].copy(), sites[:n].copy(), units[:n].copy()


@nb.njit(inline="always")
def new_spin(rule, v, u, spins, nbr, thr, acc, lo, hi):
    """Spin written at site ``v`` by an update with unit ``u``."""
    if rule == RULE_COPY:
        if u <= lo:
            return np.int8(-1)
        if u >= hi:
            return np.int8(1)
        if u <= 0.5:
            return spins[nbr[v, 1]]
        return spins[nbr[v, 0]]
    p = 0
    for j in range(nbr.shape[1]):
        if spins[nbr[v, j]] > 0:
            p += 1
    if rule == RULE_HEAT_BATH:
        if u <= thr[p]:
            return np.int8(-1)
        return np.int8(1)
    cur = spins[v]
    row = 0 if cur > 0 else 1
    if u <= acc[row, p]:
        return np.int8(-cur)
    return cur


@nb.njit(cache=True)
def apply_events(spins, nbr, sites, units, rule, thr, acc, lo, hi):
    """Apply a pre-ordered event list in place."""
    for i in range(sites.shape[0]):
        v = sites[i]
        spins[v] = new_spin(rule, v, units[i], spins, nbr, thr, acc, lo, hi)


@nb.njit(inline="always")
def _state_code(spins):
    code = np.int64(0)
    if spins.shape[0] <= 62:
        for i in range(spins.shape[0]):
            if spins[i] > 0:
                code |= np.int64(1) << i
    return code


@nb.njit(cache=True)
def _record(spins, ref, k, mag, out_ref, out_mag, out_code):
    out_ref[k] = spins[ref]
    out_mag[k] = mag
    out_code[k] = _state_code(spins)


@nb.njit(cache=True)
def forward_run(spins, nbr, seed, t_lo, t_hi, rule, thr, acc, lo, hi, snaps, out_ref, out_mag, out_code, ref):
    """Run forward over ``(t_lo, t_hi]`` generating epochs on the fly.

    At each snapshot time ``g`` (sorted, inside the window) records the
    spin at ``ref``, the total magnetization and, for at most 62 sites, the
    bit code of the configuration (bit ``i`` set when site ``i`` is plus).
    """
    nsites = spins.shape[0]
    size = nsites * POISSON_MAX
    bufs_t = np.empty(size, np.float64)
    bufs_s = np.empty(size, np.int64)
    bufs_u = np.empty(size, np.float64)
    tmp_t = np.empty(size, np.float64)
    tmp_s = np.empty(size, np.int64)
    tmp_u = np.empty(size, np.float64)
    mag = np.int64(0)
    for i in range(nsites):
        mag += spins[i]
    k = 0
    ns = snaps.shape[0]
    next_snap = snaps[0] if ns > 0 else np.inf
    if t_hi > t_lo:
        e0 = int(math.floor(t_lo))
        e1 = int(math.ceil(t_hi)) - 1
        for epoch in range(e0, e1 + 1):
            c = epoch_events(seed, nsites, epoch, t_lo, t_hi, bufs_t, bufs_s, bufs_u, tmp_t, tmp_s, tmp_u)
            for i in range(c):
                t = bufs_t[i]
                if t > next_snap:
                    while k < ns and snaps[k] < t:
                        _record(spins, ref, k, mag, out_ref, out_mag, out_code)
                        k += 1
                    next_snap = snaps[k] if k < ns else np.inf
                v = bufs_s[i]
                s_new = new_spin(rule, v, bufs_u[i], spins, nbr, thr, acc, lo, hi)
                mag += np.int64(s_new) - np.int64(spins[v])
                spins[v] = s_new
    while k < ns:
        _record(spins, ref, k, mag, out_ref, out_mag, out_code)
        k += 1


@nb.njit(cache=True)
def forward_replicas(start, nbr, seeds, t_lo, t_hi, rule, thr, acc, lo, hi, snaps, ref):
    """Independent forward runs from a common start, one per seed."""
    nsites = start.shape[0]
    r = seeds.shape[0]
    ns = snaps.shape[0]
    out_ref = np.empty((r, ns), dtype=np.int8)
    out_mag = np.empty((r, ns), dtype=np.int64)
    out_code = np.empty((r, ns), dtype=np.int64)
    spins = np.empty(nsites, dtype=np.int8)
    for j in range(r):
        spins[:] = start
        forward_run(spins, nbr, seeds[j], t_lo, t_hi, rule, thr, acc, lo, hi, snaps, out_ref[j], out_mag[j], out_code[j], ref)
    return out_ref, out_mag, out_code


@nb.njit(cache=True)
def forward_final(spins, nbr, seed, t_lo, t_hi, rule, thr, acc, lo, hi):
    """Forward run returning nothing but the final configuration (in place)."""
    nsites = spins.shape[0]
    size = nsites * POISSON_MAX
    bt = np.empty(size, np.float64)
    bs = np.empty(size, np.int64)
    bu = np.empty(size, np.float64)
    tt = np.empty(size, np.float64)
    ts = np.empty(size, np.int64)
    tu = np.empty(size, np.float64)
    if t_hi <= t_lo:
        return
    e0 = int(math.floor(t_lo))
    e1 = int(math.ceil(t_hi)) - 1
    for epoch in range(e0, e1 + 1):
        c = epoch_events(seed, nsites, epoch, t_lo, t_hi, bt, bs, bu, tt, ts, tu)
        for i in range(c):
            v = bs[i]
            spins[v] = new_spin(rule, v, bu[i], spins, nbr, thr, acc, lo, hi)


@nb.njit(cache=True)
def forward_final_replicas(starts, nbr, seeds, t_lo, t_hi, rule, thr, acc, lo, hi):
    """Final configurations of independent runs; ``starts`` is (R, N) int8."""
    out = starts.copy()
    for j in range(seeds.shape[0]):
        forward_final(out[j], nbr, seeds[j], t_lo, t_hi, rule, thr, acc, lo, hi)
    return out


@nb.njit(cache=True)
def coupled_run(chains, nbr, seed, t_lo, t_hi, rule, thr, acc, lo, hi, check_order):
    """Run every row of ``chains`` on the same events, in place.

    Returns ``(violations, coalescence_time)``. When ``check_order`` is set,
    rows are expected to be pointwise ordered (row ``i`` below row ``i+1``)
    and every event is checked at the updated site. The coalescence time is
    the first event time after which all rows agree (``-inf`` if they agree
    initially, ``inf`` if they never do within the window).
    """
    k, nsites = chains.shape
    diff = 0
    for v in range(nsites):
        for c in range(1, k):
            if chains[c, v] != chains[0, v]:
                diff += 1
                break
    coal = -np.inf if diff == 0 else np.inf
    violations = 0
    size = nsites * POISSON_MAX
    bt = np.empty(size, np.float64)
    bs = np.empty(size, np.int64)
    bu = np.empty(size, np.float64)
    tt = np.empty(size, np.float64)
    ts = np.empty(size, np.int64)
    tu = np.empty(size, np.float64)
    if t_hi <= t_lo:
        return violations, coal
    e0 = int(math.floor(t_lo))
    e1 = int(math.ceil(t_hi)) - 1
    for epoch in range(e0, e1 + 1):
        c = epoch_events(seed, nsites, epoch, t_lo, t_hi, bt, bs, bu, tt, ts, tu)
        for i in range(c):
            v = bs[i]
            u = bu[i]
            before = False
            for r in range(1, k):
                if chains[r, v] != chains[0, v]:
                    before = True
                    break
            for r in range(k):
                chains[r, v] = new_spin(rule, v, u, chains[r], nbr, thr, acc, lo, hi)
            after = False
            for r in range(1, k):
                if chains[r, v] != chains[0, v]:
                    after = True
                    break
            if check_order:
                for r in range(1, k):
                    if chains[r - 1, v] > chains[r, v]:
                        violations += 1
            if before and not after:
                diff -= 1
                if diff == 0:
                    coal = bt[i]
            elif after and not before:
                if diff == 0:
                    coal = np.inf
                diff += 1
    return violations, coal


@nb.njit(cache=True)
def cftp_run(nbr, seed, rule, thr, acc, lo, hi, t_max, check_sandwich):
    """Monotone coupling from the past with doubling start times.

    Returns ``(state, depth, ok, sandwich_violations)``. The window
    ``(-T, 0]`` is re-simulated for ``T = 1, 2, 4, ...`` with the same
    keyed events, so earlier windows are replayed exactly.
    """
    nsites = nbr.shape[0]
    chains = np.empty((2, nsites), dtype=np.int8)
    t = 1
    violations = 0
    while t <= t_max:
        chains[0, :] = -1
        chains[1, :] = 1
        v_, _ = coupled_run(chains, nbr, seed, -float(t), 0.0, rule, thr, acc, lo, hi, check_sandwich)
        violations += v_
        same = True
        for v in range(nsites):
            if chains[0, v] != chains[1, v]:
                same = False
                break
        if same:
            return chains[1].copy(), t, True, violations
        t *= 2
    return chains[1].copy(), t, False, violations


@nb.njit(cache=True)
def cftp_codes(nbr, seeds, rule, thr, acc, lo, hi, t_max):
    """Many CFTP samples on at most 62 sites, returned as state codes."""
    r = seeds.shape[0]
    codes = np.empty(r, dtype=np.int64)
    depths = np.empty(r, dtype=np.int64)
    for j in range(r):
        state, depth, ok, _ = cftp_run(nbr, seeds[j], rule, thr, acc, lo, hi, t_max, False)
        if not ok:
            depths[j] = -1
            codes[j] = 0
            continue
        codes[j] = _state_code(state)
        depths[j] = depth
    return codes, depths


@nb.njit(cache=True)
def cftp_many(nbr, seeds, rule, thr, acc, lo, hi, t_max):
    """Many CFTP samples as an (R, N) array; failed rows get depth -1."""
    r = seeds.shape[0]
    out = np.empty((r, nbr.shape[0]), dtype=np.int8)
    depths = np.empty(r, dtype=np.int64)
    for j in range(r):
        state, depth, ok, _ = cftp_run(nbr, seeds[j], rule, thr, acc, lo, hi, t_max, False)
        out[j] = state
        depths[j] = depth if ok else -1
    return out, depths


@nb.njit(cache=True)
def coupled_apply(chains, nbr, sites, units, rule, thr, acc, lo, hi, check_order):
    """Apply a pre-ordered event list to every row of ``chains``.

    Returns the number of order violations between consecutive rows,
    checked at the updated site after every event.
    """
    k = chains.shape[0]
    violations = 0
    for i in range(sites.shape[0]):
        v = sites[i]
        u = units[i]
        for r in range(k):
            chains[r, v] = new_spin(rule, v, u, chains[r], nbr, thr, acc, lo, hi)
        if check_order:
            for r in range(1, k):
                if chains[r - 1, v] > chains[r, v]:
                    violations += 1
    return violations


@nb.njit(cache=True)
def coupling_batch(nbr, seeds, t_hi, rule, thr, acc, lo, hi, check_order):
    """All-minus and all-plus runs on shared events, one pair per seed.

    Returns per-replica disagreeing-site counts at ``t_hi``, coalescence
    times and order violations.
    """
    nsites = nbr.shape[0]
    r = seeds.shape[0]
    disagree = np.empty(r, dtype=np.int64)
    coal = np.empty(r, dtype=np.float64)
    viol = np.empty(r, dtype=np.int64)
    chains = np.empty((2, nsites), dtype=np.int8)
    for j in range(r):
        chains[0, :] = -1
        chains[1, :] = 1
        v_, c_ = coupled_run(chains, nbr, seeds[j], 0.0, t_hi, rule, thr, acc, lo, hi, check_order)
        cnt = 0
        for v in range(nsites):
            if chains[0, v] != chains[1, v]:
                cnt += 1
        disagree[j] = cnt
        coal[j] = c_
        viol[j] = v_
    return disagree, coal, viol
