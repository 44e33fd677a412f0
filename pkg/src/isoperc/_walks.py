"""Backward killed, coalescing walks for the cycle under the copy rule.

Reading the copy rule backward in time, the history of a single spin is
one strand: at each update of its current site the strand either dies
(oblivious update, the spin is the update's sign) or moves to the copied
neighbor. Strands that meet the same update, or reach the bottom of the
window at the same site in the same inter-update interval, coalesce.

Events are regenerated on demand from the counter-based stream, so a
trace touches only the updates it actually visits and may run into
negative time without materializing anything. Union-find runs on strand
indices with visited events keyed in an open-addressing hash table.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from ._kernels import POISSON_MAX, site_epoch_events

FATE_DEAD = 0
FATE_BOTTOM = 1
FATE_UNFINISHED = 2

_EPOCH_SHIFT = 1 << 30


@nb.njit(inline="always")
def _event_key(site, epoch, j, nsites):
    return ((np.int64(epoch) + _EPOCH_SHIFT) * nsites + site) * 32 + j


@nb.njit(inline="always")
def _hash(key, mask):
    x = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    return np.int64((x >> np.uint64(17)) & np.uint64(mask))


@nb.njit(cache=True)
def _table_find(keys, key, mask):
    i = _hash(key, mask)
    while True:
        k = keys[i]
        if k == key or k == -1:
            return i
        i = (i + 1) & mask


@nb.njit(cache=True)
def _grow(keys, vals):
    cap = keys.shape[0] * 2
    nk = np.full(cap, -1, dtype=np.int64)
    nv = np.empty(cap, dtype=np.int64)
    mask = cap - 1
    for i in range(keys.shape[0]):
        if keys[i] != -1:
            j = _table_find(nk, keys[i], mask)
            nk[j] = keys[i]
            nv[j] = vals[i]
    return nk, nv


@nb.njit(inline="always")
def _find(parent, i):
    r = i
    while parent[r] != r:
        r = parent[r]
    while parent[i] != r:
        nxt = parent[i]
        parent[i] = r
        i = nxt
    return r


@nb.njit(cache=True)
def trace_strands(skey, nbr, starts, t_top, t_bottom, lo, hi, max_depth, record):
    """Trace one strand per entry of ``starts`` backward from ``t_top``.

    Updates with time ``<= t_top`` count at the start (the configuration is
    right-continuous); the window bottom is exclusive, so updates at times
    ``> t_bottom`` are used. ``t_bottom = -inf`` traces until death, with
    ``max_depth`` (time below ``t_top``) as a safety stop that marks the
    strand unfinished.

    Returns
    -------
    parent : (k,) int64
        Union-find forest; ``root = find(i)`` is the strand whose fate
        strand ``i`` shares.
    fate, end_site, end_time, coin : (k,) arrays
        Meaningful at roots. ``fate`` is :data:`FATE_DEAD`,
        :data:`FATE_BOTTOM` or :data:`FATE_UNFINISHED`; ``coin`` is the spin
        written by the killing update.
    merge_time : (k,) float64
        Time at which the strand joined an earlier strand (``nan`` if never).
    segments : (m, 4) float64
        When ``record`` is set, rows ``(strand, site, t_upper, t_lower)`` of
        every occupied site interval.
    """
    nsites = nbr.shape[0]
    k = starts.shape[0]
    parent = np.arange(k, dtype=np.int64)
    fate = np.full(k, FATE_UNFINISHED, dtype=np.int8)
    end_site = starts.astype(np.int64).copy()
    end_time = np.full(k, t_top, dtype=np.float64)
    coin = np.zeros(k, dtype=np.int8)
    merge_time = np.full(k, np.nan, dtype=np.float64)
    cap = 1024
    while cap < 4 * k:
        cap *= 2
    keys = np.full(cap, -1, dtype=np.int64)
    vals = np.empty(cap, dtype=np.int64)
    used = 0
    bottom_owner = np.full(nsites, -1, dtype=np.int64)
    seg = np.empty((1024 if record else 1, 4), dtype=np.float64)
    nseg = 0
    bt = np.empty(POISSON_MAX, dtype=np.float64)
    bu = np.empty(POISSON_MAX, dtype=np.float64)
    floor_t = t_top - max_depth
    for i in range(k):
        w = np.int64(starts[i])
        s = t_top
        inclusive = True
        while True:
            # Latest update at w strictly below s (at or below on the first step).
            epoch = int(math.ceil(s)) - 1
            found = False
            ev_t = 0.0
            ev_u = 0.0
            ev_j = 0
            stop_bottom = False
            stop_depth = False
            while True:
                if epoch + 1 <= t_bottom:
                    stop_bottom = True
                    break
                if epoch + 1 <= floor_t:
                    stop_depth = True
                    break
                c = site_epoch_events(skey, w, epoch, bt, bu)
                for j in range(c - 1, -1, -1):
                    tj = bt[j]
                    if tj < s or (inclusive and tj == s):
                        if tj > t_bottom:
                            found = True
                            ev_t = tj
                            ev_u = bu[j]
                            ev_j = j
                        else:
                            stop_bottom = True
                        break
                if found or stop_bottom:
                    break
                epoch -= 1
            inclusive = False
            if record:
                if nseg == seg.shape[0]:
                    seg2 = np.empty((2 * nseg, 4), dtype=np.float64)
                    seg2[:nseg] = seg[:nseg]
                    seg = seg2
                seg[nseg, 0] = i
                seg[nseg, 1] = w
                seg[nseg, 2] = s
                seg[nseg, 3] = ev_t if found else (t_bottom if stop_bottom else floor_t)
                nseg += 1
            if stop_depth:
                fate[i] = FATE_UNFINISHED
                end_site[i] = w
                end_time[i] = floor_t
                break
            if stop_bottom:
                o = bottom_owner[w]
                if o >= 0:
                    parent[i] = _find(parent, o)
                    merge_time[i] = t_bottom
                else:
                    bottom_owner[w] = i
                    fate[i] = FATE_BOTTOM
                    end_site[i] = w
                    end_time[i] = t_bottom
                break
            key = _event_key(w, epoch, ev_j, nsites)
            mask = keys.shape[0] - 1
            slot = _table_find(keys, key, mask)
            if keys[slot] == key:
                parent[i] = _find(parent, vals[slot])
                merge_time[i] = ev_t
                break
            keys[slot] = key
            vals[slot] = i
            used += 1
            if 2 * used > keys.shape[0]:
                keys, vals = _grow(keys, vals)
            if ev_u <= lo:
                fate[i] = FATE_DEAD
                coin[i] = -1
                end_site[i] = w
                end_time[i] = ev_t
                break
            if ev_u >= hi:
                fate[i] = FATE_DEAD
                coin[i] = 1
                end_site[i] = w
                end_time[i] = ev_t
                break
            w = nbr[w, 1] if ev_u <= 0.5 else nbr[w, 0]
            s = ev_t
    for i in range(k):
        _find(parent, i)
    return parent, fate, end_site, end_time, coin, merge_time, seg[:nseg].copy()


@nb.njit(cache=True)
def resolve(parent, fate, end_site, coin):
    """Per-strand root, fate, end site and coin after path compression."""
    k = parent.shape[0]
    root = np.empty(k, dtype=np.int64)
    f = np.empty(k, dtype=np.int8)
    es = np.empty(k, dtype=np.int64)
    cn = np.empty(k, dtype=np.int8)
    for i in range(k):
        r = _find(parent, i)
        root[i] = r
        f[i] = fate[r]
        es[i] = end_site[r]
        cn[i] = coin[r]
    return root, f, es, cn
