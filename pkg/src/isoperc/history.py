"""Backward update histories: reachability sets, exact minimal supports, 1D strands.

The support engine keeps the exact boolean function mapping the spins of
the current support set to the target spins at the top of the window.
Rows of a table are indexed by assignments of the support, bit ``j`` of
the row index being the spin (1 = plus) of ``support[j]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import _kernels as K
from . import _walks as W
from .lattice import TorusShape, ball
from .updates import (ModelParams, Rule, UnsupportedRuleError, UpdateStream, derive_seed,
                      derive_seeds, generate_stream)

DEFAULT_CAP = 20
BRUTE_FORCE_LIMIT = 22


def _region(A, shape: TorusShape) -> tuple:
    """Sorted tuple of flat site indices (accepts ints or coordinate tuples)."""
    out = set()
    for a in A:
        if isinstance(a, (tuple, list, np.ndarray)) and np.ndim(a) == 1 and len(a) == shape.d:
            out.add(shape.index(tuple(int(c) for c in a)))
        else:
            v = int(a)
            if not 0 <= v < shape.size:
                raise ValueError(f"site {v} outside the torus")
            out.add(v)
    return tuple(sorted(out))


def _window_slice(stream: UpdateStream, t1: float, t2: float) -> slice:
    if t1 > t2:
        raise ValueError("t1 must not exceed t2")
    w0, w1 = stream.window
    if t1 < w0 - 1e-12 or t2 > w1 + 1e-12:
        raise ValueError(f"interval ({t1}, {t2}] outside the stream window ({w0}, {w1}]")
    lo = int(np.searchsorted(stream.times, t1, side="right"))
    hi = int(np.searchsorted(stream.times, t2, side="right"))
    return slice(lo, hi)


@nb.njit(cache=True)
def _upd_sweep(sites, nbr, lo, hi, member):
    """Backward reachability over events ``lo..hi-1`` (in place on ``member``).

    Returns the indices of cone events, those that hit the set when reached.
    """
    cone = np.empty(hi - lo, dtype=np.int64)
    c = 0
    for i in range(hi - 1, lo - 1, -1):
        v = sites[i]
        if member[v]:
            cone[c] = i
            c += 1
            for j in range(nbr.shape[1]):
                member[nbr[v, j]] = True
    return cone[:c][::-1].copy()


def _f_upd_arrays(A, t1, t2, stream: UpdateStream):
    shape = stream.shape
    sl = _window_slice(stream, t1, t2)
    member = np.zeros(shape.size, dtype=np.bool_)
    member[list(A)] = True
    cone = _upd_sweep(stream.sites, shape.neighbor_table, sl.start, sl.stop, member)
    return member, cone


def f_upd(A, t1: float, t2: float, stream: UpdateStream) -> frozenset:
    """Sites reachable from ``A`` backward through updates in ``(t1, t2]``.

    Every update at a site of the current set adds that site's neighbors;
    nothing is ever removed, so ``A`` is contained in the result.
    """
    A = _region(A, stream.shape)
    member, _ = _f_upd_arrays(A, t1, t2, stream)
    return frozenset(int(v) for v in np.flatnonzero(member))


def cone_events(A, t1: float, t2: float, stream: UpdateStream) -> np.ndarray:
    """Indices (increasing time) of the updates that can influence ``A``."""
    A = _region(A, stream.shape)
    return _f_upd_arrays(A, t1, t2, stream)[1]


# ----------------------------------------------------------------------------
# Exact support tables


def _require_heat_bath(params: ModelParams):
    if not params.is_heat_bath:
        raise UnsupportedRuleError("update supports are defined for heat-bath rules only")


def _substitute(table: np.ndarray, support: list, j: int, new_support: list, nbr_row,
                unit: float, params: ModelParams, const=None) -> np.ndarray:
    """Table over ``new_support`` after replacing coordinate ``j`` by an update.

    ``const`` is the fixed spin (0/1) of an oblivious update; otherwise the
    new bit is computed from the neighbor bits of the assignment.
    """
    k2 = len(new_support)
    y = np.arange(1 << k2, dtype=np.int64)
    pos = {s: i for i, s in enumerate(new_support)}
    old = np.zeros(1 << k2, dtype=np.int64)
    for i, s in enumerate(support):
        if i == j:
            continue
        old |= ((y >> pos[s]) & 1) << i
    if const is not None:
        bit = np.full(1 << k2, const, dtype=np.int64)
    elif params.rule is Rule.HEAT_BATH_COPY:
        src = nbr_row[1] if unit <= 0.5 else nbr_row[0]
        bit = (y >> pos[int(src)]) & 1
    else:
        p = np.zeros(1 << k2, dtype=np.int64)
        for w in nbr_row:
            p += (y >> pos[int(w)]) & 1
        thr = params.tables.thr
        bit = (unit > thr[p]).astype(np.int64)
    old |= bit << j
    return table[old]


def _minimize(table: np.ndarray, support: list):
    """Drop every coordinate the table does not depend on.

    Relevance of one coordinate is unaffected by removing another that is
    irrelevant, so a single descending pass is exhaustive.
    """
    k = len(support)
    na = table.shape[1]
    for i in range(k - 1, -1, -1):
        view = table.reshape(1 << (len(support) - i - 1), 2, 1 << i, na)
        if np.array_equal(view[:, 0], view[:, 1]):
            table = np.ascontiguousarray(view[:, 0]).reshape(-1, na)
            support = support[:i] + support[i + 1:]
    return table, support


@dataclass
class SupportFunction:
    """Exact representation of the target spins by spins of ``support``.

    ``table[x, a]`` is True when target ``targets[a]`` is plus under the
    assignment with row index ``x``. ``table`` is None when the cap was
    exceeded; ``support`` is then the reachability over-approximation.
    """

    targets: tuple
    support: tuple
    table: np.ndarray | None
    exact: bool
    t1: float = 0.0
    t2: float = 0.0
    peak_size: int = 0

    def evaluate(self, spins) -> np.ndarray:
        """Target spins (+1/-1) given a full configuration at time ``t1``."""
        if self.table is None:
            raise ValueError("function table is unavailable after overflow")
        x = 0
        for j, s in enumerate(self.support):
            if spins[s] > 0:
                x |= 1 << j
        return np.where(self.table[x], 1, -1).astype(np.int8)

    @property
    def is_constant(self) -> bool:
        return len(self.support) == 0


class _SupportState:
    """Mutable support state shared by the exact and reachability modes."""

    def __init__(self, targets, cap):
        self.support = list(targets)
        self.table = None
        self.cap = cap
        self.exact = True
        self.peak = len(self.support)
        self.reset_table()

    def reset_table(self):
        k = len(self.support)
        rows = np.arange(1 << k, dtype=np.int64)
        self.table = np.stack([((rows >> j) & 1).astype(np.bool_) for j in range(k)], axis=1) \
            if k else np.zeros((1, 0), dtype=np.bool_)

    def step_sup(self, v, unit, nbr_row, params, lo, hi):
        j = self.support.index(v)
        const = None
        new = [s for s in self.support if s != v]
        if unit <= lo:
            const = 0
        elif unit >= hi:
            const = 1
        else:
            if params.rule is Rule.HEAT_BATH_COPY:
                reads = [int(nbr_row[1] if unit <= 0.5 else nbr_row[0])]
            else:
                reads = sorted({int(w) for w in nbr_row})
            for w in reads:
                if w not in new:
                    new.append(w)
        if len(new) > self.cap:
            self.exact = False
            self.table = None
            self.step_upd(v, nbr_row)
            return
        self.table = _substitute(self.table, self.support, j, new, nbr_row, unit, params, const)
        self.table, self.support = _minimize(self.table, new)
        self.peak = max(self.peak, len(new))

    def step_upd(self, v, nbr_row):
        for w in nbr_row:
            w = int(w)
            if w not in self.support:
                self.support.append(w)
        self.peak = max(self.peak, len(self.support))


def f_sup(A, t1: float, t2: float, stream: UpdateStream, params: ModelParams,
          cap: int = DEFAULT_CAP) -> SupportFunction:
    """Minimal set of time-``t1`` spins determining the time-``t2`` spins of ``A``.

    Updates are processed in decreasing time. An update at a support site is
    substituted into the table (a constant for oblivious updates, the rule's
    dependence on the neighbors otherwise) and the table is re-minimized
    immediately. Updates elsewhere are skipped. Exceeding ``cap`` switches
    to reachability stepping and returns ``exact=False``.
    """
    _require_heat_bath(params)
    if stream.shape != params.shape:
        raise ValueError("stream and parameters describe different tori")
    targets = _region(A, params.shape)
    cone = cone_events(targets, t1, t2, stream)
    nbr = params.shape.neighbor_table
    tab = params.tables
    st = _SupportState(targets, cap)
    for i in cone[::-1]:
        v = int(stream.sites[i])
        if v not in st.support:
            continue
        if st.exact:
            st.step_sup(v, float(stream.units[i]), nbr[v], params, tab.lo, tab.hi)
        else:
            st.step_upd(v, nbr[v])
    support = tuple(st.support) if st.exact else tuple(sorted(st.support))
    return SupportFunction(targets, support, st.table, st.exact, float(t1), float(t2), st.peak)


def brute_force_support(A, t1: float, t2: float, stream: UpdateStream, params: ModelParams,
                        limit: int = BRUTE_FORCE_LIMIT) -> frozenset:
    """Relevant time-``t1`` sites found by exhaustive forward simulation.

    Enumerates every assignment of the reachability set at ``t1`` (sites
    outside it cannot influence ``A``), replays the cone updates forward on
    all assignments at once and marks a site relevant when flipping it
    changes some target spin for some assignment.
    """
    _require_heat_bath(params)
    targets = _region(A, params.shape)
    member, cone = _f_upd_arrays(targets, t1, t2, stream)
    sites = [int(v) for v in np.flatnonzero(member)]
    k = len(sites)
    if k > limit:
        raise ValueError(f"reachability set has {k} sites, limit is {limit}")
    col = {}
    rows = np.arange(1 << k, dtype=np.int64)
    for j, s in enumerate(sites):
        col[s] = ((rows >> j) & 1).astype(np.uint8)
    nbr = params.shape.neighbor_table
    tab = params.tables
    copy = params.rule is Rule.HEAT_BATH_COPY
    for i in cone:
        v = int(stream.sites[i])
        u = float(stream.units[i])
        if copy:
            if u <= tab.lo:
                col[v] = np.zeros(1 << k, dtype=np.uint8)
            elif u >= tab.hi:
                col[v] = np.ones(1 << k, dtype=np.uint8)
            else:
                col[v] = col[int(nbr[v, 1] if u <= 0.5 else nbr[v, 0])].copy()
        else:
            p = np.zeros(1 << k, dtype=np.int64)
            for w in nbr[v]:
                p += col[int(w)]
            col[v] = (u > tab.thr[p]).astype(np.uint8)
    out = np.stack([col[a] for a in targets], axis=1) if targets else np.zeros((1 << k, 0), np.uint8)
    relevant = []
    for j in range(k):
        view = out.reshape(1 << (k - j - 1), 2, 1 << j, out.shape[1])
        if not np.array_equal(view[:, 0], view[:, 1]):
            relevant.append(sites[j])
    return frozenset(relevant)


# ----------------------------------------------------------------------------
# Space-time developments (used for clusters and block components)


@dataclass
class Development:
    """Backward development of ``H_A(t)`` over a sequence of phases.

    ``pieces`` are occupancy intervals ``(site, t_lower, t_upper)``: the
    site belongs to the history for times in ``(t_lower, t_upper]``.
    ``boundary`` maps each phase end time to the support at that time.
    """

    targets: tuple
    support: tuple
    exact: bool
    pieces: list
    boundary: dict = field(default_factory=dict)
    deferred_monotone: bool = True


def develop(A, phases, stream: UpdateStream, params: ModelParams, cap: int = DEFAULT_CAP) -> Development:
    """Develop the history of ``A`` through ``phases`` = [(t_upper, t_lower, mode)].

    Phases must be contiguous and decreasing in time. ``mode`` is ``"sup"``
    (exact minimal support of the set present at the phase start) or
    ``"upd"`` (reachability, nothing removed). The support of a set is the
    union of the supports of its sites, so a ``"sup"`` phase keeps one
    table per site present at its start.
    """
    _require_heat_bath(params)
    targets = _region(A, params.shape)
    nbr = params.shape.neighbor_table
    tab = params.tables
    current = set(targets)
    enter = {s: phases[0][0] if phases else 0.0 for s in current}
    pieces = []
    boundary = {}
    exact = True
    monotone = True

    def sync(t, now):
        for s in list(enter):
            if s not in now:
                pieces.append((s, t, enter.pop(s)))
        for s in now:
            if s not in enter:
                enter[s] = t

    for t_hi, t_lo, mode in phases:
        states = [_SupportState([w], cap) for w in sorted(current)] if mode == "sup" else None
        cone = cone_events(sorted(current), t_lo, t_hi, stream) if current else []
        for i in cone[::-1]:
            v = int(stream.sites[i])
            if v not in current:
                continue
            t = float(stream.times[i])
            if mode == "sup":
                u = float(stream.units[i])
                for st in states:
                    if v in st.support:
                        if st.exact:
                            st.step_sup(v, u, nbr[v], params, tab.lo, tab.hi)
                        else:
                            st.step_upd(v, nbr[v])
                states = [st for st in states if st.support]
                now = set().union(*(st.support for st in states)) if states else set()
            else:
                now = current | {int(w) for w in nbr[v]}
                if not current <= now:
                    monotone = False
            current = now
            sync(t, current)
            if not current:
                break
        if mode == "sup" and any(not st.exact for st in states):
            exact = False
        boundary[t_lo] = tuple(sorted(current))
    bottom = phases[-1][1] if phases else 0.0
    for s in list(enter):
        pieces.append((s, bottom, enter.pop(s)))
    return Development(targets, tuple(sorted(current)), exact, pieces, boundary, monotone)


# ----------------------------------------------------------------------------
# One-dimensional strands


def _require_cycle(params: ModelParams):
    if params.shape.d != 1:
        raise ValueError("strand traces are defined on the cycle (d=1) only")
    _require_heat_bath(params)


@dataclass
class HistoryTrace:
    """A single backward strand on the cycle.

    ``segments`` are ``(site, t_upper, t_lower)`` occupancy intervals from
    the top down; ``jumps`` are ``(time, from_site, to_site)`` spatial edges.
    ``supports`` lists ``(time, frozenset)`` with the support just below
    each update that changed it.
    """

    target: int
    t1: float
    t2: float
    segments: list
    jumps: list
    alive: bool
    position: int | None
    death_time: float | None
    death_sign: int | None
    supports: list

    @property
    def support(self) -> frozenset:
        return frozenset() if not self.alive else frozenset({self.position})


def trace_1d(v, t1: float, t2: float, stream: UpdateStream, params: ModelParams) -> HistoryTrace:
    """Backward strand of site ``v`` over ``(t1, t2]`` under the copy reading.

    Oblivious updates kill the strand; a dependent update moves it to the
    left neighbor (unit at most 1/2) or to the right neighbor. Under the
    threshold heat-bath rule this is an equal-in-law reading of the same
    updates; under the copy rule it is the exact history.
    """
    _require_cycle(params)
    v = _region([v], params.shape)[0]
    sl = _window_slice(stream, t1, t2)
    nbr = params.shape.neighbor_table
    tab = params.tables
    w, s = v, float(t2)
    segments, jumps, supports = [], [], [(float(t2), frozenset({v}))]
    inclusive = True
    while True:
        idx = stream.site_events(w)
        times = stream.times[idx]
        side = "right" if inclusive else "left"
        pos = int(np.searchsorted(times, s, side=side)) - 1
        inclusive = False
        if pos < 0 or idx[pos] < sl.start:
            segments.append((w, s, float(t1)))
            return HistoryTrace(v, float(t1), float(t2), segments, jumps, True, w, None, None, supports)
        e = int(idx[pos])
        te, u = float(stream.times[e]), float(stream.units[e])
        segments.append((w, s, te))
        if u <= tab.lo or u >= tab.hi:
            sign = -1 if u <= tab.lo else 1
            supports.append((te, frozenset()))
            return HistoryTrace(v, float(t1), float(t2), segments, jumps, False, None, te, sign, supports)
        nxt = int(nbr[w, 1] if u <= 0.5 else nbr[w, 0])
        jumps.append((te, w, nxt))
        supports.append((te, frozenset({nxt})))
        w, s = nxt, te


@dataclass
class WalkHistories:
    """Coalescing strands of many targets, traced from the counter stream.

    Per strand: ``root`` (strands with equal roots have merged), ``fate``
    (0 killed, 1 reached the bottom, 2 stopped by the depth guard),
    ``end_site``, ``end_time`` and the killing ``coin``; ``merge_time`` is
    when the strand joined another (``nan`` when it is a root).
    """

    targets: np.ndarray
    t_top: float
    t_bottom: float
    root: np.ndarray
    fate: np.ndarray
    end_site: np.ndarray
    end_time: np.ndarray
    coin: np.ndarray
    merge_time: np.ndarray
    segments: np.ndarray

    @property
    def survives(self) -> np.ndarray:
        return self.fate == W.FATE_BOTTOM

    @property
    def finished(self) -> bool:
        return bool(np.all(self.fate != W.FATE_UNFINISHED))

    def spins(self, bottom_config=None) -> np.ndarray:
        """Spins at the top given the configuration at the bottom."""
        out = self.coin.copy()
        alive = self.survives
        if np.any(alive):
            if bottom_config is None:
                raise ValueError("bottom configuration needed for surviving strands")
            out[alive] = np.asarray(bottom_config, dtype=np.int8)[self.end_site[alive]]
        return out


def walk_histories(params: ModelParams, seed: int, targets, t_top: float, t_bottom: float,
                   record: bool = False, max_depth: float = float(2 ** 20)) -> WalkHistories:
    """Trace coalescing strands from ``(targets, t_top)`` down to ``t_bottom``.

    Uses the same counter-based events as :func:`generate_stream` with this
    seed; ``t_bottom`` may be ``-inf``.
    """
    _require_cycle(params)
    tab = params.tables
    targets = np.asarray(targets, dtype=np.int64)
    skey = np.uint64(K.stream_key(np.uint64(int(seed) & ((1 << 64) - 1))))
    parent, fate, end_site, end_time, coin, merge, seg = W.trace_strands(
        skey, params.shape.neighbor_table, targets, float(t_top), float(t_bottom),
        tab.lo, tab.hi, float(max_depth), bool(record))
    root, f, es, cn = W.resolve(parent, fate, end_site, coin)
    et = end_time[root]
    return WalkHistories(targets, float(t_top), float(t_bottom), root, f, es, et, cn, merge, seg)


# ----------------------------------------------------------------------------
# Tail checks


@dataclass
class TailReport:
    """Empirical support-survival and reachability-escape frequencies."""

    h: float
    ell: int
    replicas: int
    p_support: float
    se_support: float
    m_h: float
    se_m: float
    p_escape: float
    se_escape: float
    escape_bound: float
    overflow: int
    seed: int

    @property
    def support_z(self) -> float:
        se = math.hypot(self.se_support, self.se_m)
        return 0.0 if se == 0 else (self.p_support - self.m_h) / se

    @property
    def support_ok(self) -> bool:
        return abs(self.p_support - self.m_h) <= 3 * math.hypot(self.se_support, self.se_m) + 1e-12

    @property
    def escape_ok(self) -> bool:
        return self.p_escape <= self.escape_bound + 3 * self.se_escape + 1e-12


def tail_checks(params: ModelParams, h: float, ell: int, replicas: int, seed: int = 0,
                cap: int = DEFAULT_CAP) -> TailReport:
    """Compare ``P(F_sup(v,t-h,t) != {})`` with ``m_h`` and reachability escape with ``e^-ell``.

    Each replica draws a fresh stream on ``(0, h]`` and examines the
    origin. ``m_h`` is estimated by independent forward runs from all-plus.
    """
    from .dynamics import magnetization_curve

    _require_heat_bath(params)
    if ell <= 20 * params.shape.d * h:
        raise ValueError("the escape check needs ell > 20 d h")
    shape = params.shape
    if h == 0:
        return TailReport(0.0, ell, replicas, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, math.exp(-ell), 0, seed)
    inside = np.zeros(shape.size, dtype=np.bool_)
    inside[list(ball(shape, [0], ell))] = True
    nonempty = np.empty(replicas)
    escape = np.empty(replicas)
    overflow = 0
    for r in range(replicas):
        stream = generate_stream(shape, (0.0, h), derive_seed(seed, 0x7A1, r))
        member, _ = _f_upd_arrays((0,), 0.0, h, stream)
        escape[r] = float(np.any(member & ~inside))
        fs = f_sup([0], 0.0, h, stream, params, cap)
        overflow += not fs.exact
        nonempty[r] = float(len(fs.support) > 0)
    curve = magnetization_curve(params, [h], replicas, derive_seed(seed, 0x7A2))
    sq = math.sqrt(replicas)
    se = lambda x: float(x.std(ddof=1) / sq) if replicas > 1 else 0.0  # noqa: E731
    return TailReport(float(h), int(ell), replicas, float(nonempty.mean()), se(nonempty),
                      float(curve.estimate[0]), float(curve.stderr[0]), float(escape.mean()),
                      se(escape), math.exp(-ell), overflow, int(seed))


__all__ = [
    "f_upd",
    "f_sup",
    "cone_events",
    "brute_force_support",
    "trace_1d",
    "walk_histories",
    "develop",
    "tail_checks",
    "SupportFunction",
    "HistoryTrace",
    "WalkHistories",
    "Development",
    "TailReport",
]
