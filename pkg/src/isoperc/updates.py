"""Update sequences ``(site, unit, time)`` and single-site update rules.

Each site carries a rate-one Poisson clock. Events are generated per
``(seed, site, unit epoch)`` by a SplitMix64-style counter hash, so a
stream over any window is reproducible and extending a window in either
direction never perturbs events that were already generated.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .lattice import TorusShape

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class Rule(str, enum.Enum):
    """Single-site update rules.

    ``HEAT_BATH`` resamples the spin from its conditional law with a
    threshold on the unit. ``HEAT_BATH_COPY`` is the same law on the cycle
    written as "fair coin with probability theta, otherwise copy a uniformly
    chosen neighbor"; backward histories then become single killed walks.
    ``METROPOLIS`` flips with probability ``min(1, exp(-energy change))``.
    """

    HEAT_BATH = "heat-bath"
    METROPOLIS = "metropolis"
    HEAT_BATH_COPY = "heat-bath-copy"

    @property
    def code(self) -> int:
        return {Rule.HEAT_BATH: K.RULE_HEAT_BATH, Rule.METROPOLIS: K.RULE_METROPOLIS,
                Rule.HEAT_BATH_COPY: K.RULE_COPY}[self]


class UnsupportedRuleError(ValueError):
    """Raised when an operation is undefined for the requested update rule."""


@dataclass(frozen=True)
class ModelParams:
    """Inverse temperature, field, torus and update rule."""

    beta: float
    h: float
    shape: TorusShape
    rule: Rule = Rule.HEAT_BATH

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule(self.rule))
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be a finite non-negative number, got {self.beta}")
        if not math.isfinite(self.h):
            raise ValueError("field must be finite")
        if self.rule is Rule.HEAT_BATH_COPY and (self.shape.d != 1 or self.h != 0):
            raise UnsupportedRuleError("the copy representation needs d=1 and zero field")

    @property
    def is_heat_bath(self) -> bool:
        return self.rule in (Rule.HEAT_BATH, Rule.HEAT_BATH_COPY)

    @cached_property
    def tables(self) -> "RuleTables":
        return rule_tables(self)


def theta(params: ModelParams) -> float:
    """Oblivious-update probability ``1 - tanh(2 d beta + |h|)``."""
    return 1.0 - math.tanh(2 * params.shape.d * params.beta + abs(params.h))


class RuleTables(NamedTuple):
    """Precomputed thresholds shared by every simulation path.

    ``thr[p]`` is the heat-bath minus threshold when ``p`` neighbors are
    plus; ``acc[row, p]`` the Metropolis flip probability for current spin
    ``+1`` (row 0) or ``-1`` (row 1); ``lo`` and ``hi`` the oblivious cut
    points.
    """

    code: int
    thr: np.ndarray
    acc: np.ndarray
    lo: float
    hi: float


def rule_tables(params: ModelParams) -> RuleTables:
    deg = 2 * params.shape.d
    beta, h = params.beta, params.h
    thr = np.empty(deg + 1, dtype=np.float64)
    acc = np.empty((2, deg + 1), dtype=np.float64)
    for p in range(deg + 1):
        s = 2 * p - deg
        thr[p] = 0.5 * (1.0 - math.tanh(beta * s + h))
        for row, cur in enumerate((1, -1)):
            acc[row, p] = min(1.0, math.exp(-2.0 * cur * (beta * s + h)))
    th = theta(params)
    lo = min(th / 2.0, float(thr.min()))
    hi = 1.0 - th / 2.0
    # Guard the sound side of the plus cut against last-bit rounding.
    if hi <= thr.max():
        hi = math.nextafter(float(thr.max()), 2.0)
    return RuleTables(params.rule.code, thr, acc, lo, hi)


class ObliviousClass(str, enum.Enum):
    OBLIVIOUS_MINUS = "oblivious-minus"
    OBLIVIOUS_PLUS = "oblivious-plus"
    DEPENDENT = "dependent"


class UpdateEvent(NamedTuple):
    site: int
    time: float
    unit: float


def mix64(z: int) -> int:
    """SplitMix64 finalizer on Python integers (reference implementation)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, *keys)``."""
    z = mix64((int(seed) + _GOLDEN) & MASK64)
    for k in keys:
        z = mix64((z ^ (int(k) & MASK64)) + _GOLDEN)
    return z


def derive_seeds(seed: int, count: int, *keys: int) -> np.ndarray:
    """Array of ``count`` child seeds, one per replica index."""
    return np.array([derive_seed(seed, *keys, j) for j in range(count)], dtype=np.uint64)


class UpdateStream:
    """Every event of a torus in a window ``(t0, t1]``.

    Attributes
    ----------
    times, sites, units : ndarray
        Events sorted by time, ties by site index.
    site_ptr, site_order : ndarray
        Per-site lists: ``site_order[site_ptr[v]:site_ptr[v+1]]`` indexes the
        events of site ``v`` in increasing time.
    counter_based : bool
        True when the events are exactly those the counter hash produces for
        ``seed``, so consumers may regenerate them outside the window.
    """

    def __init__(self, shape: TorusShape, window: tuple[float, float], seed: int,
                 times: np.ndarray, sites: np.ndarray, units: np.ndarray,
                 counter_based: bool = False):
        self.shape = shape
        self.counter_based = bool(counter_based)
        self.window = (float(window[0]), float(window[1]))
        self.seed = int(seed) & MASK64
        self.times = times
        self.sites = sites
        self.units = units
        for arr in (times, sites, units):
            arr.setflags(write=False)
        order = np.argsort(sites, kind="stable")
        counts = np.bincount(sites, minlength=shape.size)
        self.site_ptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        self.site_order = order.astype(np.int64)

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def event(self, i: int) -> UpdateEvent:
        return UpdateEvent(int(self.sites[i]), float(self.times[i]), float(self.units[i]))

    def site_events(self, v: int) -> np.ndarray:
        """Indices of the events at site ``v`` in increasing time."""
        return self.site_order[self.site_ptr[v]:self.site_ptr[v + 1]]

    def in_window(self, t1: float, t2: float) -> np.ndarray:
        """Indices of events with ``t1 < T <= t2``."""
        lo = np.searchsorted(self.times, t1, side="right")
        hi = np.searchsorted(self.times, t2, side="right")
        return np.arange(lo, hi)

    def extend(self, t0: float | None = None, t1: float | None = None) -> "UpdateStream":
        """New stream over a larger window; old events are reproduced exactly."""
        a = self.window[0] if t0 is None else min(t0, self.window[0])
        b = self.window[1] if t1 is None else max(t1, self.window[1])
        return generate_stream(self.shape, (a, b), self.seed)

    def fingerprint(self, t1: float | None = None, t2: float | None = None) -> str:
        """SHA-256 of the event records inside ``(t1, t2]``."""
        import hashlib

        t1 = self.window[0] if t1 is None else t1
        t2 = self.window[1] if t2 is None else t2
        idx = self.in_window(t1, t2)
        h = hashlib.sha256()
        h.update(self.sites[idx].astype("<u8").tobytes())
        h.update(self.times[idx].astype("<f8").tobytes())
        h.update(self.units[idx].astype("<f8").tobytes())
        return h.hexdigest()


def generate_stream(shape: TorusShape, window: tuple[float, float], seed: int) -> UpdateStream:
    """Materialize every event of ``shape`` with time in ``(t0, t1]``."""
    t0, t1 = float(window[0]), float(window[1])
    if t1 < t0:
        raise ValueError("window end precedes its start")
    seed = int(seed) & MASK64
    times, sites, units = K.materialize(np.uint64(seed), shape.size, t0, t1)
    return UpdateStream(shape, (t0, t1), seed, times, sites, units, counter_based=True)


def site_events_in_epoch(seed: int, site: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Times and units of one site in ``(epoch, epoch + 1]``."""
    bt = np.empty(K.POISSON_MAX)
    bu = np.empty(K.POISSON_MAX)
    skey = K.stream_key(np.uint64(int(seed) & MASK64))
    c = K.site_epoch_events(skey, int(site), int(epoch), bt, bu)
    return bt[:c].copy(), bu[:c].copy()


def apply_update(sigma: np.ndarray, e: UpdateEvent, params: ModelParams) -> int:
    """New spin at ``e.site`` given the current configuration ``sigma``."""
    tab = params.tables
    nbr = params.shape.neighbor_table
    v = int(e.site)
    u = float(e.unit)
    if params.rule is Rule.HEAT_BATH_COPY:
        if u <= tab.lo:
            return -1
        if u >= tab.hi:
            return 1
        return int(sigma[nbr[v, 1]]) if u <= 0.5 else int(sigma[nbr[v, 0]])
    p = int(np.sum(np.asarray(sigma)[nbr[v]] > 0))
    if params.rule is Rule.HEAT_BATH:
        return -1 if u <= tab.thr[p] else 1
    cur = int(sigma[v])
    a = tab.acc[0 if cur > 0 else 1, p]
    return -cur if u <= a else cur


def classify_oblivious(e: UpdateEvent, params: ModelParams) -> ObliviousClass:
    """Whether the update writes a fixed sign regardless of the neighbors."""
    if params.rule is Rule.METROPOLIS:
        raise UnsupportedRuleError("oblivious classification is defined for heat-bath rules only")
    tab = params.tables
    if e.unit <= tab.lo:
        return ObliviousClass.OBLIVIOUS_MINUS
    if e.unit >= tab.hi:
        return ObliviousClass.OBLIVIOUS_PLUS
    return ObliviousClass.DEPENDENT


def classify_units(units: np.ndarray, params: ModelParams) -> np.ndarray:
    """Vectorized classification: -1 oblivious minus, +1 oblivious plus, 0 dependent."""
    if params.rule is Rule.METROPOLIS:
        raise UnsupportedRuleError("oblivious classification is defined for heat-bath rules only")
    tab = params.tables
    out = np.zeros(len(units), dtype=np.int8)
    out[units <= tab.lo] = -1
    out[units >= tab.hi] = 1
    return out


EVENT_LOG_MAGIC = b"ISOPERC1"
_HEADER = struct.Struct("<8sHHIffQ")


def write_event_log(stream: UpdateStream, path: str | Path) -> None:
    """Binary dump: 32-byte header, then ``(site u64, time f64, unit f64)`` records."""
    header = _HEADER.pack(EVENT_LOG_MAGIC, stream.shape.d, 0, stream.shape.n,
                          stream.window[0], stream.window[1], stream.seed)
    rec = np.empty(len(stream), dtype=[("site", "<u8"), ("time", "<f8"), ("unit", "<f8")])
    rec["site"] = stream.sites
    rec["time"] = stream.times
    rec["unit"] = stream.units
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_event_log(path: str | Path) -> UpdateStream:
    """Inverse of :func:`write_event_log`.

    The header stores the window in single precision, so the returned
    window is informational; the event records themselves are exact.
    """
    raw = Path(path).read_bytes()
    magic, d, _, n, t0, t1, seed = _HEADER.unpack_from(raw, 0)
    if magic != EVENT_LOG_MAGIC:
        raise ValueError("not an event log")
    rec = np.frombuffer(raw, offset=_HEADER.size,
                        dtype=[("site", "<u8"), ("time", "<f8"), ("unit", "<f8")])
    shape = TorusShape(int(d), int(n))
    return UpdateStream(shape, (float(t0), float(t1)), int(seed),
                        rec["time"].astype(np.float64), rec["site"].astype(np.int64),
                        rec["unit"].astype(np.float64))
