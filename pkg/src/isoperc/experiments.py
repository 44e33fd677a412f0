"""Mixing-time experiments: TV bounds, cutoff profiles, annealed and quenched starts.

Lower bounds on ``||P_x0(X_t in .) - pi||`` come from two-sample tail
comparisons of a statistic: for any event ``E``, ``P_x0(E) - pi(E)`` is a
valid lower bound, so thresholds may be optimized. Optimized thresholds
are selected on one half of each sample and evaluated on the other half.
Stationary samples always come from exact sampling.

Upper bounds come from the monotone grand coupling (rigorous) or from the
exponential moment of intersecting red sets, ``sqrt(E 2^{|R cap R'|} - 1)``,
which is labeled as a surrogate because the conditioning on green
clusters is dropped.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numba as nb
import numpy as np

from . import _kernels as K
from .clusters import annealed_red_sets_1d, red_sets_1d
from .dynamics import (_sample_stderr, all_plus, coupling_tv_upper, final_configurations,
                       forward_snapshots)
from .updates import ModelParams, Rule, derive_seed, derive_seeds, theta
from .sampling import circular_apply, pi_samples, walk_kernel_1d

CSV_COLUMNS = ("experiment", "n", "d", "beta", "h", "t", "kind", "value", "stderr", "replicas", "seed")

# Critical inverse temperatures; d = 3 is a numerical literature value.
CRITICAL_BETA = {1: math.inf, 2: 0.5 * math.log(1.0 + math.sqrt(2.0)), 3: 0.2216544}


class TvKind(str, enum.Enum):
    COUPLING_UPPER = "CouplingUpper"
    STATISTIC_LOWER = "StatisticLower"
    EXACT_SMALL = "ExactSmall"
    EXP_MOMENT_UPPER = "ExpMomentUpper"


@dataclass
class TvEstimate:
    """One bound or exact value of the distance to stationarity at time ``t``.

    ``value`` is clipped to ``[0, 1]``; ``raw`` keeps the unclipped
    estimate. ``extra`` carries statistic-specific diagnostics.
    """

    kind: TvKind
    t: float
    value: float
    stderr: float
    statistic: str
    replicas: int = 0
    raw: float = float("nan")
    extra: dict = field(default_factory=dict)

    def row(self, experiment: str, params: ModelParams, seed: int) -> dict:
        return {"experiment": experiment, "n": params.shape.n, "d": params.shape.d,
                "beta": params.beta, "h": params.h, "t": self.t, "kind": self.kind.value,
                "value": self.value, "stderr": self.stderr, "replicas": self.replicas,
                "seed": seed}


def _clip(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def critical_advisory(params: ModelParams) -> str | None:
    """Warning text when ``beta`` is at or above the critical value of the lattice."""
    bc = CRITICAL_BETA.get(params.shape.d)
    if bc is None or params.beta < bc:
        return None
    return (f"beta={params.beta} is at or above the critical value {bc:.6f} for d={params.shape.d}; "
            "high-temperature guarantees do not apply")


# ----------------------------------------------------------------------------
# Two-sample tail comparisons


def tail_difference(a, b, c: float, greater: bool = True) -> tuple:
    """``(P_a(S > c) - P_b(S > c), stderr)``; with ``greater=False`` the event is ``S < c``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pa = float(np.mean(a > c) if greater else np.mean(a < c))
    pb = float(np.mean(b > c) if greater else np.mean(b < c))
    se = math.sqrt(pa * (1 - pa) / a.shape[0] + pb * (1 - pb) / b.shape[0])
    return pa - pb, se


def optimized_lower(a, b, greater: bool = True, quantiles: int = 64, split: bool = True) -> tuple:
    """Best threshold among ``quantiles`` pooled quantiles, with sample splitting.

    Returns ``(difference, stderr, threshold)``. The threshold is chosen on
    the even-indexed halves and the difference evaluated on the odd halves,
    so the returned difference is an unbiased estimate for a fixed event.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if split and a.shape[0] >= 4 and b.shape[0] >= 4:
        sel_a, ev_a, sel_b, ev_b = a[0::2], a[1::2], b[0::2], b[1::2]
    else:
        sel_a, ev_a, sel_b, ev_b = a, a, b, b
    pool = np.concatenate([sel_a, sel_b])
    cands = np.unique(np.quantile(pool, np.linspace(0.0, 1.0, quantiles)))
    sa = np.sort(sel_a)
    sb = np.sort(sel_b)
    if greater:
        pa = 1.0 - np.searchsorted(sa, cands, side="right") / sa.shape[0]
        pb = 1.0 - np.searchsorted(sb, cands, side="right") / sb.shape[0]
    else:
        pa = np.searchsorted(sa, cands, side="left") / sa.shape[0]
        pb = np.searchsorted(sb, cands, side="left") / sb.shape[0]
    best = float(cands[int(np.argmax(pa - pb))])
    d, se = tail_difference(ev_a, ev_b, best, greater)
    return d, se, best


# ----------------------------------------------------------------------------
# Magnetization statistic


def pi_magnetizations(params: ModelParams, count: int, seed: int) -> np.ndarray:
    """Total magnetizations of exact stationary samples."""
    return pi_samples(params, count, derive_seed(seed, 0x4D2)).sum(axis=1).astype(np.float64)


def plus_magnetizations(params: ModelParams, t: float, replicas: int, seed: int) -> np.ndarray:
    """Total magnetizations at time ``t`` of independent runs from all-plus."""
    if t <= 0:
        return np.full(replicas, float(params.shape.size))
    seeds = derive_seeds(seed, replicas, 0x4D1)
    _, mag, _ = forward_snapshots(params, all_plus(params), [float(t)], seeds)
    return mag[:, 0].astype(np.float64)


def tv_lower_magnetization(params: ModelParams, t: float, replicas: int, seed: int = 0,
                           pi_stat=None, pi_replicas: int | None = None,
                           split: bool = True) -> TvEstimate:
    """Lower bound on the distance from all-plus via the total magnetization.

    The event is ``{M > c}`` with an optimized threshold. The fixed
    threshold half the mean plus-start magnetization and the Chebyshev
    bound ``1 - 4 (Var_t + Var_pi) / (E_t M)^2`` are reported in ``extra``.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    if pi_stat is None:
        pi_stat = pi_magnetizations(params, pi_replicas or replicas, seed)
    pi_stat = np.asarray(pi_stat, dtype=np.float64)
    a = plus_magnetizations(params, t, replicas, seed)
    d, se, c = optimized_lower(a, pi_stat, True, split=split)
    mean = float(a.mean())
    fixed = 0.5 * mean
    d_fixed, se_fixed = tail_difference(a, pi_stat, fixed, True)
    var = float(a.var(ddof=1)) if a.shape[0] > 1 else 0.0
    cheb = 1.0 - 4.0 * (var + float(pi_stat.var(ddof=1))) / mean ** 2 if mean > 0 else 0.0
    return TvEstimate(TvKind.STATISTIC_LOWER, float(t), _clip(d), se, "magnetization", replicas, d,
                      {"threshold": c, "fixed_threshold": fixed, "fixed_value": d_fixed,
                       "fixed_stderr": se_fixed, "chebyshev": cheb,
                       "pi_replicas": int(pi_stat.shape[0])})


def magnetization_lower_curve(params: ModelParams, grid, replicas: int, seed: int = 0,
                              pi_stat=None) -> list:
    """Magnetization lower bounds on a grid from one all-plus run per replica."""
    if pi_stat is None:
        pi_stat = pi_magnetizations(params, replicas, seed)
    grid = np.asarray(grid, dtype=np.float64)
    _, mag, _ = forward_snapshots(params, all_plus(params), grid, derive_seeds(seed, replicas, 0x4D1))
    out = []
    for k, t in enumerate(grid):
        d, se, c = optimized_lower(mag[:, k].astype(np.float64), pi_stat, True)
        out.append(TvEstimate(TvKind.STATISTIC_LOWER, float(t), _clip(d), se, "magnetization",
                              replicas, d, {"threshold": c}))
    return out


def coupling_upper(params: ModelParams, t: float, replicas: int, seed: int = 0) -> TvEstimate:
    """``P(X_t^+ != X_t^-)`` under the monotone grand coupling."""
    est, se, dens = coupling_tv_upper(params, t, replicas, derive_seed(seed, 0xC0))
    return TvEstimate(TvKind.COUPLING_UPPER, float(t), _clip(est), se, "grand-coupling", replicas,
                      est, {"disagreement_density": dens})


def cutoff_profile(params: ModelParams, grid, replicas: int, seed: int = 0,
                   pi_replicas: int | None = None) -> list:
    """Magnetization lower bounds and coupling upper bounds on a time grid."""
    pi_stat = pi_magnetizations(params, pi_replicas or replicas, seed)
    out = []
    for k, t in enumerate(grid):
        s = derive_seed(seed, 0xCB, k)
        out.append(tv_lower_magnetization(params, float(t), replicas, s, pi_stat))
        out.append(coupling_upper(params, float(t), replicas, s))
    return out


# ----------------------------------------------------------------------------
# Pair correlation statistic (cycle, annealed start)


def _require_cycle(params: ModelParams):
    if params.shape.d != 1:
        raise ValueError("this statistic is defined on the cycle (d=1) only")


def pair_sum(configs) -> np.ndarray:
    """``sum_u x(u) x(u+1)`` around the cycle, one value per row."""
    x = np.atleast_2d(np.asarray(configs, dtype=np.int64))
    return np.sum(x * np.roll(x, -1, axis=1), axis=1).astype(np.float64)


def uniform_starts(params: ModelParams, replicas: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, 0x9C1))
    return (2 * rng.integers(0, 2, size=(replicas, params.shape.size)) - 1).astype(np.int8)


def uniform_start_pair_sums(params: ModelParams, t: float, replicas: int, seed: int) -> np.ndarray:
    starts = uniform_starts(params, replicas, seed)
    if t <= 0:
        return pair_sum(starts)
    x = final_configurations(params, starts, float(t), derive_seeds(seed, replicas, 0x9C2))
    return pair_sum(x)


@nb.njit(cache=True)
def _pair_sum_snapshots(starts, nbr, seeds, t_hi, rule, thr, acc, lo, hi, snaps):
    """Cycle pair sums ``sum_u x(u) x(u+1)`` at each snapshot, one run per row."""
    r, nsites = starts.shape
    ns = snaps.shape[0]
    out = np.empty((r, ns), dtype=np.int64)
    size = nsites * K.POISSON_MAX
    bt = np.empty(size, np.float64)
    bs = np.empty(size, np.int64)
    bu = np.empty(size, np.float64)
    tt = np.empty(size, np.float64)
    ts = np.empty(size, np.int64)
    tu = np.empty(size, np.float64)
    spins = np.empty(nsites, dtype=np.int8)
    for j in range(r):
        spins[:] = starts[j]
        ps = np.int64(0)
        for v in range(nsites):
            ps += np.int64(spins[v]) * np.int64(spins[nbr[v, 0]])
        k = 0
        next_snap = snaps[0] if ns > 0 else np.inf
        if t_hi > 0.0:
            for epoch in range(0, int(math.ceil(t_hi))):
                c = K.epoch_events(seeds[j], nsites, epoch, 0.0, t_hi, bt, bs, bu, tt, ts, tu)
                for i in range(c):
                    t = bt[i]
                    if t > next_snap:
                        while k < ns and snaps[k] < t:
                            out[j, k] = ps
                            k += 1
                        next_snap = snaps[k] if k < ns else np.inf
                    v = bs[i]
                    s_new = K.new_spin(rule, v, bu[i], spins, nbr, thr, acc, lo, hi)
                    if s_new != spins[v]:
                        ps += 2 * np.int64(s_new) * (np.int64(spins[nbr[v, 0]]) + np.int64(spins[nbr[v, 1]]))
                        spins[v] = s_new
        while k < ns:
            out[j, k] = ps
            k += 1
    return out


def uniform_start_pair_sum_curve(params: ModelParams, grid, replicas: int, seed: int) -> np.ndarray:
    """``(replicas, len(grid))`` pair sums of uniform-start runs sharing one run per replica."""
    _require_cycle(params)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size and (np.any(np.diff(grid) < 0) or grid[0] < 0):
        raise ValueError("grid must be nonnegative and nondecreasing")
    tab = params.tables
    starts = uniform_starts(params, replicas, seed)
    return _pair_sum_snapshots(starts, params.shape.neighbor_table, derive_seeds(seed, replicas, 0x9C2),
                               float(grid[-1]) if grid.size else 0.0, tab.code, tab.thr, tab.acc,
                               tab.lo, tab.hi, grid).astype(np.float64)


def pair_correlation_lower_curve(params: ModelParams, grid, replicas: int, seed: int = 0,
                                 pi_stat=None) -> list:
    """Pair-correlation lower bounds on a grid from one run per replica."""
    if pi_stat is None:
        pi_stat = pi_pair_sums(params, replicas, seed)
    a = uniform_start_pair_sum_curve(params, grid, replicas, seed)
    out = []
    for k, t in enumerate(grid):
        d, se, c = optimized_lower(a[:, k], pi_stat, False)
        out.append(TvEstimate(TvKind.STATISTIC_LOWER, float(t), _clip(d), se, "pair-correlation",
                              replicas, d, {"threshold": c}))
    return out


def pi_pair_sums(params: ModelParams, count: int, seed: int) -> np.ndarray:
    return pair_sum(pi_samples(params, count, derive_seed(seed, 0x9C3)))


def tv_lower_pair_correlation(params: ModelParams, t: float, replicas: int, seed: int = 0,
                              pi_stat=None, pi_replicas: int | None = None,
                              split: bool = True) -> TvEstimate:
    """Lower bound on the annealed distance from the uniform start.

    Compares the nearest-neighbor correlation sum of uniform-start chains
    with stationary samples on the event ``{S < c}``. The fixed threshold
    ``E_pi S - sqrt(n) log(n) / 2`` is reported in ``extra``.
    """
    _require_cycle(params)
    if t < 0:
        raise ValueError("time must be nonnegative")
    if pi_stat is None:
        pi_stat = pi_pair_sums(params, pi_replicas or replicas, seed)
    pi_stat = np.asarray(pi_stat, dtype=np.float64)
    a = uniform_start_pair_sums(params, t, replicas, seed)
    d, se, c = optimized_lower(a, pi_stat, False, split=split)
    n = params.shape.size
    fixed = float(pi_stat.mean()) - 0.5 * math.sqrt(n) * math.log(n)
    d_fixed, se_fixed = tail_difference(a, pi_stat, fixed, False)
    return TvEstimate(TvKind.STATISTIC_LOWER, float(t), _clip(d), se, "pair-correlation", replicas, d,
                      {"threshold": c, "fixed_threshold": fixed, "fixed_value": d_fixed,
                       "fixed_stderr": se_fixed, "start_mean": float(a.mean()),
                       "pi_mean": float(pi_stat.mean()), "pi_replicas": int(pi_stat.shape[0])})


# ----------------------------------------------------------------------------
# Exponential-moment upper bounds


def _exp_moment_bound(ra: np.ndarray, rb: np.ndarray, t: float, statistic: str) -> TvEstimate:
    inter = np.sum(ra & rb, axis=1).astype(np.float64)
    vals = np.exp2(inter)
    m = float(vals.mean())
    se_m = float(_sample_stderr(vals))
    excess = max(m - 1.0, 0.0)
    bound = math.sqrt(excess)
    # Delta method; floor keeps the stderr finite when the excess vanishes.
    se = se_m / (2.0 * max(bound, 1e-3))
    return TvEstimate(TvKind.EXP_MOMENT_UPPER, float(t), _clip(bound), se, statistic, ra.shape[0],
                      bound, {"moment": m, "moment_stderr": se_m,
                              "mean_intersection": float(inter.mean()), "surrogate": True})


def exp_moment_upper_plus(params: ModelParams, t: float, replicas: int, seed: int = 0) -> TvEstimate:
    """Surrogate upper bound from red sets of the basic labeling (all-plus start)."""
    _require_cycle(params)
    if t <= 0:
        return TvEstimate(TvKind.EXP_MOMENT_UPPER, float(t), 1.0, 0.0, "red-intersection", replicas, 1.0)
    ra = red_sets_1d(params, float(t), derive_seeds(seed, replicas, 0xE1))
    rb = red_sets_1d(params, float(t), derive_seeds(seed, replicas, 0xE2))
    return _exp_moment_bound(ra, rb, t, "red-intersection")


def exp_moment_upper_uniform(params: ModelParams, t: float, replicas: int, seed: int = 0) -> TvEstimate:
    """Surrogate upper bound from annealed red sets (uniform start)."""
    _require_cycle(params)
    if t <= 0:
        return TvEstimate(TvKind.EXP_MOMENT_UPPER, float(t), 1.0, 0.0, "annealed-red-intersection",
                          replicas, 1.0)
    ra = annealed_red_sets_1d(params, float(t), derive_seeds(seed, replicas, 0xE3))
    rb = annealed_red_sets_1d(params, float(t), derive_seeds(seed, replicas, 0xE4))
    return _exp_moment_bound(ra, rb, t, "annealed-red-intersection")


# ----------------------------------------------------------------------------
# Crossing times and brackets


@dataclass
class Crossing:
    """Bisection result for the last time a bound is on one side of ``eps``."""

    t: float
    bracket: tuple
    probes: list


def _crossing(f, eps: float, t_lo: float, t_hi: float, above: bool, tol: float) -> Crossing:
    """Locate where the decreasing estimate ``f(t).value`` crosses ``eps``.

    With ``above`` the result is the supremum of times with value ``>= eps``
    (a lower bound's crossing); otherwise the infimum of times with
    ``value <= eps`` (an upper bound's crossing). ``t_hi`` is doubled
    until the crossing is bracketed.
    """
    probes = []

    def ok(t):
        est = f(t, len(probes))
        probes.append(est)
        return est.value >= eps if above else est.value > eps

    lo, hi = t_lo, t_hi
    while ok(hi) and len(probes) < 20:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return Crossing(0.5 * (lo + hi), (lo, hi), probes)


@dataclass
class MixingBracket:
    """``t_mix(eps)`` bracketed by a lower-bound and an upper-bound crossing."""

    start: str
    eps: float
    lower_crossing: Crossing
    upper_crossing: Crossing

    @property
    def bracket(self) -> tuple:
        return (self.lower_crossing.t, self.upper_crossing.t)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower_crossing.t + self.upper_crossing.t)

    @property
    def gap(self) -> float:
        return self.upper_crossing.t - self.lower_crossing.t

    @property
    def consistent(self) -> bool:
        tol = (self.lower_crossing.bracket[1] - self.lower_crossing.bracket[0]
               + self.upper_crossing.bracket[1] - self.upper_crossing.bracket[0])
        return self.gap >= -tol

    def summary(self) -> dict:
        return {"start": self.start, "eps": self.eps, "lower": self.lower_crossing.t,
                "upper": self.upper_crossing.t, "midpoint": self.midpoint, "gap": self.gap,
                "consistent": self.consistent}


def _scan_crossing(estimates: list, eps: float) -> Crossing:
    """Last grid time whose lower bound is at least ``eps``, bracketed by the next grid time."""
    times = [e.t for e in estimates]
    hit = [i for i, e in enumerate(estimates) if e.value >= eps]
    if not hit:
        return Crossing(times[0], (times[0], times[0]), estimates)
    i = hit[-1]
    j = min(i + 1, len(times) - 1)
    return Crossing(0.5 * (times[i] + times[j]), (times[i], times[j]), estimates)


def _lower_scan(curve, eps: float, t_hi: float, step: float) -> Crossing:
    """Scan ``curve(grid)`` on ``[0, t_hi]``, doubling the range while the end still exceeds ``eps``."""
    for _ in range(8):
        grid = np.arange(0.0, t_hi + 0.5 * step, step)
        ests = curve(grid)
        if ests[-1].value < eps:
            return _scan_crossing(ests, eps)
        t_hi *= 2.0
    return _scan_crossing(ests, eps)


def plus_mixing_bracket(params: ModelParams, eps: float = 0.25, replicas: int = 2000,
                        moment_replicas: int = 1000, seed: int = 0, tol: float = 0.05,
                        upper: str = "exp-moment") -> MixingBracket:
    """Bracket ``t_mix(eps)`` from all-plus.

    The lower side scans the magnetization statistic on a grid of spacing
    ``tol`` with one run per replica. The upper side bisects on the
    red-intersection surrogate (``upper="exp-moment"``) or the monotone
    coupling (``upper="coupling"``) with fresh randomness per probe.
    """
    t_m = cycle_cutoff(params) if params.shape.d == 1 else None
    if t_m is None:
        from .dynamics import cutoff_time
        t_m = cutoff_time(params, seed=derive_seed(seed, 0x50)).t_m
    pi_stat = pi_magnetizations(params, replicas, seed)
    s_lo = derive_seed(seed, 0x51)
    s_hi = derive_seed(seed, 0x52)
    low = _lower_scan(lambda g: magnetization_lower_curve(params, g, replicas, s_lo, pi_stat),
                      eps, max(t_m + 3.0, 1.0), tol)
    if upper == "coupling":
        fu = lambda t, k: coupling_upper(params, t, moment_replicas, derive_seed(s_hi, k))  # noqa: E731
    else:
        _require_cycle(params)
        fu = lambda t, k: exp_moment_upper_plus(params, t, moment_replicas, derive_seed(s_hi, k))  # noqa: E731
    up = _crossing(fu, eps, 0.0, max(t_m + 4.0, 1.0), False, tol)
    return MixingBracket("all-plus", eps, low, up)


def uniform_mixing_bracket(params: ModelParams, eps: float = 0.25, replicas: int = 2000,
                           moment_replicas: int = 1000, seed: int = 0,
                           tol: float = 0.05) -> MixingBracket:
    """Bracket the annealed ``t_mix(eps)`` from the uniform start on the cycle."""
    _require_cycle(params)
    t_m = cycle_cutoff(params)
    pi_stat = pi_pair_sums(params, replicas, seed)
    s_lo = derive_seed(seed, 0x53)
    s_hi = derive_seed(seed, 0x54)
    low = _lower_scan(lambda g: pair_correlation_lower_curve(params, g, replicas, s_lo, pi_stat),
                      eps, max(0.5 * t_m, 1.0), tol)
    up = _crossing(lambda t, k: exp_moment_upper_uniform(params, t, moment_replicas, derive_seed(s_hi, k)),
                   eps, 0.0, max(0.5 * t_m, 1.0), False, tol)
    return MixingBracket("uniform", eps, low, up)


def cycle_cutoff(params: ModelParams) -> float:
    """``t_m = log(n) / (2 theta)``, where ``e^{-theta t}`` meets ``n^{-1/2}`` on the cycle."""
    return math.log(params.shape.size) / (2.0 * theta(params))


@dataclass
class AnnealedResult:
    """Uniform-start and all-plus mixing brackets with their ratio."""

    uniform: MixingBracket
    plus: MixingBracket
    t_m: float

    @property
    def ratio(self) -> float:
        return self.uniform.midpoint / self.plus.midpoint if self.plus.midpoint > 0 else math.nan

    @property
    def inconclusive(self) -> bool:
        return not (self.uniform.consistent and self.plus.consistent)

    def summary(self) -> dict:
        return {"t_m": self.t_m, "uniform": self.uniform.summary(), "plus": self.plus.summary(),
                "ratio": self.ratio, "inconclusive": self.inconclusive}


def annealed_mixing_estimate(params: ModelParams, eps: float = 0.25, replicas: int = 2000,
                             moment_replicas: int = 1000, seed: int = 0,
                             tol: float = 0.05) -> AnnealedResult:
    """Mixing-time brackets from the uniform and all-plus starts on the cycle."""
    _require_cycle(params)
    uni = uniform_mixing_bracket(params, eps, replicas, moment_replicas, derive_seed(seed, 0xA1), tol)
    plus = plus_mixing_bracket(params, eps, replicas, moment_replicas, derive_seed(seed, 0xA2), tol)
    return AnnealedResult(uni, plus, cycle_cutoff(params))


@dataclass
class WindowScaling:
    """All-plus brackets over sizes and the regression of ``t_mix - t_m`` on ``log n``."""

    sizes: list
    brackets: list
    offsets: np.ndarray
    slope: float
    intercept: float

    def summary(self) -> dict:
        return {"sizes": self.sizes, "offsets": self.offsets.tolist(), "slope": self.slope,
                "intercept": self.intercept, "brackets": [b.summary() for b in self.brackets]}


def window_scaling(beta: float, sizes, eps: float = 0.25, replicas: int = 2000,
                   moment_replicas: int = 1000, seed: int = 0, tol: float = 0.05,
                   rule: Rule = Rule.HEAT_BATH) -> WindowScaling:
    """Fit ``t_mix(eps) - t_m`` against ``log n`` on cycles of the given sizes."""
    from .lattice import TorusShape

    brackets = []
    offsets = []
    for n in sizes:
        p = ModelParams(beta, 0.0, TorusShape(1, int(n)), rule)
        b = plus_mixing_bracket(p, eps, replicas, moment_replicas, derive_seed(seed, 0x5C, int(n)), tol)
        brackets.append(b)
        offsets.append(b.midpoint - cycle_cutoff(p))
    offsets = np.asarray(offsets)
    slope, intercept = np.polyfit(np.log(np.asarray(sizes, dtype=np.float64)), offsets, 1)
    return WindowScaling([int(n) for n in sizes], brackets, offsets, float(slope), float(intercept))


# ----------------------------------------------------------------------------
# Quenched start


def quenched_time(params: ModelParams, a_n: float) -> float:
    """``log(n) / (2 theta) - log(log n) / theta - log(a_n) / theta``."""
    n = params.shape.size
    th = theta(params)
    return math.log(n) / (2 * th) - math.log(math.log(n)) / th - math.log(a_n) / th


def bias_profile(params: ModelParams, x0, t: float) -> np.ndarray:
    """``R_t(u, x0) = sum_w P_t(u, w) x0(w)`` for the rate ``1 - theta`` walk."""
    _require_cycle(params)
    row = walk_kernel_1d(theta(params), float(t), params.shape.size).row
    return circular_apply(row, np.asarray(x0, dtype=np.float64))


def signed_statistic(configs, signs) -> np.ndarray:
    """``(1/n) sum_u sign(R(u)) x(u)``, one value per row."""
    x = np.atleast_2d(np.asarray(configs, dtype=np.float64))
    return x @ np.asarray(signs, dtype=np.float64) / x.shape[1]


@dataclass
class QuenchedProfile:
    """Signed-magnetization test of a fixed initial configuration."""

    x0: np.ndarray
    a_n: float
    t: float
    R: np.ndarray
    condition_value: float
    condition_ok: bool
    statistic_mean: float
    statistic_stderr: float
    pi_mean: float
    tv: TvEstimate
    site_mean: np.ndarray
    site_stderr: np.ndarray
    literal_threshold: float
    literal_separation: float
    scaled_threshold: float
    scaled_separation: float

    @property
    def verdict(self) -> bool:
        """True when the optimized lower bound reaches 0.9."""
        return self.tv.value >= 0.9

    def summary(self) -> dict:
        return {"a_n": self.a_n, "t": self.t, "condition_value": self.condition_value,
                "condition_ok": self.condition_ok, "statistic_mean": self.statistic_mean,
                "statistic_stderr": self.statistic_stderr, "pi_mean": self.pi_mean,
                "tv_lower": self.tv.value, "tv_stderr": self.tv.stderr,
                "literal_threshold": self.literal_threshold, "literal_separation": self.literal_separation,
                "scaled_threshold": self.scaled_threshold,
                "scaled_separation": self.scaled_separation, "verdict": self.verdict}


def quenched_statistic(params: ModelParams, x0, t: float, replicas: int, seed: int = 0,
                       a_n: float | None = None, pi_configs=None,
                       pi_replicas: int | None = None) -> QuenchedProfile:
    """Runs from ``x0`` compared with stationary samples on ``sign(R_t) . X / n``.

    ``literal_threshold`` is ``1/(2 a_n)``; ``scaled_threshold`` is
    ``e^{-theta t}/(2 a_n)``, half the guaranteed mean under the bias
    condition. The verdict uses the optimized threshold.
    """
    _require_cycle(params)
    x0 = np.asarray(x0, dtype=np.int8).reshape(-1)
    n = params.shape.size
    R = bias_profile(params, x0, t)
    signs = np.where(R >= 0, 1.0, -1.0)
    cond = float(np.mean(np.abs(R)))
    if a_n is None:
        a_n = 1.0 / cond if cond > 0 else math.inf
    if pi_configs is None:
        pi_configs = pi_samples(params, pi_replicas or replicas, derive_seed(seed, 0x9D2))
    x = final_configurations(params, x0[None, :], float(t), derive_seeds(seed, replicas, 0x9D1))
    q = signed_statistic(x, signs)
    q_pi = signed_statistic(pi_configs, signs)
    d, se, c = optimized_lower(q, q_pi, True)
    tv = TvEstimate(TvKind.STATISTIC_LOWER, float(t), _clip(d), se, "signed-magnetization",
                    replicas, d, {"threshold": c})
    literal_thr = 1.0 / (2.0 * a_n)
    scaled_thr = math.exp(-theta(params) * t) / (2.0 * a_n)
    sep_literal, _ = tail_difference(q, q_pi, literal_thr, True)
    sep_scaled, _ = tail_difference(q, q_pi, scaled_thr, True)
    xf = x.astype(np.float64)
    return QuenchedProfile(x0, float(a_n), float(t), R, cond, cond >= 1.0 / a_n,
                           float(q.mean()), float(_sample_stderr(q)), float(q_pi.mean()), tv,
                           xf.mean(axis=0), _sample_stderr(xf), literal_thr, sep_literal,
                           scaled_thr, sep_scaled)


def uniform_configurations(n: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, 0x9E))
    return (2 * rng.integers(0, 2, size=(count, n)) - 1).astype(np.int8)


@dataclass
class Calibration:
    """Smallest ``C`` with the bias condition holding for ``coverage`` of pilots."""

    C: float
    n: int
    pilots: int
    coverage: float
    achieved: float


def calibrate_constant(beta: float, n: int = 2 ** 12, pilots: int = 200, coverage: float = 0.95,
                       seed: int = 0, rule: Rule = Rule.HEAT_BATH, tol: float = 1e-3) -> Calibration:
    """Bisection on ``C`` in ``a_n = C log n`` against uniform pilot draws at size ``n``."""
    from .lattice import TorusShape

    p = ModelParams(beta, 0.0, TorusShape(1, n), rule)
    xs = uniform_configurations(n, pilots, derive_seed(seed, 0xCA))
    th = theta(p)
    log_n = math.log(n)
    c_max = math.exp(th * quenched_time(p, 1.0)) / log_n  # where the time reaches 0

    def fraction(C):
        a_n = C * log_n
        t = max(quenched_time(p, a_n), 0.0)
        row = walk_kernel_1d(th, t, n).row
        vals = np.array([np.mean(np.abs(circular_apply(row, x))) for x in xs])
        return float(np.mean(vals >= 1.0 / a_n))

    lo, hi = 0.0, c_max
    if fraction(hi) < coverage:
        raise RuntimeError("no constant reaches the requested coverage before the time hits 0")
    while hi - lo > tol * max(hi, 1e-12):
        mid = 0.5 * (lo + hi)
        if mid > 0 and fraction(mid) >= coverage:
            hi = mid
        else:
            lo = mid
    return Calibration(hi, n, pilots, coverage, fraction(hi))


@dataclass
class QuenchedTypicality:
    """Fraction of uniform initial configurations the signed statistic distinguishes."""

    calibration: Calibration
    a_n: float
    t: float
    profiles: list
    distinguished: int

    @property
    def fraction(self) -> float:
        return self.distinguished / len(self.profiles) if self.profiles else math.nan

    def summary(self) -> dict:
        return {"C": self.calibration.C, "calibration_n": self.calibration.n,
                "calibration_coverage": self.calibration.achieved, "a_n": self.a_n, "t": self.t,
                "distinguished": self.distinguished, "samples": len(self.profiles),
                "fraction": self.fraction,
                "condition_holds": sum(p.condition_ok for p in self.profiles),
                "profiles": [p.summary() for p in self.profiles]}


def quenched_typicality(params: ModelParams, samples: int = 20, replicas: int = 200,
                        seed: int = 0, calibration: Calibration | None = None,
                        pi_replicas: int | None = None) -> QuenchedTypicality:
    """Evaluate the signed statistic for ``samples`` uniform initial configurations."""
    _require_cycle(params)
    if calibration is None:
        calibration = calibrate_constant(params.beta, seed=seed, rule=params.rule)
    n = params.shape.size
    a_n = calibration.C * math.log(n)
    t = quenched_time(params, a_n)
    if t <= 0:
        raise ValueError(f"the quenched time {t:.3f} is not positive for n={n}")
    pi_configs = pi_samples(params, pi_replicas or replicas, derive_seed(seed, 0x9F))
    xs = uniform_configurations(n, samples, derive_seed(seed, 0x9B))
    profiles = [quenched_statistic(params, x, t, replicas, derive_seed(seed, 0x9A, i), a_n, pi_configs)
                for i, x in enumerate(xs)]
    return QuenchedTypicality(calibration, a_n, t, profiles, sum(p.verdict for p in profiles))


# ----------------------------------------------------------------------------
# Reports


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(rows) -> str:
    """CSV body with the fixed experiment columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def header_text(header: dict) -> str:
    """``# key: value`` lines; values are JSON encoded."""
    return "".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in header.items())


def write_csv(path, rows, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(header_text(header))
        fh.write(csv_text(rows))


def read_csv_body(path) -> str:
    """File contents without the ``#`` header lines."""
    with open(path, encoding="utf-8") as fh:
        return "".join(line for line in fh if not line.startswith("#"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def summary_json(summary: dict) -> str:
    return json.dumps(_jsonable(summary), indent=2, sort_keys=True)


def estimate_dict(est: TvEstimate) -> dict:
    d = asdict(est)
    d["kind"] = est.kind.value
    return _jsonable(d)
