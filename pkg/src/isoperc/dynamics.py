"""Forward simulation, grand coupling, magnetization and cutoff location."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .updates import ModelParams, Rule, UpdateStream, derive_seed, derive_seeds

REFERENCE_SITE = 0


def all_plus(params: ModelParams) -> np.ndarray:
    return np.ones(params.shape.size, dtype=np.int8)


def all_minus(params: ModelParams) -> np.ndarray:
    return -np.ones(params.shape.size, dtype=np.int8)


def _as_spins(x0, params: ModelParams) -> np.ndarray:
    x = np.asarray(x0, dtype=np.int8).reshape(-1).copy()
    if x.shape[0] != params.shape.size:
        raise ValueError(f"configuration has {x.shape[0]} sites, torus has {params.shape.size}")
    if not np.all((x == 1) | (x == -1)):
        raise ValueError("spins must be +1 or -1")
    return x


def _kernel_args(params: ModelParams):
    tab = params.tables
    return tab.code, tab.thr, tab.acc, tab.lo, tab.hi


def _prefix(stream: UpdateStream, t: float) -> int:
    t0, t1 = stream.window
    if t < t0 or t > t1:
        raise ValueError(f"time {t} outside the stream window ({t0}, {t1}]")
    return int(np.searchsorted(stream.times, t, side="right"))


def simulate(x0, stream: UpdateStream, params: ModelParams, t: float) -> np.ndarray:
    """Configuration at time ``t`` after applying every event with time ``<= t``."""
    if stream.shape != params.shape:
        raise ValueError("stream and parameters describe different tori")
    x = _as_spins(x0, params)
    m = _prefix(stream, t)
    K.apply_events(x, params.shape.neighbor_table, stream.sites[:m], stream.units[:m],
                   *_kernel_args(params))
    return x


@dataclass
class CouplingResult:
    """Chains after a shared-stream run.

    ``monotone_certified`` is ``None`` for rules where order preservation
    is not claimed (Metropolis); otherwise it tells whether every event kept
    the input order of consecutive chains that were ordered at the start.
    """

    chains: list
    disagreement_density: float
    monotone_certified: bool | None
    violations: int


def grand_coupling(initials, stream: UpdateStream, params: ModelParams, t: float) -> CouplingResult:
    """Run every initial configuration on the same events up to time ``t``."""
    chains = np.stack([_as_spins(x, params) for x in initials])
    ordered = all(np.all(chains[i] <= chains[i + 1]) for i in range(len(chains) - 1))
    check = params.is_heat_bath and ordered
    m = _prefix(stream, t)
    viol = K.coupled_apply(chains, params.shape.neighbor_table, stream.sites[:m],
                           stream.units[:m], *_kernel_args(params), check)
    if len(chains) > 1:
        differ = np.any(chains != chains[0], axis=0)
        density = float(differ.mean())
    else:
        density = 0.0
    certified = None if not params.is_heat_bath else (bool(viol == 0) if ordered else None)
    return CouplingResult([c.copy() for c in chains], density, certified, int(viol))


@dataclass
class MagnetizationCurve:
    """Monte Carlo estimate of the all-plus magnetization at a reference site.

    ``volume_estimate`` averages all sites of each replica; its stderr
    treats replicas (not sites) as the independent units.
    """

    grid: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    replicas: int
    seed: int
    volume_estimate: np.ndarray = field(default=None)
    volume_stderr: np.ndarray = field(default=None)
    reference_site: int = REFERENCE_SITE

    def rows(self):
        for i, t in enumerate(self.grid):
            yield (float(t), float(self.estimate[i]), float(self.stderr[i]), self.replicas, self.seed)


def _sample_stderr(x: np.ndarray, axis=0) -> np.ndarray:
    r = x.shape[axis]
    if r < 2:
        return np.zeros(np.delete(x.shape, axis))
    return x.std(axis=axis, ddof=1) / math.sqrt(r)


def forward_snapshots(params: ModelParams, start: np.ndarray, grid, seeds: np.ndarray,
                      t_start: float = 0.0, ref: int = REFERENCE_SITE):
    """Per-replica reference spin, magnetization and state code at each grid time."""
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be nondecreasing")
    t_end = float(grid[-1]) if grid.size else t_start
    return K.forward_replicas(np.asarray(start, dtype=np.int8), params.shape.neighbor_table,
                              np.asarray(seeds, dtype=np.uint64), float(t_start), t_end,
                              *_kernel_args(params), grid, int(ref))


def magnetization_curve(params: ModelParams, grid, replicas: int, seed: int) -> MagnetizationCurve:
    """Estimate ``m_t = E X_t^+(origin)`` on ``grid`` from independent replicas."""
    if replicas < 1:
        raise ValueError("need at least one replica")
    grid = np.asarray(grid, dtype=np.float64)
    seeds = derive_seeds(seed, replicas, 0x3A6)
    ref, mag, _ = forward_snapshots(params, all_plus(params), grid, seeds)
    ref = ref.astype(np.float64)
    vol = mag.astype(np.float64) / params.shape.size
    return MagnetizationCurve(grid, ref.mean(axis=0), _sample_stderr(ref), replicas, int(seed),
                              vol.mean(axis=0), _sample_stderr(vol))


@dataclass
class CutoffResult:
    """Cutoff-time estimate with bracket and probe log.

    On a transitive torus the criterion ``sum_v m_t(v)^2 <= 1`` equals
    ``|Lambda| m_t^2 <= 1``, the same threshold as ``m_t <= |Lambda|^(-1/2)``.
    """

    t_m: float
    ci: tuple
    noise_limited: bool
    target: float
    probes: list
    equivalence: str = "sum_v m_t(v)^2 <= 1  <=>  |Lambda| m_t^2 <= 1  <=>  m_t <= |Lambda|^(-1/2)"


def cutoff_time(params: ModelParams, tol: float = 0.005, budget: int = 2000, seed: int = 0,
                max_probes: int = 40) -> CutoffResult:
    """Locate the first time the magnetization falls to ``|Lambda|^(-1/2)``.

    Bisection on ``t`` with fresh streams per probe. Each probe uses
    ``budget`` replicas and the volume-averaged estimator; the reference-site
    estimate is logged as well.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    size = params.shape.size
    target = size ** -0.5
    if target >= 1.0:
        return CutoffResult(0.0, (0.0, 0.0), False, target, [])
    probes = []

    def probe(t):
        k = len(probes)
        seeds = derive_seeds(derive_seed(seed, 0xC07, k), budget)
        ref, mag, _ = forward_snapshots(params, all_plus(params), [t], seeds)
        vol = mag[:, 0].astype(np.float64) / size
        est, se = float(vol.mean()), float(_sample_stderr(vol))
        probes.append({"t": t, "estimate": est, "stderr": se,
                       "reference_estimate": float(ref[:, 0].mean())})
        return est, se

    lo, hi = 0.0, 1.0
    est_hi, se_hi = probe(hi)
    while est_hi > target and len(probes) < max_probes:
        lo, hi = hi, 2 * hi
        est_hi, se_hi = probe(hi)
    est_lo, se_lo = (1.0, 0.0) if lo == 0.0 else (probes[-2]["estimate"], probes[-2]["stderr"])
    while hi - lo > tol * hi and len(probes) < max_probes:
        mid = 0.5 * (lo + hi)
        est, se = probe(mid)
        if est > target:
            lo, est_lo, se_lo = mid, est, se
        else:
            hi, est_hi, se_hi = mid, est, se
    t_m = 0.5 * (lo + hi)
    ci_lo, ci_hi = lo, hi
    noise_limited = False
    near = [p for p in probes if abs(p["t"] - t_m) <= max(hi - lo, 1e-12) * 4]
    if est_lo > 0 and est_hi > 0 and hi > lo:
        rate = max(math.log(est_lo / est_hi) / (hi - lo), 1e-12) if est_lo > est_hi else None
    else:
        rate = None
    se_t = max([p["stderr"] for p in near] + [se_lo, se_hi])
    if rate is not None:
        widen = 3.0 * se_t / (target * rate)
        ci_lo, ci_hi = min(ci_lo, t_m - widen), max(ci_hi, t_m + widen)
    if target < 3.0 * se_t:
        noise_limited = True
    return CutoffResult(t_m, (ci_lo, ci_hi), noise_limited, target, probes)


def coupling_tv_upper(params: ModelParams, t: float, replicas: int, seed: int):
    """Estimate ``P(X_t^+ != X_t^-)`` under the grand coupling.

    Returns ``(estimate, stderr, disagreement_density)``.
    """
    if t <= 0:
        return 1.0, 0.0, 1.0
    seeds = derive_seeds(seed, replicas, 0xC0)
    dis, _, _ = K.coupling_batch(params.shape.neighbor_table, seeds, float(t),
                                 *_kernel_args(params), False)
    ind = (dis > 0).astype(np.float64)
    dens = dis.astype(np.float64) / params.shape.size
    return float(ind.mean()), float(_sample_stderr(ind)), float(dens.mean())


def coalescence_times(params: ModelParams, t_max: float, replicas: int, seed: int) -> np.ndarray:
    """Coalescence times of all-plus and all-minus chains (``inf`` if after ``t_max``)."""
    seeds = derive_seeds(seed, replicas, 0xC1)
    _, coal, _ = K.coupling_batch(params.shape.neighbor_table, seeds, float(t_max),
                                  *_kernel_args(params), False)
    return coal


def final_configurations(params: ModelParams, starts: np.ndarray, t: float, seeds) -> np.ndarray:
    """Final configurations of independent runs from the rows of ``starts``."""
    starts = np.ascontiguousarray(np.atleast_2d(starts), dtype=np.int8)
    if starts.shape[0] == 1 and len(seeds) > 1:
        starts = np.repeat(starts, len(seeds), axis=0)
    return K.forward_final_replicas(starts, params.shape.neighbor_table,
                                    np.asarray(seeds, dtype=np.uint64), 0.0, float(t),
                                    *_kernel_args(params))


def covariance_profile(params: ModelParams, t: float, replicas: int, seed: int):
    """Translation-averaged ``Cov(X_t(u), X_t(u + r e_1))`` from all-plus, ``r = 0..n//2``.

    Returns ``(distances, covariance, stderr)``.
    """
    seeds = derive_seeds(seed, replicas, 0xC0F)
    x = final_configurations(params, all_plus(params), t, seeds).astype(np.float64)
    shape = params.shape
    grid = x.reshape((replicas,) + (shape.n,) * shape.d)
    mean = grid.mean(axis=0, keepdims=True)
    centered = grid - mean
    dists = np.arange(shape.n // 2 + 1)
    cov = np.empty(len(dists))
    se = np.empty(len(dists))
    axis = 1
    for i, r in enumerate(dists):
        prod = centered * np.roll(centered, -r, axis=axis)
        per_rep = prod.reshape(replicas, -1).mean(axis=1)
        cov[i] = per_rep.mean()
        se[i] = per_rep.std(ddof=1) / math.sqrt(replicas) if replicas > 1 else 0.0
    return dists, cov, se


__all__ = [
    "simulate",
    "grand_coupling",
    "magnetization_curve",
    "cutoff_time",
    "coupling_tv_upper",
    "MagnetizationCurve",
    "CouplingResult",
    "CutoffResult",
    "Rule",
]
