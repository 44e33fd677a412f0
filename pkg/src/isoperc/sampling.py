"""Exact small-system oracles and exact sampling.

``exact_pi`` enumerates the Gibbs measure, ``exact_tv_curve`` propagates a
point mass under the generator by uniformization, ``cftp_sample`` draws
exact stationary samples by monotone coupling from the past, and
``walk_kernel_1d`` gives the transition row of the rate ``1 - theta`` walk
on the cycle. ``mp_inequality_check`` evaluates both sides of the
L2 exponential-moment inequality on random tiny instances.

Configurations of ``N`` sites are indexed by bit codes: bit ``i`` of the
code is set when site ``i`` is plus.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats

from . import _kernels as K
from .updates import ModelParams, Rule, UnsupportedRuleError, derive_seed, derive_seeds

EXACT_PI_LIMIT = 20
EXACT_TV_LIMIT = 12
CFTP_T_MAX = 2 ** 20
UNIFORMIZATION_TOL = 1e-10


class SizeError(ValueError):
    """Raised when an exact oracle is asked for a state space it cannot enumerate."""


class CftpFailure(RuntimeError):
    """Raised when coupling from the past does not coalesce within its budget."""


# ----------------------------------------------------------------------------
# State space helpers


def state_spins(nsites: int) -> np.ndarray:
    """All ``2^N`` configurations as an ``(2^N, N)`` int8 array in code order."""
    codes = np.arange(1 << nsites, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(nsites, dtype=np.int64)[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def state_code(spins) -> int:
    """Bit code of a configuration (bit ``i`` set when site ``i`` is plus)."""
    x = np.asarray(spins).reshape(-1)
    return int(np.sum((x > 0).astype(np.int64) << np.arange(x.shape[0], dtype=np.int64)))


def state_codes(configs) -> np.ndarray:
    """Bit codes of the rows of an ``(R, N)`` array."""
    x = np.atleast_2d(np.asarray(configs))
    w = np.int64(1) << np.arange(x.shape[1], dtype=np.int64)
    return ((x > 0).astype(np.int64) * w[None, :]).sum(axis=1)


def _local_fields(params: ModelParams, spins: np.ndarray) -> np.ndarray:
    nbr = params.shape.neighbor_table
    return spins[:, nbr].astype(np.float64).sum(axis=2)


# ----------------------------------------------------------------------------
# Stationary measure


@dataclass
class ExactMeasure:
    """Gibbs measure on every configuration, indexed by bit code."""

    params: ModelParams
    probabilities: np.ndarray
    log_partition: float

    @property
    def nsites(self) -> int:
        return self.params.shape.size

    def prob(self, spins) -> float:
        return float(self.probabilities[state_code(spins)])

    def marginal(self, statistic) -> dict:
        """Law of ``statistic(spins)`` where ``statistic`` maps an (S, N) array to values."""
        vals = np.asarray(statistic(state_spins(self.nsites)))
        out: dict = {}
        for v, p in zip(vals.tolist(), self.probabilities.tolist()):
            out[v] = out.get(v, 0.0) + p
        return out


def _log_weights(params: ModelParams, spins: np.ndarray) -> np.ndarray:
    # Each edge appears twice in the neighbor table, once from each end.
    s = _local_fields(params, spins)
    x = spins.astype(np.float64)
    return 0.5 * params.beta * np.sum(x * s, axis=1) + params.h * np.sum(x, axis=1)


def exact_pi(params: ModelParams) -> ExactMeasure:
    """Enumerate the Gibbs measure ``exp(beta sum_uv s_u s_v + h sum_u s_u) / Z``."""
    n = params.shape.size
    if n > EXACT_PI_LIMIT:
        raise SizeError(f"exact measure needs at most {EXACT_PI_LIMIT} sites, got {n}")
    logw = _log_weights(params, state_spins(n))
    top = float(logw.max())
    z = float(np.sum(np.exp(logw - top)))
    log_z = top + math.log(z)
    return ExactMeasure(params, np.exp(logw - log_z), log_z)


# ----------------------------------------------------------------------------
# Transient distribution


def flip_rates(params: ModelParams, spins: np.ndarray) -> np.ndarray:
    """Rate at which each site of each configuration flips, shape ``(S, N)``.

    Heat-bath and its copy form share the law ``P(new = -s_u)``; Metropolis
    uses ``min(1, exp(-2 s_u (beta field + h)))``.
    """
    x = spins.astype(np.float64)
    f = params.beta * _local_fields(params, spins) + params.h
    if params.rule is Rule.METROPOLIS:
        return np.minimum(1.0, np.exp(-2.0 * x * f))
    return 0.5 * (1.0 - x * np.tanh(f))


def generator(params: ModelParams) -> sp.csr_matrix:
    """Sparse generator ``Q`` with ``Q[x, x^u]`` the flip rate of site ``u`` at ``x``."""
    n = params.shape.size
    if n > EXACT_TV_LIMIT:
        raise SizeError(f"generator needs at most {EXACT_TV_LIMIT} sites, got {n}")
    spins = state_spins(n)
    rates = flip_rates(params, spins)
    codes = np.arange(1 << n, dtype=np.int64)
    rows = np.repeat(codes, n)
    cols = (codes[:, None] ^ (np.int64(1) << np.arange(n, dtype=np.int64))[None, :]).reshape(-1)
    off = sp.csr_matrix((rates.reshape(-1), (rows, cols)), shape=(1 << n, 1 << n))
    return (off - sp.diags(rates.sum(axis=1))).tocsr()


def _uniformized_step(p: np.ndarray, kernel_t: sp.csr_matrix, lam_t: float, tol: float) -> np.ndarray:
    """``p exp(Q t)`` as a Poisson(lam t) mixture of powers of ``I + Q / lam``."""
    if lam_t <= 0:
        return p.copy()
    k_max = int(stats.poisson.isf(tol, lam_t)) + 1
    # Split large exponents so each Poisson weight stays representable.
    if lam_t > 500:
        half = _uniformized_step(p, kernel_t, lam_t / 2, tol / 2)
        return _uniformized_step(half, kernel_t, lam_t / 2, tol / 2)
    out = np.zeros_like(p)
    term = p.copy()
    w = math.exp(-lam_t)
    for k in range(k_max + 1):
        out += w * term
        term = kernel_t @ term
        w *= lam_t / (k + 1)
    return out


@dataclass
class ExactTvCurve:
    """Exact distance to stationarity on a time grid."""

    grid: np.ndarray
    tv: np.ndarray
    distributions: np.ndarray
    pi: np.ndarray
    truncation: float


def exact_tv_curve(params: ModelParams, x0, grid, tol: float = UNIFORMIZATION_TOL) -> ExactTvCurve:
    """TV distance between ``P_{x0}(X_t in .)`` and the Gibbs measure on ``grid``.

    The rate bound is ``N`` (every site flips at rate at most one); each
    increment between grid points truncates its Poisson tail below ``tol``.
    """
    n = params.shape.size
    if n > EXACT_TV_LIMIT:
        raise SizeError(f"exact TV needs at most {EXACT_TV_LIMIT} sites, got {n}")
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be nonnegative and nondecreasing")
    pi = exact_pi(params).probabilities
    q = generator(params)
    lam = float(n)
    step_t = (sp.identity(1 << n, format="csr") + q / lam).T.tocsr()
    p = np.zeros(1 << n)
    p[state_code(x0)] = 1.0
    dists = np.empty((grid.shape[0], 1 << n))
    now = 0.0
    total_tail = 0.0
    for i, t in enumerate(grid):
        if t > now:
            p = _uniformized_step(p, step_t, lam * (t - now), tol)
            total_tail += tol
            now = t
        dists[i] = p
    tv = 0.5 * np.abs(dists - pi[None, :]).sum(axis=1)
    return ExactTvCurve(grid, tv, dists, pi, total_tail)


def product_chain_tv(n_sites: int, t: float) -> float:
    """Exact TV from all-plus at ``beta = 0``, ``h = 0``.

    Each site is independently still at its initial plus with probability
    ``e^{-t}`` and a fair coin otherwise, so the number of plus sites is
    Binomial(N, (1 + e^{-t}) / 2) against Binomial(N, 1/2) under the
    uniform measure.
    """
    p = 0.5 * (1.0 + math.exp(-t))
    k = np.arange(n_sites + 1)
    a = stats.binom.pmf(k, n_sites, p)
    b = stats.binom.pmf(k, n_sites, 0.5)
    return float(0.5 * np.abs(a - b).sum())


# ----------------------------------------------------------------------------
# Coupling from the past


@dataclass
class CftpSample:
    """Exact stationary sample with the extent of randomness consumed."""

    configuration: np.ndarray
    depth: float
    seed: int
    sandwich_violations: int = 0


def _require_monotone(params: ModelParams):
    if params.rule is Rule.METROPOLIS:
        raise UnsupportedRuleError("coupling from the past needs a monotone heat-bath rule")


def cftp_sample(params: ModelParams, seed: int, t_max: int = CFTP_T_MAX,
                check_sandwich: bool = False) -> CftpSample:
    """Monotone coupling from the past with start times ``-1, -2, -4, ...``.

    The all-plus and all-minus chains are run from ``-T`` to 0 on the
    stream of ``seed``; windows overlap on the same keyed events. Raises
    :class:`CftpFailure` when they have not met by ``T = t_max``.
    """
    _require_monotone(params)
    tab = params.tables
    state, depth, ok, viol = K.cftp_run(params.shape.neighbor_table, np.uint64(int(seed) & (2 ** 64 - 1)),
                                        tab.code, tab.thr, tab.acc, tab.lo, tab.hi, int(t_max),
                                        bool(check_sandwich))
    if not ok:
        raise CftpFailure(f"no coalescence by T={t_max} for seed {seed}")
    return CftpSample(state, float(depth), int(seed), int(viol))


def cftp_walk_sample(params: ModelParams, seed: int, max_depth: float = float(CFTP_T_MAX)) -> CftpSample:
    """Exact sample on the cycle from strands traced to their deaths.

    Under the copy rule every spin at time 0 is the coin of the update that
    killed its backward strand, so tracing all strands from time 0 to
    ``-inf`` reads the stationary configuration directly. The law equals
    the heat-bath stationary measure. ``depth`` is the earliest death time.
    """
    from .history import walk_histories

    p = as_copy_rule(params)
    hist = walk_histories(p, int(seed), np.arange(p.shape.size), 0.0, -math.inf,
                          max_depth=max_depth)
    if not hist.finished:
        raise CftpFailure(f"strands still alive at depth {max_depth} for seed {seed}")
    return CftpSample(hist.coin.copy(), float(-hist.end_time.min()), int(seed))


def as_copy_rule(params: ModelParams) -> ModelParams:
    """Same model with the copy form of the heat-bath rule (cycle, zero field)."""
    if params.rule is Rule.HEAT_BATH_COPY:
        return params
    if params.rule is Rule.METROPOLIS:
        raise UnsupportedRuleError("the copy form exists only for heat-bath")
    return ModelParams(params.beta, params.h, params.shape, Rule.HEAT_BATH_COPY)


def _walk_path(params: ModelParams) -> bool:
    return params.shape.d == 1 and params.h == 0.0 and params.rule is not Rule.METROPOLIS


def pi_samples(params: ModelParams, count: int, seed: int, method: str = "auto") -> np.ndarray:
    """``count`` exact stationary samples as an ``(count, N)`` int8 array.

    ``method`` is ``"monotone"``, ``"walks"`` (cycle, zero field) or
    ``"auto"`` (walks whenever available).
    """
    _require_monotone(params)
    if method == "auto":
        method = "walks" if _walk_path(params) else "monotone"
    seeds = derive_seeds(seed, count, 0xCF7)
    if method == "walks":
        if not _walk_path(params):
            raise UnsupportedRuleError("walk sampling needs the cycle with zero field")
        out = np.empty((count, params.shape.size), dtype=np.int8)
        for j, s in enumerate(seeds):
            out[j] = cftp_walk_sample(params, int(s)).configuration
        return out
    if method != "monotone":
        raise ValueError(f"unknown sampling method {method!r}")
    return cftp_batch(params, seeds)[0]


def cftp_batch(params: ModelParams, seeds, t_max: int = CFTP_T_MAX) -> tuple:
    """Monotone CFTP samples and coalescence depths for each seed."""
    _require_monotone(params)
    tab = params.tables
    out, depths = K.cftp_many(params.shape.neighbor_table, np.asarray(seeds, dtype=np.uint64),
                              tab.code, tab.thr, tab.acc, tab.lo, tab.hi, int(t_max))
    if np.any(depths < 0):
        raise CftpFailure(f"{int(np.sum(depths < 0))} samples did not coalesce by T={t_max}")
    return out, depths


def pi_sample_codes(params: ModelParams, count: int, seed: int) -> np.ndarray:
    """Bit codes of ``count`` monotone CFTP samples (at most 62 sites)."""
    _require_monotone(params)
    if params.shape.size > 62:
        raise SizeError("state codes need at most 62 sites")
    seeds = derive_seeds(seed, count, 0xCF7)
    tab = params.tables
    codes, depths = K.cftp_codes(params.shape.neighbor_table, seeds, tab.code, tab.thr, tab.acc,
                                 tab.lo, tab.hi, CFTP_T_MAX)
    if np.any(depths < 0):
        raise CftpFailure(f"{int(np.sum(depths < 0))} samples did not coalesce by T={CFTP_T_MAX}")
    return codes


# ----------------------------------------------------------------------------
# Walk kernel on the cycle


@dataclass
class WalkKernel:
    """Row ``P_t(u, .)`` of the rate ``1 - theta`` simple walk on the n-cycle."""

    row: np.ndarray
    tail_bound: float
    k_max: int
    rate: float
    t: float

    def __array__(self, dtype=None, copy=None):
        return self.row if dtype is None else self.row.astype(dtype)


def walk_kernel_1d(theta: float, t: float, n: int, u: int = 0) -> WalkKernel:
    """Poissonized jump chain ``sum_k Pois(lam t; k) Step^k`` started at ``u``.

    ``lam = 1 - theta`` and ``Step`` moves to either neighbor with
    probability 1/2. The sum stops at ``k* = lam t + 12 sqrt(lam t + 1) + 30``
    and the neglected Poisson mass is returned as ``tail_bound``.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    if n < 1:
        raise ValueError("cycle needs at least one site")
    lam_t = (1.0 - theta) * t
    k_max = int(math.ceil(lam_t + 12.0 * math.sqrt(lam_t + 1.0) + 30.0))
    ks = np.arange(k_max + 1)
    weights = stats.poisson.pmf(ks, lam_t) if lam_t > 0 else (ks == 0).astype(np.float64)
    tail = float(stats.poisson.sf(k_max, lam_t)) if lam_t > 0 else 0.0
    row = np.zeros(n)
    cur = np.zeros(n)
    cur[u % n] = 1.0
    for k in range(k_max + 1):
        row += weights[k] * cur
        cur = 0.5 * (np.roll(cur, 1) + np.roll(cur, -1))
    return WalkKernel(row, tail, k_max, 1.0 - theta, float(t))


def circular_apply(kernel_row: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``R(u) = sum_w P(u, w) x(w)`` for a translation-invariant kernel started at 0."""
    k = np.asarray(kernel_row, dtype=np.float64)
    xf = np.fft.rfft(np.asarray(x, dtype=np.float64))
    # P(u, w) = row[(w - u) mod n]; correlation in Fourier space.
    return np.fft.irfft(np.conj(np.fft.rfft(k)) * xf, n=k.shape[0])


# ----------------------------------------------------------------------------
# L2 exponential-moment inequality


@dataclass
class MpInstance:
    """A partition with block measures, a subset law and resampling laws.

    ``blocks[i]`` lists the sites of block ``i``; ``nus[i]`` is a vector over
    the ``2^{|block|}`` local states; ``mu_tilde`` maps subset masks over the
    blocks to probabilities; ``phis[mask]`` is a vector over local states of
    the union of the blocks in ``mask`` (sites in increasing order).
    """

    n_sites: int
    blocks: list
    nus: list
    mu_tilde: dict
    phis: dict = field(default_factory=dict)


def _block_sites(blocks, mask: int) -> list:
    return sorted(s for i, b in enumerate(blocks) if mask >> i & 1 for s in b)


def _local_index(codes: np.ndarray, sites) -> np.ndarray:
    idx = np.zeros(codes.shape[0], dtype=np.int64)
    for j, s in enumerate(sites):
        idx |= ((codes >> s) & 1) << j
    return idx


def mp_sides(inst: MpInstance) -> tuple:
    """Exhaustive ``(||mu - nu||^2_{L2(nu)}, bound)`` for one instance."""
    codes = np.arange(1 << inst.n_sites, dtype=np.int64)
    local = [_local_index(codes, b) for b in inst.blocks]
    nu = np.ones(codes.shape[0])
    for i in range(len(inst.blocks)):
        nu *= inst.nus[i][local[i]]
    mu = np.zeros(codes.shape[0])
    for mask, w in inst.mu_tilde.items():
        if w == 0:
            continue
        term = inst.phis[mask][_local_index(codes, _block_sites(inst.blocks, mask))] if mask else np.ones(codes.shape[0])
        for i in range(len(inst.blocks)):
            if not mask >> i & 1:
                term = term * inst.nus[i][local[i]]
        mu += w * term
    lhs = float(np.sum(mu ** 2 / nu) - 1.0)
    mins = [float(v.min()) for v in inst.nus]
    rhs = 0.0
    for (a, wa), (b, wb) in itertools.product(inst.mu_tilde.items(), repeat=2):
        both = a & b
        prod = 1.0
        for i in range(len(inst.blocks)):
            if both >> i & 1:
                prod *= mins[i]
        rhs += wa * wb / prod
    return lhs, rhs - 1.0


def random_mp_instance(rng: np.random.Generator, max_sites: int = 6) -> MpInstance:
    """Random partition, block measures, subset law and resampling laws."""
    n = int(rng.integers(1, max_sites + 1))
    perm = rng.permutation(n)
    cuts = np.sort(rng.choice(np.arange(1, n), size=int(rng.integers(0, n)), replace=False)) if n > 1 else []
    blocks = [sorted(int(s) for s in part) for part in np.split(perm, cuts)]
    nus = [rng.dirichlet(np.full(1 << len(b), float(rng.choice([0.3, 1.0, 5.0])))) for b in blocks]
    nus = [np.maximum(v, 1e-12) / np.maximum(v, 1e-12).sum() for v in nus]
    nb = len(blocks)
    masks = np.arange(1 << nb)
    support = masks[rng.random(masks.shape[0]) < rng.uniform(0.2, 1.0)]
    if support.size == 0:
        support = masks[:1] if rng.random() < 0.5 else masks[-1:]
    weights = rng.dirichlet(np.ones(support.size))
    mu_tilde = {int(m): float(w) for m, w in zip(support, weights)}
    phis = {}
    for m in mu_tilde:
        size = len(_block_sites(blocks, m))
        phis[m] = rng.dirichlet(np.full(1 << size, float(rng.choice([0.2, 1.0, 10.0]))))
    return MpInstance(n, blocks, nus, mu_tilde, phis)


@dataclass
class MpCheckResult:
    """Pass rate of the inequality over random instances."""

    pass_rate: float
    trials: int
    worst_slack: float
    seed: int


def mp_inequality_check(trials: int, seed: int = 0, max_sites: int = 6, rtol: float = 1e-9) -> MpCheckResult:
    """Evaluate both sides on ``trials`` random instances with at most ``max_sites`` sites."""
    if max_sites > 6:
        raise SizeError("exhaustive evaluation needs at most 6 sites")
    rng = np.random.default_rng(derive_seed(seed, 0x3B))
    passed = 0
    worst = math.inf
    for _ in range(trials):
        lhs, rhs = mp_sides(random_mp_instance(rng, max_sites))
        slack = rhs - lhs
        worst = min(worst, slack)
        if slack >= -rtol * max(1.0, abs(rhs)):
            passed += 1
    return MpCheckResult(passed / trials if trials else 1.0, trials, worst, int(seed))
