"""Space-time information percolation clusters and their diagnostics.

A cluster is a connected component of the union of the backward histories
of the top vertices. Two histories are joined when they occupy the same
site during overlapping time intervals; histories only change at updates,
so interval overlap is exact.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _walks as W
from .history import DEFAULT_CAP, _region, develop, walk_histories
from .lattice import (AnimalWeight, BlockGrid, TorusShape, block_of, largest_block_side,
                      min_animal_weight)
from .updates import ModelParams, Rule, UpdateStream, derive_seed, theta


class Color(str, enum.Enum):
    RED = "red"
    BLUE = "blue"
    GREEN = "green"


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        p = self.parent
        r = i
        while p[r] != r:
            r = p[r]
        while p[i] != r:
            p[i], i = r, p[i]
        return r

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # The smaller index becomes the root so results do not depend on order.
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def _merge_overlaps(pieces, owners, uf: _UnionFind) -> None:
    """Union owners of pieces ``(site, lo, hi)`` that overlap on the same site."""
    order = sorted(range(len(pieces)), key=lambda i: (pieces[i][0], pieces[i][1], pieces[i][2]))
    cur_site, run_hi, run_owner = None, -math.inf, None
    for i in order:
        s, lo, hi = pieces[i]
        if s != cur_site or lo >= run_hi:
            cur_site, run_hi, run_owner = s, hi, owners[i]
            continue
        uf.union(run_owner, owners[i])
        run_hi = max(run_hi, hi)


@dataclass
class Cluster:
    """One information percolation cluster.

    ``members`` are the top vertices; ``pieces`` the occupancy intervals
    ``(site, t_lower, t_upper)`` of its histories; ``t_low`` the lowest
    time reached; ``exact`` is False if some member history overflowed.
    """

    members: tuple
    pieces: list
    reaches_bottom: bool
    color: Color
    t_low: float
    exact: bool = True
    survivors: tuple = ()

    @property
    def top_count(self) -> int:
        return len(self.members)

    @property
    def sites(self) -> frozenset:
        return frozenset(p[0] for p in self.pieces)


def _color(reaches_bottom: bool, top_count: int, exact: bool) -> Color:
    if reaches_bottom:
        return Color.RED
    if top_count == 1 and exact:
        return Color.BLUE
    return Color.GREEN


@dataclass
class ClusterPartition:
    """Clusters of the top vertices with their colors."""

    shape: TorusShape
    t_star: float
    clusters: list
    overflow: int = 0
    labeling: str = "basic"
    jumps: list = field(default_factory=list)
    divergent: int = 0

    def counts(self) -> dict:
        out = {c.value: 0 for c in Color}
        for cl in self.clusters:
            out[cl.color.value] += 1
        return out

    def vertex_colors(self) -> np.ndarray:
        """Color code per top vertex: 0 red, 1 blue, 2 green, -1 untraced."""
        code = {Color.RED: 0, Color.BLUE: 1, Color.GREEN: 2}
        out = np.full(self.shape.size, -1, dtype=np.int8)
        for cl in self.clusters:
            out[list(cl.members)] = code[cl.color]
        return out

    def red_set(self) -> frozenset:
        return frozenset(v for cl in self.clusters if cl.color is Color.RED for v in cl.members)

    def cluster_of(self) -> np.ndarray:
        out = np.full(self.shape.size, -1, dtype=np.int64)
        for i, cl in enumerate(self.clusters):
            out[list(cl.members)] = i
        return out

    def summary(self, block_side: int | None = None) -> dict:
        """JSON-ready summary: per-cluster size, color, top count, bottom hit, blocks."""
        side = block_side or largest_block_side(self.shape.n, 16)
        grid = BlockGrid(self.shape, side)
        rows = []
        for cl in self.clusters:
            rows.append({
                "size": len(cl.sites),
                "color": cl.color.value,
                "top_count": cl.top_count,
                "bottom_hit": bool(cl.reaches_bottom),
                "blocks": len(grid.cover(cl.sites)) if cl.sites else 0,
            })
        return {"labeling": self.labeling, "t_star": self.t_star, "d": self.shape.d,
                "n": self.shape.n, "counts": self.counts(), "overflow": self.overflow,
                "divergent": self.divergent, "clusters": rows}

    def to_json(self, **kw) -> str:
        return json.dumps(self.summary(**kw), sort_keys=True)


def _uses_walks(params: ModelParams) -> bool:
    return params.shape.d == 1 and params.rule is Rule.HEAT_BATH_COPY


def build_clusters(stream: UpdateStream, params: ModelParams, t_star: float, targets=None,
                   cap: int = DEFAULT_CAP) -> ClusterPartition:
    """Clusters of the histories of ``targets`` over the slab ``[0, t_star]``.

    Under the copy rule on the cycle, for a counter-based stream, the
    histories are coalescing strands traced from the stream's seed; otherwise each target is developed with
    the exact support engine and pieces are merged by interval overlap.
    Clusters touched by a support overflow are never labeled blue.
    """
    if not params.is_heat_bath:
        raise ValueError("clusters are defined for heat-bath rules only")
    shape = params.shape
    targets = list(range(shape.size)) if targets is None else list(_region(targets, shape))
    if t_star < 0:
        raise ValueError("t_star must be non-negative")
    if stream.window[0] > 1e-12 or stream.window[1] < t_star - 1e-12:
        raise ValueError("stream must cover (0, t_star]")
    if _uses_walks(params) and stream.counter_based:
        return _walk_partition(params, stream.seed, targets, t_star)
    devs = [develop([v], [(t_star, 0.0, "sup")], stream, params, cap) for v in targets]
    pieces, owners = [], []
    for i, dv in enumerate(devs):
        for p in dv.pieces:
            pieces.append(p)
            owners.append(i)
    uf = _UnionFind(len(targets))
    _merge_overlaps(pieces, owners, uf)
    groups: dict = {}
    for i in range(len(targets)):
        groups.setdefault(uf.find(i), []).append(i)
    clusters = []
    overflow = sum(not dv.exact for dv in devs)
    for root in sorted(groups):
        idx = groups[root]
        members = tuple(targets[i] for i in idx)
        pcs = [p for i in idx for p in devs[i].pieces]
        bottom = any(len(devs[i].support) > 0 for i in idx)
        exact = all(devs[i].exact for i in idx)
        t_low = min((p[1] for p in pcs), default=t_star)
        clusters.append(Cluster(members, pcs, bottom, _color(bottom, len(members), exact), t_low, exact))
    return ClusterPartition(shape, float(t_star), clusters, overflow)


def _walk_partition(params: ModelParams, seed: int, targets, t_star: float) -> ClusterPartition:
    wh = walk_histories(params, seed, targets, t_star, 0.0, record=True)
    seg = wh.segments
    groups: dict = {}
    for i, r in enumerate(wh.root):
        groups.setdefault(int(r), []).append(i)
    by_strand: dict = {}
    for row in seg:
        by_strand.setdefault(int(row[0]), []).append((int(row[1]), float(row[3]), float(row[2])))
    clusters = []
    for r in sorted(groups):
        idx = groups[r]
        members = tuple(int(targets[i]) for i in idx)
        pcs = [p for i in idx for p in by_strand.get(i, [])]
        bottom = bool(wh.fate[r] == W.FATE_BOTTOM)
        surv = (int(wh.end_site[r]),) if bottom else ()
        t_low = float(wh.end_time[r])
        clusters.append(Cluster(members, pcs, bottom, _color(bottom, len(members), True), t_low,
                                True, surv))
    return ClusterPartition(params.shape, float(t_star), clusters, 0)


def classify_annealed(stream: UpdateStream, params: ModelParams, t_m: float,
                      max_depth: float = float(2 ** 20)) -> ClusterPartition:
    """Clusters on the cycle with histories continued into negative time.

    Clusters whose strands reach time 0 at two or more distinct sites and
    later coalesce below 0 are merged; such merged clusters are red. A
    cluster with a single survivor is not red here (its spin comes from the
    stationary past) although it is red in the basic labeling.
    """
    if params.shape.d != 1:
        raise ValueError("annealed classification is defined on the cycle (d=1) only")
    p = params if params.rule is Rule.HEAT_BATH_COPY else ModelParams(
        params.beta, params.h, params.shape, Rule.HEAT_BATH_COPY)
    if stream.window[1] < t_m - 1e-12:
        raise ValueError("stream must reach t_m")
    if not stream.counter_based:
        raise ValueError("negative-time continuation needs a counter-based stream")
    base = _walk_partition(p, stream.seed, list(range(p.shape.size)), t_m)
    surv_sites = [cl.survivors[0] for cl in base.clusters if cl.survivors]
    owner = [i for i, cl in enumerate(base.clusters) if cl.survivors]
    uf = _UnionFind(len(base.clusters))
    if surv_sites:
        below = walk_histories(p, stream.seed, surv_sites, 0.0, -math.inf, max_depth=max_depth)
        if not below.finished:
            raise RuntimeError("negative-time strands did not finish within the depth guard")
        for j, r in enumerate(below.root):
            uf.union(owner[j], owner[int(r)])
    groups: dict = {}
    for i in range(len(base.clusters)):
        groups.setdefault(uf.find(i), []).append(i)
    clusters = []
    divergent = 0
    for root in sorted(groups):
        parts = [base.clusters[i] for i in groups[root]]
        members = tuple(sorted(v for c in parts for v in c.members))
        surv = tuple(sorted(s for c in parts for s in c.survivors))
        pcs = [pc for c in parts for pc in c.pieces]
        red = len(surv) >= 2
        if red:
            color = Color.RED
        elif len(members) == 1 and not surv:
            color = Color.BLUE
        else:
            color = Color.GREEN
        divergent += sum(1 for c in parts if c.reaches_bottom) if not red else 0
        t_low = min(c.t_low for c in parts)
        clusters.append(Cluster(members, pcs, bool(surv), color, t_low, True, surv))
    return ClusterPartition(p.shape, float(t_m), clusters, 0, "annealed", divergent=divergent)


def annealed_red_sets_1d(params: ModelParams, t_m: float, seeds,
                         max_depth: float = float(2 ** 20)) -> np.ndarray:
    """Boolean (R, n) indicators of annealed-red vertices on the cycle.

    Same labeling as :func:`classify_annealed` without building pieces:
    a vertex is red when its strand reaches time 0 and, continued into
    negative time, its cluster shares a fate with another surviving site.
    """
    p = params if params.rule is Rule.HEAT_BATH_COPY else ModelParams(
        params.beta, params.h, params.shape, Rule.HEAT_BATH_COPY)
    n = p.shape.size
    targets = np.arange(n)
    out = np.zeros((len(seeds), n), dtype=np.bool_)
    for j, s in enumerate(seeds):
        top = walk_histories(p, int(s), targets, t_m, 0.0)
        alive_roots = np.unique(top.root[top.survives])
        if alive_roots.size < 2:
            continue
        surv_sites = top.end_site[alive_roots]
        below = walk_histories(p, int(s), surv_sites, 0.0, -math.inf, max_depth=max_depth)
        if not below.finished:
            raise RuntimeError("negative-time strands did not finish within the depth guard")
        counts = np.bincount(below.root, minlength=alive_roots.size)
        red_roots = alive_roots[counts[below.root] >= 2]
        out[j] = np.isin(top.root, red_roots)
    return out


# ----------------------------------------------------------------------------
# Exponential moment of the red intersection


@dataclass
class ExpMomentEstimate:
    """Mean of ``2^{|R cap R'|}`` over independent pairs of runs."""

    estimate: float
    stderr: float
    heuristic: float
    m_hat: float
    mean_intersection: float
    replicas: int
    t_star: float
    seed: int


def red_sets_1d(params: ModelParams, t_star: float, seeds) -> np.ndarray:
    """Boolean (R, n) red indicators on the cycle, one row per seed."""
    p = params if params.rule is Rule.HEAT_BATH_COPY else ModelParams(
        params.beta, params.h, params.shape, Rule.HEAT_BATH_COPY)
    n = p.shape.size
    out = np.empty((len(seeds), n), dtype=np.bool_)
    targets = np.arange(n)
    for j, s in enumerate(seeds):
        out[j] = walk_histories(p, int(s), targets, t_star, 0.0).survives
    return out


def exp_moment_estimator(params: ModelParams, t_star: float, replicas: int, seed: int = 0,
                         cap: int = DEFAULT_CAP) -> ExpMomentEstimate:
    """Estimate ``E 2^{|Lambda_Red cap Lambda'_Red|}`` from independent pairs.

    On the cycle the red set of a run is the set of vertices whose strand
    reaches time 0; in higher dimension the basic cluster labeling is used.
    The heuristic ``exp(|Lambda| m_hat^2)`` uses the mean red density.
    """
    from .updates import derive_seeds, generate_stream

    seeds_a = derive_seeds(seed, replicas, 0xE1)
    seeds_b = derive_seeds(seed, replicas, 0xE2)
    n = params.shape.size
    if params.shape.d == 1:
        ra = red_sets_1d(params, t_star, seeds_a)
        rb = red_sets_1d(params, t_star, seeds_b)
    else:
        ra = np.zeros((replicas, n), dtype=np.bool_)
        rb = np.zeros((replicas, n), dtype=np.bool_)
        for arr, seeds in ((ra, seeds_a), (rb, seeds_b)):
            for j, s in enumerate(seeds):
                stream = generate_stream(params.shape, (0.0, t_star), int(s))
                arr[j, list(build_clusters(stream, params, t_star, cap=cap).red_set())] = True
    inter = np.sum(ra & rb, axis=1).astype(np.float64)
    vals = np.exp2(inter)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else 0.0
    m_hat = float(np.concatenate([ra, rb]).mean())
    return ExpMomentEstimate(est, se, math.exp(n * m_hat ** 2), m_hat, float(inter.mean()),
                             replicas, float(t_star), int(seed))


# ----------------------------------------------------------------------------
# Phase schedule, block components and cut-sets


@dataclass(frozen=True)
class PhaseSchedule:
    """Regular and deferred phases over ``(t_m, t_m + s_star]``."""

    t_m: float
    s_star: float = 25.0
    lam: int = 5

    def __post_init__(self):
        if self.lam < 1:
            raise ValueError("phase count must be positive")
        if not self.s_star / self.lam > 1:
            raise ValueError("s_star / lambda must exceed 1 so every regular phase is nonempty")

    @property
    def t_star(self) -> float:
        return self.t_m + self.s_star

    def tau(self, k: int) -> float:
        if k == self.lam:
            return self.t_star
        return self.t_m + k * self.s_star / self.lam

    def regular(self, k: int) -> tuple:
        return (self.tau(k - 1), self.tau(k) - 1.0)

    def deferred(self, k: int) -> tuple:
        return (self.tau(k) - 1.0, self.tau(k))

    def phases(self) -> list:
        """Top-down phase list ``(t_upper, t_lower, mode)`` for :func:`develop`."""
        out = []
        for k in range(self.lam, 0, -1):
            a, b = self.deferred(k)
            out.append((b, a, "upd"))
            a, b = self.regular(k)
            out.append((b, a, "sup"))
        return out

    @property
    def block_side_target(self) -> int:
        return int(round(self.s_star ** 2))


@dataclass
class BlockComponent:
    """One component of the vertices whose history reaches ``t_m``."""

    members: tuple
    history_at_tm: tuple
    A: tuple
    B: tuple
    chi: dict
    exact: bool
    cutset: tuple | None = None


@dataclass
class BlockAnalysis:
    """Components, the block grid used and the per-vertex developments."""

    grid: BlockGrid
    schedule: PhaseSchedule
    components: list
    developments: dict
    side_adjusted: bool
    overflow: int


def block_components(stream: UpdateStream, params: ModelParams, schedule: PhaseSchedule,
                     block_side: int | None = None, targets=None,
                     cap: int = DEFAULT_CAP) -> BlockAnalysis:
    """Develop every target over ``(t_m, t_star]`` and group the survivors.

    Regular phases use the exact support, deferred phases reachability.
    Vertices whose history is nonempty at ``t_m`` are joined by history
    intersection, initial proximity (same or adjacent block) and final
    proximity (history sites at ``t_m`` in the same or adjacent blocks).
    The block side defaults to the largest divisor of ``n`` not exceeding
    ``s_star^2``.
    """
    shape = params.shape
    want = schedule.block_side_target if block_side is None else int(block_side)
    side = largest_block_side(shape.n, want)
    grid = BlockGrid(shape, side)
    if stream.window[0] > schedule.t_m + 1e-12 or stream.window[1] < schedule.t_star - 1e-12:
        raise ValueError("stream must cover (t_m, t_star]")
    targets = list(range(shape.size)) if targets is None else list(_region(targets, shape))
    phases = schedule.phases()
    devs = {v: develop([v], phases, stream, params, cap) for v in targets}
    ups = [v for v in targets if devs[v].support]
    index = {v: i for i, v in enumerate(ups)}
    uf = _UnionFind(len(ups))
    pieces, owners = [], []
    for v in ups:
        for p in devs[v].pieces:
            pieces.append(p)
            owners.append(index[v])
    _merge_overlaps(pieces, owners, uf)
    _proximity_union(grid, [[v] for v in ups], uf)
    _proximity_union(grid, [list(devs[v].support) for v in ups], uf)
    groups: dict = {}
    for v in ups:
        groups.setdefault(uf.find(index[v]), []).append(v)
    comps = []
    for root in sorted(groups):
        mem = tuple(groups[root])
        hist = tuple(sorted({s for v in mem for s in devs[v].support}))
        chi = {}
        for k in range(1, schedule.lam + 1):
            tk = schedule.tau(k)
            if k == schedule.lam:
                chi[k] = mem
            else:
                chi[k] = tuple(sorted({s for v in mem for s in devs[v].boundary.get(tk, ())}))
        exact = all(devs[v].exact for v in mem)
        comps.append(BlockComponent(mem, hist, tuple(grid.cover(hist)), tuple(grid.cover(mem)),
                                    chi, exact))
    overflow = sum(not d.exact for d in devs.values())
    return BlockAnalysis(grid, schedule, comps, devs, side != want, overflow)


def _proximity_union(grid: BlockGrid, site_sets, uf: _UnionFind) -> None:
    """Union indices whose site sets touch the same or adjacent blocks."""
    owner: dict = {}
    for i, sites in enumerate(site_sets):
        for s in sites:
            b = block_of(grid, s)
            if b in owner:
                uf.union(owner[b], i)
            else:
                owner[b] = i
    table = grid.block_neighbor_table()
    for b, i in owner.items():
        for nb_ in table[b]:
            j = owner.get(int(nb_)) if nb_ >= 0 else None
            if j is not None:
                uf.union(i, j)


def _elapsed(stream: UpdateStream, v: int, tau: float) -> float:
    idx = stream.site_events(v)
    times = stream.times[idx]
    pos = int(np.searchsorted(times, tau, side="left")) - 1
    if pos < 0:
        return 1.0
    return min(tau - float(times[pos]), 1.0)


def cut_set(component: BlockComponent, stream: UpdateStream, schedule: PhaseSchedule,
            params: ModelParams) -> tuple:
    """The cut-set ``(k, chi_k, Xi_k)`` of a component.

    ``Xi_k`` is the product over ``chi_k`` of ``theta T_{v,k} / 4`` with
    ``T_{v,k}`` the capped time since the last update before ``tau_k``.
    The chosen phase maximizes ``Xi_k`` (equivalently minimizes
    ``Xi_k^{-4}``, the quantity controlled by the cut-set estimate); ties
    go to the smallest ``k``, and an empty ``chi_k`` (``Xi = 1``) wins.
    """
    th = theta(params)
    best = None
    for k in range(1, schedule.lam + 1):
        chi = component.chi.get(k, ())
        tk = schedule.tau(k)
        xi = 1.0
        for v in chi:
            xi *= 0.25 * th * _elapsed(stream, v, tk)
        if best is None or xi > best[2]:
            best = (k, tuple(chi), xi)
    component.cutset = best
    return best


def xi_value(chi, stream: UpdateStream, tau: float, params: ModelParams) -> float:
    """``prod_{v in chi} theta T_v / 4`` at time ``tau``."""
    th = theta(params)
    out = 1.0
    for v in chi:
        out *= 0.25 * th * _elapsed(stream, int(v), tau)
    return out


def component_weights(analysis: BlockAnalysis) -> list:
    """Animal weights ``W(A_i cup B_i)`` of every component."""
    out = []
    for c in analysis.components:
        blocks = sorted(set(c.A) | set(c.B))
        out.append(min_animal_weight(analysis.grid, blocks) if blocks else AnimalWeight(0, True))
    return out


@dataclass
class RefinedConfig:
    """Constants of the refined cluster relation over components."""

    proximity_radius: float | None = None
    window: float | None = None


def refined_clusters(stream: UpdateStream, params: ModelParams, analysis: BlockAnalysis,
                     config: RefinedConfig | None = None, cap: int = DEFAULT_CAP) -> dict:
    """Second-level clusters of components below ``t_m`` and their colors.

    Each component's history is continued from ``t_m`` to 0 with the exact
    support. Components are joined when these continuations overlap, or
    when one comes within the proximity radius (default ``s_star^2 / 3``)
    of the other's sites during ``[t_m - window, t_m]`` (default window
    ``s_star``). Blue: a lone component that dies within the window without
    leaving the radius. Red: some history reaches time 0. Green otherwise.
    """
    config = config or RefinedConfig()
    sch = analysis.schedule
    radius = sch.s_star ** 2 / 3 if config.proximity_radius is None else config.proximity_radius
    window = sch.s_star if config.window is None else config.window
    comps = analysis.components
    shape = params.shape
    t_m = sch.t_m
    t_lo = max(0.0, t_m - window)
    if stream.window[0] > 1e-12 or stream.window[1] < t_m - 1e-12:
        raise ValueError("stream must cover (0, t_m]")
    devs = [develop(list(c.history_at_tm), [(t_m, 0.0, "sup")], stream, params, cap)
            if c.history_at_tm else None for c in comps]
    uf = _UnionFind(len(comps))
    pieces, owners = [], []
    for i, dv in enumerate(devs):
        if dv is None:
            continue
        for p in dv.pieces:
            pieces.append(p)
            owners.append(i)
    _merge_overlaps(pieces, owners, uf)
    coords = shape.coord_array()
    near = [set() for _ in comps]
    escaped = [False] * len(comps)
    for i, dv in enumerate(devs):
        if dv is None:
            continue
        early = {p[0] for p in dv.pieces if p[2] > t_lo}
        for j, c in enumerate(comps):
            if j == i:
                continue
            if _min_linf(shape, coords, early, c.history_at_tm) < radius:
                near[i].add(j)
        if _min_linf(shape, coords, early, comps[i].history_at_tm, outside=True) >= radius:
            escaped[i] = True
    for i in range(len(comps)):
        for j in near[i]:
            uf.union(i, j)
    groups: dict = {}
    for i in range(len(comps)):
        groups.setdefault(uf.find(i), []).append(i)
    out = []
    for root in sorted(groups):
        idx = groups[root]
        red = any(devs[i] is not None and devs[i].support for i in idx)
        exact = all(devs[i] is None or devs[i].exact for i in idx)
        if red:
            color = Color.RED
        else:
            i = idx[0]
            died = devs[i] is None or all(p[1] >= t_lo for p in devs[i].pieces)
            if len(idx) == 1 and died and not escaped[i] and exact:
                color = Color.BLUE
            else:
                color = Color.GREEN
        out.append({"components": idx, "color": color.value, "exact": exact})
    counts = {c.value: 0 for c in Color}
    for row in out:
        counts[row["color"]] += 1
    return {"clusters": out, "counts": counts, "radius": radius, "window": window}


def _torus_delta(shape, a, b):
    d = np.abs(a - b) % shape.n
    return np.minimum(d, shape.n - d)


def _min_linf(shape, coords, sites_a, sites_b, outside=False) -> float:
    """Min L-inf distance from ``sites_a`` to ``sites_b`` (max over ``a`` if ``outside``)."""
    if not sites_a or not sites_b:
        return math.inf if not outside else 0.0
    a = coords[sorted(sites_a)][:, None, :]
    b = coords[sorted(sites_b)][None, :, :]
    dist = _torus_delta(shape, a, b).max(axis=2).min(axis=1)
    return float(dist.max() if outside else dist.min())


# ----------------------------------------------------------------------------
# SVG rendering

_PALETTE = {Color.RED: "#d62728", Color.BLUE: "#1f77b4", Color.GREEN: "#2ca02c"}


def render_slab_svg(partition: ClusterPartition, stream: UpdateStream | None, out,
                    width: int = 800, height: int = 400) -> str:
    """Write an SVG 1.1 picture of the clusters to ``out`` and return the text.

    On the cycle: sites on the horizontal axis, time upward, each history
    piece a vertical stroke in its cluster color with a legend of counts.
    On the 2D torus: a top view, one square per vertex shaded by the size of
    its cluster and outlined by color.
    """
    shape = partition.shape
    if shape.d not in (1, 2):
        raise ValueError("rendering supports d = 1 or 2")
    counts = partition.counts()
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
             f'height="{height + 30}" viewBox="0 0 {width} {height + 30}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white" stroke="black"/>']
    if shape.d == 1:
        T = max(partition.t_star, 1e-9)
        sx = width / shape.n
        for ci, cl in enumerate(partition.clusters):
            col = _PALETTE[cl.color]
            segs = []
            for s, lo, hi in sorted(cl.pieces):
                x = (s + 0.5) * sx
                y0 = height * (1 - hi / T)
                y1 = height * (1 - lo / T)
                segs.append(f"M{x:.2f},{y0:.2f}L{x:.2f},{y1:.2f}")
            if segs:
                parts.append(f'<path class="cluster" data-color="{cl.color.value}" '
                             f'stroke="{col}" stroke-width="{max(sx * 0.6, 0.5):.2f}" fill="none" '
                             f'd="{"".join(segs)}"/>')
    else:
        n = shape.n
        cs = min(width, height) / n
        size = {}
        for cl in partition.clusters:
            for v in cl.members:
                size[v] = (len(cl.sites), cl.color)
        biggest = max((s for s, _ in size.values()), default=1) or 1
        for v, (sz, colr) in sorted(size.items()):
            x, y = shape.coords(v)
            shade = int(255 * (1 - sz / biggest))
            parts.append(f'<rect class="cluster" data-color="{colr.value}" x="{x * cs:.2f}" '
                         f'y="{y * cs:.2f}" width="{cs:.2f}" height="{cs:.2f}" '
                         f'fill="rgb({shade},{shade},{shade})" stroke="{_PALETTE[colr]}"/>')
    legend = " ".join(f"{k}={counts[k]}" for k in ("red", "blue", "green"))
    parts.append(f'<text x="4" y="{height + 20}" font-size="14" font-family="monospace" '
                 f'class="legend">{legend}</text>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if out is not None:
        if hasattr(out, "write"):
            out.write(text)
        else:
            with open(out, "w") as fh:
                fh.write(text)
    return text


__all__ = [
    "Color",
    "Cluster",
    "ClusterPartition",
    "build_clusters",
    "classify_annealed",
    "exp_moment_estimator",
    "ExpMomentEstimate",
    "PhaseSchedule",
    "BlockComponent",
    "BlockAnalysis",
    "block_components",
    "cut_set",
    "xi_value",
    "refined_clusters",
    "render_slab_svg",
]
