import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from isoperc.dynamics import simulate
from isoperc.history import (
    brute_force_support,
    develop,
    f_sup,
    f_upd,
    tail_checks,
    trace_1d,
    walk_histories,
)
from isoperc.lattice import TorusShape
from isoperc.updates import (
    ModelParams,
    Rule,
    UnsupportedRuleError,
    UpdateStream,
    generate_stream,
    theta,
)


def P(beta, d=1, n=8, rule=Rule.HEAT_BATH, h=0.0):
    return ModelParams(beta, h, TorusShape(d, n), rule)


def manual_stream(shape, window, events):
    """Stream from explicit ``(time, site, unit)`` triples."""
    events = sorted(events)
    times = np.array([e[0] for e in events], dtype=np.float64)
    sites = np.array([e[1] for e in events], dtype=np.int64)
    units = np.array([e[2] for e in events], dtype=np.float64)
    return UpdateStream(shape, window, 0, times, sites, units)


def _dfs_reach(A, t1, t2, stream):
    """Sites reached by reverse-chronological update paths (depth-first)."""
    nbr = stream.shape.neighbor_table
    best = {}

    def visit(w, s, inclusive):
        if best.get(w, -math.inf) >= s:
            return
        best[w] = s
        for i in stream.site_events(w):
            te = stream.times[i]
            if te <= t1 or te > s or (te == s and not inclusive):
                continue
            for x in nbr[w]:
                visit(int(x), te, False)

    for a in A:
        visit(int(a), t2, True)
    return frozenset(best)


class TestReachability:
    def test_no_events(self):
        s = manual_stream(TorusShape(1, 6), (0.0, 1.0), [])
        assert f_upd({2, 3}, 0.0, 1.0, s) == {2, 3}

    def test_single_event(self):
        shape = TorusShape(2, 4)
        s = manual_stream(shape, (0.0, 1.0), [(0.5, 5, 0.4)])
        assert f_upd({5}, 0.0, 1.0, s) == {5} | set(int(w) for w in shape.neighbor_table[5])

    def test_time_order_matters(self):
        shape = TorusShape(1, 8)
        # A later update at 3 followed (backward) by an earlier one at 4 chains out to 5;
        # reversing the times stops at 4.
        chained = manual_stream(shape, (0.0, 1.0), [(0.8, 3, 0.4), (0.3, 4, 0.4)])
        blocked = manual_stream(shape, (0.0, 1.0), [(0.3, 3, 0.4), (0.8, 4, 0.4)])
        assert f_upd({3}, 0.0, 1.0, chained) == {2, 3, 4, 5}
        assert f_upd({3}, 0.0, 1.0, blocked) == {2, 3, 4}

    @settings(max_examples=150, deadline=None)
    @given(seed=st.integers(0, 2**40), d=st.integers(1, 2), n=st.integers(3, 9),
           t2=st.floats(0.1, 4), data=st.data())
    def test_matches_depth_first_search(self, seed, d, n, t2, data):
        shape = TorusShape(d, n)
        s = generate_stream(shape, (0.0, t2), seed)
        A = data.draw(st.frozensets(st.integers(0, shape.size - 1), min_size=1, max_size=3))
        t1 = data.draw(st.floats(0, t2))
        got = f_upd(A, t1, t2, s)
        assert A <= got
        assert got == _dfs_reach(A, t1, t2, s)


class TestSupport:
    def test_no_events_identity(self):
        p = P(0.4, n=6)
        s = manual_stream(p.shape, (0.0, 1.0), [])
        fs = f_sup({1, 4}, 0.0, 1.0, s, p)
        assert fs.exact and set(fs.support) == {1, 4}
        x = np.array([1, -1, 1, 1, 1, -1], dtype=np.int8)
        assert list(fs.evaluate(x)) == [-1, 1]

    @pytest.mark.parametrize("unit,sign", [(0.01, -1), (0.99, 1)])
    def test_oblivious_kill(self, unit, sign):
        p = P(0.4, n=6)
        s = manual_stream(p.shape, (0.0, 1.0), [(0.5, 2, unit)])
        fs = f_sup({2}, 0.0, 1.0, s, p)
        assert fs.exact and fs.support == ()
        assert fs.is_constant
        assert fs.evaluate(np.ones(6, dtype=np.int8))[0] == sign

    def test_composite_collapse(self):
        p = P(0.4, n=6)
        and_u, or_u = 0.4, 0.6
        events = [(3.0, 3, and_u), (2.0, 2, or_u), (1.0, 3, or_u)]
        s = manual_stream(p.shape, (0.0, 4.0), events)
        # After the top two updates the target reads (x1 or x3) and x4.
        mid = f_sup({3}, 1.5, 4.0, s, p)
        assert set(mid.support) == {1, 3, 4}
        # Substituting x3 := x2 or x4 leaves x4 alone, though x1 was never updated.
        fs = f_sup({3}, 0.0, 4.0, s, p)
        assert fs.exact and fs.support == (4,)
        assert brute_force_support({3}, 0.0, 4.0, s, p) == {4}
        assert f_upd({3}, 0.0, 4.0, s) >= {1, 2, 3, 4}

    def test_metropolis_rejected(self):
        p = P(0.4, rule=Rule.METROPOLIS)
        s = generate_stream(p.shape, (0.0, 1.0), 0)
        with pytest.raises(UnsupportedRuleError):
            f_sup({0}, 0.0, 1.0, s, p)
        with pytest.raises(UnsupportedRuleError):
            brute_force_support({0}, 0.0, 1.0, s, p)

    def test_brute_force_limit(self):
        p = P(0.3, d=2, n=8)
        s = generate_stream(p.shape, (0.0, 6.0), 1)
        with pytest.raises(ValueError):
            brute_force_support({0}, 0.0, 6.0, s, p, limit=4)

    @settings(max_examples=120, deadline=None)
    @given(seed=st.integers(0, 2**40), d=st.integers(1, 2), beta=st.sampled_from([0.0, 0.2, 0.4]),
           window=st.floats(0.2, 2.5), data=st.data())
    def test_matches_brute_force(self, seed, d, beta, window, data):
        n = data.draw(st.integers(3, 6 if d == 2 else 8))
        p = P(beta, d=d, n=n)
        s = generate_stream(p.shape, (0.0, window), seed)
        A = data.draw(st.frozensets(st.integers(0, p.shape.size - 1), min_size=1, max_size=2))
        reach = f_upd(A, 0.0, window, s)
        assume(len(reach) <= 16)
        fs = f_sup(A, 0.0, window, s, p)
        assert set(fs.support) <= reach
        if fs.exact:
            assert set(fs.support) == brute_force_support(A, 0.0, window, s, p)

    def test_infinite_temperature_support(self):
        p = P(0.0, d=2, n=5)
        for seed in range(30):
            s = generate_stream(p.shape, (0.0, 0.7), seed)
            quiet = {v for v in range(p.shape.size) if len(s.site_events(v)) == 0}
            A = {0, 7, 12}
            if len(f_upd(A, 0.0, 0.7, s)) <= 20:
                assert brute_force_support(A, 0.0, 0.7, s, p) <= quiet
            assert set(f_sup(A, 0.0, 0.7, s, p).support) == A & quiet

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**40), d=st.integers(1, 2), beta=st.sampled_from([0.2, 0.4]))
    def test_table_reproduces_forward_simulation(self, seed, d, beta):
        p = P(beta, d=d, n=5)
        s = generate_stream(p.shape, (0.0, 1.5), seed)
        A = [0, 1]
        fs = f_sup(A, 0.0, 1.5, s, p)
        assume(fs.exact and len(fs.support) <= 10)
        rng = np.random.default_rng(seed)
        for row in range(1 << len(fs.support)):
            x = rng.choice(np.array([-1, 1], dtype=np.int8), size=p.shape.size)
            for j, v in enumerate(fs.support):
                x[v] = 1 if (row >> j) & 1 else -1
            out = simulate(x, s, p, 1.5)
            assert np.array_equal(fs.evaluate(x), out[list(fs.targets)])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**40), beta=st.sampled_from([0.2, 0.4]))
    def test_minimal(self, seed, beta):
        p = P(beta, d=2, n=5)
        s = generate_stream(p.shape, (0.0, 1.5), seed)
        fs = f_sup([3, 4], 0.0, 1.5, s, p)
        assume(fs.exact)
        tab = fs.table
        k = len(fs.support)
        for j in range(k):
            view = tab.reshape(1 << (k - j - 1), 2, 1 << j, tab.shape[1])
            assert not np.array_equal(view[:, 0], view[:, 1])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**40), beta=st.sampled_from([0.2, 0.4]))
    def test_nested_targets(self, seed, beta):
        p = P(beta, d=2, n=5)
        s = generate_stream(p.shape, (0.0, 1.5), seed)
        small = f_sup([6], 0.0, 1.5, s, p)
        big = f_sup([6, 7, 18], 0.0, 1.5, s, p)
        if small.exact and big.exact:
            assert set(small.support) <= set(big.support)

    def test_cap_overflow_falls_back_to_reachability(self):
        p = P(0.6, d=2, n=8)
        s = generate_stream(p.shape, (0.0, 3.0), 5)
        fs = f_sup(range(10), 0.0, 3.0, s, p, cap=4)
        assert not fs.exact
        assert fs.table is None
        assert set(fs.support) == f_upd(range(10), 0.0, 3.0, s)


class TestStrands:
    def test_no_events(self):
        p = P(0.4, n=6)
        s = manual_stream(p.shape, (0.0, 2.0), [])
        tr = trace_1d(3, 0.0, 2.0, s, p)
        assert tr.alive and tr.position == 3
        assert tr.support == {3}

    def test_cycle_only(self):
        p = P(0.2, d=2, n=4)
        s = generate_stream(p.shape, (0.0, 1.0), 0)
        with pytest.raises(ValueError):
            trace_1d(0, 0.0, 1.0, s, p)

    def test_survival_probability(self):
        p = P(0.4, n=32)
        h = 2.0
        alive = np.array([trace_1d(0, 0.0, h, generate_stream(p.shape, (0.0, h), seed), p).alive
                          for seed in range(3000)], dtype=float)
        se = alive.std(ddof=1) / math.sqrt(len(alive))
        assert abs(alive.mean() - math.exp(-theta(p) * h)) <= 3 * se

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**40), beta=st.floats(0, 1), n=st.integers(3, 12),
           h=st.floats(0.1, 5), v=st.integers(0, 11))
    def test_matches_support_under_copy_rule(self, seed, beta, n, h, v):
        p = P(beta, n=n, rule=Rule.HEAT_BATH_COPY)
        v %= n
        s = generate_stream(p.shape, (0.0, h), seed)
        tr = trace_1d(v, 0.0, h, s, p)
        fs = f_sup([v], 0.0, h, s, p)
        assert fs.exact
        assert set(fs.support) == tr.support
        assert tr.alive == bool(fs.support)
        if not tr.alive:
            assert fs.evaluate(np.ones(n, dtype=np.int8))[0] == tr.death_sign

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**40), rule=st.sampled_from([Rule.HEAT_BATH, Rule.HEAT_BATH_COPY]),
           top=st.floats(0.5, 4), bottom=st.floats(-3, 0))
    def test_counter_walks_match_stream_traces(self, seed, rule, top, bottom):
        p = P(0.4, n=10, rule=rule)
        s = generate_stream(p.shape, (bottom, top), seed)
        wh = walk_histories(p, seed, np.arange(10), top, bottom)
        for v in range(10):
            tr = trace_1d(v, bottom, top, s, p)
            assert bool(wh.survives[v]) == tr.alive
            if tr.alive:
                assert wh.end_site[v] == tr.position
            else:
                assert wh.coin[v] == tr.death_sign

    def test_walks_to_minus_infinity_finish(self):
        p = P(0.4, n=64, rule=Rule.HEAT_BATH_COPY)
        wh = walk_histories(p, 3, np.arange(64), 0.0, -math.inf)
        assert wh.finished
        assert not np.any(wh.survives)
        x = wh.spins()
        assert set(np.unique(x)) <= {-1, 1}

    def test_walks_coalesce(self):
        p = P(0.05, n=6, rule=Rule.HEAT_BATH_COPY)
        wh = walk_histories(p, 5, np.arange(6), 30.0, 0.0)
        groups = {}
        for v in range(6):
            groups.setdefault(int(wh.root[v]), set()).add((int(wh.fate[v]), int(wh.end_site[v]),
                                                           int(wh.coin[v])))
        assert all(len(g) == 1 for g in groups.values())
        assert len(groups) < 6


class TestTails:
    def test_zero_depth(self):
        r = tail_checks(P(0.3), 0.0, 3, 10)
        assert r.p_support == 1.0 and r.m_h == 1.0 and r.p_escape == 0.0

    def test_requires_large_radius(self):
        with pytest.raises(ValueError):
            tail_checks(P(0.3), 1.0, 20, 10)

    def test_small_run(self):
        p = P(0.2, n=64)
        r = tail_checks(p, 0.5, 15, 400, seed=1)
        assert r.support_ok
        assert r.escape_ok
        assert r.overflow == 0


def test_deferred_phases_never_shrink():
    p = P(0.3, d=2, n=8)
    s = generate_stream(p.shape, (0.0, 4.0), 9)
    phases = [(4.0, 3.0, "sup"), (3.0, 2.0, "upd"), (2.0, 1.0, "sup"), (1.0, 0.0, "upd")]
    dev = develop(range(0, 64, 9), phases, s, p)
    assert dev.deferred_monotone
    assert set(dev.boundary[2.0]) >= set(dev.boundary[3.0])
    for site, lo, hi in dev.pieces:
        assert 0.0 <= lo <= hi <= 4.0
