import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse, stats
from scipy.sparse.linalg import expm_multiply

from isoperc.dynamics import all_minus, all_plus, simulate
from isoperc.history import trace_1d
from isoperc.lattice import TorusShape
from isoperc.sampling import (
    CftpFailure,
    MpInstance,
    SizeError,
    cftp_batch,
    cftp_sample,
    cftp_walk_sample,
    circular_apply,
    exact_pi,
    exact_tv_curve,
    generator,
    mp_inequality_check,
    mp_sides,
    pi_sample_codes,
    pi_samples,
    product_chain_tv,
    state_code,
    state_codes,
    state_spins,
    walk_kernel_1d,
)
from isoperc.updates import ModelParams, Rule, UnsupportedRuleError, generate_stream, theta


def P(beta, h=0.0, d=1, n=8, rule=Rule.HEAT_BATH):
    return ModelParams(beta, h, TorusShape(d, n), rule)


class TestStates:
    def test_code_roundtrip(self):
        spins = state_spins(5)
        assert spins.shape == (32, 5)
        assert np.array_equal(state_codes(spins), np.arange(32))
        assert state_code([1, -1, -1]) == 1
        assert state_code([-1, -1, 1]) == 4


class TestExactPi:
    def test_uniform_at_infinite_temperature(self):
        m = exact_pi(P(0.0, n=6))
        assert np.allclose(m.probabilities, 1 / 64, rtol=0, atol=1e-15)

    def test_triangle_closed_form(self):
        # Three sites on a cycle: aligned states have three satisfied edges.
        b = 0.5
        m = exact_pi(P(b, n=3))
        want = math.exp(3 * b) / (2 * math.exp(3 * b) + 6 * math.exp(-b))
        assert m.prob([1, 1, 1]) == pytest.approx(want, rel=1e-12)
        assert m.prob([-1, -1, -1]) == pytest.approx(want, rel=1e-12)

    def test_strong_field_concentrates(self):
        m = exact_pi(P(0.2, h=8.0, n=6))
        assert m.prob(np.ones(6)) > 0.999

    @settings(max_examples=20, deadline=None)
    @given(beta=st.floats(0, 1.5), h=st.floats(-1, 1), d=st.integers(1, 2))
    def test_normalized(self, beta, h, d):
        m = exact_pi(P(beta, h, d=d, n=3 if d == 2 else 7))
        assert m.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(m.probabilities > 0)

    def test_spin_flip_symmetry_without_field(self):
        m = exact_pi(P(0.7, n=7))
        flipped = (1 << 7) - 1 - np.arange(1 << 7)
        assert np.allclose(m.probabilities, m.probabilities[flipped], rtol=1e-12)

    def test_marginal_of_magnetization(self):
        m = exact_pi(P(0.0, n=4))
        law = m.marginal(lambda s: s.sum(axis=1))
        assert law[4] == pytest.approx(1 / 16)
        assert law[0] == pytest.approx(6 / 16)

    def test_size_limit(self):
        with pytest.raises(SizeError):
            exact_pi(P(0.1, n=21))


class TestGenerator:
    @pytest.mark.parametrize("rule,h", [(Rule.HEAT_BATH, 0.2), (Rule.METROPOLIS, 0.2), (Rule.HEAT_BATH_COPY, 0.0)])
    def test_reversible(self, rule, h):
        p = P(0.4, h=h, n=6, rule=rule)
        q = generator(p).toarray()
        pi = exact_pi(p).probabilities
        flow = pi[:, None] * q
        assert np.allclose(flow, flow.T, atol=1e-12, rtol=0)
        assert np.allclose(q.sum(axis=1), 0, atol=1e-12)

    def test_size_limit(self):
        with pytest.raises(SizeError):
            generator(P(0.1, n=13))


class TestExactTv:
    def test_initial_distance(self):
        p = P(0.3)
        c = exact_tv_curve(p, np.ones(8), [0.0])
        assert c.tv[0] == pytest.approx(1 - exact_pi(p).prob(np.ones(8)), abs=1e-15)

    def test_matches_krylov_exponential(self):
        p = P(0.3, h=0.1, n=6)
        x0 = np.array([1, -1, 1, 1, -1, -1])
        grid = [0.5, 1.0, 3.0, 7.0]
        c = exact_tv_curve(p, x0, grid)
        p0 = np.zeros(64)
        p0[state_code(x0)] = 1.0
        qt = sparse.csr_matrix(generator(p).T)
        for i, t in enumerate(grid):
            want = expm_multiply(qt * t, p0)
            assert np.allclose(c.distributions[i], want, atol=1e-9)

    def test_product_chain_closed_form(self):
        p = P(0.0, n=4)
        grid = [0.1, 0.5, 1.0, 2.0, 4.0]
        c = exact_tv_curve(p, np.ones(4), grid)
        for t, tv in zip(grid, c.tv):
            assert tv == pytest.approx(product_chain_tv(4, t), abs=1e-9)

    def test_nonincreasing(self):
        c = exact_tv_curve(P(0.5), np.ones(8), np.linspace(0, 20, 41))
        assert np.all(np.diff(c.tv) <= 1e-10)
        assert c.tv[-1] < 0.05

    def test_large_time_splits(self):
        c = exact_tv_curve(P(0.2, n=6), np.ones(6), [100.0])
        assert c.tv[0] < 1e-8
        assert c.distributions[0].sum() == pytest.approx(1.0, abs=1e-8)

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            exact_tv_curve(P(0.2), np.ones(8), [1.0, 0.5])

    def test_product_chain_limits(self):
        assert product_chain_tv(10, 0.0) == pytest.approx(1 - 2.0 ** -10)
        assert product_chain_tv(10, 50.0) < 1e-12


def _reference_cftp(p, seed):
    t = 1
    while True:
        s = generate_stream(p.shape, (-float(t), 0.0), seed)
        a = simulate(all_plus(p), s, p, 0.0)
        b = simulate(all_minus(p), s, p, 0.0)
        if np.array_equal(a, b):
            return a, t
        t *= 2


class TestCftp:
    def test_matches_reference_doubling(self):
        p = P(0.3)
        for seed in range(8):
            got = cftp_sample(p, seed)
            want, depth = _reference_cftp(p, seed)
            assert np.array_equal(got.configuration, want)
            assert got.depth == depth

    def test_reuses_events_when_extending(self):
        p = P(0.3)
        for T in (1.0, 4.0):
            short = generate_stream(p.shape, (-T, 0.0), 11)
            long = generate_stream(p.shape, (-2 * T, 0.0), 11)
            assert short.fingerprint() == long.fingerprint(-T, 0.0)

    def test_deterministic(self):
        p = P(0.4, d=2, n=3)
        a, b = cftp_sample(p, 5), cftp_sample(p, 5)
        assert np.array_equal(a.configuration, b.configuration)
        assert a.depth == b.depth

    def test_sandwich_holds(self):
        p = P(0.6, h=0.1, d=2, n=3)
        for seed in range(10):
            assert cftp_sample(p, seed, check_sandwich=True).sandwich_violations == 0

    def test_failure_is_raised(self):
        p = P(2.0, n=8)
        with pytest.raises(CftpFailure):
            for seed in range(50):
                cftp_sample(p, seed, t_max=1)

    def test_metropolis_rejected(self):
        with pytest.raises(UnsupportedRuleError):
            cftp_sample(P(0.3, rule=Rule.METROPOLIS), 0)

    def test_batch_matches_single(self):
        p = P(0.3)
        seeds = np.arange(6, dtype=np.uint64)
        out, depths = cftp_batch(p, seeds)
        for j, s in enumerate(seeds):
            c = cftp_sample(p, int(s))
            assert np.array_equal(out[j], c.configuration)
            assert depths[j] == c.depth

    def test_codes_match_samples(self):
        p = P(0.3)
        codes = pi_sample_codes(p, 50, 3)
        assert np.array_equal(codes, state_codes(pi_samples(p, 50, 3, method="monotone")))

    @pytest.mark.parametrize("method", ["monotone", "walks"])
    def test_law_matches_exact(self, method):
        p = P(0.4, n=5)
        codes = state_codes(pi_samples(p, 20000, 1, method=method))
        pi = exact_pi(p).probabilities
        counts = np.bincount(codes, minlength=32)
        assert stats.chisquare(counts, 20000 * pi).pvalue > 0.001

    def test_walk_sampler_deterministic(self):
        p = P(0.4, n=16)
        a, b = cftp_walk_sample(p, 9), cftp_walk_sample(p, 9)
        assert np.array_equal(a.configuration, b.configuration)
        assert a.depth > 0

    def test_walk_sampler_needs_cycle(self):
        with pytest.raises(UnsupportedRuleError):
            pi_samples(P(0.3, d=2, n=3), 2, 0, method="walks")
        with pytest.raises(ValueError):
            pi_samples(P(0.3), 2, 0, method="bogus")


class TestWalkKernel:
    def test_time_zero_is_delta(self):
        k = walk_kernel_1d(0.5, 0.0, 9, 3)
        assert k.row[3] == 1.0
        assert k.row.sum() == 1.0

    @settings(max_examples=30, deadline=None)
    @given(th=st.floats(0.05, 1.0), t=st.floats(0, 40), n=st.integers(2, 40))
    def test_stochastic_and_symmetric(self, th, t, n):
        k = walk_kernel_1d(th, t, n)
        assert k.row.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(k.row, np.roll(k.row[::-1], 1), atol=1e-14)
        assert k.tail_bound < 1e-12

    def test_alternating_vector_decays(self):
        n, th, t = 12, 0.3, 2.5
        k = walk_kernel_1d(th, t, n)
        x = np.array([(-1) ** i for i in range(n)], dtype=float)
        r = circular_apply(k.row, x)
        assert np.allclose(r, math.exp(-2 * (1 - th) * t) * x, atol=1e-12)

    def test_circular_apply_matches_dense(self):
        rng = np.random.default_rng(0)
        n = 10
        k = walk_kernel_1d(0.4, 1.7, n)
        x = rng.normal(size=n)
        dense = np.array([[k.row[(w - u) % n] for w in range(n)] for u in range(n)])
        assert np.allclose(circular_apply(k.row, x), dense @ x, atol=1e-12)

    def test_matches_strand_displacement(self):
        # A copy-rule strand killed with rate theta; conditioned on survival it is the walk.
        p = P(0.4, n=7, rule=Rule.HEAT_BATH_COPY)
        th = theta(p)
        t = 1.5
        k = walk_kernel_1d(th, t, 7)
        counts = np.zeros(7)
        alive = 0
        for seed in range(4000):
            tr = trace_1d(0, 0.0, t, generate_stream(p.shape, (0.0, t), seed), p)
            if tr.alive:
                alive += 1
                counts[tr.position % 7] += 1
        assert alive / 4000 == pytest.approx(math.exp(-th * t), abs=3 * math.sqrt(0.25 / 4000))
        assert stats.chisquare(counts, alive * k.row).pvalue > 0.001

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            walk_kernel_1d(0.5, -1.0, 5)
        with pytest.raises(ValueError):
            walk_kernel_1d(0.5, 1.0, 0)


class TestMpInequality:
    def test_product_measure_has_zero_distance(self):
        nu = np.array([0.3, 0.7])
        inst = MpInstance(2, [[0], [1]], [nu, nu], {0: 1.0}, {})
        lhs, rhs = mp_sides(inst)
        assert lhs == pytest.approx(0.0, abs=1e-12)
        assert rhs == pytest.approx(0.0, abs=1e-12)

    def test_full_resampling_single_block(self):
        nu = np.array([0.25, 0.75])
        phi = np.array([1.0, 0.0])
        inst = MpInstance(1, [[0]], [nu], {1: 1.0}, {1: phi})
        lhs, rhs = mp_sides(inst)
        assert lhs == pytest.approx(1 / 0.25 - 1)
        assert rhs == pytest.approx(1 / 0.25 - 1)

    def test_random_instances_pass(self):
        r = mp_inequality_check(200, seed=4)
        assert r.pass_rate == 1.0
        assert r.worst_slack >= -1e-9

    def test_size_limit(self):
        with pytest.raises(SizeError):
            mp_inequality_check(1, max_sites=7)
