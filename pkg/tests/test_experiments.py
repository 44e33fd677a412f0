import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isoperc.experiments import (
    CSV_COLUMNS,
    TvEstimate,
    TvKind,
    _crossing,
    bias_profile,
    calibrate_constant,
    coupling_upper,
    critical_advisory,
    csv_text,
    exp_moment_upper_plus,
    magnetization_lower_curve,
    optimized_lower,
    pair_correlation_lower_curve,
    pair_sum,
    pi_magnetizations,
    plus_mixing_bracket,
    quenched_statistic,
    quenched_time,
    read_csv_body,
    signed_statistic,
    tail_difference,
    tv_lower_magnetization,
    tv_lower_pair_correlation,
    uniform_start_pair_sum_curve,
    uniform_start_pair_sums,
    write_csv,
)
from isoperc.lattice import TorusShape
from isoperc.sampling import exact_tv_curve, state_spins
from isoperc.updates import ModelParams, Rule, theta


def P(beta, h=0.0, d=1, n=8, rule=Rule.HEAT_BATH):
    return ModelParams(beta, h, TorusShape(d, n), rule)


class TestTailComparisons:
    def test_tail_difference_example(self):
        d, se = tail_difference([1, 2, 3, 4], [0, 0, 1, 5], 1.5)
        assert d == pytest.approx(0.75 - 0.25)
        assert se == pytest.approx(math.sqrt(0.75 * 0.25 / 4 + 0.25 * 0.75 / 4))
        d, _ = tail_difference([1, 2, 3, 4], [0, 0, 1, 5], 1.5, greater=False)
        assert d == pytest.approx(0.25 - 0.75)

    def test_same_law_gives_small_value(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=4000), rng.normal(size=4000)
        d, se, _ = optimized_lower(a, b)
        assert abs(d) <= 3 * se + 0.01

    def test_disjoint_laws_give_one(self):
        rng = np.random.default_rng(1)
        # The quantile grid need not land in the gap, so the best event can be slightly inside.
        d, _, c = optimized_lower(rng.uniform(2, 3, 1000), rng.uniform(0, 1, 1000))
        assert d >= 0.95
        assert 0.9 <= c <= 2.1
        d2, _, _ = optimized_lower(rng.uniform(0, 1, 1000), rng.uniform(2, 3, 1000), greater=False)
        assert d2 >= 0.95
        d3, _, _ = optimized_lower(np.full(100, 5.0), np.zeros(100))
        assert d3 == 1.0

    def test_split_halves_are_disjoint(self):
        # With splitting, a threshold fitted to noise in one half does not inflate the other.
        rng = np.random.default_rng(2)
        vals = [optimized_lower(rng.normal(size=200), rng.normal(size=200))[0] for _ in range(200)]
        assert abs(np.mean(vals)) < 0.02


@pytest.fixture(scope="module")
def small_exact():
    p = P(0.3)
    grid = [1.0, 2.0, 4.0]
    return p, grid, exact_tv_curve(p, np.ones(8), grid)


class TestAgainstExactSmall:
    def test_any_threshold_is_a_valid_lower_bound(self, small_exact):
        p, grid, curve = small_exact
        mags = state_spins(8).sum(axis=1)
        for i, t in enumerate(grid):
            for c in np.linspace(-8.5, 8.5, 20):
                ev = mags > c
                diff = curve.distributions[i][ev].sum() - curve.pi[ev].sum()
                assert diff <= curve.tv[i] + 1e-12

    def test_monte_carlo_tail_matches_exact(self, small_exact):
        p, grid, curve = small_exact
        mags = state_spins(8).sum(axis=1)
        pi_stat = pi_magnetizations(p, 20000, 4)
        for i, t in enumerate(grid):
            from isoperc.experiments import plus_magnetizations

            a = plus_magnetizations(p, t, 20000, 5)
            for c in (-0.5, 1.5, 3.5):
                d, se = tail_difference(a, pi_stat, c)
                ev = mags > c
                exact = curve.distributions[i][ev].sum() - curve.pi[ev].sum()
                assert abs(d - exact) <= 4 * se

    def test_sandwich(self, small_exact):
        p, grid, curve = small_exact
        pi_stat = pi_magnetizations(p, 20000, 1)
        for i, t in enumerate(grid):
            low = tv_lower_magnetization(p, t, 20000, seed=2, pi_stat=pi_stat)
            up = coupling_upper(p, t, 20000, seed=3)
            assert low.kind is TvKind.STATISTIC_LOWER and up.kind is TvKind.COUPLING_UPPER
            assert low.raw <= curve.tv[i] + 3 * low.stderr
            assert curve.tv[i] <= up.value + 3 * up.stderr


class TestMagnetizationBounds:
    def test_curve_matches_pointwise(self):
        p = P(0.3, n=32)
        pi_stat = pi_magnetizations(p, 500, 0)
        curve = magnetization_lower_curve(p, [1.5], 500, seed=7, pi_stat=pi_stat)
        point = tv_lower_magnetization(p, 1.5, 500, seed=7, pi_stat=pi_stat)
        assert curve[0].raw == point.raw

    def test_time_zero_is_near_one(self):
        est = tv_lower_magnetization(P(0.3, n=64), 0.0, 1000, seed=1)
        assert est.value > 0.95
        assert "chebyshev" in est.extra

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            tv_lower_magnetization(P(0.3), -1.0, 10)

    def test_deterministic(self):
        p = P(0.2, n=32)
        a = tv_lower_magnetization(p, 1.0, 300, seed=3)
        b = tv_lower_magnetization(p, 1.0, 300, seed=3)
        assert a == b


class TestPairCorrelation:
    def test_pair_sum_example(self):
        assert pair_sum([1, 1, -1, -1])[0] == 0
        assert pair_sum([1, 1, 1])[0] == 3
        assert pair_sum([1, -1, 1, -1])[0] == -4

    def test_time_zero_separates_for_correlated_measure(self):
        p = P(0.4, n=256)
        est = tv_lower_pair_correlation(p, 0.0, 1000, seed=2)
        assert est.value > 0.9
        assert est.extra["pi_mean"] == pytest.approx(256 * math.tanh(0.4), rel=0.05)
        assert abs(est.extra["start_mean"]) < 4 * math.sqrt(256 / 1000)

    def test_curve_matches_single_time(self):
        p = P(0.4, n=32)
        curve = uniform_start_pair_sum_curve(p, [0.0, 0.7, 2.0], 50, 9)
        for k, t in enumerate([0.0, 0.7, 2.0]):
            assert np.array_equal(curve[:, k], uniform_start_pair_sums(p, t, 50, 9))

    def test_lower_curve_shape(self):
        p = P(0.4, n=64)
        ests = pair_correlation_lower_curve(p, [0.0, 1.0, 8.0], 400, seed=1)
        assert [e.statistic for e in ests] == ["pair-correlation"] * 3
        assert ests[0].value > ests[-1].value

    def test_cycle_only(self):
        with pytest.raises(ValueError):
            tv_lower_pair_correlation(P(0.2, d=2, n=4), 1.0, 10)


class TestExpMoment:
    def test_infinite_temperature_closed_form(self):
        # Red sites are those not yet updated: the overlap is Binomial(n, e^{-2t}).
        n, t = 64, 2.0
        est = exp_moment_upper_plus(P(0.0, n=n), t, 4000, seed=5)
        want = (1 + math.exp(-2 * t)) ** n
        assert est.extra["moment"] == pytest.approx(want, abs=3 * est.extra["moment_stderr"])
        assert est.extra["surrogate"] is True

    def test_time_zero_trivial(self):
        assert exp_moment_upper_plus(P(0.3, n=16), 0.0, 10).value == 1.0


class TestCrossings:
    @staticmethod
    def _curve(t, k):
        return TvEstimate(TvKind.EXACT_SMALL, t, math.exp(-t), 0.0, "exp")

    def test_upper_crossing(self):
        c = _crossing(self._curve, 0.25, 0.0, 0.5, False, 1e-4)
        assert c.t == pytest.approx(math.log(4), abs=1e-4)
        assert c.bracket[0] <= math.log(4) <= c.bracket[1]

    def test_lower_crossing(self):
        c = _crossing(self._curve, 0.5, 0.0, 8.0, True, 1e-4)
        assert c.t == pytest.approx(math.log(2), abs=1e-4)

    def test_plus_bracket_is_ordered(self):
        p = P(0.4, n=64)
        b = plus_mixing_bracket(p, replicas=400, moment_replicas=300, seed=1, tol=0.1)
        assert b.consistent
        assert b.lower_crossing.t <= b.midpoint <= b.upper_crossing.t
        assert set(b.summary()) >= {"lower", "upper", "midpoint", "gap"}


class TestQuenched:
    def test_time_formula(self):
        p = P(0.4, n=4096)
        th = theta(p)
        a = 3.0
        want = math.log(4096) / (2 * th) - math.log(math.log(4096)) / th - math.log(a) / th
        assert quenched_time(p, a) == pytest.approx(want, rel=1e-14)

    def test_all_plus_bias_is_one(self):
        R = bias_profile(P(0.4, n=50), np.ones(50), 3.0)
        assert np.allclose(R, 1.0, atol=1e-12)

    def test_quenched_mean_identity(self):
        p = P(0.4, n=48)
        rng = np.random.default_rng(3)
        x0 = rng.choice([-1, 1], size=48)
        t = 1.5
        prof = quenched_statistic(p, x0, t, 3000, seed=2, a_n=2.0, pi_replicas=200)
        want = math.exp(-theta(p) * t) * prof.R
        assert np.all(np.abs(prof.site_mean - want) <= 3.5 * prof.site_stderr + 1e-12)

    def test_signed_statistic(self):
        assert signed_statistic([[1, -1, 1, 1]], [1, -1, 1, -1])[0] == pytest.approx(0.5)

    def test_plus_start_is_distinguished_early(self):
        p = P(0.4, n=128)
        prof = quenched_statistic(p, np.ones(128), 0.5, 300, seed=1, pi_replicas=300)
        assert prof.verdict
        assert prof.condition_ok

    def test_calibration_reaches_coverage(self):
        cal = calibrate_constant(0.4, n=256, pilots=40, seed=1)
        assert cal.achieved >= 0.95
        assert cal.C > 0


class TestReports:
    def test_csv_columns_and_body(self, tmp_path):
        p = P(0.2)
        est = TvEstimate(TvKind.STATISTIC_LOWER, 1.0, 0.5, 0.01, "magnetization", 10)
        rows = [est.row("demo", p, 3)]
        text = csv_text(rows)
        assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
        assert text.splitlines()[1].startswith("demo,8,1,0.2,0.0,1.0,StatisticLower,0.5,0.01,10,3")
        path = tmp_path / "out.csv"
        write_csv(path, rows, {"wall_clock": 1.23, "seed": 3})
        raw = path.read_text()
        assert raw.startswith("# wall_clock: 1.23\n")
        assert read_csv_body(path) == text

    @settings(max_examples=30)
    @given(vals=st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=5))
    def test_floats_roundtrip(self, vals):
        p = P(0.1)
        rows = [TvEstimate(TvKind.EXACT_SMALL, 0.0, v, 0.0, "x").row("e", p, 0) for v in vals]
        body = csv_text(rows).splitlines()[1:]
        assert [float(line.split(",")[7]) for line in body] == vals

    def test_critical_advisory(self):
        assert critical_advisory(P(5.0)) is None
        assert "critical" in critical_advisory(P(0.45, d=2, n=4))
        assert critical_advisory(P(0.3, d=2, n=4)) is None
