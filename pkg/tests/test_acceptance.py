"""Acceptance criteria at their stated sizes and tolerances.

Each test prints one ``CRITERION k ... PASS|FAIL`` line with the measured
numbers and then asserts the criterion.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from isoperc.cli import EXIT_OK, main
from isoperc.clusters import exp_moment_estimator
from isoperc.dynamics import all_plus, cutoff_time, forward_snapshots, grand_coupling, magnetization_curve
from isoperc.experiments import (
    annealed_mixing_estimate,
    coupling_upper,
    cycle_cutoff,
    pi_magnetizations,
    quenched_typicality,
    read_csv_body,
    tv_lower_magnetization,
    window_scaling,
)
from isoperc.history import BRUTE_FORCE_LIMIT, brute_force_support, f_sup, f_upd, tail_checks
from isoperc.lattice import TorusShape
from isoperc.sampling import exact_pi, exact_tv_curve, mp_inequality_check, pi_sample_codes
from isoperc.updates import ModelParams, Rule, classify_units, derive_seeds, generate_stream, theta

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(k, title, ok, detail, started):
        with capsys.disabled():
            verdict = "PASS" if ok else "FAIL"
            print(f"\nCRITERION {k:2d} {title}: {verdict} ({time.time() - started:.1f}s) {detail}")
        return ok

    return emit


def P(beta, h=0.0, d=1, n=8, rule=Rule.HEAT_BATH):
    return ModelParams(beta, h, TorusShape(d, n), rule)


def test_criterion_01_magnetization_exactness(report):
    t0 = time.time()
    grid = np.arange(1, 16, dtype=float)
    worst = 0.0
    ok = True
    for k, beta in enumerate((0.0, 0.2, 0.4)):
        p = P(beta, n=512)
        c = magnetization_curve(p, grid, 20000, seed=100 + k)
        exact = np.exp(-theta(p) * grid)
        z = np.abs(c.estimate - exact) / np.maximum(c.stderr, 1e-300)
        worst = max(worst, float(z.max()))
        ok &= bool(np.all(np.abs(c.estimate - exact) <= 3 * c.stderr))
    assert report(1, "magnetization exactness", ok, f"max |z|={worst:.2f}", t0)


def test_criterion_02_infinite_temperature_cutoff(report):
    t0 = time.time()
    errs = {}
    for n in (256, 1024, 4096):
        r = cutoff_time(P(0.0, n=n), seed=n)
        errs[n] = r.t_m - 0.5 * math.log(n)
    ok = all(abs(e) <= 0.1 for e in errs.values())
    detail = " ".join(f"n={n}:{e:+.3f}" for n, e in errs.items())
    assert report(2, "beta=0 cutoff location", ok, detail, t0)


def test_criterion_03_support_oracle(report):
    t0 = time.time()
    rng = np.random.default_rng(3)
    compared = matched = overflow = skipped = drawn = 0
    while compared + overflow < 1000:
        drawn += 1
        d = int(rng.integers(1, 3))
        n = int(rng.integers(2, 9))
        beta = float(rng.choice([0.2, 0.4]))
        rule = Rule.HEAT_BATH if d == 2 or rng.random() < 0.5 else Rule.HEAT_BATH_COPY
        p = P(beta, d=d, n=n, rule=rule)
        T = float(rng.uniform(0, 3))
        s = generate_stream(p.shape, (0.0, T), drawn)
        A = [int(a) for a in rng.choice(p.shape.size, size=int(rng.integers(1, 3)), replace=False)]
        if len(f_upd(A, 0.0, T, s)) > BRUTE_FORCE_LIMIT:
            skipped += 1
            continue
        fs = f_sup(A, 0.0, T, s, p)
        if not fs.exact:
            overflow += 1
            continue
        compared += 1
        matched += frozenset(fs.support) == brute_force_support(A, 0.0, T, s, p)
    ok = matched == compared
    detail = (f"{matched}/{compared} exact matches, overflow rate {overflow / 1000:.3f}, "
              f"{skipped} draws beyond the enumeration limit {BRUTE_FORCE_LIMIT}")
    assert report(3, "support oracle equivalence", ok, detail, t0)


def _minus_probability(beta, field_sum):
    # Heat-bath conditional probability of writing -1.
    return 0.5 * (1.0 - np.tanh(beta * field_sum))


def test_criterion_04_oblivious_sound_complete(report):
    t0 = time.time()
    rng = np.random.default_rng(4)
    total = unsound = 0
    dependent_units = []
    for block in range(100):
        d = int(rng.integers(1, 4))
        beta = float(rng.uniform(0, 1.5))
        p = P(beta, d=d, n=3)
        u = rng.random(1000)
        cls = classify_units(u, p)
        deg = 2 * d
        # Every neighbor pattern: the local field is the pattern sum.
        pats = np.array(np.meshgrid(*[[-1, 1]] * deg, indexing="ij")).reshape(deg, -1).T
        pm = _minus_probability(beta, pats.sum(axis=1))
        can_minus = u[:, None] <= pm[None, :]
        minus_any, minus_all = can_minus.any(axis=1), can_minus.all(axis=1)
        unsound += int(np.sum((cls == -1) & ~minus_all) + np.sum((cls == 1) & minus_any))
        total += u.shape[0]
        dependent_units += [(beta, d, float(x)) for x in u[cls == 0]]
    pick = rng.choice(len(dependent_units), size=min(1000, len(dependent_units)), replace=False)
    missing = 0
    for i in pick:
        beta, d, x = dependent_units[i]
        deg = 2 * d
        pats = np.array(np.meshgrid(*[[-1, 1]] * deg, indexing="ij")).reshape(deg, -1).T
        outs = np.where(x <= _minus_probability(beta, pats.sum(axis=1)), -1, 1)
        missing += not (np.any(outs == -1) and np.any(outs == 1))
    ok = unsound == 0 and missing == 0
    detail = f"{total} events, {unsound} unsound; {len(pick)} dependent checked, {missing} without counterexample"
    assert report(4, "oblivious soundness/completeness", ok, detail, t0)


@pytest.fixture(scope="module")
def exact_small():
    p = P(0.3)
    grid = [1.0, 2.0, 4.0]
    return p, grid, exact_tv_curve(p, np.ones(8), grid)


def test_criterion_05_exact_tv_oracle(report, exact_small):
    t0 = time.time()
    p, grid, curve = exact_small
    _, _, codes = forward_snapshots(p, all_plus(p), grid, derive_seeds(5, 10 ** 6, 0x55))
    gaps, sandwich = [], True
    pi_stat = pi_magnetizations(p, 200000, 5)
    for k, t in enumerate(grid):
        emp = np.bincount(codes[:, k], minlength=256) / codes.shape[0]
        gaps.append(abs(0.5 * np.abs(emp - curve.pi).sum() - curve.tv[k]))
        low = tv_lower_magnetization(p, t, 200000, seed=50 + k, pi_stat=pi_stat)
        up = coupling_upper(p, t, 200000, seed=60 + k)
        sandwich &= low.raw <= curve.tv[k] + 3 * low.stderr and curve.tv[k] <= up.raw + 3 * up.stderr
    ok = max(gaps) <= 0.02 and sandwich
    detail = f"max |MC - exact|={max(gaps):.4f}, exact={np.round(curve.tv, 4).tolist()}, sandwich={sandwich}"
    assert report(5, "exact TV oracle", ok, detail, t0)


def test_criterion_06_cftp_exactness(report):
    t0 = time.time()
    p = P(0.3)
    pi = exact_pi(p).probabilities
    counts = np.bincount(pi_sample_codes(p, 10 ** 6, 6), minlength=256)
    tv = 0.5 * np.abs(counts / 10 ** 6 - pi).sum()
    pval = stats.chisquare(counts, 10 ** 6 * pi).pvalue
    ok = tv < 0.01 and pval > 0.001
    assert report(6, "CFTP exactness", ok, f"TV={tv:.4f} chi2 p={pval:.3f}", t0)


def test_criterion_07_history_tails(report):
    t0 = time.time()
    ok = True
    parts = []
    for d, n in ((1, 128), (2, 96)):
        for h in (0.5, 1.0):
            ell = math.ceil(20 * d * h) + 5
            r = tail_checks(P(0.2, d=d, n=n), h, ell, 4000, seed=70 + d, cap=64)
            esc_ok = r.p_escape <= r.escape_bound + 3 * r.se_escape
            sup_ok = abs(r.p_support - r.m_h) <= 3 * math.hypot(r.se_support, r.se_m)
            ok &= esc_ok and sup_ok
            parts.append(f"d={d},h={h}: esc={r.p_escape:.4f} P(sup)={r.p_support:.4f} m={r.m_h:.4f} "
                         f"z={r.support_z:+.2f} overflow={r.overflow}")
    assert report(7, "history tails", ok, "; ".join(parts), t0)


def test_criterion_08_monotone_coupling(report):
    t0 = time.time()
    rng = np.random.default_rng(8)
    bad = 0
    for i in range(10 ** 4):
        d = int(rng.integers(1, 3))
        p = P(float(rng.uniform(0, 1.5)), float(rng.uniform(-1, 1)), d=d, n=int(rng.integers(2, 7)))
        x = rng.choice(np.array([-1, 1], dtype=np.int8), size=p.shape.size)
        y = np.maximum(x, rng.choice(np.array([-1, 1], dtype=np.int8), size=p.shape.size))
        s = generate_stream(p.shape, (0.0, 3.0), i)
        res = grand_coupling([x, y], s, p, 3.0)
        bad += res.violations > 0 or not res.monotone_certified
    assert report(8, "monotone coupling", bad == 0, f"{bad} of 10000 pairs lost order", t0)


def test_criterion_09_exponential_moment(report):
    t0 = time.time()
    p = P(0.2, n=1024, rule=Rule.HEAT_BATH_COPY)
    th = theta(p)
    t_m = cycle_cutoff(p)
    ests = {s: exp_moment_estimator(p, t_m + s, 4000, seed=90 + s) for s in (0, 2, 4, 8)}
    ss = sorted(ests)
    mono = all(ests[b].estimate <= ests[a].estimate + 3 * math.hypot(ests[a].stderr, ests[b].stderr)
               for a, b in zip(ss, ss[1:]))
    bounded = {s: ests[s].estimate <= math.exp(math.exp(-2 * th * s)) + 3 * ests[s].stderr for s in ss}
    p0 = P(0.0, n=1024, rule=Rule.HEAT_BATH_COPY)
    t_star = 3.0
    e0 = exp_moment_estimator(p0, t_star, 4000, seed=99)
    closed = (1 + math.exp(-2 * t_star)) ** 1024
    closed_ok = abs(e0.estimate - closed) <= 3 * e0.stderr
    ok = mono and all(bounded.values()) and closed_ok
    vals = " ".join(f"s={s}:{ests[s].estimate:.3f}+-{ests[s].stderr:.3f}(<= {math.exp(math.exp(-2 * th * s)):.3f}"
                    f" {'ok' if bounded[s] else 'no'})" for s in ss)
    detail = f"{vals}; nonincreasing={mono}; beta=0 {e0.estimate:.4f}+-{e0.stderr:.4f} vs {closed:.4f}"
    assert report(9, "exponential moment", ok, detail, t0)


def test_criterion_10_mp_inequality(report):
    t0 = time.time()
    r = mp_inequality_check(1000, seed=10)
    ok = r.pass_rate == 1.0
    assert report(10, "L2 inequality", ok, f"pass rate {r.pass_rate:.3f}, worst slack {r.worst_slack:.3e}", t0)


def test_criterion_11_window_scaling(report):
    t0 = time.time()
    w = window_scaling(0.4, [2 ** k for k in range(8, 15)], seed=11)
    ok = abs(w.slope) < 0.1
    detail = f"slope={w.slope:+.4f} offsets={np.round(w.offsets, 3).tolist()}"
    assert report(11, "O(1) window", ok, detail, t0)


def test_criterion_12_annealed_halving(report):
    t0 = time.time()
    res = annealed_mixing_estimate(P(0.4, n=2 ** 14), seed=12)
    ok = 0.4 <= res.ratio <= 0.65
    detail = (f"ratio={res.ratio:.3f} uniform={np.round(res.uniform.bracket, 3).tolist()} "
              f"plus={np.round(res.plus.bracket, 3).tolist()} inconclusive={res.inconclusive}")
    assert report(12, "annealed halving", ok, detail, t0)


def test_criterion_13_quenched_typicality(report):
    t0 = time.time()
    p = P(0.4, n=2 ** 14)
    res = quenched_typicality(p, samples=20, replicas=200, seed=13)
    prof = res.profiles[0]
    sites = np.random.default_rng(13).choice(p.shape.size, size=32, replace=False)
    want = math.exp(-theta(p) * res.t) * prof.R[sites]
    within = np.abs(prof.site_mean[sites] - want) <= 3 * prof.site_stderr[sites]
    ok = res.distinguished >= 18 and bool(within.all())
    detail = (f"{res.distinguished}/20 distinguished at t={res.t:.3f} (C={res.calibration.C:.4f}); "
              f"mean identity {int(within.sum())}/32 sites")
    assert report(13, "quenched typicality", ok, detail, t0)


DETERMINISM_RUNS = [
    ("simulate", "--n", "64", "--beta", "0.3"),
    ("magnetization", "--n", "64", "--replicas", "200", "--grid", "1,2,4"),
    ("cutoff", "--n", "64", "--replicas", "200"),
    ("couple", "--n", "32", "--replicas", "100", "--grid", "0,2,6"),
    ("clusters", "--n", "64", "--beta", "0.3", "--tstar", "4"),
    ("expmoment", "--n", "64", "--replicas", "100", "--tstar", "4"),
    ("blocks", "--n", "64", "--d", "1", "--beta", "0.2", "--sstar", "4", "--lambda", "2"),
    ("cftp", "--n", "8", "--replicas", "200"),
    ("exact-tv", "--n", "6", "--grid", "0,1,2"),
    ("annealed", "--n", "64", "--beta", "0.4", "--replicas", "200"),
    ("quenched", "--n", "1024", "--beta", "0.4", "--replicas", "50", "--samples", "2"),
    ("mp-check", "--trials", "50"),
    ("svg", "--n", "32", "--tstar", "3"),
]


def test_criterion_14_determinism(report, tmp_path):
    t0 = time.time()
    diffs = []
    for k, args in enumerate(DETERMINISM_RUNS):
        bodies = []
        for j in range(2):
            out = tmp_path / f"{args[0]}-{j}"
            code = main([*args, "--seed", "14", "--out", str(out)])
            if code not in (EXIT_OK, 4):
                diffs.append(f"{args[0]} exit {code}")
                break
            bodies.append(read_csv_body(f"{out}.csv"))
        else:
            if bodies[0] != bodies[1]:
                diffs.append(args[0])
    ok = not diffs
    detail = f"{len(DETERMINISM_RUNS)} experiments" + (f", differing: {diffs}" if diffs else ", bodies identical")
    assert report(14, "determinism", ok, detail, t0)
