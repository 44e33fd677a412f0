"""Command-line entry point.

Every subcommand writes a CSV (``<out>.csv``, or stdout without ``--out``)
with the experiment columns, a JSON summary next to it, and for ``svg`` the
picture itself. Output files start with ``#`` header lines carrying the
package version, the configuration as given, the resolved configuration
and the wall clock.

Exit codes: 0 success, 2 configuration error, 3 size error, 4 inconclusive
experiment.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .lattice import TorusShape, largest_block_side
from .sampling import SizeError
from .updates import ModelParams, Rule, UnsupportedRuleError, derive_seed, derive_seeds

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIZE = 3
EXIT_INCONCLUSIVE = 4

EXPERIMENTS = ("simulate", "magnetization", "cutoff", "couple", "clusters", "expmoment", "blocks",
               "cftp", "exact-tv", "annealed", "quenched", "mp-check", "svg")


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; flat keys mirror the flags."""

    experiment: str
    d: int = 1
    n: int = 64
    beta: float = 0.2
    h: float = 0.0
    rule: str = Rule.HEAT_BATH.value
    tstar: float | None = None
    sstar: float = 25.0
    lam: int = 5
    replicas: int = 1000
    seed: int = 0
    cap: int = 20
    out: str | None = None
    threads: int | None = None
    grid: list | None = None
    eps: float = 0.25
    trials: int = 1000
    samples: int = 20
    start: str = "plus"
    block_side: int | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "experiment" not in data:
            raise ConfigError("config needs an experiment")
        return cls(**data)

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.experiment != "mp-check":
            if self.d < 1:
                raise ConfigError("d must be at least 1")
            if self.n < 1:
                raise ConfigError("n must be at least 1")
        if self.replicas < 1:
            raise ConfigError("replicas must be positive")
        if self.trials < 1 or self.samples < 1:
            raise ConfigError("trials and samples must be positive")
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        if self.lam < 1 or not self.sstar / self.lam > 1:
            raise ConfigError("sstar / lambda must exceed 1")
        if self.cap < 1:
            raise ConfigError("cap must be positive")
        if self.tstar is not None and self.tstar < 0:
            raise ConfigError("tstar must be nonnegative")
        if self.start not in ("plus", "minus", "uniform"):
            raise ConfigError("start must be plus, minus or uniform")
        if self.grid is not None and any(float(t) < 0 for t in self.grid):
            raise ConfigError("grid times must be nonnegative")
        try:
            Rule(self.rule)
        except ValueError as exc:
            raise ConfigError(f"unknown rule {self.rule!r}") from exc
        if self.experiment != "mp-check":
            try:
                self.params()
            except (ValueError, UnsupportedRuleError) as exc:
                raise ConfigError(str(exc)) from exc

    def params(self) -> ModelParams:
        return ModelParams(float(self.beta), float(self.h), TorusShape(int(self.d), int(self.n)),
                           Rule(self.rule))


# ----------------------------------------------------------------------------
# Helpers


def _start_config(cfg: RunConfig, params: ModelParams) -> np.ndarray:
    size = params.shape.size
    if cfg.start == "plus":
        return np.ones(size, dtype=np.int8)
    if cfg.start == "minus":
        return -np.ones(size, dtype=np.int8)
    rng = np.random.default_rng(derive_seed(cfg.seed, 0x57A))
    return (2 * rng.integers(0, 2, size=size) - 1).astype(np.int8)


def _cutoff_guess(params: ModelParams, cfg: RunConfig) -> float:
    from .dynamics import cutoff_time
    from .experiments import cycle_cutoff

    if params.shape.d == 1 and params.h == 0.0:
        return cycle_cutoff(params)
    return cutoff_time(params, budget=min(cfg.replicas, 2000), seed=derive_seed(cfg.seed, 0x7C)).t_m


def _grid(cfg: RunConfig, default) -> list:
    return [float(t) for t in (cfg.grid if cfg.grid is not None else default)]


def _row(cfg: RunConfig, params: ModelParams | None, t, kind, value, stderr, replicas) -> dict:
    return {"experiment": cfg.experiment, "n": params.shape.n if params else 0,
            "d": params.shape.d if params else 0, "beta": params.beta if params else 0.0,
            "h": params.h if params else 0.0, "t": float(t), "kind": kind, "value": float(value),
            "stderr": float(stderr), "replicas": int(replicas), "seed": int(cfg.seed)}


@dataclass
class RunOutput:
    rows: list
    summary: dict
    resolved: dict = field(default_factory=dict)
    svg: str | None = None
    inconclusive: bool = False


# ----------------------------------------------------------------------------
# Experiments


def _simulate(cfg, p):
    from .dynamics import simulate
    from .updates import generate_stream

    t_end = cfg.tstar if cfg.tstar is not None else 10.0
    grid = _grid(cfg, np.linspace(0.0, t_end, 11))
    stream = generate_stream(p.shape, (0.0, max(grid)), cfg.seed)
    x0 = _start_config(cfg, p)
    rows = [_row(cfg, p, t, "Magnetization", simulate(x0, stream, p, t).mean(), 0.0, 1) for t in grid]
    return RunOutput(rows, {"events": len(stream), "fingerprint": stream.fingerprint()})


def _magnetization(cfg, p):
    from .dynamics import magnetization_curve

    t_end = cfg.tstar if cfg.tstar is not None else 15.0
    grid = _grid(cfg, np.arange(1.0, t_end + 1e-9))
    mc = magnetization_curve(p, grid, cfg.replicas, cfg.seed)
    rows = [_row(cfg, p, t, "Magnetization", mc.estimate[i], mc.stderr[i], cfg.replicas)
            for i, t in enumerate(mc.grid)]
    rows += [_row(cfg, p, t, "VolumeMagnetization", mc.volume_estimate[i], mc.volume_stderr[i],
                  cfg.replicas) for i, t in enumerate(mc.grid)]
    return RunOutput(rows, {"grid": mc.grid, "estimate": mc.estimate, "stderr": mc.stderr})


def _cutoff(cfg, p):
    from .dynamics import cutoff_time

    res = cutoff_time(p, budget=cfg.replicas, seed=cfg.seed)
    half = 0.5 * (res.ci[1] - res.ci[0])
    rows = [_row(cfg, p, res.t_m, "CutoffTime", res.t_m, half, cfg.replicas)]
    rows += [_row(cfg, p, pr["t"], "VolumeMagnetization", pr["estimate"], pr["stderr"], cfg.replicas)
             for pr in res.probes]
    return RunOutput(rows, {"t_m": res.t_m, "ci": res.ci, "noise_limited": res.noise_limited,
                            "target": res.target, "equivalence": res.equivalence})


def _couple(cfg, p):
    from .experiments import coupling_upper

    t_end = cfg.tstar if cfg.tstar is not None else 2.0 * _cutoff_guess(p, cfg)
    grid = _grid(cfg, np.linspace(0.0, t_end, 11))
    ests = [coupling_upper(p, t, cfg.replicas, derive_seed(cfg.seed, 0xC9, k)) for k, t in enumerate(grid)]
    rows = [e.row(cfg.experiment, p, cfg.seed) for e in ests]
    return RunOutput(rows, {"density": [e.extra["disagreement_density"] for e in ests]})


def _cluster_partition(cfg, p):
    from .clusters import build_clusters
    from .updates import generate_stream

    t_star = cfg.tstar if cfg.tstar is not None else _cutoff_guess(p, cfg)
    stream = generate_stream(p.shape, (0.0, t_star), cfg.seed)
    return stream, build_clusters(stream, p, t_star, cap=cfg.cap), t_star


def _clusters(cfg, p):
    stream, part, t_star = _cluster_partition(cfg, p)
    counts = part.counts()
    rows = [_row(cfg, p, t_star, c.capitalize(), counts[c], 0.0, 1) for c in ("red", "blue", "green")]
    side = largest_block_side(p.shape.n, cfg.block_side or 16)
    return RunOutput(rows, part.summary(side), {"block_side": side, "tstar": t_star})


def _expmoment(cfg, p):
    from .clusters import exp_moment_estimator

    t_star = cfg.tstar if cfg.tstar is not None else _cutoff_guess(p, cfg)
    est = exp_moment_estimator(p, t_star, cfg.replicas, cfg.seed, cfg.cap)
    rows = [_row(cfg, p, t_star, "ExpMoment", est.estimate, est.stderr, cfg.replicas),
            _row(cfg, p, t_star, "ExpMomentHeuristic", est.heuristic, 0.0, cfg.replicas)]
    return RunOutput(rows, dataclasses.asdict(est), {"tstar": t_star})


def _blocks(cfg, p):
    from .clusters import PhaseSchedule, block_components, component_weights, cut_set
    from .updates import generate_stream

    t_m = _cutoff_guess(p, cfg)
    sched = PhaseSchedule(t_m, cfg.sstar, cfg.lam)
    want = cfg.block_side if cfg.block_side is not None else sched.block_side_target
    stream = generate_stream(p.shape, (0.0, sched.t_star), cfg.seed)
    an = block_components(stream, p, sched, want, cap=cfg.cap)
    rows = [_row(cfg, p, sched.t_star, "Components", len(an.components), 0.0, 1)]
    comps = []
    weights = component_weights(an)
    for c, w in zip(an.components, weights):
        k, chi, xi = cut_set(c, stream, sched, p)
        rows.append(_row(cfg, p, sched.tau(k), "CutSetXi", xi, 0.0, 1))
        comps.append({"members": list(c.members), "A": list(c.A), "B": list(c.B), "k": k,
                      "chi": list(chi), "xi": xi, "weight": w.weight, "weight_exact": w.exact,
                      "exact": c.exact})
    resolved = {"block_side": an.grid.side, "block_side_requested": want,
                "block_side_adjusted": an.grid.side != want, "t_m": t_m}
    return RunOutput(rows, {"components": comps, "overflow": an.overflow}, resolved)


def _cftp(cfg, p):
    from .sampling import cftp_batch

    seeds = derive_seeds(cfg.seed, cfg.replicas, 0xCF)
    x, depths = cftp_batch(p, seeds)
    dens = x.mean(axis=1)
    se = float(dens.std(ddof=1) / math.sqrt(len(dens))) if len(dens) > 1 else 0.0
    dse = float(depths.std(ddof=1) / math.sqrt(len(depths))) if len(depths) > 1 else 0.0
    rows = [_row(cfg, p, 0.0, "MagnetizationDensity", dens.mean(), se, cfg.replicas),
            _row(cfg, p, 0.0, "CoalescenceDepth", depths.mean(), dse, cfg.replicas)]
    return RunOutput(rows, {"depths": depths, "max_depth": int(depths.max())})


def _exact_tv(cfg, p):
    from .sampling import exact_tv_curve

    t_end = cfg.tstar if cfg.tstar is not None else 8.0
    grid = _grid(cfg, np.linspace(0.0, t_end, 17))
    curve = exact_tv_curve(p, _start_config(cfg, p), grid)
    rows = [_row(cfg, p, t, "ExactSmall", curve.tv[i], 0.0, 0) for i, t in enumerate(grid)]
    return RunOutput(rows, {"grid": grid, "tv": curve.tv, "truncation": curve.truncation})


def _annealed(cfg, p):
    from .experiments import annealed_mixing_estimate

    res = annealed_mixing_estimate(p, cfg.eps, cfg.replicas, cfg.replicas, cfg.seed)
    rows = []
    for br, tag in ((res.uniform, "Uniform"), (res.plus, "Plus")):
        rows.append(_row(cfg, p, br.lower_crossing.t, f"Tmix{tag}Lower", br.lower_crossing.t, 0.0, cfg.replicas))
        rows.append(_row(cfg, p, br.upper_crossing.t, f"Tmix{tag}Upper", br.upper_crossing.t, 0.0, cfg.replicas))
        rows.append(_row(cfg, p, br.midpoint, f"Tmix{tag}", br.midpoint, 0.5 * abs(br.gap), cfg.replicas))
    rows.append(_row(cfg, p, res.t_m, "Ratio", res.ratio, 0.0, cfg.replicas))
    return RunOutput(rows, res.summary(), inconclusive=res.inconclusive)


def _quenched(cfg, p):
    from .experiments import quenched_typicality

    res = quenched_typicality(p, cfg.samples, cfg.replicas, cfg.seed)
    rows = [e.tv.row(cfg.experiment, p, cfg.seed) for e in res.profiles]
    rows.append(_row(cfg, p, res.t, "FractionDistinguished", res.fraction, 0.0, cfg.replicas))
    return RunOutput(rows, res.summary(), {"C": res.calibration.C, "a_n": res.a_n, "t": res.t})


def _mp_check(cfg, p):
    from .sampling import mp_inequality_check

    res = mp_inequality_check(cfg.trials, cfg.seed)
    rows = [_row(cfg, None, 0.0, "PassRate", res.pass_rate, 0.0, cfg.trials)]
    return RunOutput(rows, dataclasses.asdict(res))


def _svg(cfg, p):
    import io

    from .clusters import render_slab_svg

    stream, part, t_star = _cluster_partition(cfg, p)
    buf = io.StringIO()
    text = render_slab_svg(part, stream, buf)
    counts = part.counts()
    rows = [_row(cfg, p, t_star, c.capitalize(), counts[c], 0.0, 1) for c in ("red", "blue", "green")]
    return RunOutput(rows, {"counts": counts}, {"tstar": t_star}, svg=text)


DISPATCH = {"simulate": _simulate, "magnetization": _magnetization, "cutoff": _cutoff,
            "couple": _couple, "clusters": _clusters, "expmoment": _expmoment, "blocks": _blocks,
            "cftp": _cftp, "exact-tv": _exact_tv, "annealed": _annealed, "quenched": _quenched,
            "mp-check": _mp_check, "svg": _svg}


# ----------------------------------------------------------------------------
# Orchestration


def _set_threads(cfg: RunConfig) -> int:
    import numba

    want = cfg.threads
    if want is None:
        env = os.environ.get("ISOPERC_THREADS")
        want = int(env) if env else os.cpu_count() or 1
    want = max(1, min(int(want), numba.config.NUMBA_NUM_THREADS))
    with warnings.catch_warnings():
        # Old system TBB builds are rejected with a warning; numba falls back on its own.
        warnings.filterwarnings("ignore", message="The TBB threading layer")
        numba.set_num_threads(want)
    return want


def run(cfg: RunConfig, stdout=None) -> int:
    """Validate, dispatch, write artifacts; returns the exit status."""
    from .experiments import critical_advisory, csv_text, header_text, summary_json

    stdout = sys.stdout if stdout is None else stdout
    given = cfg.to_json()
    cfg.validate()
    threads = _set_threads(cfg)
    params = cfg.params() if cfg.experiment != "mp-check" else None
    t0 = time.time()
    out = DISPATCH[cfg.experiment](cfg, params)
    elapsed = time.time() - t0
    resolved = json.loads(given)
    resolved.update(out.resolved)
    resolved["threads"] = threads
    header = {"version": __version__, "experiment": cfg.experiment, "seed": cfg.seed,
              "config": json.loads(given), "resolved": resolved,
              "wall_clock": {"finished": datetime.now(timezone.utc).isoformat(), "seconds": elapsed}}
    if params is not None:
        adv = critical_advisory(params)
        if adv:
            header["advisory"] = adv
    # The config line is the serialized config verbatim.
    rest = {k: v for k, v in header.items() if k != "config"}
    head = f"# config: {given}\n" + header_text(rest)
    body = csv_text(out.rows)
    summary = {"header": header, "summary": out.summary, "inconclusive": out.inconclusive}
    if cfg.out:
        base = Path(cfg.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{base}.csv").write_text(head + body, encoding="utf-8")
        Path(f"{base}.json").write_text(summary_json(summary) + "\n", encoding="utf-8")
        if out.svg is not None:
            svg = out.svg.replace("<svg", "<!-- " + json.dumps(header, sort_keys=True).replace("--", "- -")
                                  + " -->\n<svg", 1)
            Path(f"{base}.svg").write_text(svg, encoding="utf-8")
    else:
        stdout.write(head + body)
    return EXIT_INCONCLUSIVE if out.inconclusive else EXIT_OK


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isoperc", description="Information percolation experiments "
                                 "for Glauber dynamics of the Ising model.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", help="JSON file with flat keys; flags override it")
    ap.add_argument("--d", type=int)
    ap.add_argument("--n", type=int)
    ap.add_argument("--beta", type=float)
    ap.add_argument("--h", type=float)
    ap.add_argument("--rule", choices=[r.value for r in Rule])
    ap.add_argument("--tstar", type=float)
    ap.add_argument("--sstar", type=float)
    ap.add_argument("--lambda", dest="lam", type=int)
    ap.add_argument("--replicas", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--cap", type=int)
    ap.add_argument("--out")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--grid", help="comma-separated times")
    ap.add_argument("--eps", type=float)
    ap.add_argument("--trials", type=int)
    ap.add_argument("--samples", type=int)
    ap.add_argument("--start", choices=["plus", "minus", "uniform"])
    ap.add_argument("--block-side", dest="block_side", type=int)
    return ap


def build_config(argv) -> RunConfig:
    ap = _parser()
    ns = ap.parse_args(argv)
    data: dict = {}
    if ns.config:
        try:
            data = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data["experiment"] = ns.experiment
    for key, val in vars(ns).items():
        if key in ("config", "experiment") or val is None:
            continue
        if key == "grid":
            try:
                val = [float(t) for t in val.split(",") if t.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad grid: {val}") from exc
        data[key] = val
    return RunConfig.from_dict(data)


def _error(kind: str, msg: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = build_config(argv)
        return run(cfg)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    except SizeError as exc:
        _error("size", str(exc))
        return EXIT_SIZE
    except (ConfigError, TypeError, ValueError) as exc:
        _error("config", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
