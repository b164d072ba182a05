"""Command-line front end: problem ingestion, run orchestration and report emission.

Exit codes: 0 when every verdict HOLDS, 2 when any is VIOLATED, 3 when any is
INCONCLUSIVE (and none VIOLATED), 1 on errors.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SMPV_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import solve_adjoint_scalar_chain, solve_adjoints_convex
from .conditions import (CONDITIONS, REPORT_SCHEMA, _jsonable, check_classical_singular, check_corollary_degenerate,
                         check_integral_condition, check_maximum_principle, check_pointwise_convex,
                         check_pointwise_nonconvex, check_pontryagin_singular, check_variational_equality,
                         provenance, theta_scaling_probe)
from .errors import ConfigError, SchemaMismatch, SmpvError
from .problem import validate_spec
from .scenarios import get_scenario, load_problem
from .sde import make_context, simulate_state, simulate_transition, write_ensemble_csv
from .stats import HOLDS, INCONCLUSIVE, VIOLATED, combine_verdicts

COMMANDS = ("validate", "simulate", "adjoints", "check", "sweep", "report")
EXIT_CODES = {HOLDS: 0, VIOLATED: 2, INCONCLUSIVE: 3}
DEFAULT_GRID = (0.2, 0.1, 0.05, 0.025)
THETA_SLOPE, THETA_BAND = 1.5, 0.15


@dataclass
class RunConfig:
    """Everything one invocation needs.  ``seed`` has no default on purpose."""

    command: str
    seed: int | None = None
    scenario: str | None = None
    problem: str | None = None
    steps: int = 512
    paths: int = 20000
    backend: str = "auto"
    conditions: tuple = ("maximum_principle",)
    v_grid: tuple | None = None
    epsilon_grid: tuple = DEFAULT_GRID
    theta_grid: tuple = DEFAULT_GRID
    t_bar: float = 0.5
    spike: float | None = None
    sweep: str = "theta"
    tol_scale: float = 5.0
    out: str | None = None
    inputs: tuple = ()

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.command == "report":
            if not self.inputs:
                raise ConfigError("report needs at least one input file")
            return
        if self.seed is None:
            raise ConfigError("a seed is mandatory (--seed)")
        if self.steps < 16:
            raise ConfigError(f"N = {self.steps} is below the minimum of 16 steps")
        if self.paths < 100:
            raise ConfigError(f"M = {self.paths} is below the minimum of 100 paths")
        if (self.scenario is None) == (self.problem is None):
            raise ConfigError("give exactly one of --scenario and --problem")
        if self.backend not in ("auto", "analytic", "regression"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.sweep not in ("theta", "epsilon"):
            raise ConfigError(f"unknown sweep kind {self.sweep!r}")
        unknown = [c for c in self.conditions if c not in CONDITIONS]
        if unknown:
            raise ConfigError(f"unknown conditions {unknown}; choose from {list(CONDITIONS)}")
        if self.tol_scale <= 0:
            raise ConfigError("tolerance scale must be positive")


# ---------------------------------------------------------------------------
# report emission


def _as_dict(report) -> dict:
    return report if isinstance(report, dict) else report.to_dict()


def emit_report(reports) -> dict:
    """Merge reports into one summary with a stable layout.

    Raises :class:`SchemaMismatch` unless every report carries the current schema.
    """
    ds = [_as_dict(r) for r in reports]
    if not ds:
        raise ValueError("emit_report needs at least one report")
    for d in ds:
        if d.get("schema") != REPORT_SCHEMA:
            raise SchemaMismatch(f"report schema {d.get('schema')!r} is not {REPORT_SCHEMA!r}")
    verdicts = [d["verdict"] for d in ds if "verdict" in d]
    overall = combine_verdicts(verdicts) if verdicts else HOLDS
    return {"schema": REPORT_SCHEMA, "version": __version__, "verdict": overall, "exit_code": EXIT_CODES[overall],
            "provenance": ds[0].get("provenance", {}), "reports": ds}


def dumps(doc: dict) -> str:
    return json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------------------
# orchestration


def _load(config: RunConfig):
    if config.scenario is not None:
        sc = get_scenario(config.scenario)
        return sc.spec, sc.control, sc
    spec, control = load_problem(config.problem)
    if control is None:
        raise ConfigError("problem file has no candidate control")
    return spec, control, None


def _probes(config: RunConfig, spec):
    if config.v_grid is None:
        return None
    v = np.asarray(config.v_grid, dtype=float)
    return v.reshape(-1, spec.control_dim)


def _spike(config: RunConfig, spec):
    if config.spike is not None:
        return config.spike
    if config.v_grid:
        return float(config.v_grid[0])
    region = spec.control_region
    return float(region.hi[0] if region.kind == "box" else region.points[-1][0])


def theta_report(probe, state, adjoints) -> dict:
    """Theta probe as a report; HOLDS when the RMS slope lies within the band around 3/2."""
    gap = abs(probe.rms_slope - THETA_SLOPE)
    se = probe.rms_slope_stderr if np.isfinite(probe.rms_slope_stderr) else 0.0
    if gap <= THETA_BAND:
        vd = HOLDS
    elif gap - 2 * se > THETA_BAND:
        vd = VIOLATED
    else:
        vd = INCONCLUSIVE
    d = probe.to_dict()
    d.pop("samples", None)
    return {"schema": REPORT_SCHEMA, "condition": "theta_scaling", "verdict": vd, "tol": THETA_BAND,
            "value": probe.rms_slope, "value_stderr": se, "expected": THETA_SLOPE,
            "provenance": provenance(state, adjoints), "series": d, "notes": []}


def _check_one(name, config, spec, control, scenario, ctx, state, cache):
    tol_scale = config.tol_scale
    probes = _probes(config, spec)

    def convex():
        if "convex" not in cache:
            cache["convex"] = solve_adjoints_convex(spec, state, config.backend)
        return cache["convex"]

    def chain():
        if "chain" not in cache:
            cache["chain"] = solve_adjoint_scalar_chain(spec, state, config.backend)
        return cache["chain"]

    if name == "maximum_principle":
        return check_maximum_principle(spec, state, convex(), probes, tol_scale=tol_scale)
    if name == "classical_singular":
        return check_classical_singular(spec, state, convex(), tol_scale=tol_scale)
    if name == "pontryagin_singular":
        return check_pontryagin_singular(spec, state, convex(), probes, tol_scale=tol_scale)
    if name == "integral_condition":
        return check_integral_condition(spec, state, convex(), tol_scale=tol_scale, v_list=probes)
    if name == "pointwise_convex":
        closed = scenario.nabla_S if scenario is not None else None
        return check_pointwise_convex(spec, state, convex(), v_list=probes, tol_scale=tol_scale,
                                      nabla_S_closed_form=closed)
    if name == "pointwise_nonconvex":
        closed = scenario.nabla_SS if scenario is not None else None
        return check_pointwise_nonconvex(spec, state, chain(), nabla_SS=closed, V=probes, tol_scale=tol_scale)
    if name == "corollary_degenerate":
        return check_corollary_degenerate(spec, state, chain(), V=probes, tol_scale=tol_scale)
    if name == "variational_equality":
        return check_variational_equality(spec, control, config.t_bar, config.epsilon_grid, _spike(config, spec),
                                          ctx, config.backend)
    if name == "theta_scaling":
        adj = convex()
        probe = theta_scaling_probe(spec, state, adj, simulate_transition(spec, state), config.t_bar,
                                    _spike(config, spec), list(config.theta_grid))
        return theta_report(probe, state, adj)
    raise ConfigError(f"unknown condition {name!r}")


def _write(out: Path | None, name: str, text: str) -> None:
    if out is not None:
        (out / name).write_text(text)


def run(config: RunConfig) -> tuple[int, dict]:
    """Execute one subcommand; returns the exit code and the summary document."""
    config.validate()
    out = Path(config.out) if config.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if config.command == "report":
        docs = []
        for path in config.inputs:
            d = json.loads(Path(path).read_text())
            docs.extend(d["reports"] if "reports" in d and d.get("schema") == REPORT_SCHEMA else [d])
        summary = emit_report(docs)
        _write(out, "summary.json", dumps(summary))
        return summary["exit_code"], summary

    spec, control, scenario = _load(config)
    if config.command == "validate":
        rep = validate_spec(spec)
        doc = {"schema": REPORT_SCHEMA, "command": "validate", "valid": rep.valid, "checks": rep.checks,
               "worst_derivative_error": rep.worst_derivative_error, "version": __version__}
        if scenario is not None:
            doc["self_check"] = scenario.self_check(seed=config.seed)
        _write(out, "validate.json", dumps(doc))
        return (0 if rep.valid else 1), doc

    ctx = make_context(spec.horizon, config.steps, config.paths, config.seed)
    state = simulate_state(spec, control, ctx)
    if config.command == "simulate":
        m = state.x.mean(axis=0)
        se = state.x.std(axis=0, ddof=1) / np.sqrt(ctx.paths)
        doc = {"schema": REPORT_SCHEMA, "command": "simulate", "provenance": provenance(state),
               "series": {"t": ctx.times, "mean_x": m, "stderr_x": se}}
        if out is not None:
            write_ensemble_csv(out / "state.csv", ctx.times, state.x, max_paths=min(ctx.paths, 100))
        _write(out, "simulate.json", dumps(doc))
        return 0, _jsonable(doc)

    if config.command == "adjoints":
        first, second = solve_adjoints_convex(spec, state, config.backend)
        doc = {"schema": REPORT_SCHEMA, "command": "adjoints", "provenance": provenance(state, (first, second)),
               "first": first.summary(ctx.times), "second": second.summary(ctx.times)}
        if spec.state_dim == 1 and spec.control_dim == 1:
            doc["chain"] = [a.summary(ctx.times) for a in solve_adjoint_scalar_chain(spec, state, config.backend)]
        _write(out, "adjoints.json", dumps(doc))
        return 0, _jsonable(doc)

    names = config.conditions if config.command == "check" else (
        ("theta_scaling",) if config.sweep == "theta" else ("variational_equality",))
    cache: dict = {}
    reports = []
    for name in names:
        rep = _check_one(name, config, spec, control, scenario, ctx, state, cache)
        d = _as_dict(rep)
        reports.append(d)
        _write(out, f"{name}.json", dumps(d))
        if out is not None and hasattr(rep, "write_csv"):
            rep.write_csv(out / f"{name}.csv")
    summary = emit_report(reports)
    _write(out, "summary.json", dumps(summary))
    return summary["exit_code"], summary


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smpv", description="Verify stochastic maximum-principle conditions "
                                                          "for a candidate control.")
    ap.add_argument("--version", action="version", version=f"smpv {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        if cmd == "report":
            p.add_argument("inputs", nargs="+", help="JSON reports or summaries to merge")
            p.add_argument("--out", help="output directory")
            continue
        src = p.add_mutually_exclusive_group()
        src.add_argument("--scenario", help="built-in scenario name")
        src.add_argument("--problem", help="problem file (schema smpv-1)")
        p.add_argument("--paths", type=int, default=20000)
        p.add_argument("--steps", type=int, default=512)
        p.add_argument("--seed", type=int, help="mandatory random seed")
        p.add_argument("--backend", default="auto", choices=("auto", "analytic", "regression"))
        p.add_argument("--conditions", default="maximum_principle",
                       help=f"comma-separated subset of {','.join(CONDITIONS)} or 'all' "
                            "(every condition except the theta_scaling probe)")
        p.add_argument("--v-grid", type=_floats, help="probe control values")
        p.add_argument("--epsilon-grid", type=_floats, default=DEFAULT_GRID)
        p.add_argument("--theta-grid", type=_floats, default=DEFAULT_GRID)
        p.add_argument("--t-bar", type=float, default=0.5, help="spike location")
        p.add_argument("--spike", type=float, help="spike value (defaults to the first v-grid entry)")
        p.add_argument("--tol-scale", type=float, default=5.0)
        p.add_argument("--out", help="output directory")
        if cmd == "sweep":
            p.add_argument("--kind", default="theta", choices=("theta", "epsilon"))
    return ap


def config_from_args(argv=None) -> RunConfig:
    ns = build_parser().parse_args(argv)
    if ns.command == "report":
        return RunConfig("report", inputs=tuple(ns.inputs), out=ns.out)
    conds = tuple(c.strip() for c in ns.conditions.split(",") if c.strip())
    if conds == ("all",):
        conds = tuple(c for c in CONDITIONS if c != "theta_scaling")
    return RunConfig(ns.command, seed=ns.seed, scenario=ns.scenario, problem=ns.problem, steps=ns.steps,
                     paths=ns.paths, backend=ns.backend, conditions=conds, v_grid=ns.v_grid,
                     epsilon_grid=ns.epsilon_grid, theta_grid=ns.theta_grid, t_bar=ns.t_bar, spike=ns.spike,
                     sweep=getattr(ns, "kind", "theta"), tol_scale=ns.tol_scale, out=ns.out)


def main(argv=None) -> int:
    try:
        config = config_from_args(argv)
        code, doc = run(config)
    except SystemExit:
        raise
    except (SmpvError, KeyError, ValueError, OSError) as exc:
        err = {"error": getattr(exc, "code", type(exc).__name__), "message": str(exc)}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1
    sys.stdout.write(dumps(_strip_series(doc)))
    return code


def _strip_series(doc: dict) -> dict:
    """Summary printed to stdout: full reports without per-node series."""
    if "reports" not in doc:
        return doc
    slim = dict(doc)
    slim["reports"] = [{k: v for k, v in r.items() if k != "series"} for r in doc["reports"]]
    return slim


if __name__ == "__main__":
    sys.exit(main())
