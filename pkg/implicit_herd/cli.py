#!/usr/bin/env python3

# stdlib
import argparse
import asyncio
import logging
import sys
from pathlib import Path

# 3p
import numpy as np
import yaml
from jinja2 import Template
from pydantic import BaseModel

# project
from implicit_herd.adaptation import check_Kbar_negdef, kbar_envelope
from implicit_herd.baseline import compare_trajectories
from implicit_herd.config import (
    ConfigDocument,
    apply_overrides,
    build_scenario,
    load_config,
    scenario_hash,
)
from implicit_herd.controller import ImplicitController, check_K_negdef
from implicit_herd.errors import (
    ConfigError,
    EmptyData,
    GridMismatch,
    HerdError,
    TraceSchemaError,
    UnknownKind,
)
from implicit_herd.simulation import ControllerMode, FailureRecord, MetricsReport, run
from implicit_herd.sweep import run_sweep
from implicit_herd.trace import (
    PLOT_KINDS,
    emit_plotdata,
    read_packets,
    read_trace,
    write_packets,
    write_trace,
)


log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3

# validation problems the user can fix by editing inputs
_INVALID = (ConfigError, TraceSchemaError, UnknownKind, EmptyData, GridMismatch)

GAINS_TEMPLATE = Template(
    """Gain validation for {{ name }} ({{ mode }})
  K   (state/working-equation): {{ "ok" if k.ok else "NOT negative definite" }}
      eigenvalues [{{ "%.6g"|format(k.min_eigenvalue) }}, {{ "%.6g"|format(k.max_eigenvalue) }}], margin {{ "%.6g"|format(k.margin) }}
  K_bar (adaptive, at the initial configuration): {{ "ok" if kbar.ok else "NOT negative definite" }}
      eigenvalues [{{ "%.6g"|format(kbar.min_eigenvalue) }}, {{ "%.6g"|format(kbar.max_eigenvalue) }}], margin {{ "%.6g"|format(kbar.margin) }}
      |J_x| at start {{ "%.4g"|format(jx_norm) }}, isotropic J_x envelope {{ "%.4g"|format(envelope) }}
"""
)


class RunSummary(BaseModel):
    name: str
    scenario_hash: str
    rows: int
    metrics: MetricsReport
    failure: FailureRecord | None = None


def _config_path(args: argparse.Namespace) -> str:
    path = args.config or args.config_opt
    if not path:
        raise ConfigError("no scenario config given (positional or --config)")
    return path


def _load(args: argparse.Namespace) -> ConfigDocument:
    doc = load_config(_config_path(args))
    return apply_overrides(
        doc,
        seed=getattr(args, "seed", None),
        mode=getattr(args, "mode", None),
        no_caging=getattr(args, "no_caging", False),
        estimator=getattr(args, "estimator", None),
        integrator=getattr(args, "integrator", None),
        out_dir=getattr(args, "out_dir", None),
    )


def run_command(args: argparse.Namespace) -> int:
    """Handle the run command."""
    doc = _load(args)
    digest = scenario_hash(doc)
    result = run(build_scenario(doc), digest)

    out = Path(doc.output.dir)
    write_trace(result.trace, out / doc.output.trace)
    if result.packets:
        write_packets(out / doc.output.packets, digest, result.packets)
    summary = RunSummary(
        name=doc.simulation.name,
        scenario_hash=digest,
        rows=len(result.trace),
        metrics=result.metrics,
        failure=result.failure,
    )
    (out / doc.output.metrics).write_text(summary.model_dump_json(indent=2), encoding="utf-8")

    for key, value in result.metrics.summary().items():
        print(f"{key}: {value:.6g}")
    if result.failure is not None:
        print(f"Error: run halted at t={result.failure.t:.2f}s: {result.failure.message}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def sweep_command(args: argparse.Namespace) -> int:
    """Handle the sweep command."""
    doc = _load(args)
    values = [yaml.safe_load(v) for v in args.values]
    rows = asyncio.run(run_sweep(doc, args.param, values, doc.output.dir, args.workers))
    for row in rows:
        status = row.failure or "ok"
        print(f"{args.param}={row.value}: steady-state error {row.steady_state_error:.4f} m ({status})")
    return EXIT_FAILED if any(row.failure for row in rows) else EXIT_OK


def compare_command(args: argparse.Namespace) -> int:
    """Handle the compare command."""
    a, b = read_trace(args.trace_a), read_trace(args.trace_b)
    if a.header.scenario_hash != b.header.scenario_hash:
        log.warning("comparing traces from different scenario documents")
    gap = compare_trajectories(a, b)
    late = gap.after(args.after)
    print(f"max evader gap: {gap.max_evader_gap:.6g} m")
    print(f"max input gap: {gap.max_input_gap:.6g} m")
    print(f"max evader gap after {args.after:g}s: {late.max_evader_gap:.6g} m")
    print(f"max input gap after {args.after:g}s: {late.max_input_gap:.6g} m")
    if args.plot_dir:
        emit_plotdata(a, "input-diff", args.plot_dir, other=b)
    return EXIT_OK


def validate_gains_command(args: argparse.Namespace) -> int:
    """Handle the validate-gains command."""
    doc = _load(args)
    scenario = build_scenario(doc)
    gains = scenario.gains()
    controller = ImplicitController(
        scenario.params, gains, scenario.reference, scenario.v_max,
        scenario.saturation, scenario.guard_radius,
    )
    w = controller.working_equation(scenario.x0, scenario.u0, 0.0)
    k = check_K_negdef(gains, w.h, w.x_tilde)
    kbar = check_Kbar_negdef(gains, w.J_x, w.x_tilde, w.h)
    print(
        GAINS_TEMPLATE.render(
            name=scenario.name,
            mode=scenario.mode.value,
            k=k,
            kbar=kbar,
            jx_norm=float(np.linalg.norm(w.J_x, 2)),
            envelope=kbar_envelope(gains),
        )
    )
    if scenario.mode == ControllerMode.ADAPTIVE and not kbar.ok:
        log.warning("adaptive stability condition not met at the initial configuration")
    return EXIT_OK if k.ok else EXIT_INVALID


def replay_estimator_command(args: argparse.Namespace) -> int:
    """Handle the replay-estimator command."""
    doc = _load(args)
    digest = scenario_hash(doc)
    original = read_trace(args.trace, expected_hash=digest)
    packets_path = args.packets or Path(args.trace).with_name(doc.output.packets)
    packet_hash, entries = read_packets(packets_path)
    if packet_hash != digest:
        raise TraceSchemaError(f"{packets_path}: packet log belongs to another scenario")

    replay = {(tick, sender): payload for tick, sender, payload in entries}
    result = run(build_scenario(doc), digest, replay)
    for column in ("rmse_evaders", "rmse_herders"):
        expected, got = original.column(column), result.trace.column(column)
        if expected.shape != got.shape or not np.array_equal(expected, got, equal_nan=True):
            print(f"Error: replayed {column} differs from the recorded trace", file=sys.stderr)
            return EXIT_INVALID
    print(f"replayed {len(entries)} packets, estimator output matches")
    return EXIT_OK


def plotdata_command(args: argparse.Namespace) -> int:
    """Handle the plotdata command."""
    trace = read_trace(args.trace)
    other = read_trace(args.other) if args.other else None
    path = emit_plotdata(trace, args.kind, args.out_dir, other)
    print(path)
    return EXIT_OK


def _add_config(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", nargs="?", help="Path to the scenario config (YAML or JSON)")
    parser.add_argument("--config", dest="config_opt", help="Same as the positional argument")


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, help="Override simulation.seed")
    parser.add_argument("--out-dir", help="Override output.dir")
    parser.add_argument(
        "--mode", choices=[m.value for m in ControllerMode], help="Override controller.mode"
    )
    parser.add_argument("--no-caging", action="store_true", help="Skip the caging phase")
    parser.add_argument("--estimator", choices=["perfect", "dkf"], help="Override estimator.kind")
    parser.add_argument("--integrator", choices=["euler", "rk4"], help="Override simulation.integrator")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Implicit control for multi-herder herding")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    run_parser = subparsers.add_parser("run", help="Run a single scenario")
    _add_config(run_parser)
    _add_overrides(run_parser)
    run_parser.set_defaults(func=run_command)

    sweep_parser = subparsers.add_parser("sweep", help="Run a scenario over a list of values")
    _add_config(sweep_parser)
    _add_overrides(sweep_parser)
    sweep_parser.add_argument("--param", required=True, help="Dotted config field, e.g. estimator.r")
    sweep_parser.add_argument("--values", nargs="+", required=True, help="Values (parsed as YAML scalars)")
    sweep_parser.add_argument("--workers", type=int, help="Process pool size")
    sweep_parser.set_defaults(func=sweep_command)

    compare_parser = subparsers.add_parser("compare", help="Trajectory and input gaps of two traces")
    compare_parser.add_argument("trace_a")
    compare_parser.add_argument("trace_b")
    compare_parser.add_argument("--after", type=float, default=2.0, help="Report gaps after this time, s")
    compare_parser.add_argument("--plot-dir", help="Also write input-diff plot data here")
    compare_parser.set_defaults(func=compare_command)

    gains_parser = subparsers.add_parser("validate-gains", help="Check the gain conditions")
    _add_config(gains_parser)
    gains_parser.add_argument(
        "--mode", choices=[m.value for m in ControllerMode], help="Override controller.mode"
    )
    gains_parser.set_defaults(func=validate_gains_command)

    replay_parser = subparsers.add_parser(
        "replay-estimator", help="Re-run the estimator from a logged packet stream"
    )
    replay_parser.add_argument("trace")
    replay_parser.add_argument("--config", dest="config_opt", required=True, help="Scenario config")
    replay_parser.add_argument("--packets", help="Packet log (defaults next to the trace)")
    _add_overrides(replay_parser)
    replay_parser.set_defaults(func=replay_estimator_command, config=None)

    plot_parser = subparsers.add_parser("plotdata", help="Write tidy columns for one figure kind")
    plot_parser.add_argument("trace")
    plot_parser.add_argument("--kind", required=True, choices=PLOT_KINDS)
    plot_parser.add_argument("--other", help="Second trace, for input-diff")
    plot_parser.add_argument("--out-dir", default=".", help="Output directory")
    plot_parser.set_defaults(func=plotdata_command)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    if not args.command:
        parser.print_help()
        return EXIT_INVALID

    try:
        return args.func(args)
    except _INVALID as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except HerdError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
