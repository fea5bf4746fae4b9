"""Command-line front end.

One binary, subcommand style: ``run`` simulates a single policy,
``compare`` pits policies against each other on one workload, ``sweep``
varies a single parameter, ``cutoff`` solves the prefetch-depth
constraint system, ``gen-trace``/``analyze-trace`` produce and inspect
workloads. All randomness flows from one ``--seed`` flag; reports land
in ``--out`` as CSV (plus text and PNG figures when requested).

Exit codes: 0 success, 1 validation/parse failure, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import report as report_mod
from .config import ConfigError, Policy, load_config
from .cutoff import cutoff_input_from_specs, feasibility_report, solve_cutoff
from .simcore import SimReport, compare_policies, simulate, sweep
from .trace import (
    TraceError,
    activation_entropy,
    activation_rate,
    generate_synthetic_trace,
    load_trace,
    overlap_percentage,
    save_trace,
)


@dataclass
class ExperimentManifest:
    """Resolved inputs for one CLI invocation."""

    config_path: Path
    out_dir: Path
    trace_path: Path | None = None
    gen_tokens: int | None = None
    gen_skew: float = 1.0
    gen_correlation: float = 0.7
    gen_concentration: float | None = None
    seed: int | None = None
    report_format: str = "csv"
    figures: bool = True

    def validate(self) -> None:
        if not self.config_path.exists():
            raise ConfigError(f"file not found: {self.config_path}")
        if self.trace_path is not None and not self.trace_path.exists():
            raise ConfigError(f"file not found: {self.trace_path}")


def _add_common(parser: argparse.ArgumentParser, trace_source: bool = True) -> None:
    parser.add_argument("--config", required=True, help="experiment YAML file")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the run")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument(
        "--format", choices=("csv", "text"), default="csv", help="report file format"
    )
    parser.add_argument(
        "--no-figures", action="store_true", help="skip PNG rendering next to the CSVs"
    )
    if trace_source:
        parser.add_argument("--trace", default=None, help="trace file (else synthesized)")
        parser.add_argument(
            "--gen-tokens", type=int, default=256, help="synthetic trace length (default 256)"
        )
        parser.add_argument("--gen-skew", type=float, default=1.0)
        parser.add_argument("--gen-correlation", type=float, default=0.7)
        parser.add_argument(
            "--gen-concentration",
            type=float,
            default=None,
            help="gating sharpness (default: max(2, topk_activated))",
        )


def _manifest(args: argparse.Namespace, trace_source: bool = True) -> ExperimentManifest:
    m = ExperimentManifest(
        config_path=Path(args.config),
        out_dir=Path(args.out),
        seed=args.seed,
        report_format=args.format,
        figures=not args.no_figures,
    )
    if trace_source:
        m.trace_path = Path(args.trace) if args.trace else None
        m.gen_tokens = args.gen_tokens
        m.gen_skew = args.gen_skew
        m.gen_correlation = args.gen_correlation
        m.gen_concentration = args.gen_concentration
    m.validate()
    return m


def _load_experiment(m: ExperimentManifest):
    model, hw, timings, policy = load_config(m.config_path)
    if m.seed is not None:
        policy = replace(policy, seed=m.seed)
    if m.trace_path is not None:
        trace = load_trace(m.trace_path)
    else:
        trace = generate_synthetic_trace(
            model,
            num_tokens=m.gen_tokens,
            skew=m.gen_skew,
            correlation=m.gen_correlation,
            seed=policy.seed,
            concentration=m.gen_concentration,
        )
    return model, hw, timings, policy, trace


def _print_summary(reports: list[SimReport]) -> None:
    print(f"{'policy':<20} {'tpot_ms':>10} {'hit_rate':>9} {'evict':>7} {'tokens':>7}")
    for r in reports:
        print(
            f"{r.policy.policy.value:<20} {r.tpot * 1000:>10.3f} "
            f"{r.hit_rate:>9.4f} {r.eviction_rate:>7.4f} {r.emitted_tokens:>7}"
        )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    m = _manifest(args)
    model, hw, timings, policy, trace = _load_experiment(m)
    if args.policy is not None:
        policy = replace(policy, policy=Policy(args.policy))
    rep = simulate(model, hw, timings, policy, trace)
    m.out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_report_csv([rep], m.out_dir / "report.csv")
    if m.report_format == "text":
        report_mod.write_report_text(rep, m.out_dir / "report.txt")
    report_mod.write_transfer_log_csv(rep, m.out_dir / "transfers.csv")
    report_mod.write_compute_slots_csv(rep, m.out_dir / "compute_slots.csv")
    if m.figures:
        report_mod.render_breakdown_figure(rep, m.out_dir / "breakdown.png")
        report_mod.render_timeline_figure(rep, m.out_dir / "timeline.png")
    _print_summary([rep])
    print(f"reports written to {m.out_dir}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    m = _manifest(args)
    model, hw, timings, policy, trace = _load_experiment(m)
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    policies = [replace(policy, policy=Policy(n)) for n in names]
    reports = compare_policies(model, hw, timings, policies, trace)
    m.out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_report_csv(reports, m.out_dir / "comparison.csv")
    if m.figures:
        report_mod.render_compare_figure(reports, m.out_dir / "comparison.png")
    _print_summary(reports)
    print(f"reports written to {m.out_dir}")
    return 0


def _parse_values(spec: str) -> list[int]:
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in spec.split(",") if v.strip()]


def cmd_sweep(args: argparse.Namespace) -> int:
    m = _manifest(args)
    model, hw, timings, policy, trace = _load_experiment(m)
    if args.policy is not None:
        policy = replace(policy, policy=Policy(args.policy))
    values = _parse_values(args.values)
    points = sweep(args.parameter, values, model, hw, timings, policy, trace)
    m.out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_report_csv(
        [r for _, r in points],
        m.out_dir / "sweep.csv",
        prefix_cols=[(args.parameter, [v for v, _ in points])],
    )
    if m.figures:
        report_mod.render_sweep_figure(args.parameter, points, m.out_dir / "sweep.png")
    print(f"{args.parameter:>14} {'tpot_ms':>10} {'hit_rate':>9} {'evict':>7}")
    for v, r in points:
        print(f"{v:>14} {r.tpot * 1000:>10.3f} {r.hit_rate:>9.4f} {r.eviction_rate:>7.4f}")
    print(f"reports written to {m.out_dir}")
    return 0


def cmd_cutoff(args: argparse.Namespace) -> int:
    m = _manifest(args, trace_source=False)
    model, hw, timings, policy = load_config(m.config_path)
    k = args.k if args.k is not None else policy.prefetch_k
    inp = cutoff_input_from_specs(model, hw, timings, k, side=args.side)
    result = solve_cutoff(inp)
    print(f"k: {k}")
    print(f"layers considered: 0..{inp.l_all - 1} ({args.side} side)")
    if not result.feasible:
        print("cutoff: none (even layer 0 violates a constraint)")
        print(f"binding constraint: {result.binding_constraint.value}")
        return 0
    fr = feasibility_report(inp, result.layer)
    print(f"cutoff layer L: {result.layer}")
    print(f"prefetched experts n_expert: {result.n_expert}")
    print(f"binding constraint: {result.binding_constraint.value}")
    print(f"memory slack: {fr.memory_slack_bytes / 1e6:.3f} MB")
    print(f"overlap slack: {fr.overlap_slack_seconds * 1000:.3f} ms")
    return 0


def cmd_gen_trace(args: argparse.Namespace) -> int:
    m = _manifest(args, trace_source=False)
    model, hw, timings, policy = load_config(m.config_path)
    seed = m.seed if m.seed is not None else policy.seed
    trace = generate_synthetic_trace(
        model,
        num_tokens=args.tokens,
        skew=args.skew,
        correlation=args.correlation,
        seed=seed,
        concentration=args.concentration,
    )
    out_file = Path(args.out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    save_trace(trace, out_file)
    print(f"trace with {trace.num_tokens} tokens written to {out_file}")
    return 0


def cmd_analyze_trace(args: argparse.Namespace) -> int:
    m = _manifest(args)
    model, hw, timings, policy, trace = _load_experiment(m)
    windows = _parse_values(args.windows)
    rates = [activation_rate(trace, w) for w in windows]
    per_layer_overlap, macro_overlap = overlap_percentage(trace, all_pairs=args.all_pairs)
    entropy = [
        sum(activation_entropy(trace.layer(t, l).gating_scores) for t in range(trace.num_tokens))
        / trace.num_tokens
        for l in range(trace.num_layers)
    ]
    m.out_dir.mkdir(parents=True, exist_ok=True)
    header = ["layer", "overlap", "mean_entropy_bits"] + [f"rate_w{w}" for w in windows]
    lines = [",".join(header)]
    for l in range(trace.num_layers):
        row = [str(l), f"{per_layer_overlap[l]:.6f}", f"{entropy[l]:.6f}"]
        row += [f"{rates[i][l]:.6f}" for i in range(len(windows))]
        lines.append(",".join(row))
    (m.out_dir / "trace_stats.csv").write_text("\n".join(lines) + "\n")
    if m.figures:
        report_mod.render_trace_figure(
            windows, rates, per_layer_overlap, entropy, m.out_dir / "trace_stats.png"
        )
    print(f"tokens: {trace.num_tokens}  layers: {trace.num_layers}  experts: {trace.experts_per_layer}")
    print(f"macro overlap: {macro_overlap:.4f}")
    print(f"mean entropy: {sum(entropy) / len(entropy):.4f} bits")
    for w, r in zip(windows, rates):
        print(f"activation rate @N={w}: {sum(r) / len(r):.4f}")
    print(f"reports written to {m.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesim",
        description="Trace-driven simulator for speculative-decoding MoE inference "
        "with expert offloading",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one policy")
    _add_common(p_run)
    p_run.add_argument("--policy", choices=[p.value for p in Policy], default=None)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="simulate several policies on one workload")
    _add_common(p_cmp)
    p_cmp.add_argument(
        "--policies",
        default=",".join(p.value for p in Policy),
        help="comma-separated policy names (default: all)",
    )
    p_cmp.set_defaults(func=cmd_compare)

    p_sweep = sub.add_parser("sweep", help="vary one parameter")
    _add_common(p_sweep)
    p_sweep.add_argument(
        "--parameter",
        required=True,
        choices=("cutoff_layer", "draft_length", "cache_capacity", "prefetch_k"),
    )
    p_sweep.add_argument("--values", required=True, help="e.g. 0..31 or 1,2,4,8")
    p_sweep.add_argument("--policy", choices=[p.value for p in Policy], default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_cut = sub.add_parser("cutoff", help="solve the prefetch cutoff-layer constraints")
    _add_common(p_cut, trace_source=False)
    p_cut.add_argument("--k", type=int, default=None, help="experts per layer (default: policy)")
    p_cut.add_argument("--side", choices=("draft", "target"), default="draft")
    p_cut.set_defaults(func=cmd_cutoff)

    p_gen = sub.add_parser("gen-trace", help="synthesize an activation trace")
    _add_common(p_gen, trace_source=False)
    p_gen.add_argument("--tokens", type=int, required=True)
    p_gen.add_argument("--skew", type=float, default=1.0)
    p_gen.add_argument("--correlation", type=float, default=0.7)
    p_gen.add_argument("--concentration", type=float, default=None)
    p_gen.add_argument("--out-file", required=True, help="trace file to write")
    p_gen.set_defaults(func=cmd_gen_trace)

    p_ana = sub.add_parser("analyze-trace", help="activation statistics of a trace")
    _add_common(p_ana)
    p_ana.add_argument("--windows", default="1,2,4,8,16", help="window sizes for activation rate")
    p_ana.add_argument("--all-pairs", action="store_true", help="overlap over all token pairs")
    p_ana.set_defaults(func=cmd_analyze_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
