"""Report serialization and figure rendering.

CSV is the machine contract: every writer emits a documented header row
and fixed-precision numeric fields so identical runs produce identical
bytes. Figures are rendered next to the delimited output as PNG files
for quick inspection; they carry no data the CSVs do not.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .simcore import SimReport

TRANSFER_CSV_HEADER = "start_ms,end_ms,bytes,kind,layer,expert"
COMPUTE_CSV_HEADER = "kind,iteration,token,layer,start_ms,end_ms"


def _ms(x: float) -> str:
    return f"{x * 1000:.3f}"


def write_report_text(report: SimReport, path: str | Path) -> None:
    Path(path).write_text(report.to_text())


def write_report_csv(reports: Sequence[SimReport], path: str | Path, prefix_cols: Sequence[tuple[str, Sequence]] = ()) -> None:
    """Write one row per report; ``prefix_cols`` adds leading columns
    (e.g. the swept parameter) as (name, values) pairs."""
    header = [name for name, _ in prefix_cols] + [SimReport.csv_header()]
    lines = [",".join(header)]
    for i, rep in enumerate(reports):
        prefix = [str(vals[i]) for _, vals in prefix_cols]
        lines.append(",".join(prefix + [rep.csv_row()]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_transfer_log_csv(report: SimReport, path: str | Path) -> None:
    lines = [TRANSFER_CSV_HEADER]
    for rec in report.transfers:
        experts = ";".join(str(e) for e in rec.experts)
        lines.append(
            f"{_ms(rec.start)},{_ms(rec.end)},{rec.nbytes},{rec.kind.value},{rec.layer},{experts}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_compute_slots_csv(report: SimReport, path: str | Path) -> None:
    lines = [COMPUTE_CSV_HEADER]
    for slot in report.compute_slots:
        lines.append(
            f"{slot.kind},{slot.iteration},{slot.token},{slot.layer},{_ms(slot.start)},{_ms(slot.end)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def render_breakdown_figure(report: SimReport, path: str | Path) -> None:
    b = report.latency_breakdown
    labels = ["draft", "expert load", "attention & other"]
    values = [b["draft"], b["expert_load"], b["attention_and_other"]]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(labels, values, color=["#4c72b0", "#dd8452", "#55a868"])
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v, f"{v:.1%}", ha="center", va="bottom")
    ax.set_ylabel("fraction of total time")
    ax.set_ylim(0, 1.05)
    ax.set_title(f"{report.policy.policy.value}: latency breakdown")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_timeline_figure(report: SimReport, path: str | Path, max_iterations: int = 3) -> None:
    """Gantt of compute slots and channel transfers for the first iterations."""
    if not report.iterations:
        return
    cut = report.iterations[min(max_iterations, len(report.iterations)) - 1].verify_end
    fig, ax = plt.subplots(figsize=(9, 3.2))
    lanes = {"draft": 2, "verify": 1, "channel": 0}
    for slot in report.compute_slots:
        if slot.start > cut:
            break
        color = "#4c72b0" if slot.kind == "draft" else "#55a868"
        ax.broken_barh(
            [(slot.start * 1000, (slot.end - slot.start) * 1000)],
            (lanes[slot.kind] - 0.35, 0.7),
            facecolors=color,
            edgecolor="white",
            linewidth=0.3,
        )
    for rec in report.transfers:
        if rec.start > cut:
            break
        color = "#dd8452" if rec.kind.value == "prefetch" else "#c44e52"
        ax.broken_barh(
            [(rec.start * 1000, (rec.end - rec.start) * 1000)],
            (lanes["channel"] - 0.35, 0.7),
            facecolors=color,
            edgecolor="white",
            linewidth=0.3,
        )
    ax.set_yticks(list(lanes.values()), ["channel", "verify", "draft"])
    ax.set_xlabel("time (ms)")
    ax.set_title(
        f"{report.policy.policy.value}: first {min(max_iterations, len(report.iterations))}"
        " iteration(s); orange=prefetch, red=on-demand"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_compare_figure(reports: Sequence[SimReport], path: str | Path) -> None:
    names = [r.policy.policy.value for r in reports]
    tpots = [r.tpot * 1000 for r in reports]
    hits = [r.hit_rate for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.bar(names, tpots, color="#4c72b0")
    ax1.set_ylabel("TPOT (ms)")
    ax1.tick_params(axis="x", rotation=20)
    ax2.bar(names, hits, color="#55a868")
    ax2.set_ylabel("hit rate")
    ax2.set_ylim(0, 1)
    ax2.tick_params(axis="x", rotation=20)
    fig.suptitle("policy comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep_figure(
    parameter: str, points: Sequence[tuple[object, SimReport]], path: str | Path
) -> None:
    xs = [p for p, _ in points]
    tpots = [r.tpot * 1000 for _, r in points]
    evict = [r.eviction_rate for _, r in points]
    fig, ax1 = plt.subplots(figsize=(6, 3.4))
    ax1.plot(xs, tpots, "o-", color="#4c72b0", label="TPOT")
    ax1.set_xlabel(parameter)
    ax1.set_ylabel("TPOT (ms)", color="#4c72b0")
    ax2 = ax1.twinx()
    ax2.plot(xs, evict, "s--", color="#dd8452", label="eviction rate")
    ax2.set_ylabel("eviction rate", color="#dd8452")
    ax2.set_ylim(0, 1.05)
    fig.suptitle(f"sweep over {parameter}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_trace_figure(
    windows: Sequence[int],
    rates_by_window: Sequence[Sequence[float]],
    overlap_per_layer: Sequence[float],
    entropy_per_layer: Sequence[float],
    path: str | Path,
) -> None:
    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(11, 3.2))
    mean_rates = [sum(r) / len(r) for r in rates_by_window]
    ax1.plot(windows, mean_rates, "o-")
    ax1.set_xlabel("window (tokens)")
    ax1.set_ylabel("mean activation rate")
    ax1.set_ylim(0, 1.05)
    ax2.plot(range(len(overlap_per_layer)), overlap_per_layer, "o-", color="#dd8452")
    ax2.set_xlabel("layer")
    ax2.set_ylabel("adjacent-pair overlap")
    ax2.set_ylim(0, 1.05)
    ax3.plot(range(len(entropy_per_layer)), entropy_per_layer, "o-", color="#55a868")
    ax3.set_xlabel("layer")
    ax3.set_ylabel("mean entropy (bits)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
