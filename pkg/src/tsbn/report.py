"""Static run reports: SVG line charts and markdown tables built from metrics.csv.

The SVG is written by hand with fixed number formatting, so regenerating a
report from the same CSV gives byte-identical files.
"""

from __future__ import annotations

import csv
import statistics
from pathlib import Path
from xml.sax.saxutils import escape

from .metrics import read_metrics_csv

AGGREGATE_SCHEMA = "tsbn-aggregate/1"
ABLATION_SCHEMA = "tsbn-ablation/1"
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 64, 16, 32, 48


class ReportError(FileNotFoundError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _tick_label(v):
    if abs(v) >= 1000:
        return f"{v:,.0f}"
    return f"{v:.2f}"


def line_chart_svg(series: dict, title: str, xlabel: str, ylabel: str, y_range=None) -> str:
    """``series`` maps a label to a list of (x, y) points; x values are integers."""
    xs = sorted({x for pts in series.values() for x, _ in pts})
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise ValueError("nothing to plot")
    x0, x1 = xs[0], max(xs[-1], xs[0] + 1)
    y0, y1 = y_range if y_range is not None else (min(ys), max(ys))
    if y1 <= y0:
        pad = abs(y0) * 0.05 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for v in _nice_ticks(y0, y1):
        y = sy(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{_fmt(y)}" x2="{LEFT + pw}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_fmt(y + 4)}" text-anchor="end">{_tick_label(v)}</text>')
    for x in xs:
        out.append(f'<text x="{_fmt(sx(x))}" y="{TOP + ph + 16}" text-anchor="middle">{x}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
        out.append(f'<polyline class="series" data-label="{escape(label)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{path}"/>')
        for x, y in pts:
            out.append(f'<circle class="point" data-series="{escape(label)}" data-x="{x}" data-y="{y!r}" '
                       f'cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3" fill="{color}"/>')
        out.append(f'<text x="{LEFT + 8}" y="{TOP + 12 + 14 * i}" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def mcr_chart(rows, label="MCR") -> str:
    return line_chart_svg({label: [(r["phase"], r["mcr"]) for r in rows]},
                          "MCR after each task", "task", "MCR", (0.0, 1.0))


def param_chart(rows) -> str:
    return line_chart_svg({"total": [(r["phase"], r["total_params"]) for r in rows],
                           "task-specific": [(r["phase"], r["trainable_params"]) for r in rows]},
                          "Parameter count vs. number of tasks", "task", "parameters")


def summary_markdown(rows, title="Run summary") -> str:
    mcrs = [r["mcr"] for r in rows]
    lines = [f"# {title}", "",
             f"Last-MCR: {mcrs[-1]:.4f}  ", f"Avg-MCR: {sum(mcrs) / len(mcrs):.4f}", "",
             "| phase | MCR | TP acc | WP acc given TP | overall acc | task-specific params | total params |",
             "|---:|---:|---:|---:|---:|---:|---:|"]
    for r in rows:
        lines.append(f"| {r['phase']} | {r['mcr']:.4f} | {r['tp_acc']:.4f} | {r['wp_given_tp']:.4f} | "
                     f"{r['overall_acc']:.4f} | {r['trainable_params']} | {r['total_params']} |")
    return "\n".join(lines) + "\n"


def write_report(run_dir) -> list[Path]:
    """Charts and a markdown table for one run directory holding metrics.csv."""
    run_dir = Path(run_dir)
    missing = [str(run_dir / n) for n in ("metrics.csv",) if not (run_dir / n).is_file()]
    if missing:
        raise ReportError("missing report inputs: " + ", ".join(missing))
    rows = read_metrics_csv(run_dir / "metrics.csv")
    if not rows:
        raise ReportError(f"{run_dir / 'metrics.csv'} has no phases")
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    written = [plots / "mcr.svg", plots / "params.svg", run_dir / "report.md"]
    written[0].write_text(mcr_chart(rows))
    written[1].write_text(param_chart(rows))
    written[2].write_text(summary_markdown(rows, f"Run summary: {run_dir.name}"))
    return written


# --------------------------------------------------------------------------
# multi-seed aggregation and the ablation table


AGG_METRICS = ("last_mcr", "avg_mcr", "last_tp_acc", "last_wp_given_tp", "last_overall_acc")


def run_summary(rows) -> dict:
    mcrs = [r["mcr"] for r in rows]
    last = rows[-1]
    return {"last_mcr": mcrs[-1], "avg_mcr": sum(mcrs) / len(mcrs), "last_tp_acc": last["tp_acc"],
            "last_wp_given_tp": last["wp_given_tp"], "last_overall_acc": last["overall_acc"]}


def aggregate(summaries: list[dict]) -> dict:
    """Mean and population variance of each summary metric across seeds."""
    out = {}
    for k in AGG_METRICS:
        vals = [s[k] for s in summaries]
        out[k] = {"mean": statistics.fmean(vals), "variance": statistics.pvariance(vals) if len(vals) > 1 else 0.0}
    return out


def write_aggregate(run_dirs, out_dir, seeds) -> dict:
    summaries = [run_summary(read_metrics_csv(Path(d) / "metrics.csv")) for d in run_dirs]
    agg = aggregate(summaries)
    out_dir = Path(out_dir)
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        fh.write(f"# schema: {AGGREGATE_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "variance"] + [f"seed_{s}" for s in seeds])
        for k in AGG_METRICS:
            w.writerow([k, repr(agg[k]["mean"]), repr(agg[k]["variance"])] + [repr(s[k]) for s in summaries])
    lines = [f"# Aggregate over seeds {', '.join(map(str, seeds))}", "",
             "| metric | mean | variance |", "|---|---:|---:|"]
    lines += [f"| {k} | {agg[k]['mean']:.4f} | {agg[k]['variance']:.6f} |" for k in AGG_METRICS]
    (out_dir / "aggregate.md").write_text("\n".join(lines) + "\n")
    return agg


def ablation_markdown(rows) -> str:
    """``rows``: dicts with label, task_specific_bn, unknown_class, alignment, last, avg (means over seeds)."""
    mark = {True: "yes", False: "no"}
    lines = ["| T.S.BN | Unknown | Alignment | Last | Avg |", "|:---:|:---:|:---:|---:|---:|"]
    for r in rows:
        lines.append(f"| {mark[r['task_specific_bn']]} | {mark[r['unknown_class']]} | {mark[r['alignment']]} | "
                     f"{100 * r['last']:.2f} | {100 * r['avg']:.2f} |")
    return "\n".join(lines) + "\n"


def write_ablation(rows, out_dir) -> Path:
    out_dir = Path(out_dir)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        fh.write(f"# schema: {ABLATION_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "task_specific_bn", "unknown_class", "alignment", "last_mcr", "avg_mcr",
                    "tp_collapse_to_first"])
        for r in rows:
            w.writerow([r["label"], int(r["task_specific_bn"]), int(r["unknown_class"]), int(r["alignment"]),
                        repr(r["last"]), repr(r["avg"]), repr(r["collapse"])])
    path = out_dir / "ablation.md"
    path.write_text("# Ablation (mean over seeds, MCR in %)\n\n" + ablation_markdown(rows))
    return path
