"""Delimited report outputs and the matplotlib figures rendered next to them.

Every report artifact is written twice: machine-readable (CSV/JSON) and
as a rendered PNG figure, side by side in the run directory.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

FIG_DPI = 120


def write_csv(path, header, rows):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_json(path, payload):
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, default=float) + "\n", encoding="utf-8")
    return path


def text_table(rows, columns):
    """Plain-text table with right-padded columns."""
    cells = [[str(row.get(col, "")) for col in columns] for row in rows]
    widths = [max(len(col), *(len(r[i]) for r in cells)) if cells else len(col) for i, col in enumerate(columns)]
    lines = [
        "  ".join(col.ljust(widths[i]) for i, col in enumerate(columns)),
        "  ".join("-" * widths[i] for i in range(len(columns))),
    ]
    lines += ["  ".join(r[i].ljust(widths[i]) for i in range(len(columns))) for r in cells]
    return "\n".join(lines) + "\n"


def _new_axes(title, xlabel, ylabel):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return Path(path)


def plot_loss_curve(steps, losses, path, title="training loss"):
    fig, ax = _new_axes(title, "step", "loss")
    ax.plot(steps, losses, lw=1.2)
    return _save(fig, path)


def plot_bars(labels, values, path, title, ylabel):
    fig, ax = _new_axes(title, "", ylabel)
    ax.bar([str(lab) for lab in labels], values, color="#4878a8")
    for i, value in enumerate(values):
        ax.text(i, value, f"{value:.3f}", ha="center", va="bottom", fontsize=8)
    return _save(fig, path)


def loss_report(records, out_dir, stem="loss"):
    """CSV of (step, loss) plus the rendered curve."""
    out_dir = Path(out_dir)
    pairs = [(r["step"], r["value"]) for r in records if r["metric"] == "loss"]
    write_csv(out_dir / f"{stem}.csv", ["step", "loss"], pairs)
    if pairs:
        steps, losses = zip(*pairs)
        plot_loss_curve(steps, losses, out_dir / f"{stem}.png")


def eval_report_files(report, out_dir):
    """JSON + text table + per-class CSV + bar figure for one EvalReport."""
    out_dir = Path(out_dir)
    write_json(out_dir / "report.json", report.to_dict())
    rows = [{"class": cls, "ap": f"{ap:.4f}"} for cls, ap in sorted(report.per_class_ap.items())]
    rows.append({"class": "mAP", "ap": f"{report.map:.4f}"})
    rows.append({"class": "top1", "ap": f"{report.top1:.4f}"})
    (out_dir / "report.txt").write_text(text_table(rows, ["class", "ap"]), encoding="utf-8")
    write_csv(
        out_dir / "per_class_ap.csv",
        ["class", "ap"],
        [(cls, ap) for cls, ap in sorted(report.per_class_ap.items())],
    )
    classes = sorted(report.per_class_ap)
    plot_bars(
        classes,
        [report.per_class_ap[c] for c in classes],
        out_dir / "per_class_ap.png",
        title=f"per-class AP (mAP {report.map:.3f}, top-1 {report.top1:.3f})",
        ylabel="average precision",
    )


def ablation_report_files(rows, axis, out_dir):
    """JSON + CSV + text table + bar chart for an ablation table."""
    out_dir = Path(out_dir)
    write_json(out_dir / "report.json", {"axis": axis, "rows": rows})
    write_csv(
        out_dir / "report.csv",
        ["axis", "value", "map", "top1"],
        [(r["axis"], r["value"], r["map"], r["top1"]) for r in rows],
    )
    text_rows = [
        {"value": r["value"], "map": f"{r['map']:.4f}", "top1": f"{r['top1']:.4f}"} for r in rows
    ]
    (out_dir / "report.txt").write_text(text_table(text_rows, ["value", "map", "top1"]), encoding="utf-8")
    plot_bars(
        [r["value"] for r in rows],
        [r["map"] for r in rows],
        out_dir / "ablation.png",
        title=f"mAP by {axis}",
        ylabel="mAP",
    )
