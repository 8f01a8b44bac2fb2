"""Static report files: mAP bar chart, loss curves and a summary table."""
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport, summary_table  # noqa: E402


def bar_values(reports: Sequence[EvalReport], metric="map_50_95"):
    """(variant, value) pairs for variants that carry the metric; the rest are listed separately."""
    present, missing = [], []
    for r in reports:
        v = getattr(r, metric)
        if v is None or isinstance(v, str):
            missing.append(r.variant)
        else:
            present.append((r.variant, float(v)))
    return present, missing


def plot_map_bars(reports: Sequence[EvalReport], path, metric="map_50_95", title="Detection mAP[0.50:0.95]"):
    present, missing = bar_values(reports, metric)
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * max(1, len(present)), 3.2))
    bars = ax.bar([v for v, _ in present], [x for _, x in present], color="tab:blue")
    for b, (_, x) in zip(bars, present):
        ax.annotate(f"{x:.3f}", (b.get_x() + b.get_width() / 2, x), ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mAP")
    ax.set_title(title)
    if missing:
        ax.plot([], [], " ", label="no value: " + ", ".join(missing))
        ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return present, missing


def plot_loss_curves(records, path):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    mit = [(r["iter"], r["loss_turb"]) for r in records if r["phase"] == "mitigation"]
    det = [(r["iter"], r["loss_detect"]) for r in records if r["phase"] == "detection"]
    for ax, pts, name in ((axes[0], mit, "restoration loss"), (axes[1], det, "detection loss")):
        if pts:
            ax.plot(*zip(*pts), lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(reports: Sequence[EvalReport], records, out_dir):
    """Write ``map.png``, ``losses.png`` (when a log is given) and ``summary.txt`` into ``out_dir``."""
    if not reports and not records:
        raise ValueError("nothing to report: no evaluation reports and no training log")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if reports:
        plot_map_bars(reports, out / "map.png")
        written["map"] = out / "map.png"
        (out / "summary.txt").write_text(summary_table(reports) + "\n")
        written["summary"] = out / "summary.txt"
    if records:
        plot_loss_curves(records, out / "losses.png")
        written["losses"] = out / "losses.png"
    return written
