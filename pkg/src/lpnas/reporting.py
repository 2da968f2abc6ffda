"""Report rendering: per-run figures (SVG) plus CSV summaries.

SVG output is byte-deterministic for identical inputs: the matplotlib hash
salt is pinned and the embedded creation date is stripped.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import search as searchmod  # noqa: E402

__all__ = ["render_report", "load_run"]

matplotlib.rcParams["svg.hashsalt"] = "lpnas"

_BRANCH_COLORS = {"ptq": "tab:red", "aligned": "tab:blue"}


def _savefig(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def load_run(run_dir) -> searchmod.RunHistory:
    """Rebuild a RunHistory from a completed run directory."""
    run_dir = Path(run_dir)
    csv_path = run_dir / "history.csv"
    if not csv_path.is_file():
        raise FileNotFoundError(f"no history.csv in {run_dir}")
    rows = searchmod.read_history_csv(csv_path)
    if not rows:
        raise ValueError(f"empty history in {run_dir}")
    history = searchmod.RunHistory(branch=rows[0].branch, seed=rows[0].seed)
    by_gen: dict[int, list] = {}
    for row in rows:
        by_gen.setdefault(row.gen, []).append(row)
    for gen in sorted(by_gen):
        history.generations.append(searchmod._log_for(gen, by_gen[gen]))
    return history


def _finite(pairs):
    return [(x, y) for x, y in pairs if not (math.isnan(x) or math.isnan(y))]


def _plot_iou_vs_fps(history: searchmod.RunHistory, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    rows = [r for r in history.rows if not math.isnan(r.fps)]
    gpu = _finite([(r.fps, r.gpu_miou) for r in rows])
    dev = _finite([(r.fps, r.device_miou) for r in rows])
    for (fx, gy), (_, dy) in zip(gpu, dev):
        ax.plot([fx, fx], [gy, dy], color="0.8", linewidth=0.6, zorder=1)
    if gpu:
        ax.scatter(*zip(*gpu), s=18, color="tab:green", label="GPU (FP32 eval)", zorder=2)
    if dev:
        ax.scatter(*zip(*dev), s=18, color=_BRANCH_COLORS.get(history.branch, "tab:blue"),
                   marker="x", label="device (deploy eval)", zorder=3)
    ax.set_xlabel("throughput (fps)")
    ax.set_ylabel("mIoU")
    ax.set_title(f"IoU vs FPS — branch {history.branch}")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    path = out / f"iou_vs_fps_{history.branch}.svg"
    _savefig(fig, path)
    return path


def _plot_fitness(history: searchmod.RunHistory, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    gens = [log.gen for log in history.generations]
    ax.plot(gens, [log.max_fitness for log in history.generations], marker="o", label="max fitness")
    ax.plot(gens, [log.median_fitness for log in history.generations], marker="s", label="median fitness")
    ax.set_xlabel("generation")
    ax.set_ylabel("fitness")
    ax.set_title(f"Fitness per generation — branch {history.branch}")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    path = out / f"fitness_{history.branch}.svg"
    _savefig(fig, path)
    return path


def _plot_progression(history: searchmod.RunHistory, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    gens = [log.gen for log in history.generations]
    ax.plot(gens, [log.max_iou for log in history.generations], marker="o",
            color="tab:blue", label="max device mIoU")
    ax.set_xlabel("generation")
    ax.set_ylabel("max device mIoU", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(gens, [log.max_fps for log in history.generations], marker="s",
             color="tab:orange", label="max fps")
    ax2.set_ylabel("max fps", color="tab:orange")
    ax.set_title(f"Best IoU and FPS progression — branch {history.branch}")
    ax.grid(alpha=0.3)
    path = out / f"progression_{history.branch}.svg"
    _savefig(fig, path)
    return path


def _write_summary_csv(histories: list, out: Path) -> Path:
    path = out / "report_summary.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["branch", "gen", "max_fitness", "median_fitness", "max_iou", "max_fps"])
        for history in histories:
            for log in history.generations:
                writer.writerow([history.branch, log.gen, repr(log.max_fitness),
                                 repr(log.median_fitness), repr(log.max_iou), repr(log.max_fps)])
    return path


def _write_gap_csv(report: searchmod.GapReport, out: Path) -> Path:
    path = out / "gap_report.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["statistic", "value"])
        writer.writerow(["mean_gap_ptq", repr(report.mean_gap_ptq)])
        writer.writerow(["median_gap_ptq", repr(report.median_gap_ptq)])
        writer.writerow(["mean_gap_aligned", repr(report.mean_gap_aligned)])
        writer.writerow(["median_gap_aligned", repr(report.median_gap_aligned)])
        writer.writerow(["recovered_fraction", repr(report.recovered_fraction)])
        writer.writerow(["n_ptq", report.n_ptq])
        writer.writerow(["n_aligned", report.n_aligned])
    return path


def render_report(run_dirs, out_dir) -> list:
    """Render figures and summaries for one run or a paired (ptq, aligned) pair.

    Returns the list of written paths: three SVGs per branch, one summary CSV,
    and the paired gap table when two compatible runs are given.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    histories = [load_run(d) for d in run_dirs]
    if len(histories) > 2:
        raise ValueError("report takes one run directory or a ptq/aligned pair")
    written = []
    for history in histories:
        written.append(_plot_iou_vs_fps(history, out))
        written.append(_plot_fitness(history, out))
        written.append(_plot_progression(history, out))
    written.append(_write_summary_csv(histories, out))
    if len(histories) == 2:
        branches = {h.branch for h in histories}
        if branches != {"ptq", "aligned"}:
            raise ValueError(f"paired report needs one ptq and one aligned run, got {sorted(branches)}")
        ptq = next(h for h in histories if h.branch == "ptq")
        aligned = next(h for h in histories if h.branch == "aligned")
        written.append(_write_gap_csv(searchmod.paired_gap_report(ptq, aligned), out))
    return written
