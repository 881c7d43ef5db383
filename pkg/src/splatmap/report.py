"""Report outputs: delimited metrics/training logs and matplotlib figures
rendered alongside them."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TRAINING_LOG_FIELDS = ("iteration", "keyframe", "l1", "dssim", "loss", "psnr")


def write_training_log(path, entries) -> None:
    """CSV of per-iteration loss terms and PSNR."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAINING_LOG_FIELDS)
        for e in entries:
            w.writerow([e["iteration"], e["keyframe"], f"{e['l1']:.8f}",
                        f"{e['dssim']:.8f}", f"{e['loss']:.8f}", f"{e['psnr']:.4f}"])


def write_metrics_csv(path, rows, averages) -> None:
    """Per-view metrics plus summary rows; formatting is deterministic."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view_index", "kind", "psnr_db", "ssim"])
        for r in rows:
            w.writerow([r["view_index"], r["kind"], f"{r['psnr']:.4f}",
                        f"{r['ssim']:.6f}"])
        for kind, (p, s) in averages.items():
            w.writerow(["mean", kind, f"{p:.4f}", f"{s:.6f}"])


def read_metrics_csv(path):
    rows = []
    averages = {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            if rec["view_index"] == "mean":
                averages[rec["kind"]] = (float(rec["psnr_db"]), float(rec["ssim"]))
            else:
                rows.append({"view_index": int(rec["view_index"]),
                             "kind": rec["kind"],
                             "psnr": float(rec["psnr_db"]),
                             "ssim": float(rec["ssim"])})
    return rows, averages


def plot_training_curves(path, entries) -> None:
    if not entries:
        return
    it = [e["iteration"] for e in entries]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(it, [e["loss"] for e in entries], lw=0.8, label="total")
    ax1.plot(it, [e["l1"] for e in entries], lw=0.8, alpha=0.7, label="L1")
    ax1.plot(it, [e["dssim"] for e in entries], lw=0.8, alpha=0.7, label="D-SSIM")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(it, [e["psnr"] for e in entries], lw=0.8, color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("train PSNR (dB)")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_view_metrics(path, rows) -> None:
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(8, 3.5))
    colors = {"train": "tab:blue", "novel": "tab:orange"}
    for kind in ("train", "novel"):
        sel = [r for r in rows if r["kind"] == kind]
        if sel:
            ax.bar([r["view_index"] for r in sel], [r["psnr"] for r in sel],
                   width=0.9, color=colors[kind], label=kind)
    ax.set_xlabel("frame index")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3, axis="y")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_benchmarks(path, rows) -> None:
    """Paired-bar chart of baseline vs accelerated medians per workload."""
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = np.arange(len(rows))
    base = [r["baseline_median_s"] for r in rows]
    fast = [r["accelerated_median_s"] for r in rows]
    ax.bar(x - 0.2, base, width=0.4, label="baseline")
    ax.bar(x + 0.2, fast, width=0.4, label="accelerated")
    ax.set_xticks(x)
    ax.set_xticklabels([r["workload"] for r in rows], rotation=20, ha="right",
                       fontsize=8)
    ax.set_ylabel("median seconds")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, axis="y")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_bench_csv(path, rows) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v)
                        for k, v in r.items()})
