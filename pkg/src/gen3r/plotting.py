"""Figures for training curves, metric comparisons and latent statistics."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False, "savefig.dpi": 120})


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}
    return cols


def plot_loss_curves(csv_paths: dict, out_path) -> Path:
    """One panel per stage: raw total loss plus its moving average, log scale."""
    names = [n for n, p in csv_paths.items() if Path(p).exists()]
    if not names:
        raise FileNotFoundError("no loss curves to plot")
    cols = min(3, len(names))
    rows = (len(names) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.4 * cols, 2.6 * rows), squeeze=False)
    for ax, name in zip(axes.flat, names):
        d = read_loss_csv(csv_paths[name])
        ax.plot(d["step"], d["total"], color="0.75", lw=0.6)
        ax.plot(d["step"], d["ema"], color="C0", lw=1.2)
        ax.set_yscale("log")
        ax.set_title(name)
        ax.set_xlabel("step")
    for ax in list(axes.flat)[len(names):]:
        ax.axis("off")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_metric_bars(reports: dict, metric: str, out_path) -> Path:
    """Grouped per-scene bars, one group per scene, one bar per method."""
    methods = list(reports)
    scenes = sorted({r["scene"] for rep in reports.values() for r in rep["rows"]})
    x = np.arange(len(scenes))
    width = 0.8 / max(1, len(methods))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(scenes) + 2), 2.8))
    for k, m in enumerate(methods):
        by_scene = {r["scene"]: r.get(metric) for r in reports[m]["rows"]}
        vals = [np.nan if by_scene.get(s) is None else by_scene[s] for s in scenes]
        ax.bar(x + (k - (len(methods) - 1) / 2) * width, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([s.replace("scene_", "") for s in scenes], rotation=0)
    ax.set_ylabel(metric)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_latent_stats(table: dict, out_path) -> Path:
    """Per-channel mean offset (in prior sigmas) and variance ratio for each geometry latent source."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.6))
    for k, (name, gate) in enumerate(table.items()):
        off = np.asarray(gate["mean_offsets_sigma"])
        ratio = np.asarray(gate["var_ratios"])
        ch = np.arange(len(off))
        a1.plot(ch, off, "o-", ms=3, label=name)
        a2.plot(ch, ratio, "o-", ms=3, label=name)
    a1.axhline(0.5, color="0.5", ls="--", lw=0.8)
    a1.set_ylabel("|mean offset| / sigma_A")
    a2.axhspan(0.5, 2.0, color="0.9")
    a2.set_yscale("log")
    a2.set_ylabel("var_G / var_A")
    for ax in (a1, a2):
        ax.set_xlabel("channel")
    a1.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
