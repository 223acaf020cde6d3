"""Figures from run CSVs: loss curves and metric-vs-sweep panels."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import read_csv  # noqa: E402


class PlotInputError(ValueError):
    pass


def _loss_panel(rows, title, path):
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in rows[0]:
        if key in ("step", "lr"):
            continue
        ax.plot(steps, [float(r[key]) for r in rows], label=key, lw=1.2 if key == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _sweep_panel(rows, title, path):
    sweep = rows[0]["sweep"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for metric in ("constructor_psnr", "dew_psnr"):
        by_value = defaultdict(list)
        for r in rows:
            if r.get(metric, "") != "":
                by_value[r["value"]].append(float(r[metric]))
        if not by_value:
            continue
        xs = list(by_value)
        ax.plot(xs, [sum(v) / len(v) for v in by_value.values()], marker="o", label=metric)
    ax.set_xlabel(sweep)
    ax.set_ylabel("PSNR vs oracle (dB)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot(csv_paths, out_dir) -> list[Path]:
    """One PNG per input CSV; the panel type follows the CSV header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in map(Path, csv_paths):
        rows = read_csv(p)
        if not rows:
            raise PlotInputError(f"{p}: no data rows")
        target = out_dir / f"{p.stem}.png"
        if "step" in rows[0]:
            _loss_panel(rows, p.stem, target)
        elif "sweep" in rows[0]:
            _sweep_panel(rows, p.stem, target)
        else:
            raise PlotInputError(f"{p}: neither a loss curve nor an ablation table")
        written.append(target)
    return written
