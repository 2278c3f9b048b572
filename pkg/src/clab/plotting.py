"""Figures for the report. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes stable between runs
_PNG_META = {"Software": None}

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def overlap_heatmap(tags: Sequence[str], matrix: np.ndarray, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        m = np.asarray(matrix, dtype=float)
        off = m[~np.eye(len(m), dtype=bool)]
        lo = float(off.min()) if off.size else 0.0
        im = ax.imshow(m, cmap="viridis", vmin=lo, vmax=1.0)
        ax.set_xticks(range(len(tags)), tags)
        ax.set_yticks(range(len(tags)), tags)
        ax.grid(False)
        for i in range(len(tags)):
            for j in range(len(tags)):
                ax.text(j, i, f"{m[i, j]:.3f}", ha="center", va="center", fontsize=7,
                        color="black" if m[i, j] > (lo + 1) / 2 else "white")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        ax.set_title("Fisher overlap")
        return _save(fig, path)


def method_bars(rows: Sequence[Mapping], path: Path, target: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        labels = [r["method"] for r in rows]
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [100 * float(r["cer"]) for r in rows], 0.4, label="CER")
        ax.bar(x + 0.2, [100 * float(r["wer"]) for r in rows], 0.4, label="WER")
        ax.set_xticks(x, labels)
        ax.set_ylabel("error rate (%)")
        ax.set_title(f"{target} test")
        ax.legend()
        return _save(fig, path)


def forgetting_bars(rows: Sequence[Mapping], languages: Sequence[str], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        models = [r for r in rows if r["model"] != "Baseline"]
        width = 0.8 / max(len(models), 1)
        x = np.arange(len(languages))
        for k, r in enumerate(models):
            ax.bar(x - 0.4 + width * (k + 0.5), [100 * float(r[f"{lid}_dcer"]) for lid in languages], width,
                   label=r["model"])
        ax.axhline(0.0, color="black", lw=0.6)
        ax.set_xticks(x, languages)
        ax.set_ylabel("CER change vs base (points)")
        ax.legend(fontsize=6, ncol=2)
        return _save(fig, path)


def loss_curves(curves: Mapping[str, Sequence[tuple[int, float]]], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 2.8))
        for name, pts in curves.items():
            if not pts:
                continue
            s, l = zip(*pts)
            ax.plot(s, l, lw=1.0, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        ax.legend(fontsize=6)
        return _save(fig, path)


def lambda_sweep(tables: Mapping[str, Sequence[Mapping]], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 2.8))
        for name, rows in tables.items():
            lam = [float(r["lambda"]) for r in rows]
            ax.plot(lam, [100 * float(r["dev_cer_new"]) for r in rows], marker="o", lw=1.0, label=f"{name} new")
            ax.plot(lam, [100 * float(r["forgetting"]) for r in rows], marker="s", lw=1.0, ls="--",
                    label=f"{name} forgetting")
        ax.set_xscale("log")
        ax.set_xlabel("lambda")
        ax.set_ylabel("dev CER (%)")
        ax.legend(fontsize=6)
        return _save(fig, path)
