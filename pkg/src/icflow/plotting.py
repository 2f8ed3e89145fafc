"""Figures written to files: schedule curves, drift curves, loss curves.

SVG output is byte-stable for identical inputs (fixed hash salt, no date).
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "icflow",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "figure.figsize": (5.0, 3.2),
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def plot_schedules(tables: Mapping[str, Sequence[tuple[float, float, float]]], path) -> Path:
    """Left: log-SNR of the shifted grid; right: t -> t' redistribution."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        for label, rows in tables.items():
            t = [r[0] for r in rows[1:-1]]
            shifted = [r[2] for r in rows[1:-1]]
            import numpy as np

            lam = 2 * (np.log1p(-np.asarray(shifted)) - np.log(shifted))
            ax_l.plot(t, lam, label=label)
            ax_r.plot([r[0] for r in rows], [r[2] for r in rows], label=label)
        ax_l.set_xlabel("t (uniform)")
        ax_l.set_ylabel("log-SNR at shifted t")
        ax_r.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax_r.set_xlabel("t")
        ax_r.set_ylabel("t'")
        ax_r.legend(fontsize=7)
        return _save(fig, path)


def plot_drift(curves: Mapping[str, Sequence], path, field: str = "identity") -> Path:
    """Identity score per edit turn, one line per model."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in curves.items():
            turns = [r.turn if hasattr(r, "turn") else int(r["turn"]) for r in rows]
            vals = [getattr(r, field) if hasattr(r, field) else float(r[field]) for r in rows]
            ax.plot(turns, vals, marker="o", ms=3, label=label)
        ax.set_xlabel("edit turn")
        ax.set_ylabel(f"{field} score")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xticks(turns)
        ax.legend()
        return _save(fig, path)


def plot_loss(loss_csv, path) -> Path:
    with open(loss_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows], lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("flow-matching loss")
        return _save(fig, path)


def image_strip(images, path, scale: int = 8) -> Path:
    """Horizontal strip of (3, H, W) images as a nearest-neighbour upscaled PNG."""
    import numpy as np
    from PIL import Image

    tiles = [np.clip(np.rint(im.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8) for im in images]
    pad = np.full((tiles[0].shape[0], 1, 3), 255, dtype=np.uint8)
    strip = np.concatenate([x for t in tiles for x in (t, pad)][:-1], axis=1)
    img = Image.fromarray(strip).resize((strip.shape[1] * scale, strip.shape[0] * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
