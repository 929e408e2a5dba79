"""Figures written next to the CLI's JSON/CSV output."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from llgan.detector.boxes import Box  # noqa: E402


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(N, 3, H, W)`` in [-1, 1] -> ``(N, H, W, 3)`` uint8."""
    arr = ((images.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).cpu().numpy()


def image_grid(images: torch.Tensor, nrow: int = 4, pad: int = 2,
               boxes: Sequence[Sequence[Box]] | None = None) -> Image.Image:
    """Tile images into a grid; optional per-image boxes are drawn in red."""
    arr = to_uint8(images)
    n, h, w, _ = arr.shape
    ncol = min(nrow, n)
    rows = -(-n // ncol)
    canvas = Image.new("RGB", (ncol * (w + pad) + pad, rows * (h + pad) + pad), (40, 40, 40))
    draw = ImageDraw.Draw(canvas)
    for i in range(n):
        r, c = divmod(i, ncol)
        x0, y0 = pad + c * (w + pad), pad + r * (h + pad)
        canvas.paste(Image.fromarray(arr[i]), (x0, y0))
        for b in (boxes[i] if boxes is not None else ()):
            draw.rectangle([x0 + b.x1, y0 + b.y1, x0 + b.x2, y0 + b.y2], outline=(255, 0, 0), width=2)
    return canvas


def read_loss_log(path: str | Path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                if k == "phase" or v in ("", None):
                    continue
                cols.setdefault(k, []).append(float(v))
    return cols


def plot_losses(log_path: str | Path, out_path: str | Path) -> Path:
    with open(log_path) as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("L_D", "L_G", "L_S", "L_content", "L_det"):
        pts = [(int(r["step"]), float(r[key])) for r in rows if r.get(key)]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_score_histogram(scores: Sequence[float], threshold: float, out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(list(scores), bins=20, range=(0.0, 1.0), color="steelblue")
    ax.axvline(threshold, color="crimson", ls="--", label=f"threshold {threshold:g}")
    ax.set_xlabel("top detection score")
    ax.set_ylabel("images")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)
