"""Slow, loop-based reference implementations used to cross-check the fast code.

Each oracle is written from the definition with plain Python loops and
shares no code with the module it checks.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np


def iou_oracle(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_oracle(boxes: Sequence[Sequence[float]], scores: Sequence[float], thr: float) -> list[int]:
    """O(n^2) greedy suppression; ties keep the lower index first."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    suppressed = [False] * len(scores)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if not suppressed[j] and iou_oracle(boxes[i], boxes[j]) > thr:
                suppressed[j] = True
    return keep


def _bilinear(fmap: np.ndarray, y: float, x: float) -> np.ndarray:
    """Value at continuous cell-centre coordinates; zero outside, edge-clamped in the border half-cell."""
    _, h, w = fmap.shape
    if y < -1.0 or y > h or x < -1.0 or x > w:
        return np.zeros(fmap.shape[0])
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * fmap[:, y0, x0] + (1 - dy) * dx * fmap[:, y0, x1]
            + dy * (1 - dx) * fmap[:, y1, x0] + dy * dx * fmap[:, y1, x1])


def roi_align_oracle(fmap: np.ndarray, box: Sequence[float], stride: float,
                     out: tuple[int, int] = (7, 7), sampling: int = 2) -> np.ndarray:
    c, h, w = fmap.shape
    x1 = min(max(box[0], 0.0), w * stride) / stride - 0.5
    y1 = min(max(box[1], 0.0), h * stride) / stride - 0.5
    x2 = min(max(box[2], 0.0), w * stride) / stride - 0.5
    y2 = min(max(box[3], 0.0), h * stride) / stride - 0.5
    bh, bw = (y2 - y1) / out[0], (x2 - x1) / out[1]
    res = np.zeros((c, out[0], out[1]))
    for i in range(out[0]):
        for j in range(out[1]):
            acc = np.zeros(c)
            for sy in range(sampling):
                for sx in range(sampling):
                    y = y1 + (i + (sy + 0.5) / sampling) * bh
                    x = x1 + (j + (sx + 0.5) / sampling) * bw
                    acc += _bilinear(fmap, y, x)
            res[:, i, j] = acc / sampling ** 2
    return res


def detection_eval_oracle(per_image: Sequence[Sequence[float]], threshold: float) -> tuple[int, int]:
    """Enumerate the three per-image cases: empty, nothing above threshold, k above threshold."""
    tp = fp = 0
    for scores in per_image:
        if len(scores) == 0:
            case = "empty"
        elif all(not (s > threshold) for s in scores):
            case = "below"
        else:
            case = "above"
        if case in ("empty", "below"):
            fp += 1
        else:
            k = len([s for s in scores if s > threshold])
            tp += 1
            fp += k - 1
    return tp, fp


def gram_oracle(f: np.ndarray) -> np.ndarray:
    c, m = f.shape
    g = np.zeros((c, c))
    for i, j in itertools.product(range(c), range(c)):
        g[i, j] = sum(f[i, k] * f[j, k] for k in range(m))
    return g


def fid_1d_closed_form(mu_a: float, sd_a: float, mu_b: float, sd_b: float) -> float:
    return (mu_a - mu_b) ** 2 + (sd_a - sd_b) ** 2
