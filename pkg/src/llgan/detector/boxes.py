"""Box bookkeeping: IoU, anchors, delta coding and greedy NMS.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates. Batched
routines take ``(N, 4)`` tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

ANCHOR_SIZES = (16.0, 32.0, 64.0, 128.0, 256.0)
# height / width
ANCHOR_ASPECTS = (0.25, 0.5, 1.0, 1.5, 2.0)
# keeps exp() of the size deltas finite during early training
DELTA_CLAMP = math.log(1000.0 / 16)


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DegenerateBoxError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.as_tuple(), dtype=dtype)

    def clip(self, width: float, height: float) -> "Box":
        return Box(max(0.0, min(self.x1, width)), max(0.0, min(self.y1, height)),
                   max(0.0, min(self.x2, width)), max(0.0, min(self.y2, height)))

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` boxes."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def clip_boxes(boxes: torch.Tensor, width: float, height: float) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def generate_anchors(feature_shape: tuple[int, int], stride: int,
                     sizes: Sequence[float] = ANCHOR_SIZES,
                     aspects: Sequence[float] = ANCHOR_ASPECTS,
                     image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Anchors for every feature-map location, ``len(sizes) * len(aspects)`` per cell.

    Location ``(i, j)`` is centred at ``((j + 0.5) * stride, (i + 0.5) * stride)``.
    Each anchor has area ``size**2`` and ``height / width == aspect``. Output is
    ``(H * W * A, 4)`` ordered location-major, then size, then aspect; anchors
    are clipped to ``image_size`` (H, W) when given.
    """
    fh, fw = feature_shape
    base = []
    for s in sizes:
        for a in aspects:
            w = s / math.sqrt(a)
            h = s * math.sqrt(a)
            base.append((-w / 2, -h / 2, w / 2, h / 2))
    base_t = torch.tensor(base, dtype=torch.float32)
    ys = (torch.arange(fh, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(fw, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    anchors = (centers + base_t[None]).reshape(-1, 4)
    if image_size is not None:
        anchors = clip_boxes(anchors, image_size[1], image_size[0])
    return anchors


def encode_boxes(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Regression targets ``(dx, dy, dw, dh)`` taking ``anchors`` onto ``gt``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    if bool((aw <= 0).any() | (ah <= 0).any() | (gw <= 0).any() | (gh <= 0).any()):
        raise DegenerateBoxError("encode_boxes: non-positive box size")
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor,
                 image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Inverse of :func:`encode_boxes`; clipped to ``image_size`` (H, W) when given."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if bool((aw <= 0).any() | (ah <= 0).any()):
        raise DegenerateBoxError("decode_boxes: non-positive anchor size")
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=DELTA_CLAMP)
    dh = deltas[:, 3].clamp(max=DELTA_CLAMP)
    cx = ax + dx * aw
    cy = ay + dy * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    boxes = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)
    if image_size is not None:
        boxes = clip_boxes(boxes, image_size[1], image_size[0])
    return boxes


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy non-maximum suppression.

    Returns kept indices in descending score order; equal scores are visited
    lowest index first. A box is suppressed when its IoU with an already kept
    box exceeds ``iou_threshold``.
    """
    n = boxes.shape[0]
    if n == 0:
        return torch.zeros(0, dtype=torch.long)
    # stable sort on -score gives the lower-index tie break
    order = torch.sort(-scores.detach(), stable=True).indices
    ious = iou_matrix(boxes.detach()[order], boxes.detach()[order])
    suppressed = torch.zeros(n, dtype=torch.bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return order[torch.tensor(keep, dtype=torch.long)]
