"""Gram-matrix style loss over regional detector features.

The real logo contributes one RoI (its ground-truth box); each fake image
contributes ``B >= 1`` RoIs. Each fake RoI's Gram matrix is compared to the
real one by squared Frobenius distance normalised by ``(2*H*W)**2``, and the
per-RoI distances are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from llgan.detector.boxes import Box
from llgan.detector.model import detector_loss


@dataclass
class StyleLossReport:
    distances: list[float]
    loss: torch.Tensor
    content_loss: torch.Tensor | None = None
    detection_loss: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)

    @property
    def B(self) -> int:
        return len(self.distances)

    @property
    def L_S(self) -> float:
        return float(self.loss)


def vectorize_roi(roi: torch.Tensor) -> torch.Tensor:
    """``(C, H, W)`` -> ``(C, H*W)``, each map flattened row-major."""
    if roi.dim() != 3:
        raise ValueError(f"expected a C x H x W RoI, got {tuple(roi.shape)}")
    return roi.reshape(roi.shape[0], -1)


def gram(features: torch.Tensor) -> torch.Tensor:
    """``F @ F.T`` for a ``(C, M)`` matrix, or batched ``(K, C, M)``."""
    if features.shape[-1] < 1:
        raise ValueError("gram: need at least one column")
    return features @ features.transpose(-1, -2)


def roi_style_distance(g_real: torch.Tensor, g_fake: torch.Tensor, height: int, width: int,
                       normalize_channels: bool = False) -> torch.Tensor:
    """Squared Gram distance over ``(2*H*W)**2`` (times ``C**2`` when ``normalize_channels``).

    Accepts a single ``(C, C)`` fake Gram or a ``(K, C, C)`` stack and returns
    a scalar or ``(K,)`` tensor accordingly.
    """
    if g_real.shape[-1] != g_fake.shape[-1] or g_real.shape[-2] != g_fake.shape[-2]:
        raise ValueError(f"Gram size mismatch: {tuple(g_real.shape)} vs {tuple(g_fake.shape)}")
    denom = (2.0 * height * width) ** 2
    if normalize_channels:
        denom *= g_real.shape[-1] ** 2
    return ((g_real - g_fake) ** 2).sum(dim=(-2, -1)) / denom


def style_loss(real_roi: torch.Tensor, fake_rois: torch.Tensor | list[torch.Tensor],
               normalize_channels: bool = False) -> StyleLossReport:
    """Mean normalised Gram distance between one real RoI and ``B`` fake RoIs.

    The real branch is detached, so gradients reach the fake features only.
    """
    if isinstance(fake_rois, (list, tuple)):
        if len(fake_rois) == 0:
            raise ValueError("style_loss: no fake RoIs")
        fake_rois = torch.stack(list(fake_rois))
    if fake_rois.dim() != 4 or fake_rois.shape[0] == 0:
        raise ValueError("style_loss: expected a non-empty K x C x H x W stack of fake RoIs")
    c, h, w = real_roi.shape
    if fake_rois.shape[1:] != (c, h, w):
        raise ValueError(f"RoI shape mismatch: {tuple(real_roi.shape)} vs {tuple(fake_rois.shape[1:])}")
    g_real = gram(vectorize_roi(real_roi.detach()))
    g_fake = gram(fake_rois.reshape(fake_rois.shape[0], c, h * w))
    d = roi_style_distance(g_real, g_fake, h, w, normalize_channels)
    return StyleLossReport(distances=d.detach().tolist(), loss=d.sum() / d.shape[0])


def extend_box(box: Box, margin: float = 20.0, image_size: tuple[int, int] = (282, 282)) -> Box:
    """Grow ``box`` by ``margin`` pixels on every side, clipped to ``image_size`` (H, W)."""
    h, w = image_size
    return Box(max(0.0, box.x1 - margin), max(0.0, box.y1 - margin),
               min(float(w), box.x2 + margin), min(float(h), box.y2 + margin))


def backbone_content_loss(real: dict[str, torch.Tensor], fake: dict[str, torch.Tensor]) -> torch.Tensor:
    """Mean over pyramid levels of the per-level mean squared difference."""
    if set(real) != set(fake):
        raise ValueError(f"feature level mismatch: {sorted(real)} vs {sorted(fake)}")
    terms = []
    for lvl in sorted(real):
        if real[lvl].shape != fake[lvl].shape:
            raise ValueError(f"level {lvl}: {tuple(real[lvl].shape)} vs {tuple(fake[lvl].shape)}")
        terms.append(((fake[lvl] - real[lvl].detach()) ** 2).mean())
    return torch.stack(terms).mean()


def fake_detection_loss(detector, fake_feats: dict[str, torch.Tensor], rpn, gt_boxes: torch.Tensor,
                        image_size: tuple[int, int], thresholds: tuple[float, float] = (0.9, 0.1),
                        rpn_thresholds: tuple[float, float] | None = None,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    """Detector loss on generated images against the paired real ground-truth boxes.

    Uses the strict ``thresholds`` at both the RPN and RoI stages unless
    ``rpn_thresholds`` relaxes the RPN side. The detector is expected to be
    frozen; gradients reach the generator through ``fake_feats``.
    """
    terms = detector_loss(detector, fake_feats, rpn, gt_boxes, image_size, generator=generator,
                          rpn_thresholds=rpn_thresholds or thresholds, roi_thresholds=thresholds)
    return terms["total"]
