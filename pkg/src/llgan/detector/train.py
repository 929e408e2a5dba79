"""Training and held-out evaluation of the logo detector."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import torch

from llgan.dataset import LabeledSample, batch_iterator, collate
from llgan.detector.boxes import iou
from llgan.detector.model import DetectorConfig, LogoDetector, detector_loss
from llgan.diffcore import Adam

log = logging.getLogger(__name__)


@dataclass
class DetectorTrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 5e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    seed: int = 0
    time_budget: float | None = None  # seconds
    hflip: bool = True


def _flip(images: torch.Tensor, boxes: torch.Tensor, mask: torch.Tensor):
    w = images.shape[-1]
    flipped = boxes.clone()
    flipped[:, 0] = w - boxes[:, 2]
    flipped[:, 2] = w - boxes[:, 0]
    images = torch.where(mask[:, None, None, None], images.flip(-1), images)
    boxes = torch.where(mask[:, None], flipped, boxes)
    return images, boxes


def train_detector(samples: Sequence[LabeledSample], cfg: DetectorTrainConfig | None = None,
                   detector: LogoDetector | None = None, on_step=None) -> LogoDetector:
    """Train from scratch (or continue ``detector``) on labelled samples.

    ``on_step(step, losses)`` is called after every update. Training stops
    early when ``time_budget`` seconds have elapsed.
    """
    cfg = cfg or DetectorTrainConfig()
    torch.manual_seed(cfg.seed)
    det = detector or LogoDetector(DetectorConfig())
    det.train()
    opt = Adam(det.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    bs = min(cfg.batch_size, len(samples))
    start = time.monotonic()
    step = 0
    for epoch in range(cfg.epochs):
        for batch in batch_iterator(list(samples), bs, cfg.seed, epoch, drop_last=True):
            images, boxes, _ = collate(batch)
            if cfg.hflip:
                images, boxes = _flip(images, boxes, torch.rand(len(batch), generator=gen) < 0.5)
            size = tuple(images.shape[-2:])
            feats = det.features(images)
            rpn = det.rpn_forward(feats, size)
            losses = detector_loss(det, feats, rpn, boxes, size, generator=gen)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            step += 1
            if on_step is not None:
                on_step(step, {k: float(v.detach()) for k, v in losses.items()})
            if cfg.time_budget is not None and time.monotonic() - start > cfg.time_budget:
                log.info("detector time budget reached after %d steps", step)
                det.trained.fill_(1.0)
                return det.eval()
        log.info("detector epoch %d done (%d steps)", epoch + 1, step)
    det.trained.fill_(1.0)
    return det.eval()


def localization_rate(detector: LogoDetector, samples: Sequence[LabeledSample], score_thresh: float = 0.5,
                      iou_thresh: float = 0.5) -> float:
    """Fraction of images whose top detection clears ``score_thresh`` and overlaps the truth."""
    hits = 0
    for s in samples:
        dets = detector.detect(s.image)
        if dets and dets[0].score > score_thresh and iou(dets[0].box, s.gt_box) >= iou_thresh:
            hits += 1
    return hits / max(1, len(samples))
