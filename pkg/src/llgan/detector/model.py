"""Miniature two-class Faster R-CNN style logo detector.

Backbone of six conv blocks feeding a two-level feature pyramid (strides 4
and 8, 256 channels each), a shared RPN head with 25 anchors per location,
RoIAlign pooling to 256 x 7 x 7 and a two-layer fc head predicting
logo-vs-background and box refinements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from llgan.detector.boxes import (ANCHOR_ASPECTS, ANCHOR_SIZES, Box, clip_boxes, decode_boxes,
                                  encode_boxes, generate_anchors, iou_matrix, nms)
from llgan.detector.roi_align import roi_align

LEVELS = ("p2", "p3")
STRIDES = {"p2": 4, "p3": 8}
FPN_CHANNELS = 256
ROI_SIZE = (7, 7)
# boxes with area above LARGE_ROI_SIDE**2 pool from the coarser level
LARGE_ROI_SIDE = 96.0


class DetectorNotTrainedError(RuntimeError):
    pass


@dataclass
class DetectorConfig:
    anchor_sizes: tuple[float, ...] = ANCHOR_SIZES
    anchor_aspects: tuple[float, ...] = ANCHOR_ASPECTS
    rpn_pre_nms_top_n: int = 600
    rpn_post_nms_top_n: int = 1024
    rpn_nms_thresh: float = 0.7
    rpn_pos_thresh: float = 0.7
    rpn_neg_thresh: float = 0.3
    rpn_batch_per_image: int = 256
    rpn_positive_fraction: float = 0.5
    roi_pos_thresh: float = 0.5
    roi_neg_thresh: float = 0.5
    roi_batch_per_image: int = 64
    roi_positive_fraction: float = 0.25
    head_hidden: int = 512
    score_thresh: float = 0.05
    detection_nms_thresh: float = 0.3
    detections_per_image: int = 10
    min_box_size: float = 2.0
    roi_level: str | None = None  # force "p2" or "p3"


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


@dataclass
class RPNOutput:
    anchors: torch.Tensor  # (A, 4), shared across the batch
    objectness: torch.Tensor  # (N, A)
    deltas: torch.Tensor  # (N, A, 4)
    proposals: list[torch.Tensor] = field(default_factory=list)  # per image (P, 4)


def _block(cin, cout, kernel, stride, pad):
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, stride, pad),
                         nn.GroupNorm(8, cout), nn.ReLU(inplace=True))


class Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        self.blocks = nn.ModuleList([
            _block(3, 32, 4, 2, 1),     # /2
            _block(32, 32, 3, 1, 1),
            _block(32, 64, 2, 2, 0),    # /4  -> C2
            _block(64, 64, 3, 1, 1),
            _block(64, 128, 2, 2, 0),   # /8
            _block(128, 128, 3, 1, 1),  # -> C3
        ])

    def forward(self, x):
        c2 = None
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i == 3:
                c2 = x
        return c2, x


class LogoDetector(nn.Module):
    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config or DetectorConfig()
        cfg = self.config
        self.backbone = Backbone()
        self.lateral2 = nn.Conv2d(64, FPN_CHANNELS, 1)
        self.lateral3 = nn.Conv2d(128, FPN_CHANNELS, 1)
        self.num_anchors = len(cfg.anchor_sizes) * len(cfg.anchor_aspects)
        self.rpn_conv = nn.Sequential(nn.Conv2d(FPN_CHANNELS, 64, 1), nn.ReLU(inplace=True),
                                      nn.Conv2d(64, 64, 3, 1, 1), nn.ReLU(inplace=True))
        self.rpn_obj = nn.Conv2d(64, self.num_anchors, 1)
        self.rpn_delta = nn.Conv2d(64, self.num_anchors * 4, 1)
        flat = FPN_CHANNELS * ROI_SIZE[0] * ROI_SIZE[1]
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(flat, cfg.head_hidden), nn.ReLU(inplace=True),
                                  nn.Linear(cfg.head_hidden, cfg.head_hidden), nn.ReLU(inplace=True))
        self.cls_score = nn.Linear(cfg.head_hidden, 2)
        self.bbox_pred = nn.Linear(cfg.head_hidden, 4)
        self.register_buffer("trained", torch.zeros((), dtype=torch.float32))
        self._anchor_cache: dict = {}
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        for m in (self.rpn_obj, self.rpn_delta):
            nn.init.normal_(m.weight, std=0.01)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.bbox_pred.bias)

    def freeze(self) -> "LogoDetector":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def is_trained(self) -> bool:
        return bool(self.trained.item() > 0)

    # feature extraction

    def features(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """Pyramid maps ``{"p2": stride 4, "p3": stride 8}``, 256 channels each."""
        if images.dim() == 3:
            images = images[None]
        h, w = images.shape[-2:]
        if min(h, w) < 2 * max(STRIDES.values()):
            raise ValueError(f"image {h}x{w} smaller than twice the largest stride")
        c2, c3 = self.backbone(images)
        p3 = self.lateral3(c3)
        p2 = self.lateral2(c2) + F.interpolate(p3, size=c2.shape[-2:], mode="nearest")
        return {"p2": p2, "p3": p3}

    # region proposals

    def anchors_for(self, feats: dict[str, torch.Tensor], image_size: tuple[int, int]) -> torch.Tensor:
        key = tuple((lvl, tuple(feats[lvl].shape[-2:])) for lvl in LEVELS) + (image_size,)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = torch.cat([
                generate_anchors(tuple(feats[lvl].shape[-2:]), STRIDES[lvl], self.config.anchor_sizes,
                                 self.config.anchor_aspects, image_size) for lvl in LEVELS])
        return self._anchor_cache[key]

    def rpn_forward(self, feats: dict[str, torch.Tensor], image_size: tuple[int, int]) -> RPNOutput:
        cfg = self.config
        objs, deltas, counts = [], [], []
        for lvl in LEVELS:
            t = self.rpn_conv(feats[lvl])
            n, _, fh, fw = t.shape
            # (N, A*?, H, W) -> (N, H*W*A, ?) matching generate_anchors ordering
            objs.append(self.rpn_obj(t).permute(0, 2, 3, 1).reshape(n, -1))
            deltas.append(self.rpn_delta(t).reshape(n, self.num_anchors, 4, fh, fw)
                          .permute(0, 3, 4, 1, 2).reshape(n, -1, 4))
            counts.append(fh * fw * self.num_anchors)
        anchors = self.anchors_for(feats, image_size)
        objectness = torch.cat(objs, 1)
        delta_all = torch.cat(deltas, 1)
        proposals = []
        with torch.no_grad():
            for i in range(objectness.shape[0]):
                cand_boxes, cand_scores = [], []
                start = 0
                for cnt in counts:
                    sl = slice(start, start + cnt)
                    s = objectness[i, sl]
                    k = min(cfg.rpn_pre_nms_top_n, cnt)
                    top = torch.topk(s, k).indices
                    boxes = decode_boxes(anchors[sl][top], delta_all[i, sl][top], image_size)
                    cand_boxes.append(boxes)
                    cand_scores.append(s[top])
                    start += cnt
                boxes = torch.cat(cand_boxes)
                scores = torch.cat(cand_scores)
                wh = boxes[:, 2:] - boxes[:, :2]
                ok = (wh >= cfg.min_box_size).all(dim=1)
                boxes, scores = boxes[ok], scores[ok]
                keep = nms(boxes, scores, cfg.rpn_nms_thresh)[: cfg.rpn_post_nms_top_n]
                proposals.append(boxes[keep])
        return RPNOutput(anchors, objectness, delta_all, proposals)

    # regional features

    def roi_level(self, boxes: torch.Tensor) -> torch.Tensor:
        if self.config.roi_level is not None:
            idx = LEVELS.index(self.config.roi_level)
            return torch.full((boxes.shape[0],), idx, dtype=torch.long)
        area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        return (area > LARGE_ROI_SIDE ** 2).long()

    def roi_features(self, feats: dict[str, torch.Tensor], index: int, boxes: torch.Tensor) -> torch.Tensor:
        """RoIAlign ``(K, 4)`` boxes of image ``index`` into ``(K, 256, 7, 7)``."""
        levels = self.roi_level(boxes)
        out = None
        for li, lvl in enumerate(LEVELS):
            sel = (levels == li).nonzero().flatten()
            if sel.numel() == 0:
                continue
            pooled = roi_align(feats[lvl][index], boxes[sel], STRIDES[lvl], ROI_SIZE)
            if out is None:
                out = pooled.new_zeros((boxes.shape[0],) + pooled.shape[1:])
            out = out.index_copy(0, sel, pooled)
        if out is None:
            out = feats[LEVELS[0]].new_zeros((0, FPN_CHANNELS) + ROI_SIZE)
        return out

    def roi_head_forward(self, roi_feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Class logits ``(K, 2)`` (background, logo) and box deltas ``(K, 4)``."""
        h = self.head(roi_feats)
        return self.cls_score(h), self.bbox_pred(h)

    # inference

    @torch.no_grad()
    def detect(self, image: torch.Tensor) -> list[Detection]:
        """Detections for one ``(3, H, W)`` image in [-1, 1], best score first."""
        if not self.is_trained:
            raise DetectorNotTrainedError("detector weights are untrained or not loaded")
        was_training = self.training
        self.eval()
        try:
            return self._detect(image)
        finally:
            self.train(was_training)

    def _detect(self, image):
        cfg = self.config
        h, w = image.shape[-2:]
        feats = self.features(image[None])
        rpn = self.rpn_forward(feats, (h, w))
        props = rpn.proposals[0]
        if props.shape[0] == 0:
            return []
        scores, boxes = [], []
        for chunk in props.split(256):
            logits, deltas = self.roi_head_forward(self.roi_features(feats, 0, chunk))
            scores.append(torch.softmax(logits, dim=1)[:, 1])
            boxes.append(decode_boxes(chunk, deltas, (h, w)))
        scores = torch.cat(scores)
        boxes = torch.cat(boxes)
        wh = boxes[:, 2:] - boxes[:, :2]
        ok = (scores > cfg.score_thresh) & (wh > 0).all(dim=1)
        boxes, scores = boxes[ok], scores[ok]
        keep = nms(boxes, scores, cfg.detection_nms_thresh)[: cfg.detections_per_image]
        return [Detection(Box.from_seq(boxes[i].tolist()), float(scores[i])) for i in keep]


def backbone_fpn_forward(detector: LogoDetector, image: torch.Tensor) -> dict[str, torch.Tensor]:
    return detector.features(image)


def rpn_forward(detector: LogoDetector, feats: dict[str, torch.Tensor],
                image_size: tuple[int, int]) -> RPNOutput:
    return detector.rpn_forward(feats, image_size)


def roi_head_forward(detector: LogoDetector, roi_feats: torch.Tensor):
    return detector.roi_head_forward(roi_feats)


def detect(detector: LogoDetector, image: torch.Tensor) -> list[Detection]:
    return detector.detect(image)


def select_positive_rois(proposals: torch.Tensor, gt_box: torch.Tensor, pos_thresh: float = 0.9,
                         mode: str = "fake") -> torch.Tensor:
    """Regions whose features enter the style loss.

    ``real`` skips the proposals and returns the ground-truth box alone.
    ``fake`` keeps proposals with IoU >= ``pos_thresh`` against the ground
    truth and always appends the ground-truth box, so at least one box is
    returned.
    """
    gt = gt_box.reshape(1, 4).to(torch.float32)
    if mode == "real":
        return gt.clone()
    if mode != "fake":
        raise ValueError(f"unknown mode {mode!r}")
    if proposals.numel() == 0:
        return gt.clone()
    ious = iou_matrix(proposals.detach().to(torch.float32), gt)[:, 0]
    return torch.cat([proposals.detach().to(torch.float32)[ious >= pos_thresh], gt])


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def _sample(labels: torch.Tensor, batch: int, pos_fraction: float, generator) -> torch.Tensor:
    """Indices of a random subset of labelled entries (1 = pos, 0 = neg, -1 = ignore)."""
    pos = (labels == 1).nonzero().flatten()
    neg = (labels == 0).nonzero().flatten()
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return torch.cat([pos, neg])


class DegenerateImageError(ValueError):
    pass


def match_labels(ious: torch.Tensor, pos_thresh: float, neg_thresh: float,
                 allow_low_quality: bool = True) -> torch.Tensor:
    """1 for IoU >= pos, 0 for IoU < neg, -1 in between; ``ious`` is 1-D."""
    labels = torch.full_like(ious, -1, dtype=torch.long)
    labels[ious < neg_thresh] = 0
    labels[ious >= pos_thresh] = 1
    if allow_low_quality and ious.numel():
        best = ious.max()
        if best > 0:
            labels[ious == best] = 1
    return labels


def detector_loss(detector: LogoDetector, feats: dict[str, torch.Tensor], rpn: RPNOutput,
                  gt_boxes: torch.Tensor, image_size: tuple[int, int],
                  generator: torch.Generator | None = None,
                  rpn_thresholds: tuple[float, float] | None = None,
                  roi_thresholds: tuple[float, float] | None = None,
                  allow_low_quality: bool = True, beta: float = 1.0) -> dict[str, torch.Tensor]:
    """RPN objectness + box terms and RoI-head classification + box terms.

    Anchors/RoIs with IoU between the negative and positive thresholds are
    ignored; box terms use positives only. Returns the four components and
    their sum under ``"total"``.
    """
    cfg = detector.config
    rpn_pos, rpn_neg = rpn_thresholds or (cfg.rpn_pos_thresh, cfg.rpn_neg_thresh)
    roi_pos, roi_neg = roi_thresholds or (cfg.roi_pos_thresh, cfg.roi_neg_thresh)
    n = rpn.objectness.shape[0]
    gt_boxes = gt_boxes.reshape(n, 4).to(torch.float32)
    terms = {"rpn_obj": [], "rpn_box": [], "roi_cls": [], "roi_box": []}
    zero = rpn.objectness.sum() * 0.0
    for i in range(n):
        gt = gt_boxes[i:i + 1]
        ious = iou_matrix(rpn.anchors, gt)[:, 0]
        labels = match_labels(ious, rpn_pos, rpn_neg, allow_low_quality)
        if not bool((labels >= 0).any()):
            raise DegenerateImageError("no positive or negative anchors for this image")
        idx = _sample(labels, cfg.rpn_batch_per_image, cfg.rpn_positive_fraction, generator)
        target = (labels[idx] == 1).to(rpn.objectness.dtype)
        terms["rpn_obj"].append(F.binary_cross_entropy_with_logits(rpn.objectness[i, idx], target))
        pos = idx[labels[idx] == 1]
        if pos.numel():
            reg = encode_boxes(rpn.anchors[pos], gt.expand(pos.numel(), 4))
            terms["rpn_box"].append(smooth_l1(rpn.deltas[i, pos] - reg, beta).sum(1).mean())
        else:
            terms["rpn_box"].append(zero)

        props = torch.cat([rpn.proposals[i], gt])
        r_ious = iou_matrix(props, gt)[:, 0]
        r_labels = torch.full_like(r_ious, -1, dtype=torch.long)
        r_labels[r_ious < roi_neg] = 0
        r_labels[r_ious >= roi_pos] = 1
        ridx = _sample(r_labels, cfg.roi_batch_per_image, cfg.roi_positive_fraction, generator)
        if ridx.numel() == 0:
            terms["roi_cls"].append(zero)
            terms["roi_box"].append(zero)
            continue
        logits, deltas = detector.roi_head_forward(detector.roi_features(feats, i, props[ridx]))
        cls_target = (r_labels[ridx] == 1).long()
        terms["roi_cls"].append(F.cross_entropy(logits, cls_target))
        rpos = (cls_target == 1).nonzero().flatten()
        if rpos.numel():
            reg = encode_boxes(props[ridx][rpos], gt.expand(rpos.numel(), 4))
            terms["roi_box"].append(smooth_l1(deltas[rpos] - reg, beta).sum(1).mean())
        else:
            terms["roi_box"].append(zero)
    out = {k: torch.stack(v).mean() for k, v in terms.items()}
    out["total"] = out["rpn_obj"] + out["rpn_box"] + out["roi_cls"] + out["roi_box"]
    return out
