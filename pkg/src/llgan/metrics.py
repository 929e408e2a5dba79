"""Generator evaluation: Inception Score, Frechet distance and detection rate.

Class posteriors and embeddings come from :class:`ProxyEmbedder`, a small
style classifier trained on the logo dataset. Its 256-d penultimate layer
stands in for a large pretrained embedding, so FID values here are only
comparable with each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from llgan.dataset import LabeledSample, batch_iterator
from llgan.detector.model import Detection
from llgan.diffcore import Adam
from llgan.models import sample_latent

DETECTION_THRESHOLD = 0.75
COV_RIDGE = 1e-6


def inception_score(probs: np.ndarray, splits: int = 1) -> float:
    """Mean over ``splits`` of ``exp(E_x KL(p(y|x) || p(y)))``.

    Rows beyond an even division are folded into the last split.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("inception_score: expected a non-empty N x K matrix")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-4):
        raise ValueError("inception_score: rows must be probability distributions")
    n = p.shape[0]
    splits = max(1, min(splits, n))
    size = n // splits
    scores = []
    for k in range(splits):
        part = p[k * size: (k + 1) * size if k < splits - 1 else n]
        py = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(py)), 0.0).sum(axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores))


def matrix_sqrt_psd(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Symmetric square root via eigendecomposition; negative eigenvalues clamp to 0."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix_sqrt_psd: expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise ValueError("matrix_sqrt_psd: input is not symmetric")
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + Tr(A + B - 2 (A^1/2 B A^1/2)^1/2)``."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError(f"frechet_distance: dimension mismatch {mu_a.shape} vs {mu_b.shape}")
    root_a = matrix_sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    cross = matrix_sqrt_psd(0.5 * (middle + middle.T))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))


def feature_stats(feats: np.ndarray, ridge: float = COV_RIDGE) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(feats, dtype=np.float64)
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1)) if x.shape[0] > 1 else np.zeros((x.shape[1],) * 2)
    return mu, cov + ridge * np.eye(x.shape[1])


def fid(feats_a: np.ndarray, feats_b: np.ndarray, ridge: float = COV_RIDGE) -> float:
    a, b = np.asarray(feats_a), np.asarray(feats_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"fid: feature dimension mismatch {a.shape} vs {b.shape}")
    return frechet_distance(*feature_stats(a, ridge), *feature_stats(b, ridge))


@dataclass
class DetectionSummary:
    detection_rate: float
    avg_conf: float
    tp: int
    fp: int
    images_without_detections: int


def detection_eval(per_image: Sequence[Sequence[Detection | float]],
                   threshold: float = DETECTION_THRESHOLD) -> DetectionSummary:
    """One-logo-per-image accounting.

    Per image: the best detection scoring above ``threshold`` is a TP and
    every other above-threshold detection an FP; an image with no detections,
    or whose best detection is not above the threshold, adds one FP. Average
    confidence runs over every detection, including sub-threshold ones.
    """
    tp = fp = empty = 0
    all_scores = []
    for dets in per_image:
        scores = sorted((d.score if isinstance(d, Detection) else float(d) for d in dets), reverse=True)
        all_scores.extend(scores)
        if not scores:
            fp += 1
            empty += 1
            continue
        above = sum(1 for s in scores if s > threshold)
        if above:
            tp += 1
            fp += above - 1
        else:
            fp += 1
    rate = tp / (tp + fp) if tp + fp else 0.0
    avg = float(np.mean(all_scores)) if all_scores else 0.0
    return DetectionSummary(rate, avg, tp, fp, empty)


class ProxyEmbedder(nn.Module):
    """Style classifier whose penultimate layer provides the evaluation embedding."""

    def __init__(self, num_classes: int, embed_dim: int = 256, input_size: int = 96):
        super().__init__()
        self.num_classes = num_classes
        self.input_size = input_size
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, 2, 1), nn.GroupNorm(8, 64), nn.ReLU(inplace=True),
            nn.Conv2d(64, 128, 3, 2, 1), nn.GroupNorm(8, 128), nn.ReLU(inplace=True),
            nn.Conv2d(128, 128, 3, 1, 1), nn.ReLU(inplace=True),
        )
        # mean and max pooling: colour statistics plus the strongest stroke responses
        self.embed = nn.Linear(256, embed_dim)
        self.dropout = nn.Dropout(0.3)
        self.classifier = nn.Linear(embed_dim, num_classes)

    def _prep(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != self.input_size:
            images = F.interpolate(images, size=(self.input_size, self.input_size), mode="bilinear",
                                   align_corners=False, antialias=True)
        return images

    def features(self, images: torch.Tensor) -> torch.Tensor:
        h = self.body(self._prep(images))
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return torch.relu(self.embed(pooled))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.dropout(self.features(images)))

    @torch.no_grad()
    def embed_and_classify(self, images: torch.Tensor, batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
        self.eval()
        feats, probs = [], []
        for chunk in images.split(batch):
            f = self.features(chunk)
            feats.append(f.double().numpy())
            probs.append(torch.softmax(self.classifier(f).double(), dim=1).numpy())
        return np.concatenate(feats), np.concatenate(probs)


def train_proxy_embedder(samples: Sequence[LabeledSample], num_classes: int, epochs: int = 50,
                         batch_size: int = 16, lr: float = 5e-4, seed: int = 0,
                         embed_dim: int = 256) -> ProxyEmbedder:
    if num_classes < 2:
        raise ValueError("proxy embedder needs at least two styles")
    torch.manual_seed(seed)
    model = ProxyEmbedder(num_classes, embed_dim)
    opt = Adam(model.parameters(), lr=lr, weight_decay=1e-4)
    # downsample once; the embedder never sees full-resolution images
    images = model._prep(torch.stack([s.image for s in samples]))
    labels = torch.tensor([s.style_id for s in samples])
    idx = list(range(len(samples)))
    bs = min(batch_size, len(idx))
    gen = torch.Generator().manual_seed(seed)
    shift = model.input_size // 6
    model.train()
    for epoch in range(epochs):
        for batch in batch_iterator(idx, bs, seed, epoch, drop_last=False):
            x = images[batch]
            # colour-preserving augmentation: random flips and shifts
            flip = torch.rand(len(batch), generator=gen) < 0.5
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            dy, dx = torch.randint(-shift, shift + 1, (2,), generator=gen).tolist()
            x = torch.roll(x, (dy, dx), dims=(2, 3))
            opt.zero_grad()
            loss = F.cross_entropy(model(x), labels[batch])
            loss.backward()
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def embedder_accuracy(model: ProxyEmbedder, samples: Sequence[LabeledSample]) -> float:
    images = torch.stack([s.image for s in samples])
    _, probs = model.embed_and_classify(images)
    labels = np.array([s.style_id for s in samples])
    return float((probs.argmax(axis=1) == labels).mean())


@dataclass
class EvalReport:
    fid: float
    is_mean: dict[str, float]
    detection_rate: float
    avg_conf: float
    tp: int
    fp: int
    n: int
    images_without_detections: int
    threshold: float = DETECTION_THRESHOLD
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    CSV_FIELDS = ("n", "fid", "is_1", "is_10", "detection_rate", "avg_conf", "tp", "fp",
                  "images_without_detections")

    def csv_row(self) -> dict:
        return {"n": self.n, "fid": self.fid, "is_1": self.is_mean.get("1"), "is_10": self.is_mean.get("10"),
                "detection_rate": self.detection_rate, "avg_conf": self.avg_conf, "tp": self.tp,
                "fp": self.fp, "images_without_detections": self.images_without_detections}


@torch.no_grad()
def generate_images(generator, n: int, seed: int, batch: int = 16) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    generator.eval()
    out = []
    remaining = n
    while remaining > 0:
        k = min(batch, remaining)
        out.append(generator(sample_latent(k, generator.config.latent_dim, gen)))
        remaining -= k
    return torch.cat(out)


def evaluate_images(fake: torch.Tensor, real: torch.Tensor, detector, embedder: ProxyEmbedder,
                    threshold: float = DETECTION_THRESHOLD) -> tuple[EvalReport, list[list[Detection]]]:
    detections = [detector.detect(img) for img in fake]
    summary = detection_eval(detections, threshold)
    fake_feats, fake_probs = embedder.embed_and_classify(fake)
    real_feats, _ = embedder.embed_and_classify(real)
    report = EvalReport(
        fid=fid(real_feats, fake_feats),
        is_mean={str(s): inception_score(fake_probs, s) for s in (1, 10)},
        detection_rate=summary.detection_rate, avg_conf=summary.avg_conf, tp=summary.tp, fp=summary.fp,
        n=int(fake.shape[0]), images_without_detections=summary.images_without_detections, threshold=threshold,
    )
    return report, detections


def evaluate_generator(generator, detector, embedder: ProxyEmbedder, real_samples: Sequence[LabeledSample],
                       n: int = 512, seed: int = 0,
                       threshold: float = DETECTION_THRESHOLD) -> tuple[EvalReport, torch.Tensor, list]:
    """Generate ``n`` images, detect logos in each and compare embeddings with the real set."""
    fake = generate_images(generator, n, seed)
    real = torch.stack([s.image for s in real_samples])
    report, detections = evaluate_images(fake, real, detector, embedder, threshold)
    return report, fake, detections
