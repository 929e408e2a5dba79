"""Two-phase GAN training: DCGAN+ pretraining, then LL-GAN fine-tuning.

Both phases alternate one discriminator update on real (label 1) and fake
(label 0) images with one generator update that scores the same fake batch,
relabelled as real, through the freshly updated discriminator. LL-GAN adds
the regional style loss (and optional extensions) to the generator's
objective; the detector stays frozen throughout.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import torch

from llgan import checkpoint as ckpt
from llgan.dataset import LabeledSample, batch_iterator, collate, load_samples, read_manifest
from llgan.detector.boxes import Box
from llgan.detector.model import LogoDetector, select_positive_rois
from llgan.diffcore import Adam, bce_with_logits
from llgan.models import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, init_weights,
                          sample_latent)
from llgan.style import backbone_content_loss, extend_box, fake_detection_loss, style_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "phase", "L_D", "L_G", "L_S", "L_content", "L_det", "B_mean")

VARIANTS = {
    "base": (False, False, False),
    "frcnn": (True, False, False),
    "boxes": (False, True, False),
    "backbone": (False, False, True),
    "full": (True, True, True),
}


class NonFiniteLossError(RuntimeError):
    pass


class MissingBoxError(ValueError):
    pass


@dataclass
class TrainConfig:
    phase: str = "dcgan"
    epochs: int = 1000
    batch_size: int = 128
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    latent_dim: int = 500
    channel_scale: float = 1.0
    d_l3_depth: int = 128
    frcnn_loss: bool = False
    extended_boxes: bool = False
    backbone_features: bool = False
    box_margin: float = 20.0
    extend_scope: str = "both"  # real | fake | both
    lambda_s: float = 1.0
    normalize_channels: bool = False
    roi_pos_thresh: float = 0.9
    roi_neg_thresh: float = 0.1
    relax_rpn_thresholds: bool = False
    seed: int = 0
    dataset: str = ""
    subset: str = "train"
    checkpoint_dir: str = "checkpoints"
    detector_checkpoint: str = ""
    init_checkpoint: str = ""
    sample_every: int = 200
    checkpoint_every: int = 0  # steps; 0 = end of every epoch
    max_steps: int = 0  # 0 = no cap
    resume: bool = True

    def __post_init__(self):
        if self.phase not in ("dcgan", "llgan"):
            raise ValueError(f"unknown phase {self.phase!r}")
        for name in ("lr_g", "lr_d", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.extend_scope not in ("real", "fake", "both"):
            raise ValueError(f"extend_scope must be real, fake or both, not {self.extend_scope!r}")

    def apply_variant(self, variant: str) -> "TrainConfig":
        try:
            self.frcnn_loss, self.extended_boxes, self.backbone_features = VARIANTS[variant]
        except KeyError as exc:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from exc
        return self

    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = {"int": int, "float": float, "bool": bool, "str": str}
        return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


@dataclass
class GanState:
    G: Generator
    D: Discriminator
    opt_g: Adam
    opt_d: Adam
    z_gen: torch.Generator
    aux_gen: torch.Generator
    step: int = 0


def build_state(cfg: TrainConfig) -> GanState:
    G = init_weights(Generator(GeneratorConfig(cfg.latent_dim, cfg.channel_scale)), cfg.seed)
    D = init_weights(Discriminator(DiscriminatorConfig(cfg.channel_scale, cfg.d_l3_depth)), cfg.seed + 1)
    betas = (cfg.beta1, cfg.beta2)
    opt_g = Adam(G.parameters(), lr=cfg.lr_g, betas=betas, weight_decay=cfg.weight_decay)
    opt_d = Adam(D.parameters(), lr=cfg.lr_d, betas=betas, weight_decay=cfg.weight_decay)
    z_gen = torch.Generator().manual_seed(cfg.seed)
    aux_gen = torch.Generator().manual_seed(cfg.seed + 7919)
    return GanState(G, D, opt_g, opt_d, z_gen, aux_gen)


def _check_finite(**losses):
    vals = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items() if v is not None}
    for name, v in vals.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is {v}; aborting (all terms: {vals})")


def discriminator_step(real: torch.Tensor, fake: torch.Tensor, D: Discriminator, opt_d: Adam) -> torch.Tensor:
    """One D update on real (label 1) and detached fake (label 0) images."""
    opt_d.zero_grad()
    logits_real = D(real)
    logits_fake = D(fake.detach())
    loss = (bce_with_logits(logits_real, torch.ones_like(logits_real))
            + bce_with_logits(logits_fake, torch.zeros_like(logits_fake)))
    _check_finite(L_D=loss)
    loss.backward()
    opt_d.step()
    return loss.detach()


def generator_adversarial_loss(fake: torch.Tensor, D: Discriminator) -> torch.Tensor:
    logits = D(fake)
    return bce_with_logits(logits, torch.ones_like(logits))


def train_dcgan_step(real: torch.Tensor, G: Generator, D: Discriminator, opt_g: Adam, opt_d: Adam,
                     z_gen: torch.Generator | None = None) -> tuple[float, float]:
    if real.shape[0] < 2:
        raise ValueError("training batches need at least two images")
    G.train()
    D.train()
    z = sample_latent(real.shape[0], G.config.latent_dim, z_gen)
    fake = G(z)
    l_d = discriminator_step(real, fake, D, opt_d)
    opt_g.zero_grad()
    l_g = generator_adversarial_loss(fake, D)
    _check_finite(L_D=l_d, L_G=l_g)
    l_g.backward()
    opt_g.step()
    return float(l_d), float(l_g.detach())


def _box_tensor(box: Box) -> torch.Tensor:
    return box.tensor().reshape(1, 4)


@torch.no_grad()
def real_roi_features(image: torch.Tensor, gt_box: Box, detector: LogoDetector,
                      feats: dict[str, torch.Tensor] | None = None, index: int = 0) -> torch.Tensor:
    """The single ``(256, 7, 7)`` RoI of a real image at its ground-truth box, without a graph."""
    if not isinstance(gt_box, Box):
        gt_box = Box.from_seq(gt_box)
    if feats is None:
        feats = detector.features(image[None] if image.dim() == 3 else image)
        index = 0
    boxes = select_positive_rois(torch.zeros(0, 4), _box_tensor(gt_box), mode="real")
    return detector.roi_features(feats, index, boxes)[0].detach()


@dataclass
class LLGANReport:
    L_D: float
    L_G: float
    L_S: float
    B: list[int]
    L_content: float | None = None
    L_det: float | None = None

    def terms(self) -> dict[str, float]:
        out = {"L_D": self.L_D, "L_G": self.L_G, "L_S": self.L_S}
        if self.L_content is not None:
            out["L_content"] = self.L_content
        if self.L_det is not None:
            out["L_det"] = self.L_det
        return out

    @property
    def B_mean(self) -> float:
        return sum(self.B) / len(self.B)


def train_llgan_step(real: torch.Tensor, gt_boxes: Sequence[Box] | torch.Tensor, G: Generator, D: Discriminator,
                     opt_g: Adam, opt_d: Adam, detector: LogoDetector, cfg: TrainConfig,
                     z_gen: torch.Generator | None = None,
                     aux_gen: torch.Generator | None = None) -> LLGANReport:
    """One LL-GAN update; the detector must already be frozen."""
    if gt_boxes is None or len(gt_boxes) != real.shape[0]:
        raise MissingBoxError("every real image needs its ground-truth box")
    if real.shape[0] < 2:
        raise ValueError("training batches need at least two images")
    boxes = [b if isinstance(b, Box) else Box.from_seq(b) for b in
             (gt_boxes.tolist() if isinstance(gt_boxes, torch.Tensor) else gt_boxes)]
    size = tuple(real.shape[-2:])
    G.train()
    D.train()
    detector.eval()

    z = sample_latent(real.shape[0], G.config.latent_dim, z_gen)
    fake = G(z)
    l_d = discriminator_step(real, fake, D, opt_d)

    opt_g.zero_grad()
    l_g = generator_adversarial_loss(fake, D)

    def maybe_extend(box: Box, side: str) -> Box:
        if cfg.extended_boxes and cfg.extend_scope in (side, "both"):
            return extend_box(box, cfg.box_margin, size)
        return box

    with torch.no_grad():
        real_feats = detector.features(real)
    fake_feats = detector.features(fake)
    rpn = detector.rpn_forward(fake_feats, size)

    style_terms, b_counts = [], []
    for i, gt in enumerate(boxes):
        real_roi = real_roi_features(real[i], maybe_extend(gt, "real"), detector, real_feats, i)
        positives = select_positive_rois(rpn.proposals[i], _box_tensor(gt), cfg.roi_pos_thresh, mode="fake")
        # the appended ground-truth box is the last row
        positives[-1] = _box_tensor(maybe_extend(gt, "fake"))[0]
        fake_rois = detector.roi_features(fake_feats, i, positives)
        report = style_loss(real_roi, fake_rois, cfg.normalize_channels)
        style_terms.append(report.loss)
        b_counts.append(report.B)
    l_s = torch.stack(style_terms).mean()
    total = l_g + cfg.lambda_s * l_s

    l_content = l_det = None
    if cfg.backbone_features:
        l_content = backbone_content_loss(real_feats, fake_feats)
        total = total + l_content
    if cfg.frcnn_loss:
        thresholds = (cfg.roi_pos_thresh, cfg.roi_neg_thresh)
        rpn_thr = (detector.config.rpn_pos_thresh, detector.config.rpn_neg_thresh) if cfg.relax_rpn_thresholds else None
        gt_t = torch.stack([b.tensor() for b in boxes])
        l_det = fake_detection_loss(detector, fake_feats, rpn, gt_t, size, thresholds, rpn_thr, aux_gen)
        total = total + l_det
    _check_finite(L_D=l_d, L_G=l_g, L_S=l_s, L_content=l_content, L_det=l_det)
    total.backward()
    opt_g.step()
    return LLGANReport(float(l_d), float(l_g.detach()), float(l_s.detach()), b_counts,
                       None if l_content is None else float(l_content.detach()),
                       None if l_det is None else float(l_det.detach()))


# checkpoints

def _rng_array(gen: torch.Generator) -> torch.Tensor:
    return gen.get_state().to(torch.float32)


def _restore_rng(gen: torch.Generator, arr: torch.Tensor) -> None:
    gen.set_state(arr.round().to(torch.uint8))


def state_arrays(state: GanState, detector: LogoDetector | None = None) -> dict[str, torch.Tensor]:
    arrays = {}
    arrays.update(ckpt.module_arrays("G", state.G))
    arrays.update(ckpt.module_arrays("D", state.D))
    arrays.update({f"opt_g.{k}": v for k, v in state.opt_g.state_arrays().items()})
    arrays.update({f"opt_d.{k}": v for k, v in state.opt_d.state_arrays().items()})
    arrays["rng.z"] = _rng_array(state.z_gen)
    arrays["rng.aux"] = _rng_array(state.aux_gen)
    if detector is not None:
        arrays.update(ckpt.module_arrays("detector", detector))
    return arrays


def save_training_checkpoint(path: str | Path, state: GanState, cfg: TrainConfig,
                             detector: LogoDetector | None = None) -> Path:
    meta = {"config": asdict(cfg), "step": state.step, "phase": cfg.phase,
            "optimizer_steps": {"G": state.opt_g.state.step, "D": state.opt_d.state.step},
            "generator": {"latent_dim": cfg.latent_dim, "channel_scale": cfg.channel_scale},
            "discriminator": {"channel_scale": cfg.channel_scale, "d_l3_depth": cfg.d_l3_depth}}
    return ckpt.save_checkpoint(path, state_arrays(state, detector), meta)


def load_training_checkpoint(path: str | Path, state: GanState, restore_optim: bool = True) -> dict:
    """Load G/D (and optionally optimiser + RNG state) into ``state``; returns the metadata."""
    arrays, meta = ckpt.load_checkpoint(path)
    ckpt.load_module("G", state.G, arrays)
    ckpt.load_module("D", state.D, arrays)
    if restore_optim:
        steps = meta.get("optimizer_steps", {})
        state.opt_g.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("opt_g.")},
                                      int(steps.get("G", 0)))
        state.opt_d.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("opt_d.")},
                                      int(steps.get("D", 0)))
        _restore_rng(state.z_gen, arrays["rng.z"])
        _restore_rng(state.aux_gen, arrays["rng.aux"])
        state.step = int(meta["step"])
    return meta


def load_generator(path: str | Path) -> Generator:
    arrays, meta = ckpt.load_checkpoint(path)
    g = meta.get("generator", {})
    G = Generator(GeneratorConfig(int(g.get("latent_dim", 500)), float(g.get("channel_scale", 1.0))))
    ckpt.load_module("G", G, arrays)
    return G.eval()


def save_detector(path: str | Path, detector: LogoDetector, meta: dict | None = None) -> Path:
    info = {"phase": "detector", "detector_config": asdict(detector.config)}
    info.update(meta or {})
    return ckpt.save_checkpoint(path, ckpt.module_arrays("detector", detector), info)


def load_detector(path: str | Path) -> LogoDetector:
    from llgan.detector.model import DetectorConfig

    arrays, meta = ckpt.load_checkpoint(path)
    conf = meta.get("detector_config") or {}
    conf = {k: tuple(v) if isinstance(v, list) else v for k, v in conf.items()}
    det = LogoDetector(DetectorConfig(**conf))
    ckpt.load_module("detector", det, arrays)
    return det.eval()


# orchestration

def save_sample_grid(G: Generator, z: torch.Tensor, path: str | Path, nrow: int = 4) -> None:
    from llgan.plotting import image_grid

    was = G.training
    G.eval()
    with torch.no_grad():
        imgs = G(z)
    G.train(was)
    image_grid(imgs, nrow).save(path)


@dataclass
class RunResult:
    checkpoint: Path
    log_path: Path
    steps: int
    rows: list[dict] = field(default_factory=list)


def _fmt(v):
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def run_training(cfg: TrainConfig, samples: Sequence[LabeledSample] | None = None,
                 detector: LogoDetector | None = None) -> RunResult:
    """Full training run with CSV logging, sample grids and resumable checkpoints."""
    torch.manual_seed(cfg.seed)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = load_samples(read_manifest(cfg.dataset), cfg.subset)
    if len(samples) < 2:
        raise ValueError("need at least two training images")
    if cfg.phase == "llgan":
        if detector is None:
            if not cfg.detector_checkpoint:
                raise ValueError("LL-GAN training needs a detector checkpoint")
            detector = load_detector(cfg.detector_checkpoint)
        detector.freeze()

    state = build_state(cfg)
    log_path = out / "losses.csv"
    latest = out / "latest"
    resumed = False
    if cfg.resume and (latest / ckpt.META_FILE).exists():
        load_training_checkpoint(latest, state)
        resumed = True
        log.info("resumed from %s at step %d", latest, state.step)
    elif cfg.init_checkpoint:
        # G/D weights only: optimiser and RNG start fresh for the new phase
        load_training_checkpoint(cfg.init_checkpoint, state, restore_optim=False)

    rows = []
    if resumed and log_path.exists():
        with open(log_path) as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= state.step]
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    bs = min(cfg.batch_size, len(samples))
    steps_per_epoch = len(samples) // bs
    grid_z = sample_latent(16, cfg.latent_dim, torch.Generator().manual_seed(cfg.seed + 1))
    (out / "samples").mkdir(exist_ok=True)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    ckpt_every = cfg.checkpoint_every or steps_per_epoch

    new_rows = []
    with open(log_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        while state.step < total_steps:
            epoch, offset = divmod(state.step, steps_per_epoch)
            for batch in list(batch_iterator(samples, bs, cfg.seed, epoch, drop_last=True))[offset:]:
                images, boxes, _ = collate(batch)
                if cfg.phase == "dcgan":
                    l_d, l_g = train_dcgan_step(images, state.G, state.D, state.opt_g, state.opt_d, state.z_gen)
                    row = {"step": state.step + 1, "phase": "dcgan", "L_D": l_d, "L_G": l_g}
                else:
                    rep = train_llgan_step(images, [b.gt_box for b in batch], state.G, state.D, state.opt_g,
                                           state.opt_d, detector, cfg, state.z_gen, state.aux_gen)
                    row = {"step": state.step + 1, "phase": "llgan", "L_D": rep.L_D, "L_G": rep.L_G,
                           "L_S": rep.L_S, "L_content": rep.L_content, "L_det": rep.L_det, "B_mean": rep.B_mean}
                state.step += 1
                writer.writerow({k: _fmt(row.get(k)) for k in LOG_FIELDS})
                fh.flush()
                new_rows.append(row)
                if cfg.sample_every and state.step % cfg.sample_every == 0:
                    save_sample_grid(state.G, grid_z, out / "samples" / f"step_{state.step:06d}.png")
                if state.step % ckpt_every == 0 or state.step == total_steps:
                    save_training_checkpoint(latest, state, cfg, None)
                if state.step >= total_steps:
                    break
    final = save_training_checkpoint(out / "final", state, cfg, None)
    save_sample_grid(state.G, grid_z, out / "samples" / "final.png")
    (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    return RunResult(final, log_path, state.step, new_rows)
