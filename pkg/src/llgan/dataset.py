"""Labelled logo datasets and a procedural synthetic-logo generator.

A dataset directory holds PNG images, ``manifest.jsonl`` with one
``{"path", "bbox", "style_id"}`` record per line (paths relative to the
directory) and ``dataset.json`` with dataset-level metadata including the
train/eval split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from llgan.detector.boxes import Box, DegenerateBoxError

MANIFEST_NAME = "manifest.jsonl"
# smaller canvases leave no room for the stroke padding of the thickest styles
MIN_IMAGE_SIZE = 128
METADATA_NAME = "dataset.json"
DEFAULT_STYLES = 10

RED = (200, 16, 16)
DARK_RED = (120, 0, 0)
WHITE = (245, 245, 245)
SILVER = (170, 170, 180)
BLACK = (10, 10, 10)
YELLOW = (230, 190, 20)
GREEN = (40, 160, 60)
BLUE = (40, 80, 200)

# per style: (palette on black, palette on white, stroke px, jaggedness, symmetric, glyph count range)
# palettes are mostly red and white
STYLE_TABLE = (
    ((RED,), (RED,), 3, 0.02, False, (4, 6)),
    ((WHITE,), (BLACK,), 6, 0.12, True, (5, 7)),
    ((RED, WHITE), (RED, BLACK), 2, 0.20, False, (6, 9)),
    ((SILVER,), (DARK_RED,), 5, 0.07, True, (4, 6)),
    ((YELLOW, RED), (YELLOW, RED), 3, 0.15, False, (5, 8)),
    ((WHITE, SILVER), (BLACK, SILVER), 8, 0.02, False, (4, 5)),
    ((DARK_RED, RED), (DARK_RED, RED), 4, 0.25, True, (6, 9)),
    ((GREEN,), (GREEN,), 2, 0.05, False, (7, 9)),
    ((BLUE, WHITE), (BLUE, BLACK), 5, 0.18, False, (4, 7)),
    ((RED, YELLOW), (BLACK, RED), 7, 0.10, True, (5, 8)),
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    bbox: tuple[float, float, float, float]
    style_id: int

    def to_json(self) -> str:
        return json.dumps({"path": self.path, "bbox": list(self.bbox), "style_id": self.style_id})


@dataclass
class Manifest:
    root: Path
    records: list[Record]
    image_size: int
    num_styles: int
    seed: int | None = None
    split: dict[str, list[int]] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, name: str) -> list[Record]:
        if self.split is None or name not in self.split:
            return list(self.records)
        return [self.records[i] for i in self.split[name]]

    def validate(self) -> None:
        if self.num_styles < 1:
            raise DatasetError("dataset must declare at least one style")
        for r in self.records:
            if not (self.root / r.path).exists():
                raise DatasetError(f"missing image {r.path}")
            try:
                Box.from_seq(r.bbox)
            except DegenerateBoxError as exc:
                raise DatasetError(f"{r.path}: {exc}") from exc
            if not 0 <= r.style_id < self.num_styles:
                raise DatasetError(f"{r.path}: style_id {r.style_id} outside [0, {self.num_styles})")


@dataclass
class LabeledSample:
    image: torch.Tensor  # (3, H, W) in [-1, 1]
    gt_box: Box
    style_id: int
    path: str = ""


@dataclass(frozen=True)
class LogoStyle:
    palette_dark: tuple
    palette_light: tuple
    thickness: int
    jag: float  # jaggedness amplitude as a fraction of glyph height
    symmetric: bool
    glyph_range: tuple[int, int]
    slant: float
    alphabet: tuple  # glyph shapes: tuples of polylines in the unit cell


def _make_glyph(rng: np.random.Generator) -> tuple:
    strokes = []
    for _ in range(rng.integers(2, 5)):
        kind = rng.integers(0, 3)
        if kind == 0:  # vertical bar
            x = rng.uniform(0.1, 0.9)
            strokes.append(((x, 0.0), (x + rng.uniform(-0.15, 0.15), 1.0)))
        elif kind == 1:  # diagonal
            strokes.append(((rng.uniform(0, 0.3), rng.uniform(0, 1)), (rng.uniform(0.7, 1), rng.uniform(0, 1))))
        else:  # hook of three points
            strokes.append(tuple((rng.uniform(0, 1), y) for y in (0.0, rng.uniform(0.3, 0.7), 1.0)))
    return tuple(strokes)


def logo_style(style_id: int) -> LogoStyle:
    """Fixed, seed-independent parameters of synthetic style ``style_id``."""
    rng = np.random.default_rng(10_000 + style_id)
    dark, light, thickness, jag, symmetric, glyphs = STYLE_TABLE[style_id % len(STYLE_TABLE)]
    return LogoStyle(
        palette_dark=dark,
        palette_light=light,
        thickness=thickness,
        jag=jag,
        symmetric=symmetric,
        glyph_range=glyphs,
        slant=float(rng.uniform(-0.35, 0.35)),
        alphabet=tuple(_make_glyph(rng) for _ in range(8)),
    )


def _jagged(points: Sequence[tuple[float, float]], amp: float, rng: np.random.Generator) -> list:
    out = []
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        seg = max(2, int(math.hypot(x1 - x0, y1 - y0) / 6))
        nx, ny = -(y1 - y0), x1 - x0
        norm = math.hypot(nx, ny) or 1.0
        for t in np.linspace(0.0, 1.0, seg, endpoint=False):
            off = rng.uniform(-amp, amp)
            out.append((x0 + t * (x1 - x0) + off * nx / norm, y0 + t * (y1 - y0) + off * ny / norm))
    out.append(points[-1])
    return out


def render_logo(style_id: int, size: int, rng: np.random.Generator) -> tuple[Image.Image, Box]:
    """One RGB image with a single word mark of the given style and its tight box."""
    style = logo_style(style_id)
    dark_bg = bool(rng.random() < 0.5)
    bg = BLACK if dark_bg else WHITE
    palette = style.palette_dark if dark_bg else style.palette_light
    img = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(img)

    n = int(rng.integers(style.glyph_range[0], style.glyph_range[1] + 1))
    word = [int(rng.integers(len(style.alphabet))) for _ in range(n)]
    if style.symmetric:
        half = word[: (n + 1) // 2]
        word = half + half[: n // 2][::-1]
    word_w = rng.uniform(0.45, 0.85) * size
    glyph_w = word_w / n
    glyph_h = float(np.clip(glyph_w * rng.uniform(1.1, 1.8), 0.08 * size, 0.45 * size))
    pad = style.thickness + 4
    x0 = rng.uniform(pad, size - word_w - pad)
    y0 = rng.uniform(pad + abs(style.slant) * glyph_h, size - glyph_h - pad - abs(style.slant) * glyph_h)
    amp = style.jag * glyph_h
    for gi, glyph_id in enumerate(word):
        color = palette[gi % len(palette)] if len(palette) > 1 and rng.random() < 0.5 else palette[0]
        mirror = style.symmetric and gi >= (n + 1) // 2
        for stroke in style.alphabet[glyph_id]:
            pts = []
            for u, v in stroke:
                u = 1.0 - u if mirror else u
                px = x0 + (gi + 0.1 + 0.8 * u) * glyph_w + style.slant * (0.5 - v) * glyph_h
                pts.append((px, y0 + v * glyph_h))
            line = _jagged(pts, amp, rng)
            lo, hi = float(style.thickness + 1), float(size - style.thickness - 2)
            line = [(min(max(x, lo), hi), min(max(y, lo), hi)) for x, y in line]
            draw.line(line, fill=color, width=style.thickness, joint="curve")
    box = tight_box(np.asarray(img), bg)
    return img, box


def tight_box(pixels: np.ndarray, background: tuple) -> Box:
    mask = np.any(pixels != np.asarray(background, dtype=pixels.dtype), axis=-1)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DatasetError("rendered logo is empty")
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_synthetic_dataset(n: int, out_dir: str | Path, styles: int = DEFAULT_STYLES,
                               image_size: int = 282, seed: int = 0,
                               eval_fraction: float = 0.1, style_ids: Sequence[int] | None = None) -> Manifest:
    """Render ``n`` labelled logo images into ``out_dir`` and write the manifest.

    Styles cycle through ``style_ids`` (default ``range(styles)``) so every
    style is represented.
    """
    if n < 1:
        raise DatasetError("n must be at least 1")
    if styles < 1:
        raise DatasetError("need at least one style")
    if image_size < MIN_IMAGE_SIZE:
        raise DatasetError(f"image_size must be at least {MIN_IMAGE_SIZE}, got {image_size}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write to {out}: {exc}") from exc
    ids = list(style_ids) if style_ids is not None else list(range(styles))
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        sid = ids[i % len(ids)]
        img, box = render_logo(sid, image_size, rng)
        rel = f"images/{i:05d}.png"
        img.save(out / rel, format="PNG")
        records.append(Record(rel, box.as_tuple(), sid))
    order = np.random.default_rng([seed, 1]).permutation(n)
    n_eval = int(round(n * eval_fraction)) if n > 1 else 0
    split = {"train": sorted(int(i) for i in order[n_eval:]), "eval": sorted(int(i) for i in order[:n_eval])}
    manifest = Manifest(out, records, image_size, styles, seed, split)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: Manifest) -> None:
    root = Path(manifest.root)
    with open(root / MANIFEST_NAME, "w") as fh:
        for r in manifest.records:
            fh.write(r.to_json() + "\n")
    meta = {"image_size": manifest.image_size, "num_styles": manifest.num_styles, "seed": manifest.seed,
            "n": len(manifest.records), "split": manifest.split}
    (root / METADATA_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_manifest(root: str | Path) -> Manifest:
    root = Path(root)
    try:
        meta = json.loads((root / METADATA_NAME).read_text())
        lines = (root / MANIFEST_NAME).read_text().splitlines()
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable dataset at {root}: {exc}") from exc
    records = []
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            records.append(Record(d["path"], tuple(float(v) for v in d["bbox"]), int(d["style_id"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{MANIFEST_NAME}:{ln}: bad record ({exc})") from exc
    if not records:
        raise DatasetError(f"empty manifest at {root}")
    manifest = Manifest(root, records, int(meta["image_size"]), int(meta["num_styles"]),
                        meta.get("seed"), meta.get("split"))
    manifest.validate()
    return manifest


def scale_box(box: Box, from_size: tuple[int, int], to_size: tuple[int, int]) -> Box:
    """Rescale a box between image sizes given as (W, H)."""
    sx = to_size[0] / from_size[0]
    sy = to_size[1] / from_size[1]
    return Box(box.x1 * sx, box.y1 * sy, box.x2 * sx, box.y2 * sy)


def image_to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_image(t: torch.Tensor) -> Image.Image:
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().byte().permute(1, 2, 0).numpy()
    return Image.fromarray(arr, "RGB")


def load_sample(record: Record, root: str | Path, target_size: int | tuple[int, int] = 282) -> LabeledSample:
    """Decode, bilinearly resize to ``target_size`` and map pixels to [-1, 1]."""
    tw, th = (target_size, target_size) if isinstance(target_size, int) else target_size
    path = Path(root) / record.path
    try:
        with Image.open(path) as im:
            img = im.convert("RGB")
    except OSError as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    w, h = img.size
    try:
        box = scale_box(Box.from_seq(record.bbox), (w, h), (tw, th))
    except DegenerateBoxError as exc:
        raise DatasetError(f"{record.path}: degenerate box after resize ({exc})") from exc
    if (w, h) != (tw, th):
        img = img.resize((tw, th), Image.BILINEAR)
    return LabeledSample(image_to_tensor(img), box, record.style_id, record.path)


def load_samples(manifest: Manifest, subset: str | None = None, target_size: int = 282) -> list[LabeledSample]:
    records = manifest.records if subset is None else manifest.subset(subset)
    return [load_sample(r, manifest.root, target_size) for r in records]


def batch_iterator(items: Sequence, batch_size: int, seed: int, epoch: int = 0,
                   drop_last: bool = True) -> Iterator[list]:
    """Seeded per-epoch shuffle of ``items`` cut into batches."""
    n = len(items)
    if n == 0:
        raise DatasetError("cannot iterate an empty dataset")
    if batch_size < 1 or batch_size > n:
        raise DatasetError(f"batch size {batch_size} must lie in [1, {n}]")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield [items[int(i)] for i in order[start:start + batch_size]]


def collate(samples: Sequence[LabeledSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images = torch.stack([s.image for s in samples])
    boxes = torch.stack([s.gt_box.tensor() for s in samples])
    styles = torch.tensor([s.style_id for s in samples], dtype=torch.long)
    return images, boxes, styles
