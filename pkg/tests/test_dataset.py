import json

import numpy as np
import pytest
import torch
from PIL import Image

from llgan.dataset import (BLACK, WHITE, DatasetError, Record, batch_iterator, collate, generate_synthetic_dataset, image_to_tensor,
                           load_sample, load_samples, read_manifest, render_logo, scale_box, tensor_to_image)
from llgan.detector.boxes import Box


def test_generation_is_deterministic(tmp_path):
    generate_synthetic_dataset(16, tmp_path / "a", seed=7)
    generate_synthetic_dataset(16, tmp_path / "b", seed=7)
    for i in range(16):
        name = f"images/{i:05d}.png"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_text() == (tmp_path / "b" / "manifest.jsonl").read_text()


def test_manifest_contents(tiny_dataset):
    manifest, samples = tiny_dataset
    assert len(manifest) == 16 and len(samples) == 16
    for r, s in zip(manifest.records, samples):
        x1, y1, x2, y2 = r.bbox
        assert 0 < x1 < x2 < 282 and 0 < y1 < y2 < 282
        assert 0 <= r.style_id < 10
        assert s.image.shape == (3, 282, 282)
        assert s.image.min() >= -1 and s.image.max() <= 1


def test_split_partitions(tiny_dataset):
    manifest, _ = tiny_dataset
    train, held = manifest.split["train"], manifest.split["eval"]
    assert sorted(train + held) == list(range(16))
    assert len(held) == 2


def test_all_styles_represented(tmp_path):
    m = generate_synthetic_dataset(20, tmp_path, seed=0)
    assert {r.style_id for r in m.records} == set(range(10))


def test_style_restriction(tmp_path):
    m = generate_synthetic_dataset(6, tmp_path, seed=0, style_ids=[4])
    assert {r.style_id for r in m.records} == {4}


def test_box_is_tight():
    img, box = render_logo(2, 282, np.random.default_rng(0))
    arr = np.asarray(img).astype(int)
    bg = arr[0, 0]
    fg = np.argwhere(np.abs(arr - bg).sum(-1) > 0)
    (ymin, xmin), (ymax, xmax) = fg.min(0), fg.max(0)
    assert box.as_tuple() == (xmin, ymin, xmax + 1, ymax + 1)


def test_background_is_neutral():
    for sid in range(10):
        img, _ = render_logo(sid, 282, np.random.default_rng(sid))
        corner = np.asarray(img)[0, 0]
        assert tuple(int(c) for c in corner) in {BLACK, WHITE}


def test_scale_box():
    assert scale_box(Box(10, 10, 50, 50), (100, 100), (200, 200)).as_tuple() == (20, 20, 100, 100)
    assert scale_box(Box(1, 2, 3, 4), (64, 64), (64, 64)).as_tuple() == (1, 2, 3, 4)


def test_pixel_mapping():
    img = Image.new("RGB", (2, 1))
    img.putpixel((0, 0), (255, 255, 255))
    t = image_to_tensor(img)
    assert t[:, 0, 0].tolist() == [1.0, 1.0, 1.0] and t[:, 0, 1].tolist() == [-1.0, -1.0, -1.0]
    assert np.array_equal(np.asarray(tensor_to_image(t)), np.asarray(img))


def test_resize_on_load(tiny_dataset):
    manifest, samples = tiny_dataset
    small = load_sample(manifest.records[0], manifest.root, 141)
    assert small.image.shape == (3, 141, 141)
    assert small.gt_box.as_tuple() == pytest.approx(tuple(v / 2 for v in samples[0].gt_box.as_tuple()))


class TestBatches:
    def test_drop_last_count(self):
        assert len(list(batch_iterator(list(range(10)), 3, seed=0))) == 3

    def test_keep_last(self):
        sizes = [len(b) for b in batch_iterator(list(range(10)), 3, seed=0, drop_last=False)]
        assert sizes == [3, 3, 3, 1]

    def test_same_seed_same_order(self):
        a = list(batch_iterator(list(range(10)), 3, seed=5, epoch=2))
        assert a == list(batch_iterator(list(range(10)), 3, seed=5, epoch=2))
        assert a != list(batch_iterator(list(range(10)), 3, seed=5, epoch=3))

    def test_union_is_dataset(self):
        items = list(range(11))
        flat = [x for b in batch_iterator(items, 4, seed=1, drop_last=False) for x in b]
        assert sorted(flat) == items

    def test_bad_batch_size(self):
        with pytest.raises(DatasetError):
            list(batch_iterator([1, 2], 3, seed=0))
        with pytest.raises(DatasetError):
            list(batch_iterator([], 1, seed=0))

    def test_collate(self, tiny_dataset):
        _, samples = tiny_dataset
        images, boxes, styles = collate(samples[:3])
        assert images.shape == (3, 3, 282, 282) and boxes.shape == (3, 4) and styles.shape == (3,)


class TestErrors:
    def test_missing_dataset(self, tmp_path):
        with pytest.raises(DatasetError):
            read_manifest(tmp_path / "nope")

    def test_bad_json_line(self, tmp_path):
        generate_synthetic_dataset(2, tmp_path, seed=0)
        with open(tmp_path / "manifest.jsonl", "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(DatasetError, match=":3"):
            read_manifest(tmp_path)

    def test_missing_image(self, tmp_path):
        generate_synthetic_dataset(2, tmp_path, seed=0)
        (tmp_path / "images" / "00001.png").unlink()
        with pytest.raises(DatasetError, match="missing"):
            read_manifest(tmp_path)

    def test_degenerate_box(self, tmp_path):
        generate_synthetic_dataset(1, tmp_path, seed=0)
        rec = json.loads((tmp_path / "manifest.jsonl").read_text())
        rec["bbox"] = [10, 10, 10, 40]
        (tmp_path / "manifest.jsonl").write_text(json.dumps(rec) + "\n")
        with pytest.raises(DatasetError):
            read_manifest(tmp_path)

    def test_style_out_of_range(self, tmp_path):
        generate_synthetic_dataset(1, tmp_path, seed=0)
        rec = json.loads((tmp_path / "manifest.jsonl").read_text())
        rec["style_id"] = 10
        (tmp_path / "manifest.jsonl").write_text(json.dumps(rec) + "\n")
        with pytest.raises(DatasetError):
            read_manifest(tmp_path)

    def test_corrupt_png(self, tmp_path):
        generate_synthetic_dataset(1, tmp_path, seed=0)
        (tmp_path / "images" / "00000.png").write_bytes(b"not a png")
        m = read_manifest(tmp_path)
        with pytest.raises(DatasetError):
            load_samples(m)

    def test_image_too_small(self, tmp_path):
        with pytest.raises(DatasetError, match="at least"):
            generate_synthetic_dataset(2, tmp_path, image_size=64)

    def test_zero_images(self, tmp_path):
        with pytest.raises(DatasetError):
            generate_synthetic_dataset(0, tmp_path)
