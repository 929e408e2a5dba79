import math

import pytest
import torch

from llgan.detector import (Box, DetectorConfig, DetectorNotTrainedError, LogoDetector, select_positive_rois,
                            smooth_l1)
from llgan.detector.boxes import iou_matrix
from llgan.detector.model import detector_loss, match_labels
from llgan.detector.train import DetectorTrainConfig, train_detector
from llgan.style import fake_detection_loss


@pytest.fixture(scope="module")
def det_and_feats():
    torch.manual_seed(0)
    det = LogoDetector().eval()
    x = torch.rand(2, 3, 282, 282) * 2 - 1
    with torch.no_grad():
        feats = det.features(x)
        rpn = det.rpn_forward(feats, (282, 282))
    return det, x, feats, rpn


def test_pyramid_shapes(det_and_feats):
    _, _, feats, _ = det_and_feats
    assert feats["p2"].shape == (2, 256, 70, 70)
    assert feats["p3"].shape == (2, 256, 35, 35)
    assert all(torch.isfinite(f).all() for f in feats.values())


def test_too_small_image(random_detector):
    with pytest.raises(ValueError):
        random_detector.features(torch.zeros(1, 3, 12, 40))


def test_anchor_count(det_and_feats):
    _, _, _, rpn = det_and_feats
    assert rpn.anchors.shape[0] == 25 * (70 * 70 + 35 * 35)
    assert rpn.objectness.shape == (2, rpn.anchors.shape[0])
    assert rpn.deltas.shape == (2, rpn.anchors.shape[0], 4)


def test_proposals_valid(det_and_feats):
    _, _, _, rpn = det_and_feats
    for p in rpn.proposals:
        assert 0 < p.shape[0] <= 1024
        assert p.min() >= 0 and p[:, 2].max() <= 282 and p[:, 3].max() <= 282
        assert ((p[:, 2:] - p[:, :2]) >= 2).all()


def test_roi_features_shape_and_routing(det_and_feats):
    det, _, feats, _ = det_and_feats
    boxes = torch.tensor([[10.0, 10.0, 50.0, 50.0], [0.0, 0.0, 200.0, 150.0]])
    assert det.roi_level(boxes).tolist() == [0, 1]
    out = det.roi_features(feats, 0, boxes)
    assert out.shape == (2, 256, 7, 7)


def test_roi_level_override():
    det = LogoDetector(DetectorConfig(roi_level="p3"))
    assert det.roi_level(torch.tensor([[0.0, 0.0, 10.0, 10.0]])).tolist() == [1]


def test_detect_requires_training():
    with pytest.raises(DetectorNotTrainedError):
        LogoDetector().detect(torch.zeros(3, 282, 282))


def test_detect_outputs_valid(random_detector):
    dets = random_detector.detect(torch.rand(3, 282, 282) * 2 - 1)
    assert len(dets) <= 10
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    for d in dets:
        assert 0 <= d.box.x1 < d.box.x2 <= 282 and 0 <= d.box.y1 < d.box.y2 <= 282
        assert 0.05 < d.score <= 1.0


def test_blank_image_gives_valid_output(random_detector):
    for d in random_detector.detect(torch.full((3, 282, 282), -1.0)):
        assert isinstance(d.box, Box)


class TestPositiveRois:
    gt = torch.tensor([10.0, 10.0, 110.0, 110.0])

    def test_real_mode_is_gt_only(self):
        props = torch.tensor([[10.0, 10.0, 110.0, 110.0], [0.0, 0.0, 5.0, 5.0]])
        assert select_positive_rois(props, self.gt, mode="real").tolist() == [self.gt.tolist()]

    def test_fake_no_matches_appends_gt(self):
        out = select_positive_rois(torch.tensor([[200.0, 200.0, 250.0, 250.0]]), self.gt)
        assert out.tolist() == [self.gt.tolist()]

    def test_fake_empty_proposals(self):
        assert select_positive_rois(torch.zeros(0, 4), self.gt).shape == (1, 4)

    def test_threshold(self):
        near = torch.tensor([[10.0, 10.0, 110.0, 107.5]])  # IoU 0.975
        far = torch.tensor([[10.0, 10.0, 110.0, 80.0]])  # IoU 0.7
        iou_near = iou_matrix(near, self.gt[None]).item()
        assert iou_near >= 0.9
        out = select_positive_rois(torch.cat([near, far]), self.gt, pos_thresh=0.9)
        assert out.tolist() == [near[0].tolist(), self.gt.tolist()]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            select_positive_rois(torch.zeros(0, 4), self.gt, mode="both")


def test_smooth_l1():
    v = smooth_l1(torch.tensor([0.5, 2.0, -2.0, 0.0]))
    assert v.tolist() == [0.125, 1.5, 1.5, 0.0]


def test_match_labels():
    ious = torch.tensor([0.1, 0.35, 0.6, 0.75])
    assert match_labels(ious, 0.7, 0.3, allow_low_quality=False).tolist() == [0, -1, -1, 1]
    # best-match rescue only matters when nothing reaches the threshold
    assert match_labels(torch.tensor([0.1, 0.4]), 0.7, 0.3).tolist() == [0, 1]


def test_detector_loss_finite(det_and_feats):
    det, x, _, _ = det_and_feats
    feats = det.features(x)
    rpn = det.rpn_forward(feats, (282, 282))
    gt = torch.tensor([[40.0, 60.0, 200.0, 140.0], [10.0, 10.0, 80.0, 60.0]])
    losses = detector_loss(det, feats, rpn, gt, (282, 282), generator=torch.Generator().manual_seed(0))
    losses = {k: v.detach() for k, v in losses.items()}
    assert set(losses) == {"rpn_obj", "rpn_box", "roi_cls", "roi_box", "total"}
    assert all(math.isfinite(float(v)) for v in losses.values())
    assert float(losses["total"]) == pytest.approx(sum(float(losses[k]) for k in
                                                       ("rpn_obj", "rpn_box", "roi_cls", "roi_box")), rel=1e-6)


def test_frozen_detector_gets_no_gradient():
    torch.manual_seed(1)
    det = LogoDetector().freeze()
    x = (torch.rand(1, 3, 282, 282) * 2 - 1).requires_grad_()
    feats = det.features(x)
    rpn = det.rpn_forward(feats, (282, 282))
    loss = fake_detection_loss(det, feats, rpn, torch.tensor([[50.0, 50.0, 200.0, 150.0]]), (282, 282),
                               generator=torch.Generator().manual_seed(0))
    loss.backward()
    assert all(p.grad is None for p in det.parameters())
    assert x.grad is not None and x.grad.abs().sum() > 0


def test_overfits_single_image(tiny_dataset):
    _, samples = tiny_dataset
    history = []
    cfg = DetectorTrainConfig(epochs=30, batch_size=1, lr=5e-4, hflip=False, seed=0)
    det = train_detector(samples[:1], cfg, on_step=lambda s, l: history.append(l["total"]))
    assert det.is_trained and not det.training
    first, last = sum(history[:5]) / 5, sum(history[-5:]) / 5
    assert last < first
