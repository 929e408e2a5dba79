import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from llgan.dataset import generate_synthetic_dataset, load_samples
from llgan.detector.boxes import Box
from llgan.detector.model import Detection
from llgan.metrics import (EvalReport, detection_eval, embedder_accuracy, evaluate_images, feature_stats, fid,
                           frechet_distance, inception_score, matrix_sqrt_psd, train_proxy_embedder)
from llgan.oracles import detection_eval_oracle, fid_1d_closed_form


class TestInceptionScore:
    def test_uniform(self):
        assert inception_score(np.full((20, 7), 1 / 7)) == pytest.approx(1.0, abs=1e-12)

    def test_balanced_one_hot(self):
        assert inception_score(np.eye(10)) == pytest.approx(10.0, abs=1e-9)

    def test_identical_rows_any_split(self):
        p = np.tile(np.array([[0.2, 0.5, 0.3]]), (30, 1))
        assert inception_score(p, 1) == pytest.approx(inception_score(p, 10))

    def test_remainder_folded_into_last_split(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(4), size=23)
        parts = [p[0:11], p[11:23]]
        want = np.mean([inception_score(q, 1) for q in parts])
        assert inception_score(p, 2) == pytest.approx(want)

    @settings(max_examples=30)
    @given(st.integers(1, 30), st.integers(2, 8), st.integers(0, 1000))
    def test_bounds(self, n, k, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(k), size=n)
        v = inception_score(p)
        assert 1.0 - 1e-9 <= v <= k + 1e-9

    def test_bad_input(self):
        with pytest.raises(ValueError):
            inception_score(np.array([[0.5, 0.6]]))
        with pytest.raises(ValueError):
            inception_score(np.zeros((0, 3)))

    def test_more_splits_than_rows_clamps(self):
        p = np.eye(3)
        assert inception_score(p, splits=10) == pytest.approx(inception_score(p, splits=3))


class TestFID:
    def test_identical_sets(self):
        a = np.random.default_rng(1).normal(size=(100, 6))
        assert abs(fid(a, a)) <= 1e-4

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(80, 4)), rng.normal(1, 2, size=(90, 4))
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)
        assert fid(a, b) >= -1e-6

    def test_population_closed_form(self):
        v = frechet_distance(np.array([0.0]), np.array([[1.0]]), np.array([3.0]), np.array([[1.0]]))
        assert v == pytest.approx(9.0, abs=1e-12)

    def test_one_d_sample_closed_form(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(1.0, 2.0, size=(500, 1)), rng.normal(-1.0, 0.5, size=(400, 1))
        want = fid_1d_closed_form(x.mean(), x.std(ddof=1), y.mean(), y.std(ddof=1))
        assert fid(x, y, ridge=0.0) == pytest.approx(want, abs=1e-6)

    def test_diagonal_covariances(self):
        mu_a, mu_b = np.array([0.0, 1.0]), np.array([2.0, -1.0])
        sa, sb = np.array([1.0, 3.0]), np.array([2.0, 0.5])
        want = sum(fid_1d_closed_form(mu_a[i], sa[i], mu_b[i], sb[i]) for i in range(2))
        got = frechet_distance(mu_a, np.diag(sa ** 2), mu_b, np.diag(sb ** 2))
        assert got == pytest.approx(want, abs=1e-9)

    def test_unbiased_covariance_with_ridge(self):
        a = np.random.default_rng(4).normal(size=(10, 3))
        mu, cov = feature_stats(a)
        assert np.allclose(cov, np.cov(a, rowvar=False, ddof=1) + 1e-6 * np.eye(3))
        assert np.allclose(mu, a.mean(0))


class TestMatrixSqrt:
    def test_identity(self):
        assert np.allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        assert np.allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_reconstruction(self):
        r = np.random.default_rng(5).normal(size=(6, 6))
        psd = r @ r.T
        s = matrix_sqrt_psd(psd)
        assert np.allclose(s @ s, psd, atol=1e-8)

    def test_negative_eigenvalues_clamped(self):
        assert np.allclose(matrix_sqrt_psd(np.diag([1.0, -5.0])), np.diag([1.0, 0.0]))

    def test_asymmetric(self):
        with pytest.raises(ValueError):
            matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestDetectionEval:
    def test_two_above(self):
        s = detection_eval([[0.9, 0.8]], 0.75)
        assert (s.tp, s.fp) == (1, 1)

    def test_empty(self):
        s = detection_eval([[]], 0.75)
        assert (s.tp, s.fp, s.images_without_detections) == (0, 1, 1)

    def test_only_below(self):
        s = detection_eval([[0.5, 0.7]], 0.75)
        assert (s.tp, s.fp) == (0, 1)

    def test_exactly_at_threshold_is_not_above(self):
        assert detection_eval([[0.75]], 0.75).tp == 0

    def test_avg_conf_skips_empty_images(self):
        s = detection_eval([[0.9], [], [0.5]], 0.75)
        assert s.avg_conf == pytest.approx(0.7)

    def test_accepts_detection_objects(self):
        d = Detection(Box(0, 0, 5, 5), 0.95)
        assert detection_eval([[d]], 0.75).tp == 1

    @settings(max_examples=80)
    @given(st.lists(st.lists(st.sampled_from([0.0, 0.3, 0.75, 0.76, 0.9, 1.0]), max_size=5), min_size=1,
                    max_size=100))
    def test_matches_case_oracle(self, imgs):
        s = detection_eval(imgs, 0.75)
        assert (s.tp, s.fp) == detection_eval_oracle(imgs, 0.75)
        assert s.tp + s.fp >= len(imgs)
        at_most_one = all(sum(v > 0.75 for v in d) <= 1 for d in imgs)
        assert (s.tp + s.fp == len(imgs)) == at_most_one
        assert s.detection_rate == pytest.approx(s.tp / (s.tp + s.fp))

    def test_512_images(self):
        rng = np.random.default_rng(6)
        imgs = [list(rng.uniform(size=rng.integers(0, 4))) for _ in range(512)]
        s = detection_eval(imgs)
        assert s.tp + s.fp >= 512


@pytest.fixture(scope="module")
def ten_style_set(tmp_path_factory):
    m = generate_synthetic_dataset(300, tmp_path_factory.mktemp("ten"), seed=11, eval_fraction=0.2)
    return m, load_samples(m, "train"), load_samples(m, "eval")


@pytest.mark.slow
def test_proxy_embedder_held_out_accuracy(ten_style_set):
    m, train, held = ten_style_set
    emb = train_proxy_embedder(train, m.num_styles, seed=0)
    assert not any(p.requires_grad for p in emb.parameters())
    assert embedder_accuracy(emb, held) >= 0.8
    _, probs = emb.embed_and_classify(torch.stack([s.image for s in held[:8]]))
    assert np.allclose(probs.sum(1), 1.0, atol=1e-5)


def test_eval_report_schema(tiny_dataset, random_detector):
    m, samples = tiny_dataset
    emb = train_proxy_embedder(samples, m.num_styles, epochs=1, seed=0)
    real = torch.stack([s.image for s in samples])
    report, dets = evaluate_images(real[:4], real, random_detector, emb)
    data = json.loads(report.to_json())
    assert set(data) == {"fid", "is_mean", "detection_rate", "avg_conf", "tp", "fp", "n",
                         "images_without_detections", "threshold", "extras"}
    assert set(data["is_mean"]) == {"1", "10"}
    assert report.tp + report.fp >= 4 and len(dets) == 4
    assert set(report.csv_row()) == set(EvalReport.CSV_FIELDS)


def test_real_set_against_itself(tiny_dataset):
    m, samples = tiny_dataset
    emb = train_proxy_embedder(samples, m.num_styles, epochs=1, seed=0)
    feats, _ = emb.embed_and_classify(torch.stack([s.image for s in samples]))
    assert abs(fid(feats, feats)) <= 1e-3
