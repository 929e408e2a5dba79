import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from llgan.detector.boxes import Box
from llgan.diffcore import grad_check
from llgan.oracles import gram_oracle
from llgan.style import (backbone_content_loss, extend_box, gram, roi_style_distance, style_loss,
                         vectorize_roi)


def test_vectorize_row_major():
    roi = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert vectorize_roi(roi).tolist() == [[1.0, 2.0, 3.0, 4.0]]


def test_vectorize_full_size():
    assert vectorize_roi(torch.zeros(256, 7, 7)).shape == (256, 49)


def test_vectorize_rejects_batched():
    with pytest.raises(ValueError):
        vectorize_roi(torch.zeros(2, 3, 7, 7))


def test_gram_fixture():
    assert gram(torch.tensor([[1.0, 2.0, 2.0]])).tolist() == [[9.0]]


def test_gram_orthogonal_rows_diagonal():
    g = gram(torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]))
    assert g.tolist() == [[1.0, 0.0], [0.0, 4.0]]


def test_gram_zero():
    assert not gram(torch.zeros(3, 4)).any()


@settings(max_examples=30)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=st.floats(-10, 10)))
def test_gram_matches_oracle_and_is_symmetric_psd(f):
    g = gram(torch.from_numpy(f)).numpy()
    assert np.allclose(g, gram_oracle(f), atol=1e-9)
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-8 * max(1.0, np.abs(g).max())


class TestDistance:
    def test_fixture(self):
        assert roi_style_distance(torch.tensor([[2.0]]), torch.tensor([[0.0]]), 1, 1).item() == 1.0

    def test_identical(self):
        g = torch.randn(4, 4)
        assert roi_style_distance(g, g, 7, 7).item() == 0.0

    def test_quadratic_scaling(self):
        gr, gf = torch.randn(3, 3, dtype=torch.float64), torch.randn(3, 3, dtype=torch.float64)
        d1 = roi_style_distance(gr, gf, 7, 7)
        d2 = roi_style_distance(gr + (gr - gf), gf, 7, 7)
        assert d2.item() == pytest.approx(4 * d1.item(), rel=1e-12)

    def test_channel_normalisation(self):
        gr, gf = torch.randn(3, 3, dtype=torch.float64), torch.randn(3, 3, dtype=torch.float64)
        plain = roi_style_distance(gr, gf, 2, 2)
        scaled = roi_style_distance(gr, gf, 2, 2, normalize_channels=True)
        assert scaled.item() == pytest.approx(plain.item() / 9, rel=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            roi_style_distance(torch.zeros(2, 2), torch.zeros(3, 3), 1, 1)

    def test_batched(self):
        gr = torch.randn(3, 3, dtype=torch.float64)
        gf = torch.randn(4, 3, 3, dtype=torch.float64)
        batched = roi_style_distance(gr, gf, 7, 7)
        single = torch.stack([roi_style_distance(gr, g, 7, 7) for g in gf])
        assert torch.allclose(batched, single)


class TestStyleLoss:
    def test_mean_of_distances(self):
        real = torch.randn(3, 7, 7, dtype=torch.float64)
        fakes = torch.randn(4, 3, 7, 7, dtype=torch.float64)
        rep = style_loss(real, fakes)
        gr = gram(vectorize_roi(real))
        want = np.mean([roi_style_distance(gr, gram(vectorize_roi(f)), 7, 7).item() for f in fakes])
        assert rep.L_S == pytest.approx(want, rel=1e-12)
        assert rep.B == 4 and len(rep.distances) == 4

    def test_permutation_invariant(self):
        real = torch.randn(2, 3, 3, dtype=torch.float64)
        fakes = torch.randn(3, 2, 3, 3, dtype=torch.float64)
        base = style_loss(real, fakes).L_S
        for perm in itertools.permutations(range(3)):
            assert style_loss(real, fakes[list(perm)]).L_S == pytest.approx(base, rel=1e-12)

    def test_list_input(self):
        real = torch.randn(2, 3, 3)
        fakes = [torch.randn(2, 3, 3) for _ in range(2)]
        assert style_loss(real, fakes).L_S == pytest.approx(style_loss(real, torch.stack(fakes)).L_S)

    def test_empty_fakes(self):
        with pytest.raises(ValueError):
            style_loss(torch.randn(2, 3, 3), [])

    def test_real_branch_detached(self):
        real = torch.randn(2, 3, 3, requires_grad=True)
        fake = torch.randn(1, 2, 3, 3, requires_grad=True)
        style_loss(real, fake).loss.backward()
        assert real.grad is None and fake.grad.abs().sum() > 0

    def test_gradient(self):
        real = torch.randn(3, 2, 2, dtype=torch.float64)
        assert grad_check(lambda f: style_loss(real, f).loss, torch.randn(2, 3, 2, 2, dtype=torch.float64)) <= 1e-3


class TestExtendBox:
    def test_twenty_pixels(self):
        assert extend_box(Box(30, 30, 100, 100), 20, (282, 282)).as_tuple() == (10, 10, 120, 120)

    def test_clips_at_origin(self):
        assert extend_box(Box(5, 0, 50, 40), 20, (282, 282)).as_tuple() == (0, 0, 70, 60)

    def test_clips_far_edge(self):
        assert extend_box(Box(200, 250, 280, 270), 20, (282, 282)).as_tuple() == (180, 230, 282, 282)

    def test_zero_margin(self):
        b = Box(3, 4, 50, 60)
        assert extend_box(b, 0, (282, 282)) == b


class TestContentLoss:
    def test_identical(self):
        f = {"p2": torch.randn(1, 4, 5, 5), "p3": torch.randn(1, 4, 3, 3)}
        assert backbone_content_loss(f, f).item() == 0.0

    def test_constant_offset_on_one_level(self):
        real = {"p2": torch.zeros(1, 4, 5, 5), "p3": torch.zeros(1, 4, 3, 3)}
        fake = {"p2": torch.full((1, 4, 5, 5), 3.0), "p3": torch.zeros(1, 4, 3, 3)}
        assert backbone_content_loss(real, fake).item() == pytest.approx(9.0 / 2)

    def test_swap_keeps_value(self):
        a = {"p2": torch.randn(1, 2, 4, 4)}
        b = {"p2": torch.randn(1, 2, 4, 4)}
        assert backbone_content_loss(a, b).item() == pytest.approx(backbone_content_loss(b, a).item())

    def test_level_mismatch(self):
        with pytest.raises(ValueError):
            backbone_content_loss({"p2": torch.zeros(1)}, {"p3": torch.zeros(1)})
