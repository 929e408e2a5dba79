"""Fast invariant suite behind ``llgan selftest``.

Every check returns ``(ok, detail)``. ``run_selftest`` collects them into a
report; a single failure makes the whole run fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from llgan import diffcore as dc
from llgan import oracles
from llgan.detector.boxes import Box, decode_boxes, encode_boxes, iou, nms
from llgan.detector.roi_align import roi_align
from llgan.metrics import detection_eval, fid, inception_score
from llgan.style import gram, roi_style_distance, style_loss, vectorize_roi

GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class SelftestReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if r.ok else 'FAIL'}  {r.name:<28} {r.detail}" for r in self.results]
        n_fail = sum(not r.ok for r in self.results)
        out.append(f"{len(self.results) - n_fail}/{len(self.results)} checks passed")
        return out


def _grad_checks() -> dict[str, Callable[[], float]]:
    g = torch.Generator().manual_seed(0)

    def rnd(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    # keep activations away from their kinks
    x_act = rnd(2, 3, 4, 4)
    x_act = x_act + 0.2 * torch.sign(x_act)
    w = rnd(4, 3, 3, 3) * 0.3
    wt = rnd(3, 2, 3, 3) * 0.3
    b = rnd(4)
    feat = rnd(2, 6, 6)
    gam, bet = rnd(3) + 1.5, rnd(3)
    lin_w = rnd(5, 4)
    logits, targets = rnd(6), torch.rand(6, generator=g, dtype=torch.float64)
    roi_r, rois_f = rnd(3, 2, 2), rnd(3, 3, 2, 2)
    boxes = torch.tensor([[3.0, 5.0, 17.0, 20.0], [0.0, 0.0, 23.0, 11.0]], dtype=torch.float64)
    g_real = gram(vectorize_roi(roi_r))

    checks = {
        "conv2d": lambda: dc.grad_check(lambda t: (dc.conv2d(t, w, b, 2, 1) ** 2).sum(), x_act),
        "conv2d.weight": lambda: dc.grad_check(lambda t: (dc.conv2d(x_act, t, b, 1, 1) ** 2).sum(), w),
        "conv_transpose2d": lambda: dc.grad_check(
            lambda t: (dc.conv_transpose2d(t, wt, None, 2, 1) ** 2).sum(), x_act),
        "batchnorm2d": lambda: dc.grad_check(
            lambda t: (dc.batchnorm2d(t, gam, bet, training=True) ** 3).sum(), x_act),
        "linear": lambda: dc.grad_check(lambda t: (dc.linear(t, lin_w) ** 2).sum(), rnd(3, 5)),
        "bce_with_logits": lambda: dc.grad_check(lambda t: dc.bce_with_logits(t, targets), logits),
        "gram": lambda: dc.grad_check(lambda t: (gram(t) ** 2).sum(), rnd(3, 5)),
        "roi_style_distance": lambda: dc.grad_check(
            lambda t: roi_style_distance(g_real, gram(vectorize_roi(t)), 2, 2), rnd(3, 2, 2)),
        "roi_align": lambda: dc.grad_check(lambda t: (roi_align(t, boxes, 4.0, (3, 3)) ** 2).sum(), feat),
        "style_loss": lambda: dc.grad_check(lambda t: style_loss(roi_r, t).loss, rois_f),
    }
    for kind in ("relu", "leaky_relu", "tanh", "sigmoid"):
        checks[f"activation.{kind}"] = (lambda k: lambda: dc.grad_check(
            lambda t: (dc.activation(t, k) ** 2).sum(), x_act))(kind)
    return checks


def check_gram(gram_fn=gram) -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    f = rng.normal(size=(4, 9))
    g = gram_fn(torch.from_numpy(f)).numpy()
    fixture = gram_fn(torch.tensor([[1.0, 2.0, 2.0]], dtype=torch.float64)).numpy()
    err = float(np.abs(g - oracles.gram_oracle(f)).max())
    sym = float(np.abs(g - g.T).max())
    ok = err < 1e-10 and sym == 0.0 and fixture.tolist() == [[9.0]]
    return ok, f"oracle err {err:.1e}, asymmetry {sym:.1e}, [[1,2,2]] -> {fixture.tolist()}"


def check_style_fixture() -> tuple[bool, str]:
    d = float(roi_style_distance(torch.tensor([[2.0]]), torch.zeros(1, 1), 1, 1))
    return d == 1.0, f"D_k = {d}"


def check_iou() -> tuple[bool, str]:
    cases = [((0, 0, 2, 2), (1, 1, 3, 3), 1 / 7), ((0, 0, 1, 1), (0, 0, 1, 1), 1.0),
             ((0, 0, 1, 1), (2, 2, 3, 3), 0.0), ((0, 0, 4, 2), (0, 0, 2, 2), 0.5)]
    bad = [(a, b) for a, b, want in cases if iou(Box(*a), Box(*b)) != want]
    return not bad, f"{len(cases) - len(bad)}/{len(cases)} hand cases"


def check_roi_align() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    fmap = rng.normal(size=(3, 9, 11))
    boxes = [[2.0, 3.0, 30.0, 25.0], [0.0, 0.0, 44.0, 36.0], [10.5, 7.25, 13.0, 9.0], [-3.0, 30.0, 50.0, 40.0]]
    got = roi_align(torch.from_numpy(fmap), torch.tensor(boxes, dtype=torch.float64), 4.0).numpy()
    err = max(float(np.abs(got[i] - oracles.roi_align_oracle(fmap, b, 4.0)).max()) for i, b in enumerate(boxes))
    return err <= 1e-5, f"max abs err {err:.1e}"


def check_nms() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(30):
        n = int(rng.integers(1, 40))
        xy = rng.uniform(0, 50, size=(n, 2))
        wh = rng.uniform(2, 30, size=(n, 2))
        bx = np.concatenate([xy, xy + wh], 1)
        sc = rng.integers(0, 8, size=n) / 8.0  # deliberate ties
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        got = nms(torch.from_numpy(bx), torch.from_numpy(sc), thr).tolist()
        mismatches += got != oracles.nms_oracle(bx.tolist(), sc.tolist(), thr)
    return mismatches == 0, f"{30 - mismatches}/30 random cases"


def check_box_coding() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    xy = rng.uniform(0, 200, size=(50, 2))
    anchors = torch.tensor(np.concatenate([xy, xy + rng.uniform(8, 80, size=(50, 2))], 1), dtype=torch.float32)
    xy = rng.uniform(0, 200, size=(50, 2))
    gt = torch.tensor(np.concatenate([xy, xy + rng.uniform(8, 80, size=(50, 2))], 1), dtype=torch.float32)
    err = float((decode_boxes(anchors, encode_boxes(anchors, gt)) - gt).abs().max())
    return err <= 1e-4, f"max err {err:.1e}"


def check_detection_eval() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(50):
        imgs = [list(rng.choice([0.1, 0.5, 0.75, 0.8, 0.95], size=int(rng.integers(0, 5))))
                for _ in range(int(rng.integers(1, 100)))]
        s = detection_eval(imgs, 0.75)
        bad += (s.tp, s.fp) != oracles.detection_eval_oracle(imgs, 0.75)
    return bad == 0, f"{50 - bad}/50 random cases"


def check_metric_closed_forms() -> tuple[bool, str]:
    k = 10
    uniform = inception_score(np.full((50, k), 1.0 / k))
    onehot = inception_score(np.eye(k)[np.arange(50) % k])
    rng = np.random.default_rng(6)
    a = rng.normal(size=(200, 5))
    same = fid(a, a)
    x, y = rng.normal(0.3, 1.2, size=(4000, 1)), rng.normal(-0.5, 0.7, size=(3000, 1))
    mu_a, sd_a = x.mean(), x.std(ddof=1)
    mu_b, sd_b = y.mean(), y.std(ddof=1)
    one_d = fid(x, y, ridge=0.0)
    want = oracles.fid_1d_closed_form(mu_a, sd_a, mu_b, sd_b)
    ok = abs(uniform - 1) <= 1e-6 and abs(onehot - k) <= 1e-6 and abs(same) <= 1e-4 and abs(one_d - want) <= 1e-6
    return ok, f"IS uniform {uniform:.6f}, one-hot {onehot:.6f}, FID same {same:.1e}, 1-D err {abs(one_d - want):.1e}"


def run_selftest(gram_fn: Callable[[torch.Tensor], torch.Tensor] = gram) -> SelftestReport:
    """Run every check. ``gram_fn`` lets tests inject a broken Gram matrix."""
    report = SelftestReport()

    def record(name, fn):
        t0 = time.monotonic()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        report.results.append(CheckResult(name, bool(ok), detail, time.monotonic() - t0))

    for name, fn in _grad_checks().items():
        record(f"grad.{name}", lambda fn=fn: ((e := fn()) <= GRAD_TOL, f"max rel err {e:.1e}"))
    record("gram.oracle", lambda: check_gram(gram_fn))
    record("style.fixture", check_style_fixture)
    record("iou.hand_cases", check_iou)
    record("roi_align.oracle", check_roi_align)
    record("nms.oracle", check_nms)
    record("boxes.decode_encode", check_box_coding)
    record("detection_eval.oracle", check_detection_eval)
    record("metrics.closed_forms", check_metric_closed_forms)
    return report
