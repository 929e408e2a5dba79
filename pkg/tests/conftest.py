import time
from pathlib import Path

import pytest
import torch

from llgan.cli import main
from llgan.dataset import generate_synthetic_dataset, load_samples
from llgan.detector.model import DetectorConfig, LogoDetector


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifest = generate_synthetic_dataset(16, root, seed=3)
    return manifest, load_samples(manifest)


@pytest.fixture
def random_detector():
    """Untrained weights, marked trained so inference paths run."""
    torch.manual_seed(0)
    det = LogoDetector(DetectorConfig())
    det.trained.fill_(1.0)
    return det.eval()


@pytest.fixture(scope="session")
def smoke_pipeline(tmp_path_factory):
    """gen-data --n 64 then train-detector, shared by the end-to-end and training-signal checks."""
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.monotonic()
    rc_data = main(["gen-data", "--n", "64", "--seed", "7", "--out", str(root / "data")])
    t1 = time.monotonic()
    rc_det = main(["train-detector", "--data", str(root / "data"), "--out", str(root / "det"), "--seed", "0"])
    t2 = time.monotonic()
    return {"root": root, "rc": (rc_data, rc_det), "seconds": {"gen-data": t1 - t0, "train-detector": t2 - t1},
            "data": root / "data", "detector": root / "det" / "detector"}


ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""
    num = int(request.node.name.split("_")[2])
    ACCEPTANCE[num] = ("FAIL", "did not complete")

    def record(ok: bool, detail: str):
        ACCEPTANCE[num] = ("PASS" if ok else "FAIL", detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")
