from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from fcdd.backbone import Conv, LeakyReLU, MaxPool, build_backbone

# Acceptance criteria outcomes, printed at the end of the session.
CRITERIA: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def tiny_net():
    """Two-convolution CUSTOM net in float64 for gradient checks."""
    net = build_backbone("CUSTOM", (1, 8, 8), layer_list=[Conv(3), LeakyReLU(0.1), Conv(2)], seed=3)
    return net.double()


def _png(arr, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@pytest.fixture
def folder_root(tmp_path):
    """Tiny labelled image folders: 10-class 'fmnist' and a 3-class RGB 'cifar100'."""
    rng = np.random.default_rng(0)
    for split, n in (("train", 3), ("test", 2)):
        for c in range(10):
            for i in range(n):
                _png(rng.integers(0, 255, (28, 28), dtype=np.uint8), tmp_path / "fmnist" / split / f"c{c}" / f"{i}.png")
    for c in range(3):
        for i in range(4):
            _png(rng.integers(0, 255, (32, 32, 3), dtype=np.uint8), tmp_path / "cifar100" / "train" / f"k{c}" / f"{i}.png")
    return tmp_path


MVTEC_DEFECTS = ("crack", "dent", "hole", "scratch", "stain")


@pytest.fixture
def mvtec_root(tmp_path):
    """MVTec-style tree for class 'widget' with five defect types."""
    rng = np.random.default_rng(1)
    base = tmp_path / "widget"
    for i in range(4):
        _png(rng.integers(0, 255, (32, 32, 3), dtype=np.uint8), base / "train" / "good" / f"{i:03d}.png")
    for i in range(3):
        _png(rng.integers(0, 255, (32, 32, 3), dtype=np.uint8), base / "test" / "good" / f"{i:03d}.png")
    for d in MVTEC_DEFECTS:
        for i in range(3):
            _png(rng.integers(0, 255, (32, 32, 3), dtype=np.uint8), base / "test" / d / f"{i:03d}.png")
            mask = np.zeros((32, 32), dtype=np.uint8)
            mask[8:16, 8:16] = 255
            _png(mask, base / "ground_truth" / d / f"{i:03d}_mask.png")
    return tmp_path


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    from fcdd.synthetic import write_corpus

    root = tmp_path_factory.mktemp("synthetic")
    write_corpus(root, n_train=(40, 40), n_test=(20, 20), seed=5)
    return root


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
