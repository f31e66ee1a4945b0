import os
from pathlib import Path

import numpy as np
import pytest

from biasscan.mnist import LabeledDataset

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("BIASSCAN_MNIST", ROOT / "data" / "mnist"))

_ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, title: str, detail: str) -> None:
    _ACCEPTANCE_LINES[number] = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    print(_ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[n])


def mnist_files() -> dict[str, Path]:
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    out = {}
    for key, stem in names.items():
        for cand in (MNIST_DIR / stem, MNIST_DIR / (stem + ".gz")):
            if cand.exists():
                out[key] = cand
                break
    return out


requires_mnist = pytest.mark.skipif(len(mnist_files()) < 4, reason=f"MNIST not found under {MNIST_DIR}")


@pytest.fixture
def tiny_dataset():
    """40 synthetic 28x28 images, four per class, pixel values on the 1/255 grid."""
    rng = np.random.default_rng(7)
    images = (rng.integers(0, 256, size=(40, 1, 28, 28)) / 255.0).astype(np.float32)
    images[:, :, :6, 20:] = 0.0  # keep the top-right corner blank for patch placement
    labels = np.repeat(np.arange(10), 4).astype(np.int64)
    return LabeledDataset.pristine(images, labels)
