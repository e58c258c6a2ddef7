import os
from pathlib import Path

import numpy as np
import pytest

from fedsel import data


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion, bypassing capture
    if report.when == "call" and "test_acceptance" in report.nodeid:
        if report.passed:
            status = "PASS"
        elif report.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {status}: {name}", flush=True)


# ---------------------------------------------------------------------------
# Image corpus for the MLP smoke test: real FMNIST when the user supplies the
# IDX files, otherwise a deterministic procedurally generated surrogate with
# the same shape (28x28 uint8, 10 classes) written through the IDX format.
# ---------------------------------------------------------------------------

_FMNIST_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find_fmnist(root: Path) -> dict | None:
    found = {}
    for key, stem in _FMNIST_NAMES.items():
        for candidate in (root / f"{stem}.gz", root / stem):
            if candidate.is_file():
                found[key] = candidate
                break
        else:
            return None
    return found


def _blur(field: np.ndarray, passes: int = 2, width: int = 7) -> np.ndarray:
    kernel = np.ones(width) / width
    for _ in range(passes):
        field = np.apply_along_axis(lambda row: np.convolve(row, kernel, mode="same"), 1, field)
        field = np.apply_along_axis(lambda col: np.convolve(col, kernel, mode="same"), 0, field)
    return field


def make_surrogate_corpus(out_dir: Path, train_n=12000, test_n=2000, seed=20259) -> dict:
    """Ten smooth random prototype images plus per-pixel noise, quantized to
    uint8 and written as IDX pairs. The shared base field makes the classes
    overlap so the task is learnable but not instantly saturated."""
    rng = np.random.default_rng(seed)
    base = _blur(rng.normal(size=(28, 28)))
    prototypes = []
    for _ in range(10):
        field = 0.75 * base + 0.25 * _blur(rng.normal(size=(28, 28)))
        lo, hi = field.min(), field.max()
        prototypes.append((field - lo) / (hi - lo))
    prototypes = np.stack(prototypes)

    def draw(n, rng):
        labels = rng.integers(0, 10, size=n)
        images = 0.4 * prototypes[labels] + 0.6 * rng.random(size=(n, 28, 28))
        return np.clip(images * 255, 0, 255).astype(np.uint8), labels.astype(np.uint8)

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {key: out_dir / stem for key, stem in _FMNIST_NAMES.items()}
    train = draw(train_n, rng)
    test = draw(test_n, rng)
    data.save_idx(paths["train_images"], paths["train_labels"], *train)
    data.save_idx(paths["test_images"], paths["test_labels"], *test)
    return paths


@pytest.fixture(scope="session")
def image_corpus(tmp_path_factory):
    root = Path(os.environ.get("FEDSEL_FMNIST_DIR", "data/fmnist"))
    found = _find_fmnist(root)
    if found is not None:
        return {"source": "fmnist", **found}
    paths = make_surrogate_corpus(tmp_path_factory.mktemp("surrogate_idx"))
    return {"source": "surrogate", **paths}
