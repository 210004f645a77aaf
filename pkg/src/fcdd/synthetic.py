"""Small separable corpus for desk-scale checks.

Normal images are smooth random textures; anomalies are the same kind of texture
with one bright square pasted in, and come with pixel masks. On disk::

    <root>/synthetic/{train,test}/{good,square}/<split>_<index>.png
    <root>/synthetic/ground_truth/square/<split>_<index>_mask.png
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import Item, Mode, SplitSpec, _images

NAME = "synthetic"


def texture(rng: np.random.Generator, side: int = 28) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    img = np.zeros((side, side))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        img += np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img = 0.35 + 0.07 * img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0.0, 0.65)


def bright_square(img: np.ndarray, rng: np.random.Generator, size_range=(5, 9)) -> tuple[np.ndarray, np.ndarray]:
    side = img.shape[0]
    s = int(rng.integers(size_range[0], size_range[1] + 1))
    top, left = rng.integers(0, side - s + 1, size=2)
    out = img.copy()
    out[top:top + s, left:left + s] = rng.uniform(0.9, 1.0)
    mask = np.zeros_like(img, dtype=np.uint8)
    mask[top:top + s, left:left + s] = 1
    return out, mask


def _save(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def write_corpus(root: str | Path, n_train: tuple[int, int] = (200, 200), n_test: tuple[int, int] = (100, 100),
                 side: int = 28, seed: int = 0) -> Path:
    """Write the corpus; ``n_train``/``n_test`` are (normal, anomalous) counts."""
    rng = np.random.default_rng(seed)
    base = Path(root) / NAME
    for split, (n_norm, n_anom) in (("train", n_train), ("test", n_test)):
        for i in range(n_norm):
            _save(texture(rng, side), base / split / "good" / f"{split}_{i:04d}.png")
        for i in range(n_anom):
            img, mask = bright_square(texture(rng, side), rng)
            _save(img, base / split / "square" / f"{split}_{i:04d}.png")
            _save(mask.astype(np.float64), base / "ground_truth" / "square" / f"{split}_{i:04d}_mask.png")
    return base


def make_synthetic_split(root: str | Path) -> SplitSpec:
    """Split over a written corpus; training anomalies carry their true masks."""
    root = Path(root)
    base = root / NAME
    if not base.is_dir():
        raise FileNotFoundError(f"no synthetic corpus under {root}")
    out: dict[str, list[Item]] = {"train": [], "test": []}
    for split in out:
        for cls, label in (("good", 0), ("square", 1)):
            for p in _images(base / split / cls):
                mask = None
                if label:
                    mask = str((base / "ground_truth" / cls / f"{p.stem}_mask.png").relative_to(root))
                out[split].append(Item(f"{NAME}/{split}/{cls}/{p.name}", str(p.relative_to(root)), label, mask))
    return SplitSpec(dataset=NAME, normal_class="good", train_items=out["train"], test_items=out["test"],
                     mode=Mode.PIXEL_SEMISUP, data_root=str(root), meta={"defect_types": ["square"]})
