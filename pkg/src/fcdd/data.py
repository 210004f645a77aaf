"""Dataset registry, split construction and confetti noise.

Two on-disk layouts are understood.

Labelled image folders (one-vs-rest datasets and their outlier-exposure sources)::

    <root>/<dataset>/train/<class name>/<image>
    <root>/<dataset>/test/<class name>/<image>

MVTec-AD::

    <root>/<class>/train/good/<image>
    <root>/<class>/test/<defect type or good>/<image>
    <root>/<class>/ground_truth/<defect type>/<image stem>_mask.png

A :class:`SplitSpec` only stores item references; pixels are read by
:func:`load_split`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
FULL_MASK = "<full>"  # whole image anomalous
# Item path prefix for confetti-corrupted copies of a normal image.
CONFETTI_PREFIX = "confetti:"


class Mode(str, Enum):
    SAMPLE_WISE = "SAMPLE_WISE"
    PIXEL_UNSUP = "PIXEL_UNSUP"
    PIXEL_SEMISUP = "PIXEL_SEMISUP"


@dataclass(frozen=True)
class DatasetInfo:
    channels: int
    side: int
    mean: tuple[float, ...]
    std: tuple[float, ...]


DATASETS: dict[str, DatasetInfo] = {
    "fmnist": DatasetInfo(1, 28, (0.2860,), (0.3530,)),
    "emnist": DatasetInfo(1, 28, (0.1751,), (0.3332,)),
    "cifar10": DatasetInfo(3, 32, (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": DatasetInfo(3, 32, (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "mvtec": DatasetInfo(3, 224, (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "synthetic": DatasetInfo(1, 28, (0.5,), (0.25,)),
}

ONE_VS_REST_OE = {"fmnist": ("emnist", "cifar100"), "cifar10": ("cifar100",)}

MVTEC_CLASSES = (
    "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut",
    "pill", "screw", "tile", "toothbrush", "transistor", "wood", "zipper",
)


@dataclass(frozen=True)
class Item:
    id: str
    path: str  # relative to the data root; CONFETTI_PREFIX marks synthetic anomalies
    label: int
    mask: str | None = None  # relative path, FULL_MASK, or None (all normal)
    noise_seed: int | None = None


@dataclass
class SplitSpec:
    dataset: str
    normal_class: str
    train_items: list[Item]
    test_items: list[Item]
    mode: Mode
    oe_source: str | None = None
    data_root: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        overlap = {i.id for i in self.train_items} & {i.id for i in self.test_items}
        if overlap:
            raise ValueError(f"items in both train and test: {sorted(overlap)[:5]}")

    def to_manifest(self) -> dict:
        return {
            "dataset": self.dataset,
            "normal_class": self.normal_class,
            "mode": self.mode.value,
            "oe_source": self.oe_source,
            "data_root": self.data_root,
            "meta": self.meta,
            "items": [asdict(i) | {"role": "train"} for i in self.train_items]
            + [asdict(i) | {"role": "test"} for i in self.test_items],
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "SplitSpec":
        train, test = [], []
        for raw in d["items"]:
            raw = dict(raw)
            role = raw.pop("role")
            (train if role == "train" else test).append(Item(**raw))
        return cls(dataset=d["dataset"], normal_class=d["normal_class"], train_items=train,
                   test_items=test, mode=Mode(d["mode"]), oe_source=d.get("oe_source"),
                   data_root=d.get("data_root", ""), meta=d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SplitSpec":
        return cls.from_manifest(json.loads(Path(path).read_text()))


# --- confetti noise ------------------------------------------------------------

@dataclass(frozen=True)
class ConfettiParams:
    blob_count_range: tuple[int, int] = (1, 8)
    blob_size_range: tuple[int, int] = (2, 16)
    color_mode: str = "uniform_random"
    rng_seed: int = 0

    def __post_init__(self):
        (cmin, cmax), (smin, smax) = self.blob_count_range, self.blob_size_range
        if not (1 <= cmin <= cmax and 1 <= smin <= smax):
            raise ValueError("confetti ranges must be positive and ordered")
        if self.color_mode not in ("uniform_random", "channel_random"):
            raise ValueError(f"unknown color_mode {self.color_mode!r}")

    def scaled(self, side: int, reference: int = 224) -> "ConfettiParams":
        """Blob sizes rescaled from a ``reference``-pixel image to ``side`` pixels."""
        f = side / reference
        smin, smax = (max(1, round(s * f)) for s in self.blob_size_range)
        return ConfettiParams(self.blob_count_range, (smin, max(smin, smax)), self.color_mode, self.rng_seed)


def confetti_noise(image: np.ndarray, params: ConfettiParams) -> tuple[np.ndarray, np.ndarray]:
    """Paste axis-aligned coloured rectangles onto a (C, H, W) image in [0, 1].

    Returns the corrupted copy and the (H, W) union of blob footprints. With
    ``uniform_random`` every blob gets one random colour; with ``channel_random``
    a random value is written into a single random channel of the blob.
    """
    image = np.asarray(image)
    if image.ndim != 3 or not np.isfinite(image).all():
        raise ValueError("image must be a finite (C, H, W) array")
    c, h, w = image.shape
    if params.blob_size_range[1] > min(h, w):
        raise ValueError(f"blob size {params.blob_size_range[1]} exceeds the {h}x{w} image")
    rng = np.random.default_rng(params.rng_seed)
    out = image.copy()
    mask = np.zeros((h, w), dtype=np.uint8)
    k = rng.integers(params.blob_count_range[0], params.blob_count_range[1] + 1)
    for _ in range(k):
        bh, bw = rng.integers(params.blob_size_range[0], params.blob_size_range[1] + 1, size=2)
        top = rng.integers(0, h - bh + 1)
        left = rng.integers(0, w - bw + 1)
        win = (slice(top, top + bh), slice(left, left + bw))
        if params.color_mode == "uniform_random":
            out[(slice(None),) + win] = rng.random(c)[:, None, None]
        else:
            ch = rng.integers(0, c)
            out[(ch,) + win] = rng.random()
        mask[win] = 1
    return out, mask


# --- split construction ------------------------------------------------------

def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def folder_classes(root: Path, dataset: str, split: str = "train") -> list[str]:
    base = Path(root) / dataset / split
    if not base.is_dir():
        raise FileNotFoundError(f"dataset root {base} does not exist")
    return sorted(p.name for p in base.iterdir() if p.is_dir())


def _resolve_class(classes: list[str], normal_class: str | int) -> str:
    if isinstance(normal_class, int) or str(normal_class).isdigit():
        idx = int(normal_class)
        if not 0 <= idx < len(classes):
            raise ValueError(f"class index {idx} out of range for {len(classes)} classes")
        return classes[idx]
    if normal_class not in classes:
        raise ValueError(f"unknown class {normal_class!r}; available: {classes}")
    return str(normal_class)


def make_one_vs_rest(dataset: str, normal_class: str | int, oe: str | None, data_root: str | Path,
                     *, oe_limit: int | None = None, seed: int = 0) -> SplitSpec:
    """One class normal, every other test class anomalous, OE images as training anomalies.

    ``oe_limit`` caps the number of OE images (seeded choice); ``None`` defaults to
    as many OE images as there are training normals.
    """
    root = Path(data_root)
    classes = folder_classes(root, dataset, "train")
    normal = _resolve_class(classes, normal_class)
    train = [Item(f"{dataset}/train/{normal}/{p.name}", str(p.relative_to(root)), 0)
             for p in _images(root / dataset / "train" / normal)]
    test = []
    for cls in folder_classes(root, dataset, "test"):
        label = int(cls != normal)
        test += [Item(f"{dataset}/test/{cls}/{p.name}", str(p.relative_to(root)), label)
                 for p in _images(root / dataset / "test" / cls)]
    if oe is not None:
        oe_paths = [p for cls in folder_classes(root, oe, "train") for p in _images(root / oe / "train" / cls)]
        if not oe_paths:
            raise FileNotFoundError(f"outlier-exposure dataset {oe} has no images under {root / oe}")
        limit = len(train) if oe_limit is None else oe_limit
        if limit < len(oe_paths):
            pick = np.random.default_rng(seed).choice(len(oe_paths), size=limit, replace=False)
            oe_paths = [oe_paths[i] for i in sorted(pick)]
        train += [Item(f"{oe}/{p.relative_to(root / oe)}", str(p.relative_to(root)), 1, FULL_MASK)
                  for p in oe_paths]
    return SplitSpec(dataset=dataset, normal_class=normal, train_items=train, test_items=test,
                     mode=Mode.SAMPLE_WISE, oe_source=oe, data_root=str(root),
                     meta={"oe_limit": oe_limit, "seed": seed})


def mvtec_mask_path(root: Path, cls: str, defect: str, image: Path) -> Path:
    return root / cls / "ground_truth" / defect / f"{image.stem}_mask.png"


def make_mvtec_setup(cls: str, mode: Mode | str, data_root: str | Path, *, seed: int = 0,
                     confetti: ConfettiParams | None = None, anomalies_per_normal: int = 1) -> SplitSpec:
    """Pixel-wise setup for one MVTec-AD class.

    Unsupervised: every training normal gets ``anomalies_per_normal`` confetti copies
    whose training mask is the full image. Semi-supervised additionally moves one
    real anomalous test image per defect type (first under a seeded shuffle) into
    training together with its true mask.
    """
    mode = Mode(mode)
    if mode is Mode.SAMPLE_WISE:
        raise ValueError("MVTec setups are pixel-wise")
    root = Path(data_root)
    base = root / cls
    if not base.is_dir():
        raise ValueError(f"unknown class {cls!r}: {base} does not exist")
    confetti = confetti or ConfettiParams()
    normals = _images(base / "train" / "good")
    train = [Item(f"{cls}/train/good/{p.name}", str(p.relative_to(root)), 0) for p in normals]
    for j in range(anomalies_per_normal):
        for i, p in enumerate(normals):
            train.append(Item(f"{cls}/train/confetti/{j}/{p.name}", CONFETTI_PREFIX + str(p.relative_to(root)), 1,
                              FULL_MASK, noise_seed=confetti.rng_seed + j * len(normals) + i))
    test: list[Item] = []
    defects = sorted(d.name for d in (base / "test").iterdir() if d.is_dir() and d.name != "good")
    for p in _images(base / "test" / "good"):
        test.append(Item(f"{cls}/test/good/{p.name}", str(p.relative_to(root)), 0))
    by_defect: dict[str, list[Item]] = {}
    for defect in defects:
        items = []
        for p in _images(base / "test" / defect):
            mp = mvtec_mask_path(root, cls, defect, p)
            if not mp.is_file():
                raise FileNotFoundError(f"missing ground-truth mask {mp}")
            items.append(Item(f"{cls}/test/{defect}/{p.name}", str(p.relative_to(root)), 1, str(mp.relative_to(root))))
        if not items:
            raise ValueError(f"defect type {defect!r} of {cls} has no test images")
        by_defect[defect] = items
    moved: list[str] = []
    if mode is Mode.PIXEL_SEMISUP:
        rng = np.random.default_rng(seed)
        for defect in defects:
            items = by_defect[defect]
            chosen = items[rng.permutation(len(items))[0]]
            train.append(chosen)
            moved.append(chosen.id)
            by_defect[defect] = [i for i in items if i.id != chosen.id]
    for defect in defects:
        test += by_defect[defect]
    return SplitSpec(dataset="mvtec", normal_class=cls, train_items=train, test_items=test, mode=mode,
                     data_root=str(root),
                     meta={"seed": seed, "confetti": asdict(confetti), "defect_types": defects,
                           "moved": moved, "anomalies_per_normal": anomalies_per_normal})


# --- loading -----------------------------------------------------------------

def read_image(path: Path, channels: int, side: int | tuple[int, int]) -> np.ndarray:
    """(C, H, W) float image in [0, 1], converted to ``channels`` and resized."""
    size = (side, side) if isinstance(side, int) else (side[1], side[0])
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        if im.size != size:
            im = im.resize(size, Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def read_mask(path: Path, side: int | tuple[int, int]) -> np.ndarray:
    size = (side, side) if isinstance(side, int) else (side[1], side[0])
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != size:
            im = im.resize(size, Image.NEAREST)
        return (np.asarray(im) > 127).astype(np.uint8)


@dataclass
class LoadedSet:
    images: torch.Tensor  # (N, C, H, W), normalised
    labels: torch.Tensor  # (N,)
    masks: torch.Tensor   # (N, H, W) in {0, 1}
    ids: list[str]
    has_masks: bool       # pixel ground truth available for the anomalies
    blob_masks: dict[str, np.ndarray] = field(default_factory=dict)  # diagnostics only


def load_items(items: list[Item], root: str | Path, input_shape: tuple[int, int, int],
               mean: tuple[float, ...], std: tuple[float, ...],
               confetti: ConfettiParams | None = None) -> LoadedSet:
    root = Path(root)
    c, h, w = input_shape
    confetti = confetti or ConfettiParams()
    images, masks, blobs = [], [], {}
    has_masks = True
    for item in items:
        if item.path.startswith(CONFETTI_PREFIX):
            clean = read_image(root / item.path[len(CONFETTI_PREFIX):], c, (h, w))
            params = ConfettiParams(confetti.blob_count_range, confetti.blob_size_range,
                                    confetti.color_mode, item.noise_seed or 0)
            img, blob = confetti_noise(clean, params)
            blobs[item.id] = blob
        else:
            img = read_image(root / item.path, c, (h, w))
        if item.mask is None:
            if item.label == 1:
                has_masks = False
            m = np.zeros((h, w), dtype=np.uint8)
        elif item.mask == FULL_MASK:
            m = np.ones((h, w), dtype=np.uint8)
        else:
            m = read_mask(root / item.mask, (h, w))
        images.append(img)
        masks.append(m)
    x = torch.from_numpy(np.stack(images)) if images else torch.zeros((0, c, h, w))
    mean_t = torch.tensor(mean, dtype=torch.float32)[:, None, None]
    std_t = torch.tensor(std, dtype=torch.float32)[:, None, None]
    x = (x - mean_t) / std_t
    return LoadedSet(images=x, labels=torch.tensor([i.label for i in items], dtype=torch.long),
                     masks=torch.from_numpy(np.stack(masks)) if masks else torch.zeros((0, h, w), dtype=torch.uint8),
                     ids=[i.id for i in items], has_masks=has_masks, blob_masks=blobs)


def load_split(split: SplitSpec, input_shape: tuple[int, int, int], mean, std,
               confetti: ConfettiParams | None = None) -> tuple[LoadedSet, LoadedSet]:
    if confetti is None and "confetti" in split.meta:
        confetti = ConfettiParams(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in split.meta["confetti"].items()})
    train = load_items(split.train_items, split.data_root, input_shape, mean, std, confetti)
    test = load_items(split.test_items, split.data_root, input_shape, mean, std, confetti)
    return train, test
