"""Gaussian receptive-field upsampling of score maps, rendering and export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .backbone import ReceptiveField

COLORMAP = "viridis"


@dataclass
class Heatmap:
    values: np.ndarray
    receptive_field: ReceptiveField
    sigma: float
    source_id: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def provenance(self) -> dict:
        return {"source_id": self.source_id, "receptive_field": asdict(self.receptive_field),
                "sigma": self.sigma, **self.extra}


def default_sigma(rf: ReceptiveField) -> float:
    return rf.size / 4


def axis_weights(n_cells: int, n_pixels: int, rf: ReceptiveField, sigma: float) -> np.ndarray:
    """(n_pixels, n_cells) matrix of truncated 1-D Gaussian weights.

    A pixel belongs to a cell's window when it lies within ``(size - 1) / 2`` of the
    cell centre, which gives exactly ``size`` pixels for integer ``size``.
    """
    centres = rf.offset + np.arange(n_cells) * rf.jump
    d = np.arange(n_pixels)[:, None] - centres[None, :]
    w = np.exp(-(d ** 2) / (2 * sigma ** 2))
    w[np.abs(d) > (rf.size - 1) / 2 + 1e-9] = 0.0
    return w


def upsample_scores(score_maps: torch.Tensor, rf: ReceptiveField, target: tuple[int, int],
                    sigma: float | None = None) -> torch.Tensor:
    """Batched, differentiable upsampling of (..., U, V) score maps to (..., H, W).

    The 2-D kernel is separable, so the sum over cells reduces to ``A_h @ M @ A_w^T``.
    """
    sigma = default_sigma(rf) if sigma is None else sigma
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    u, v = score_maps.shape[-2:]
    ah = torch.as_tensor(axis_weights(u, target[0], rf, sigma), dtype=score_maps.dtype, device=score_maps.device)
    aw = torch.as_tensor(axis_weights(v, target[1], rf, sigma), dtype=score_maps.dtype, device=score_maps.device)
    return ah @ score_maps @ aw.T


def upsample_heatmap(score_map, rf: ReceptiveField, target: tuple[int, int], sigma: float | None = None,
                     source_shape: tuple[int, int] | None = None, source_id: str | None = None) -> Heatmap:
    """Full-resolution heatmap of a single (U, V) score map."""
    if source_shape is not None and tuple(source_shape) != tuple(target):
        raise ValueError(f"target {tuple(target)} differs from the score map's source shape {tuple(source_shape)}")
    sigma = default_sigma(rf) if sigma is None else float(sigma)
    m = torch.as_tensor(np.asarray(score_map, dtype=np.float64))
    if m.ndim != 2:
        raise ValueError("expected a single (U, V) score map")
    values = upsample_scores(m, rf, target, sigma).numpy()
    return Heatmap(values=values, receptive_field=rf, sigma=sigma, source_id=source_id)


def render_heatmap(hm: Heatmap | np.ndarray, norm: str = "per_image",
                   bounds: tuple[float, float] | None = None) -> tuple[np.ndarray, dict]:
    """Map scores to 8-bit intensities (H, W) plus metadata.

    ``per_image`` stretches this heatmap's [min, max] onto [0, 255]; ``global``
    uses ``bounds`` and clips. A constant heatmap under ``per_image`` renders as
    all zeros with ``constant=True`` in the metadata.
    """
    values = np.asarray(hm.values if isinstance(hm, Heatmap) else hm, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ValueError("heatmap contains non-finite values")
    meta = {"norm": norm, "colormap": COLORMAP, "constant": False}
    if norm == "per_image":
        lo, hi = float(values.min()), float(values.max())
        if hi == lo:
            meta.update(bounds=[lo, hi], constant=True)
            return np.zeros(values.shape, dtype=np.uint8), meta
    elif norm == "global":
        if bounds is None or not bounds[1] > bounds[0]:
            raise ValueError("global normalisation needs bounds with max > min")
        lo, hi = map(float, bounds)
    else:
        raise ValueError(f"unknown normalisation {norm!r}")
    meta["bounds"] = [lo, hi]
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255).astype(np.uint8), meta


def colorize(intensity: np.ndarray) -> np.ndarray:
    """RGB uint8 image of an 8-bit intensity buffer through the documented colormap."""
    rgba = colormaps[COLORMAP](intensity.astype(np.float64) / 255.0)
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def export_heatmap(hm: Heatmap, path: str | Path, norm: str = "per_image",
                   bounds: tuple[float, float] | None = None) -> Path:
    """Write ``<path>.png`` (colorized, lossless) and ``<path>.json`` (metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    intensity, meta = render_heatmap(hm, norm, bounds)
    png = path.with_suffix(".png")
    Image.fromarray(colorize(intensity)).save(png)
    meta.update(hm.provenance, shape=list(hm.values.shape))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return png
