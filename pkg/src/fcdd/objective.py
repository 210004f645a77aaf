"""Pseudo-Huber score maps and the hypersphere-classifier style training losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F

EPS = 1e-12


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains non-finite values")


def huber_score_map(grid: torch.Tensor) -> torch.Tensor:
    """Per-cell score ``sqrt(||z||^2 + 1) - 1`` over the channel axis.

    ``grid`` is (C', U, V) or (B, C', U, V); the channel axis is removed.
    """
    _check_finite(grid, "latent grid")
    if grid.ndim not in (3, 4):
        raise ValueError(f"expected (C', U, V) or (B, C', U, V), got {tuple(grid.shape)}")
    sq = (grid ** 2).sum(dim=-3)
    return torch.sqrt(sq + 1) - 1


def sample_score(score_map: torch.Tensor) -> torch.Tensor:
    """Mean over the two trailing (U, V) axes."""
    if score_map.ndim < 2 or score_map.shape[-1] == 0 or score_map.shape[-2] == 0:
        raise ValueError("score map is empty")
    return score_map.mean(dim=(-2, -1))


def anomalous_term(score: torch.Tensor) -> torch.Tensor:
    """``-log(1 - exp(-s))`` evaluated as ``-log(-expm1(-s))`` with ``s >= 1e-12``."""
    s = score.clamp_min(EPS)
    return -torch.log(-torch.expm1(-s))


def _check_labels(labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    if labels.numel() and not ((labels == 0) | (labels == 1)).all():
        raise ValueError("labels must be 0 (normal) or 1 (anomalous)")
    return labels


def fcdd_loss(score_maps: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sample-level loss: normals contribute their mean score, anomalies ``-log(1 - exp(-s))``."""
    labels = _check_labels(labels)
    if score_maps.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape != score_maps.shape[:1]:
        raise ValueError(f"{labels.shape[0]} labels for {score_maps.shape[0]} score maps")
    s = sample_score(score_maps)
    y = labels.to(s.dtype)
    return ((1 - y) * s + y * anomalous_term(s)).mean()


def downsample_mask(masks: torch.Tensor, grid_shape: tuple[int, int], mode: str = "max",
                    threshold: float = 0.5) -> torch.Tensor:
    """Reduce (B, H, W) binary masks to the (B, U, V) latent grid.

    ``"max"`` marks a cell anomalous if any pixel in its footprint is; ``"mean"``
    thresholds the anomalous fraction of the footprint.
    """
    m = masks.to(torch.float64 if masks.dtype == torch.float64 else torch.float32).unsqueeze(1)
    if mode == "max":
        out = F.adaptive_max_pool2d(m, grid_shape)
    elif mode == "mean":
        out = (F.adaptive_avg_pool2d(m, grid_shape) >= threshold).to(m.dtype)
    else:
        raise ValueError(f"unknown mask pooling {mode!r}")
    return out.squeeze(1)


def pixel_fcdd_loss(score_maps: torch.Tensor, masks: torch.Tensor, labels: torch.Tensor | None = None,
                    *, balanced: bool = False, pool: str = "max",
                    source_shape: tuple[int, int] | None = None) -> torch.Tensor:
    """Cell-level loss with ground-truth masks.

    Every grid cell is a labelled unit after mask downsampling. The default is a
    flat mean over all cells of all samples; ``balanced=True`` averages the normal
    and anomalous cell means instead.
    """
    if score_maps.shape[0] == 0:
        raise ValueError("empty batch")
    if masks.ndim != 3 or masks.shape[0] != score_maps.shape[0]:
        raise ValueError(f"masks must be (B, H, W) with B={score_maps.shape[0]}, got {tuple(masks.shape)}")
    if source_shape is not None and tuple(masks.shape[1:]) != tuple(source_shape):
        raise ValueError(f"mask shape {tuple(masks.shape[1:])} != image shape {tuple(source_shape)}")
    if not ((masks == 0) | (masks == 1)).all():
        raise ValueError("mask values must be 0 or 1")
    if labels is not None:
        labels = _check_labels(labels)
        normal = labels == 0
        if normal.any() and masks[normal].any():
            raise ValueError("a normal sample (label 0) has a non-zero mask")
    cells = downsample_mask(masks, tuple(score_maps.shape[-2:]), mode=pool).to(score_maps.dtype)
    per_cell = (1 - cells) * score_maps + cells * anomalous_term(score_maps)
    if not balanced:
        return per_cell.mean()
    anomalous = cells.bool()
    parts = [per_cell[~anomalous], per_cell[anomalous]]
    parts = [p.mean() for p in parts if p.numel()]
    return sum(parts) / len(parts)
