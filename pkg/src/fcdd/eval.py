"""ROC-AUC (sample- and pixel-wise), performance history and reproduction differences."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.stats import rankdata


class DegenerateLabelsError(ValueError):
    """Raised when a ROC-AUC is requested for a single-class label set."""


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form of the ROC-AUC; ties between a positive and a negative count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be binary (0/1)")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pixel_roc_auc(heatmaps: Iterable, masks: Iterable, pooling: str = "pooled") -> float:
    """Pixel-level ROC-AUC.

    ``pooled`` (default) puts every pixel of every image into one set. ``per_image``
    is a diagnostic variant: the mean of per-image AUCs over images that contain
    both classes.
    """
    hs = [np.asarray(getattr(h, "values", h), dtype=np.float64) for h in heatmaps]
    ms = [np.asarray(m) for m in masks]
    if len(hs) != len(ms):
        raise ValueError(f"{len(hs)} heatmaps for {len(ms)} masks")
    for h, m in zip(hs, ms):
        if h.shape != m.shape:
            raise ValueError(f"heatmap shape {h.shape} != mask shape {m.shape}")
    if pooling == "pooled":
        flat_m = np.concatenate([m.ravel() for m in ms])
        if not (flat_m == 1).any():
            raise DegenerateLabelsError("no anomalous pixels")
        return roc_auc(np.concatenate([h.ravel() for h in hs]), flat_m)
    if pooling == "per_image":
        aucs = [roc_auc(h, m) for h, m in zip(hs, ms) if 0 < m.sum() < m.size]
        if not aucs:
            raise DegenerateLabelsError("no image contains both normal and anomalous pixels")
        return float(np.mean(aucs))
    raise ValueError(f"unknown pooling {pooling!r}")


def performance_history(snapshots: Iterable[tuple[int, str | Path]],
                        evaluate: Callable[[Path], float]) -> tuple[list[tuple[int, float]], list[dict]]:
    """Evaluate each ``(epoch, snapshot path)``; returns the curve and the gaps.

    Snapshots that fail to load or evaluate leave a gap entry instead of a point.
    """
    curve: list[tuple[int, float]] = []
    gaps: list[dict] = []
    last = None
    for epoch, path in snapshots:
        if last is not None and epoch <= last:
            raise ValueError("snapshots must be ordered by strictly increasing epoch")
        last = epoch
        try:
            curve.append((int(epoch), float(evaluate(Path(path)))))
        except (OSError, ValueError, KeyError) as exc:
            gaps.append({"epoch": int(epoch), "path": str(path), "error": str(exc)})
    return curve, gaps


def write_history_csv(curve: list[tuple[int, float]], path: str | Path) -> None:
    lines = ["epoch,value"] + [f"{e},{v!r}" for e, v in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class DiffStats:
    per_class_abs_diff: dict[str, float]
    max_diff: float
    mean_diff: float
    mean_rocauc_diff: float

    def row(self) -> dict:
        """Summary columns: per-class max, per-class mean, class-mean difference (percent points)."""
        return {"n_classes": len(self.per_class_abs_diff), "max_diff": self.max_diff,
                "mean_diff": self.mean_diff, "mean_rocauc_diff": self.mean_rocauc_diff}


def diff_table(ours: Mapping[str, float], reference: Mapping[str, float]) -> DiffStats:
    """Absolute per-class differences of two metric maps given as fractions, in percent points."""
    if set(ours) != set(reference):
        raise ValueError(f"class keys differ: {sorted(set(ours) ^ set(reference))}")
    if not ours:
        raise ValueError("no classes to compare")
    keys = sorted(ours)
    diffs = {k: abs(ours[k] - reference[k]) * 100 for k in keys}
    values = np.array(list(diffs.values()))
    mean_gap = abs(np.mean([ours[k] for k in keys]) - np.mean([reference[k] for k in keys])) * 100
    return DiffStats(diffs, float(values.max()), float(values.mean()), float(mean_gap))
