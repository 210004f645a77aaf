"""Training loop, weight snapshots, the repetition protocol and resource monitoring.

A run directory holds everything about one training run::

    spec.json            the experiment spec (written before training starts)
    manifest.json        every split item with its role
    log.txt              human-readable log
    snapshots/epoch_<k>.npz
    resources.csv        t,cpu_bytes,gpu_bytes sampled at 1 Hz
    metrics.json         the RunRecord
    heatmaps/            exported test heatmaps
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
import psutil
import torch

from . import __version__
from .backbone import Arch, Backbone, BackboneSpec, build_backbone, load_weights, save_weights
from .data import DATASETS, ConfettiParams, LoadedSet, SplitSpec, load_split
from .eval import DegenerateLabelsError, pixel_roc_auc, roc_auc
from .explain import default_sigma, export_heatmap, upsample_heatmap, upsample_scores
from .objective import fcdd_loss, huber_score_map, pixel_fcdd_loss, sample_score

log = logging.getLogger(__name__)


@dataclass
class ExperimentSpec:
    split: SplitSpec
    arch: str = Arch.FMNIST_CNN.value
    input_shape: tuple[int, int, int] = (1, 28, 28)
    objective: str = "SAMPLE"  # or "PIXEL"
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_gamma: float = 0.98  # exponential decay per epoch
    weight_decay: float = 1e-6
    seed: int = 0
    snapshot_every: int = 5
    name: str = "run"
    sigma: float | None = None  # heatmap kernel; None -> receptive field size / 4
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    confetti: ConfettiParams = field(default_factory=ConfettiParams)
    balanced_pixel_loss: bool = False
    mask_pool: str = "max"
    widths: tuple[int, ...] | None = None
    negative_slope: float = 0.01
    pretrained_weights: str | None = None
    no_pretrain: bool = False
    n_heatmaps: int = 8
    layer_list: list[dict] | None = None  # CUSTOM backbones only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.snapshot_every < 1:
            raise ValueError("epochs, batch_size and snapshot_every must all be >= 1")
        if self.objective not in ("SAMPLE", "PIXEL"):
            raise ValueError(f"objective must be SAMPLE or PIXEL, got {self.objective!r}")
        if Arch(self.arch) is Arch.VGG11_FCDD and self.pretrained_weights is None and not self.no_pretrain:
            raise ValueError("VGG11_FCDD needs pretrained_weights, or no_pretrain=True to run with random frozen weights")
        info = DATASETS.get(self.split.dataset)
        if self.mean is None:
            self.mean = info.mean if info else (0.0,) * self.input_shape[0]
        if self.std is None:
            self.std = info.std if info else (1.0,) * self.input_shape[0]
        self.input_shape = tuple(self.input_shape)

    def with_seed(self, seed: int) -> "ExperimentSpec":
        return ExperimentSpec.from_dict(self.to_dict() | {"seed": seed})

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("split", "confetti")}
        d["split"] = self.split.to_manifest()
        d["confetti"] = asdict(self.confetti)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["split"] = SplitSpec.from_manifest(d["split"])
        d["confetti"] = ConfettiParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["confetti"].items()})
        for key in ("input_shape", "mean", "std", "widths"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def build(self) -> Backbone:
        from .backbone import layer_from_dict

        layers = [layer_from_dict(l) for l in self.layer_list] if self.layer_list else None
        return build_backbone(self.arch, self.input_shape,
                              None if self.no_pretrain else self.pretrained_weights,
                              layer_list=layers, negative_slope=self.negative_slope,
                              widths=self.widths, seed=self.seed)


@dataclass
class RunRecord:
    spec: dict
    run_dir: str
    status: str = "running"
    loss_trace: list[float] = field(default_factory=list)
    snapshots: dict[int, str] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    resources: dict = field(default_factory=dict)
    duration_s: float = 0.0
    versions: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)
    error: str | None = None

    def save(self) -> Path:
        path = Path(self.run_dir) / "metrics.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunRecord":
        d = json.loads((Path(run_dir) / "metrics.json").read_text())
        d["snapshots"] = {int(k): v for k, v in d["snapshots"].items()}
        return cls(**d)


class TrainingError(RuntimeError):
    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


# --- resource monitoring --------------------------------------------------------

@dataclass
class ResourceLog:
    samples: list[tuple[float, int, int | None]]  # (seconds since start, process bytes, accelerator bytes)
    gpu_available: bool

    @property
    def maxima(self) -> tuple[int, int | None]:
        cpu = max((s[1] for s in self.samples), default=0)
        gpu = max((s[2] for s in self.samples), default=None) if self.gpu_available else None
        return cpu, gpu

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "cpu_bytes", "gpu_bytes"])
            for t, cpu, gpu in self.samples:
                w.writerow([f"{t:.3f}", cpu, "" if gpu is None else gpu])

    def summary(self) -> dict:
        cpu, gpu = self.maxima
        return {"n_samples": len(self.samples), "max_cpu_bytes": cpu, "max_gpu_bytes": gpu,
                "gpu_available": self.gpu_available}


class ResourceMonitor:
    """Background sampler of process (RSS) and accelerator memory.

    Samples are scheduled on an absolute grid ``start + k * interval`` so the rate
    does not drift with sampling cost. Usable as a context manager.
    """

    def __init__(self, interval: float = 1.0, pid: int | None = None):
        self.interval = interval
        self.process = psutil.Process(pid or os.getpid())
        self.gpu_available = torch.cuda.is_available()
        self.samples: list[tuple[float, int, int | None]] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="resource-monitor", daemon=True)

    def _sample(self, t: float) -> None:
        gpu = torch.cuda.memory_allocated() if self.gpu_available else None
        self.samples.append((t, self.process.memory_info().rss, gpu))

    def _run(self) -> None:
        start = time.monotonic()
        k = 0
        while not self._stop.is_set():
            self._sample(time.monotonic() - start)
            k += 1
            self._stop.wait(max(0.0, start + k * self.interval - time.monotonic()))

    def start(self) -> "ResourceMonitor":
        self._thread.start()
        return self

    def stop(self) -> ResourceLog:
        self._stop.set()
        self._thread.join()
        return ResourceLog(list(self.samples), self.gpu_available)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.log = self.stop()


def monitor_resources(interval: float = 1.0) -> ResourceMonitor:
    return ResourceMonitor(interval).start()


# --- evaluation helpers ---------------------------------------------------------

def score_maps(net: Backbone, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """(N, U, V) pseudo-Huber maps in evaluation mode."""
    was_training = net.training
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(huber_score_map(net(images[i:i + batch_size])))
    net.train(was_training)
    return torch.cat(out)


def evaluate(net: Backbone, test: LoadedSet, sigma: float | None = None) -> dict:
    """Sample-wise ROC-AUC and, when masks exist, pooled pixel-wise ROC-AUC."""
    maps = score_maps(net, test.images)
    metrics: dict = {}
    labels = test.labels.numpy()
    try:
        metrics["sample_auc"] = roc_auc(sample_score(maps).double().numpy(), labels)
    except DegenerateLabelsError:
        metrics["sample_auc"] = None
    if test.has_masks and test.masks.any():
        rf = net.receptive_field
        heat = upsample_scores(maps.double(), rf, tuple(test.images.shape[-2:]), sigma)
        metrics["pixel_auc"] = pixel_roc_auc(heat.numpy(), test.masks.numpy())
    return metrics


def _versions() -> dict:
    return {"fcdd": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__}


def new_run_dir(root: str | Path, name: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = Path(root) / f"{stamp}-{name}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def snapshot_epochs(epochs: int, every: int) -> list[int]:
    return sorted(set(range(every, epochs + 1, every)) | {epochs})


def _attach_file_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "log.txt", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger("fcdd").addHandler(handler)
    logging.getLogger("fcdd").setLevel(logging.INFO)
    return handler


def train(spec: ExperimentSpec, run_dir: str | Path, data: tuple[LoadedSet, LoadedSet] | None = None) -> RunRecord:
    """Run one training repetition into ``run_dir`` and return its record.

    ``data`` may carry pre-loaded (train, test) sets to avoid re-reading images
    across repetitions.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    spec_dict = spec.to_dict()
    (run_dir / "spec.json").write_text(json.dumps(spec_dict, indent=1, sort_keys=True))
    spec.split.save(run_dir / "manifest.json")
    handler = _attach_file_log(run_dir)
    record = RunRecord(spec=spec_dict, run_dir=str(run_dir), versions=_versions())
    monitor = ResourceMonitor().start()
    t0 = time.monotonic()
    try:
        _train(spec, run_dir, record, data)
        record.status = "completed"
    except Exception as exc:
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        log.error("run failed: %s", record.error)
        raise TrainingError(record.error, record) from exc
    finally:
        record.duration_s = time.monotonic() - t0
        res = monitor.stop()
        res.write_csv(run_dir / "resources.csv")
        record.resources = res.summary() | {"csv": "resources.csv"}
        record.save()
        logging.getLogger("fcdd").removeHandler(handler)
        handler.close()
    return record


def _train(spec: ExperimentSpec, run_dir: Path, record: RunRecord, data) -> None:
    torch.use_deterministic_algorithms(True, warn_only=True)
    net = spec.build()
    rf = net.receptive_field
    sigma = default_sigma(rf) if spec.sigma is None else spec.sigma
    record.backbone = {
        "spec": net.spec.to_dict(),
        "output_shape": list(net.spec.output_shape()),
        "frozen_prefix_len": net.spec.frozen_prefix_len,
        "receptive_field": asdict(rf),
        "sigma": sigma,
        "pretrained": bool(spec.pretrained_weights) and not spec.no_pretrain,
    }
    log.info("backbone %s, latent grid %s, receptive field %s", spec.arch, net.spec.output_shape(), rf)
    train_set, test_set = data or load_split(spec.split, spec.input_shape, spec.mean, spec.std, spec.confetti)
    log.info("train items %d, test items %d", len(train_set.ids), len(test_set.ids))
    params = net.trainable_parameters()
    opt = torch.optim.SGD(params, lr=spec.learning_rate, momentum=spec.momentum, weight_decay=spec.weight_decay)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=spec.lr_gamma)
    gen = torch.Generator().manual_seed(spec.seed)
    snap_at = set(snapshot_epochs(spec.epochs, spec.snapshot_every))
    n = train_set.images.shape[0]
    for epoch in range(1, spec.epochs + 1):
        net.train()
        order = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for i in range(0, n, spec.batch_size):
            idx = order[i:i + spec.batch_size]
            maps = huber_score_map(net(train_set.images[idx]))
            if spec.objective == "SAMPLE":
                loss = fcdd_loss(maps, train_set.labels[idx])
            else:
                loss = pixel_fcdd_loss(maps, train_set.masks[idx], train_set.labels[idx],
                                       balanced=spec.balanced_pixel_loss, pool=spec.mask_pool)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {i // spec.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.numel()
            count += idx.numel()
        sched.step()
        record.loss_trace.append(total / count)
        log.info("epoch %d loss %.6f", epoch, record.loss_trace[-1])
        if epoch in snap_at:
            path = save_weights(net, run_dir / "snapshots" / f"epoch_{epoch}.npz")
            record.snapshots[epoch] = str(path.relative_to(run_dir))
            metrics = evaluate(net, test_set, sigma)
            record.history.append({"epoch": epoch, **metrics})
            log.info("epoch %d snapshot, test metrics %s", epoch, metrics)
    record.final_metrics = dict(record.history[-1])
    record.final_metrics.pop("epoch")
    export_heatmaps(net, test_set, run_dir / "heatmaps", spec.n_heatmaps, sigma)


def export_heatmaps(net: Backbone, test: LoadedSet, out: Path, n: int, sigma: float | None = None) -> list[Path]:
    """Export up to ``n`` test heatmaps (half normal, half anomalous) on shared bounds."""
    if n <= 0 or test.images.shape[0] == 0:
        return []
    labels = test.labels.numpy()
    pick = list(np.flatnonzero(labels == 0)[: n // 2]) + list(np.flatnonzero(labels == 1)[: n - n // 2])
    maps = score_maps(net, test.images[pick]).double().numpy()
    rf = net.receptive_field
    target = tuple(test.images.shape[-2:])
    hms = [upsample_heatmap(m, rf, target, sigma, source_id=test.ids[i]) for m, i in zip(maps, pick)]
    lo = min(h.values.min() for h in hms)
    hi = max(h.values.max() for h in hms)
    paths = []
    for k, (hm, i) in enumerate(zip(hms, pick)):
        norm, bounds = ("global", (lo, hi)) if hi > lo else ("per_image", None)
        paths.append(export_heatmap(hm, out / f"{k:03d}_label{labels[i]}", norm, bounds))
    return paths


def load_snapshot(spec: ExperimentSpec, path: str | Path) -> Backbone:
    net = spec.build()
    load_weights(net, path)
    return net


def repeat_protocol(spec: ExperimentSpec, n: int = 5, out_dir: str | Path | None = None,
                    data: tuple[LoadedSet, LoadedSet] | None = None) -> tuple[list[RunRecord], dict]:
    """Run ``n`` repetitions with seeds ``seed + 0 .. seed + n - 1`` into ``out_dir/rep_<i>``.

    Failed repetitions are recorded and skipped; the aggregate covers completed runs
    and keeps every per-run value.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir) if out_dir is not None else new_run_dir("runs", spec.name)
    out_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = load_split(spec.split, spec.input_shape, spec.mean, spec.std, spec.confetti)
    records: list[RunRecord] = []
    for i in range(n):
        rep_spec = spec.with_seed(spec.seed + i)
        try:
            records.append(train(rep_spec, out_dir / f"rep_{i}", data))
        except TrainingError as exc:
            records.append(exc.record)
    aggregate = aggregate_records(records)
    aggregate.update(name=spec.name, dataset=spec.split.dataset, normal_class=spec.split.normal_class,
                     mode=spec.split.mode.value, objective=spec.objective)
    (out_dir / "aggregate.json").write_text(json.dumps(aggregate, indent=1, sort_keys=True))
    return records, aggregate


def aggregate_records(records: list[RunRecord]) -> dict:
    done = [r for r in records if r.status == "completed"]
    keys = sorted({k for r in done for k, v in r.final_metrics.items() if v is not None})
    per_run = {k: [r.final_metrics.get(k) for r in done] for k in keys}
    mean = {k: float(np.mean([v for v in vals if v is not None])) for k, vals in per_run.items()}
    return {
        "n_requested": len(records),
        "n_completed": len(done),
        "failures": [{"run_dir": r.run_dir, "error": r.error} for r in records if r.status != "completed"],
        "per_run": per_run,
        "mean": mean,
        "run_dirs": [r.run_dir for r in records],
    }
