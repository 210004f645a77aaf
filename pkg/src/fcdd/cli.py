"""Command-line entry point: ``fcdd <train|eval|history|diff|cdd|report> ...``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure (artifacts kept).
Every command writes its fully resolved configuration to ``<out>/config.json``
before doing any work. ``FCDD_DATA_ROOT`` provides the default ``--data-root``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import Arch
from .data import DATASETS, ONE_VS_REST_OE, ConfettiParams, Mode, load_split, make_mvtec_setup, make_one_vs_rest
from .eval import diff_table, performance_history, write_history_csv
from .stats import ScoreTable, ScoreTableError, boxplot_stats, cd_diagram

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SETUPS = ("one-vs-rest", "mvtec-unsup", "mvtec-semisup", "synthetic")

log = logging.getLogger("fcdd.cli")


class UsageError(Exception):
    pass


def _write_config(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    cfg["fcdd_version"] = __version__
    if extra:
        cfg.update(extra)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


# --- train -----------------------------------------------------------------------

def _experiment_spec(args) -> "ExperimentSpec":
    from .synthetic import make_synthetic_split
    from .train import ExperimentSpec

    root = Path(args.data_root)
    confetti = ConfettiParams(tuple(args.confetti_count), tuple(args.confetti_size), args.confetti_color, args.seed)
    if args.setup == "one-vs-rest":
        if args.dataset not in ONE_VS_REST_OE:
            raise UsageError(f"--dataset must be one of {sorted(ONE_VS_REST_OE)} for one-vs-rest")
        oe = args.oe or ONE_VS_REST_OE[args.dataset][-1]
        split = make_one_vs_rest(args.dataset, args.cls, oe, root, seed=args.seed)
        info = DATASETS[args.dataset]
        arch = args.arch or ("FMNIST_CNN" if args.dataset == "fmnist" else "CIFAR_CNN")
        shape = (info.channels, info.side, info.side)
        objective = args.objective or "SAMPLE"
    elif args.setup == "synthetic":
        split = make_synthetic_split(root)
        arch, shape, objective = args.arch or "FMNIST_CNN", (1, 28, 28), args.objective or "PIXEL"
    else:
        mode = Mode.PIXEL_UNSUP if args.setup == "mvtec-unsup" else Mode.PIXEL_SEMISUP
        confetti = confetti.scaled(args.image_side) if args.image_side != 224 else confetti
        split = make_mvtec_setup(args.cls, mode, root, seed=args.seed, confetti=confetti)
        arch, shape, objective = args.arch or "VGG11_FCDD", (3, args.image_side, args.image_side), args.objective or "PIXEL"
    name = args.name or f"{args.setup}-{split.normal_class}"
    return ExperimentSpec(split=split, arch=arch, input_shape=shape, objective=objective, epochs=args.epochs,
                          batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
                          lr_gamma=args.gamma, weight_decay=args.weight_decay, seed=args.seed,
                          snapshot_every=args.snapshot_every, name=name, sigma=args.sigma, confetti=confetti,
                          pretrained_weights=str(args.pretrained) if args.pretrained else None,
                          no_pretrain=args.no_pretrain, n_heatmaps=args.heatmaps,
                          balanced_pixel_loss=args.balanced)


def cmd_train(args) -> int:
    from .train import new_run_dir, repeat_protocol

    if args.data_root is None:
        raise UsageError("--data-root is required (or set FCDD_DATA_ROOT)")
    if not Path(args.data_root).is_dir():
        raise UsageError(f"data root {args.data_root} does not exist")
    if args.setup in ("one-vs-rest", "mvtec-unsup", "mvtec-semisup") and args.cls is None:
        raise UsageError(f"--class is required for setup {args.setup}")
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if args.arch is not None:
        Arch(args.arch)
    try:
        spec = _experiment_spec(args)
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    out = new_run_dir(args.out, spec.name)
    _write_config(out, args, {"resolved_spec": {k: v for k, v in spec.to_dict().items() if k != "split"},
                              "n_train": len(spec.split.train_items), "n_test": len(spec.split.test_items)})
    records, aggregate = repeat_protocol(spec, args.reps, out)
    primary = "sample_auc" if spec.split.mode is Mode.SAMPLE_WISE else "pixel_auc"
    aggregate.update(setup=args.setup, primary_metric=primary)
    (out / "aggregate.json").write_text(json.dumps(aggregate, indent=1, sort_keys=True))
    print(out)
    print(json.dumps(aggregate["mean"], sort_keys=True))
    return EXIT_OK if aggregate["n_completed"] == args.reps else EXIT_RUNTIME


# --- eval / history -----------------------------------------------------------------

def _load_run(run: Path):
    from .train import ExperimentSpec, RunRecord

    if not (run / "spec.json").is_file():
        raise UsageError(f"{run} is not a run directory (spec.json missing)")
    spec = ExperimentSpec.from_dict(json.loads((run / "spec.json").read_text()))
    record = RunRecord.load(run) if (run / "metrics.json").is_file() else None
    return spec, record


def _run_dirs(paths: list[Path]) -> list[Path]:
    """Expand repetition directories (``rep_*`` children) into run directories."""
    out = []
    for p in paths:
        reps = sorted(p.glob("rep_*"), key=lambda q: int(q.name.split("_")[1])) if p.is_dir() else []
        out.extend(reps or [p])
    return out


def cmd_eval(args) -> int:
    from .train import evaluate, export_heatmaps, load_snapshot

    out = Path(args.out)
    _write_config(out, args)
    spec, record = _load_run(Path(args.run))
    snapshot = Path(args.snapshot) if args.snapshot else None
    if snapshot is None:
        if record is None or not record.snapshots:
            raise UsageError(f"{args.run} has no snapshots")
        snapshot = Path(args.run) / record.snapshots[max(record.snapshots)]
    net = load_snapshot(spec, snapshot)
    _, test = load_split(spec.split, spec.input_shape, spec.mean, spec.std, spec.confetti)
    metrics = evaluate(net, test, spec.sigma)
    export_heatmaps(net, test, out / "heatmaps", args.heatmaps, spec.sigma)
    (out / "metrics.json").write_text(json.dumps({"snapshot": str(snapshot), **metrics}, indent=2, sort_keys=True) + "\n")
    _write_metric_csv(out / "metrics.csv", [{"snapshot": str(snapshot), **metrics}])
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_history(args) -> int:
    from .train import evaluate, load_snapshot

    out = Path(args.out)
    _write_config(out, args)
    curves = {}
    for run in _run_dirs([Path(r) for r in args.run]):
        spec, record = _load_run(run)
        if record is None:
            raise UsageError(f"{run} has no metrics.json")
        _, test = load_split(spec.split, spec.input_shape, spec.mean, spec.std, spec.confetti)
        metric = args.metric or ("pixel_auc" if test.has_masks else "sample_auc")

        def score(path: Path, spec=spec, test=test, metric=metric) -> float:
            return evaluate(load_snapshot(spec, path), test, spec.sigma)[metric]

        snaps = sorted((e, run / p) for e, p in record.snapshots.items())
        curve, gaps = performance_history(snaps, score)
        label = f"{run.parent.name}/{run.name}" if run.name.startswith("rep_") else run.name
        curves[label] = curve
        write_history_csv(curve, out / f"{label.replace('/', '__')}.csv")
        if gaps:
            (out / f"{label.replace('/', '__')}.gaps.json").write_text(json.dumps(gaps, indent=2) + "\n")
    _plot_history(curves, out / "history.png", args.metric or "ROC-AUC")
    return EXIT_OK


def _plot_history(curves: dict, path: Path, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, curve in curves.items():
        if curve:
            ax.plot([e for e, _ in curve], [v for _, v in curve], marker="o", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if curves:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --- diff / cdd / report ------------------------------------------------------------

def read_class_csv(path: str | Path) -> dict[str, float]:
    """``class,value`` CSV (values in percent) -> {class: fraction}."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
    if not rows or [c.strip().lower() for c in rows[0][:2]] != ["class", "value"]:
        raise UsageError(f"{path}: line 1 must be the header 'class,value'")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not any(c.strip() for c in row):
            continue
        if len(row) != 2:
            raise UsageError(f"{path}: line {lineno}: expected 2 cells, found {len(row)}")
        try:
            value = float(row[1])
        except ValueError:
            raise UsageError(f"{path}: line {lineno}: non-numeric value {row[1]!r}") from None
        if not 0 <= value <= 100:
            raise UsageError(f"{path}: line {lineno}: value {value} outside [0, 100]")
        out[row[0].strip()] = value / 100
    return out


def _write_metric_csv(path: Path, rows: list[dict]) -> None:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _pct(v) -> str:
    return "" if v is None else f"{v:.1f}"


def write_diff(out: Path, ours: dict[str, float], reference: dict[str, float], stem: str = "diff") -> dict:
    try:
        stats = diff_table(ours, reference)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write_metric_csv(out / f"{stem}.csv", [
        {"class": k, "ours": round(ours[k] * 100, 4), "reference": round(reference[k] * 100, 4),
         "abs_diff": round(v, 4)} for k, v in stats.per_class_abs_diff.items()])
    row = {k: (round(v, 4) if isinstance(v, float) else v) for k, v in stats.row().items()}
    _write_metric_csv(out / f"{stem}_summary.csv", [row])
    text = (f"{'N. classes':>10} | {'Diff. per class max':>19} | {'mean':>6} | {'Mean ROC-AUC diff.':>18}\n"
            f"{row['n_classes']:>10} | {stats.max_diff:>18.2f}% | {stats.mean_diff:>5.2f}% | {stats.mean_rocauc_diff:>17.2f}%\n")
    (out / f"{stem}.txt").write_text(text)
    return row


def cmd_diff(args) -> int:
    out = Path(args.out)
    _write_config(out, args)
    row = write_diff(out, read_class_csv(args.ours), read_class_csv(args.reference))
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_cdd(args) -> int:
    try:
        table = ScoreTable.from_csv(Path(args.scores))
    except (ScoreTableError, OSError) as exc:
        raise UsageError(f"{args.scores}: {exc}") from exc
    out = Path(args.out)
    _write_config(out, args)
    result = cd_diagram(table, args.alpha, plot=out / "cd_diagram.svg")
    for name, rank in sorted(result.ranks.avg_rank.items(), key=lambda kv: (kv[1], kv[0])):
        print(f"{rank:6.3f}  {name}")
    return EXIT_OK


def _collect(run_dir: Path) -> tuple[dict | None, str | None]:
    """Summary of a repetition directory or a single run directory, or a gap reason."""
    agg = run_dir / "aggregate.json"
    if agg.is_file():
        a = json.loads(agg.read_text())
        metric = a.get("primary_metric") or ("sample_auc" if a.get("mode") == Mode.SAMPLE_WISE.value else "pixel_auc")
        values = [v for v in a.get("per_run", {}).get(metric, []) if v is not None]
        if not values:
            return None, f"no {metric} values in {agg}"
        return {"class": a["normal_class"], "mode": a["mode"], "metric": metric, "values": values}, None
    rec = run_dir / "metrics.json"
    if rec.is_file():
        r = json.loads(rec.read_text())
        mode = r["spec"]["split"]["mode"]
        metric = "sample_auc" if mode == Mode.SAMPLE_WISE.value else "pixel_auc"
        value = r.get("final_metrics", {}).get(metric)
        if value is None:
            return None, f"no {metric} in {rec}"
        return {"class": r["spec"]["split"]["normal_class"], "mode": mode, "metric": metric, "values": [value]}, None
    return None, f"{run_dir} has neither aggregate.json nor metrics.json"


def cmd_report(args) -> int:
    out = Path(args.out)
    _write_config(out, args)
    entries, gaps = [], []
    for d in args.runs:
        entry, gap = _collect(Path(d))
        if entry is None:
            gaps.append({"run": str(d), "reason": gap})
        else:
            entries.append(entry)
    rows = []
    for e in sorted(entries, key=lambda e: (e["mode"], e["class"])):
        b = boxplot_stats(e["values"])
        rows.append({"class": e["class"], "mode": e["mode"], "metric": e["metric"], "n": len(e["values"]),
                     "mean": float(np.mean(e["values"])), "median": b.median, "q1": b.q1, "q3": b.q3,
                     "min": min(e["values"]), "max": max(e["values"]),
                     "values": " ".join(repr(v) for v in e["values"])})
    _write_metric_csv(out / "report.csv", rows or [{"class": None}])
    lines = [f"{'class':<14} {'mode':<14} {'n':>2} {'mean %':>7}"]
    lines += [f"{r['class']:<14} {r['mode']:<14} {r['n']:>2} {_pct(r['mean'] * 100):>7}" for r in rows]
    lines += [f"GAP {g['run']}: {g['reason']}" for g in gaps]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    (out / "gaps.json").write_text(json.dumps(gaps, indent=2) + "\n")
    if args.reference:
        reference = read_class_csv(args.reference)
        for mode in sorted({r["mode"] for r in rows}):
            ours = {r["class"]: r["mean"] for r in rows if r["mode"] == mode}
            missing = sorted(set(ours) - set(reference))
            if missing:
                raise UsageError(f"reference CSV lacks classes {missing}")
            write_diff(out, ours, {k: reference[k] for k in ours}, stem=f"diff_{mode.lower()}")
    _boxplots(entries, out / "boxplots")
    print("\n".join(lines))
    if gaps and args.strict:
        return EXIT_INVALID
    return EXIT_OK


def _boxplots(entries: list[dict], out: Path) -> None:
    """One figure per class with the modes side by side on a shared axis, raw runs scattered."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    by_class: dict[str, list[dict]] = {}
    for e in entries:
        by_class.setdefault(e["class"], []).append(e)
    for cls, group in sorted(by_class.items()):
        group = sorted(group, key=lambda e: e["mode"])
        fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(group), 3))
        data = [np.array(e["values"]) * 100 for e in group]
        ax.boxplot(data, showfliers=False)
        for i, vals in enumerate(data, start=1):
            ax.scatter(np.full(len(vals), i) + np.linspace(-0.08, 0.08, len(vals)), vals, s=12, zorder=3)
        ax.set_xticks(range(1, len(group) + 1), [e["mode"] for e in group], fontsize=7)
        ax.set_ylabel("ROC-AUC (%)")
        ax.set_title(cls)
        fig.tight_layout()
        fig.savefig(out / f"{cls}.png")
        plt.close(fig)
        stats = {e["mode"]: boxplot_stats(e["values"]).__dict__ for e in group}
        (out / f"{cls}.json").write_text(json.dumps(stats, indent=2, sort_keys=True, default=list) + "\n")


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcdd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment with the repetition protocol")
    t.add_argument("--setup", choices=SETUPS, required=True)
    t.add_argument("--data-root", type=Path, default=os.environ.get("FCDD_DATA_ROOT"),
                   help="dataset root (default: $FCDD_DATA_ROOT)")
    t.add_argument("--dataset", default="fmnist", help="one-vs-rest dataset: fmnist or cifar10 (default fmnist)")
    t.add_argument("--oe", default=None, help="outlier-exposure dataset (default: cifar100)")
    t.add_argument("--class", dest="cls", default=None, help="normal class (name or index)")
    t.add_argument("--reps", type=int, default=5, help="repetitions with seeds seed..seed+reps-1 (default 5)")
    t.add_argument("--arch", choices=[a.value for a in Arch if a is not Arch.CUSTOM], default=None)
    t.add_argument("--objective", choices=["SAMPLE", "PIXEL"], default=None)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--gamma", type=float, default=0.98, help="exponential learning-rate decay per epoch")
    t.add_argument("--weight-decay", type=float, default=1e-6)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--snapshot-every", type=int, default=5)
    t.add_argument("--sigma", type=float, default=None, help="heatmap Gaussian sigma (default rf size / 4)")
    t.add_argument("--image-side", type=int, default=224, help="MVTec resize side (default 224)")
    t.add_argument("--pretrained", type=Path, default=None, help="VGG11 weights (torchvision .pth or .npz)")
    t.add_argument("--no-pretrain", action="store_true", help="allow VGG11_FCDD with random frozen weights")
    t.add_argument("--balanced", action="store_true", help="balance normal/anomalous cells in the pixel loss")
    t.add_argument("--confetti-count", type=int, nargs=2, default=(1, 8), metavar=("MIN", "MAX"))
    t.add_argument("--confetti-size", type=int, nargs=2, default=(2, 16), metavar=("MIN", "MAX"))
    t.add_argument("--confetti-color", choices=["uniform_random", "channel_random"], default="uniform_random")
    t.add_argument("--heatmaps", type=int, default=8, help="test heatmaps exported per run")
    t.add_argument("--name", default=None)
    t.add_argument("--out", type=Path, default=Path("runs"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a run's snapshot on its test split")
    e.add_argument("--run", type=Path, required=True)
    e.add_argument("--snapshot", type=Path, default=None, help="default: the run's final snapshot")
    e.add_argument("--heatmaps", type=int, default=8)
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("history", help="test performance of every snapshot (epoch,value CSV + plot)")
    h.add_argument("--run", type=Path, nargs="+", required=True, help="run or repetition directories")
    h.add_argument("--metric", choices=["pixel_auc", "sample_auc"], default=None)
    h.add_argument("--out", type=Path, required=True)
    h.set_defaults(func=cmd_history)

    d = sub.add_parser("diff", help="absolute per-class differences between two class,value CSVs")
    d.add_argument("--ours", type=Path, required=True)
    d.add_argument("--reference", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    d.set_defaults(func=cmd_diff)

    c = sub.add_parser("cdd", help="critical-difference diagram from a method x dataset score CSV")
    c.add_argument("--scores", type=Path, required=True)
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--out", type=Path, required=True)
    c.set_defaults(func=cmd_cdd)

    r = sub.add_parser("report", help="per-class means, diffs against a reference and box plots")
    r.add_argument("runs", type=Path, nargs="+", help="repetition or run directories")
    r.add_argument("--reference", type=Path, default=None, help="class,value CSV in percent")
    r.add_argument("--strict", action="store_true", help="exit 1 when any run lacks metrics")
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fcdd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure: keep whatever was written
        log.exception("fcdd %s failed", args.command)
        print(f"fcdd {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
