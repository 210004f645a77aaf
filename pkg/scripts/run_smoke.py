"""Desk-scale end-to-end check: synthetic corpus, FMNIST_CNN, pixel objective, 20 epochs."""

import argparse
import json
import tempfile
import time
from pathlib import Path

import torch

from fcdd.synthetic import make_synthetic_split, write_corpus
from fcdd.train import ExperimentSpec, new_run_dir, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data-root", default=None, help="existing corpus root (default: write a fresh one)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    args = p.parse_args()

    torch.set_num_threads(1)
    root = Path(args.data_root) if args.data_root else Path(tempfile.mkdtemp(prefix="fcdd-synth-"))
    if not (root / "synthetic").is_dir():
        write_corpus(root, seed=args.seed)
    spec = ExperimentSpec(split=make_synthetic_split(root), objective="PIXEL", epochs=args.epochs,
                          batch_size=32, seed=args.seed, name="smoke")
    t0 = time.perf_counter()
    rec = train(spec, new_run_dir(args.out, spec.name))
    print(rec.run_dir)
    print(json.dumps(rec.final_metrics | {"seconds": round(time.perf_counter() - t0, 1)}, sort_keys=True))
    ok = rec.final_metrics["sample_auc"] >= 0.95 and rec.final_metrics["pixel_auc"] >= 0.90
    raise SystemExit(0 if ok else 1)


if __name__ == "__main__":
    main()
