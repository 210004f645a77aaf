"""Write the synthetic bright-square corpus used by the smoke test."""

import argparse

from fcdd.synthetic import write_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("root", help="output root; images go to <root>/synthetic/")
    p.add_argument("--train", type=int, nargs=2, default=(200, 200), metavar=("NORMAL", "ANOMALOUS"))
    p.add_argument("--test", type=int, nargs=2, default=(100, 100), metavar=("NORMAL", "ANOMALOUS"))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    print(write_corpus(args.root, tuple(args.train), tuple(args.test), seed=args.seed))


if __name__ == "__main__":
    main()
