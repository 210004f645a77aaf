"""CD-diagram and average ranks of the bundled MVTec-AD pixel-wise ROC-AUC table."""

import argparse
import sys

from fcdd.cli import main as cli_main
from fcdd.stats import LITERATURE_CSV


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="cdd_literature")
    p.add_argument("--alpha", type=float, default=0.05)
    args = p.parse_args()
    sys.exit(cli_main(["cdd", "--scores", str(LITERATURE_CSV), "--alpha", str(args.alpha), "--out", args.out]))


if __name__ == "__main__":
    main()
