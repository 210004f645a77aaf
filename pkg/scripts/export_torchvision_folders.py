"""Dump torchvision datasets into the <root>/<name>/{train,test}/<class>/ image-folder layout.

Needs the optional ``torchvision`` package and network access for the first download.
"""

import argparse
from pathlib import Path

SOURCES = {
    "fmnist": ("FashionMNIST", {}),
    "cifar10": ("CIFAR10", {}),
    "cifar100": ("CIFAR100", {}),
    "emnist": ("EMNIST", {"split": "letters"}),
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("root")
    p.add_argument("names", nargs="+", choices=sorted(SOURCES))
    p.add_argument("--cache", default=None, help="torchvision download dir (default <root>/_download)")
    args = p.parse_args()

    import torchvision

    root = Path(args.root)
    cache = Path(args.cache) if args.cache else root / "_download"
    for name in args.names:
        cls_name, kwargs = SOURCES[name]
        for split in ("train", "test"):
            ds = getattr(torchvision.datasets, cls_name)(str(cache), train=split == "train", download=True, **kwargs)
            for i, (img, label) in enumerate(ds):
                target = root / name / split / f"{label:03d}"
                target.mkdir(parents=True, exist_ok=True)
                img.save(target / f"{i:06d}.png")
            print(name, split, len(ds))


if __name__ == "__main__":
    main()
