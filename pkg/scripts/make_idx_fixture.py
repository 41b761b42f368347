#!/usr/bin/env python3
"""Write the synthetic-digit IDX fixture used by the CNN experiments."""

import argparse

from sgdph.data import write_digits_fixture


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", help="directory for the four IDX files")
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    paths = write_digits_fixture(args.out_dir, args.n_train, args.n_test, args.seed)
    for key, path in paths.items():
        print(f"{key}: {path}")


if __name__ == "__main__":
    main()
