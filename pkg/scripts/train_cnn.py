#!/usr/bin/env python3
"""Train a small CNN on the IDX digit fixture and print the curvature-momentum
summary the second-order branch logged along the way."""

import argparse
import os

from sgdph import train as tr
from sgdph.config import RunConfig
from sgdph.data import write_digits_fixture


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="cnn-bn", choices=["cnn-bn", "cnn-wn"])
    ap.add_argument("--optimizer", default="sgdph", choices=["sgdph", "sgdm"])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-dir", default="idx_fixture")
    args = ap.parse_args()

    if not os.path.exists(os.path.join(args.data_dir, "train-images.idx")):
        write_digits_fixture(args.data_dir, n_train=1000, n_test=1000, seed=0)
    tag = f"{args.model}_{args.optimizer}"
    recipe = dict(tau=0.01, eta=0.005) if args.optimizer == "sgdph" \
        else dict(tau=0.1, eta=0.0005)
    cfg = RunConfig(model=args.model, optimizer=args.optimizer,
                    epochs=args.epochs, batch_size=100, seed=args.seed,
                    dataset_kind="idx", dataset_subset_n=1000,
                    dataset_train_images=os.path.join(args.data_dir, "train-images.idx"),
                    dataset_train_labels=os.path.join(args.data_dir, "train-labels.idx"),
                    dataset_test_images=os.path.join(args.data_dir, "test-images.idx"),
                    dataset_test_labels=os.path.join(args.data_dir, "test-labels.idx"),
                    out_metrics=f"{tag}.jsonl", out_checkpoint=f"{tag}.ckpt",
                    **recipe)
    result = tr.train(cfg)

    print(f"{tag}: final test accuracy {result.final_test_accuracy:.4f}")
    last_train = [r for r in result.records if r["split"] == "train"][-1]
    for stats in last_train.get("hessian", []):
        print(f"  m_h {stats['name']}: min {stats['min']:.3e} "
              f"mean {stats['mean']:.3e} max {stats['max']:.3e}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")


if __name__ == "__main__":
    main()
