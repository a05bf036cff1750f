"""Memorize 50 training images within 500 steps.

Uses CIFAR-10 when ``--cifar`` (or $HCNN_CIFAR10) is given, otherwise
synthetic gratings on the toy network.
"""
import argparse
import os

from hcnn.config import DataConfig, NetworkConfig, RunConfig
from hcnn.data import load_dataset
from hcnn.train import train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cifar", default=os.environ.get("HCNN_CIFAR10"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir")
    args = p.parse_args()

    if args.cifar:
        run = RunConfig.overfit_smoke(DataConfig(kind="cifar10", path=args.cifar), seed=args.seed)
    else:
        run = RunConfig.overfit_smoke(DataConfig(kind="synthetic", synthetic_kind="gratings"),
                                      network=NetworkConfig.toy(boundary="zero"), seed=args.seed)
    train_set, _ = load_dataset(run.data, run.network.N, run.network.num_classes)
    result = train(train_set, None, run, args.output_dir,
                   progress=lambda r: r["train_acc"] == 1.0)
    acc = result.records[-1]["train_acc"]
    source = "CIFAR-10" if args.cifar else "synthetic gratings"
    print(f"{source}: {len(train_set)} images, train accuracy {acc:.3f} "
          f"after {result.model.step} steps")
    raise SystemExit(0 if acc == 1.0 else 1)


if __name__ == "__main__":
    main()
