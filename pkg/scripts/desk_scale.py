"""CIFAR-10 subset run: 5,000 train / 1,000 test images, K=8, 20 epochs, seed 0.

Trains, then reports test accuracy and top-1 attribute-translation class
agreement at depth J-1 for tau in {1, 2}. Needs the CIFAR-10 binary set.

    python3 scripts/desk_scale.py --cifar /data/cifar-10-batches-bin
"""
import argparse
import dataclasses
import json
import os
import time

from hcnn.analysis import attribute_corpus, class_agreement
from hcnn.config import RunConfig
from hcnn.data import load_dataset
from hcnn.train import train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cifar", default=os.environ.get("HCNN_CIFAR10"),
                   help="CIFAR-10 binary directory (default $HCNN_CIFAR10)")
    p.add_argument("--output-dir", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--queries", type=int, default=200)
    args = p.parse_args()
    if not args.cifar:
        p.error("pass --cifar or set HCNN_CIFAR10")

    run = RunConfig.desk_scale(args.cifar, args.seed, args.output_dir)
    run = run.with_overrides(schedule=dataclasses.replace(run.schedule, epochs=args.epochs),
                             threads=args.threads)
    train_set, test_set = load_dataset(run.data, run.network.N, run.network.num_classes)

    t0 = time.perf_counter()
    result = train(train_set, test_set, run, run.output_dir,
                   progress=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    minutes = (time.perf_counter() - t0) / 60

    j = run.network.J - 1
    corpus = attribute_corpus(result.model, test_set.images, j)
    agreement = {tau: class_agreement(corpus, test_set.labels, tau, queries=corpus[:args.queries])
                 for tau in (1, 2)}
    summary = {"test_acc": result.records[-1]["test_acc"], "minutes": minutes,
               "steps": result.model.step, "depth": j, "queries": args.queries,
               "class_agreement": agreement}
    with open(os.path.join(run.output_dir, "desk_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))


if __name__ == "__main__":
    main()
