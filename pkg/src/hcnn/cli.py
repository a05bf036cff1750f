"""Command-line entry point: ``hcnn {train,eval,params,analyze,selftest}``.

Flags override fields of the JSON run config; the resolved document is
written next to every command's outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import NetworkConfig, RunConfig, Schedule, canonical_json
from .data import apply_standardization, load_dataset, load_raw
from .errors import CheckpointMismatchError, ConfigError, HCNNError
from .model import count_parameters, load_checkpoint

SELFTEST_FAILED = 5


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    over = {"seed": args.seed, "output_dir": args.output_dir, "threads": args.threads}
    run = run.with_overrides(**over)
    sched = {k: v for k, v in (("epochs", getattr(args, "epochs", None)),
                               ("max_steps", getattr(args, "max_steps", None))) if v is not None}
    if sched:
        run = run.with_overrides(schedule=Schedule(**{**run.to_dict()["schedule"], **sched}))
    return run


# --- commands --------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import train

    run = _run_config(args)
    os.makedirs(run.output_dir, exist_ok=True)
    _write_json(os.path.join(run.output_dir, "config.json"), run.to_dict())
    train_set, test_set = load_dataset(run.data, run.network.N, run.network.num_classes)

    def show(rec):
        print(json.dumps(rec, sort_keys=True), flush=True)

    result = train(train_set, test_set, run, run.output_dir, progress=None if args.quiet else show)
    last = result.records[-1] if result.records else {}
    print(f"trained {result.model.step} steps; test accuracy {last.get('test_acc')}")
    return 0


def _eval_split(model, run: RunConfig, split: str):
    train_raw, test_raw = load_raw(run.data, model.config.N, model.config.num_classes)
    ds = test_raw if split == "test" else train_raw
    if model.data_mean is not None:
        return apply_standardization(ds, model.data_mean, model.data_std)
    train_std, test_std = load_dataset(run.data, model.config.N, model.config.num_classes)
    return test_std if split == "test" else train_std


def _check_match(model, run: RunConfig, args):
    if args.config and canonical_json(run.network.to_dict()) != canonical_json(model.config.to_dict()):
        raise CheckpointMismatchError("checkpoint network does not match the network in the config file")


def cmd_eval(args) -> int:
    from .train import evaluate

    model = load_checkpoint(args.checkpoint)
    run = _run_config(args)
    _check_match(model, run, args)
    ds = _eval_split(model, run, args.split)
    acc, preds = evaluate(model, ds)
    summary = {"checkpoint": os.path.abspath(args.checkpoint), "split": args.split,
               "count": len(ds), "accuracy": acc, "step": model.step,
               "correct": int(np.sum(preds == ds.labels))}
    out = args.output_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    _write_json(os.path.join(out, "eval.json"), summary)
    _write_json(os.path.join(out, "eval_config.json"), run.to_dict())
    print(f"accuracy {acc:.4f} ({summary['correct']}/{len(ds)})")
    return 0


def cmd_params(args) -> int:
    if args.config:
        net = RunConfig.load(args.config).network
    else:
        net = NetworkConfig.preset(args.preset)
    if args.variant:
        net = net.replace(variant=args.variant)
    counts = count_parameters(net)
    if args.json:
        print(json.dumps(counts, sort_keys=True))
        return 0
    print(f"{'depth':>5} {'trainable':>10} {'materialized':>12}")
    for layer in counts["layers"]:
        print(f"{layer['depth']:>5} {layer['trainable']:>10} {layer['materialized']:>12}")
    print(f"variant {counts['variant']}: total {counts['total']} "
          f"(trainable {counts['trainable']}, materialized {counts['materialized']})")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import attribute_corpus, nearest_translated, save_corpus, write_heatmap

    model = load_checkpoint(args.checkpoint)
    run = _run_config(args)
    _check_match(model, run, args)
    depth = args.depth if args.depth is not None else model.config.J - 1
    if not 3 <= depth <= model.config.J - 1:
        raise ConfigError(f"--depth must be in [3, {model.config.J - 1}]")
    ds = _eval_split(model, run, args.split)
    out = args.output_dir or run.output_dir
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "analyze_config.json"),
                {**run.to_dict(), "analyze": {"depth": depth, "tau": args.tau, "width": args.width,
                                              "queries": args.queries, "split": args.split}})
    corpus = attribute_corpus(model, ds.images, depth, periodic=not args.zero_pad)
    save_corpus(os.path.join(out, f"corpus_j{depth}.bin"), corpus)
    queries = corpus[:args.queries]
    agree = 0
    with open(os.path.join(out, "matches.jsonl"), "w") as f:
        for q in queries:
            ranked = nearest_translated(q, args.tau, corpus, args.width, exclude_id=q.image_id)
            top = ranked[:args.top]
            same = int(ds.labels[top[0].image_id] == ds.labels[q.image_id])
            agree += same
            f.write(json.dumps({"query": q.image_id, "label": int(ds.labels[q.image_id]),
                                "tau": args.tau, "matches": [
                                    {"id": m.image_id, "distance": m.distance, "rank": m.rank,
                                     "label": int(ds.labels[m.image_id])} for m in top],
                                "top1_same_class": bool(same)}, sort_keys=True) + "\n")
    for q in queries[:args.heatmaps]:
        write_heatmap(os.path.join(out, f"heatmap_{q.image_id}.pgm"), q.values)
    rate = agree / max(len(queries), 1)
    _write_json(os.path.join(out, "analysis.json"),
                {"depth": depth, "tau": args.tau, "width": args.width, "queries": len(queries),
                 "top1_class_agreement": rate, "chance": 1.0 / model.config.num_classes})
    print(f"top-1 class agreement {rate:.3f} over {len(queries)} queries "
          f"(chance {1.0 / model.config.num_classes:.3f})")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else SELFTEST_FAILED


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--threads", type=int)

    t = sub.add_parser("train", help="train a network and write checkpoint + metrics")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("params", help="per-layer parameter counts")
    c.add_argument("--config")
    c.add_argument("--preset", default="cifar10", choices=["cifar10", "cifar100", "toy", "desk"])
    c.add_argument("--variant", choices=["standard", "plus"])
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_params)

    a = sub.add_parser("analyze", help="attribute-translation nearest neighbours")
    common(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--split", choices=["test", "train"], default="test")
    a.add_argument("--depth", type=int, help="layer j (default J-1)")
    a.add_argument("--tau", type=int, default=1)
    a.add_argument("--width", type=int, default=2, help="box smoothing width")
    a.add_argument("--queries", type=int, default=100)
    a.add_argument("--top", type=int, default=5)
    a.add_argument("--heatmaps", type=int, default=8)
    a.add_argument("--zero-pad", action="store_true",
                   help="keep the checkpoint's zero padding instead of circular convolutions")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("selftest", help="gradient, covariance, invariance and oracle checks")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HCNNError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
