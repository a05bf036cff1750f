"""Reverse-mode gradients through the whole network, SGD with momentum,
augmentation and the epoch loop."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .config import AugmentationPolicy, RunConfig
from .data import LabeledImageSet
from .errors import HCNNError, NumericError, ShapeError
from .model import (Activations, Model, forward, layer_backward, layer_plan, param_shapes,
                    predict, save_checkpoint)
from .nn import softmax_cross_entropy

CHECKPOINT_NAME = "checkpoint.hcnn"
METRICS_NAME = "metrics.jsonl"


class StaleActivationsError(HCNNError):
    """Backward was asked to differentiate activations computed with other parameters."""


def backward(acts: Activations, params, config, labels, scale: float = 1.0):
    """Return ``(loss, grads)`` for the minibatch-mean cross-entropy.

    ``grads`` holds ``scale * dLoss/dtheta`` for every array in canonical
    order; layers at or below ``acts.start`` get no entry.
    """
    if acts.params_id != id(params):
        raise StaleActivationsError("activations were computed with a different parameter set")
    config_J = config.J
    if acts.xs[config_J] is None or len(acts.caches) != config_J - 1 - acts.start:
        raise ShapeError("activations are incomplete")
    loss, dlogits = softmax_cross_entropy(acts.logits, labels)
    dlogits *= scale
    x_last = acts.xs[config_J - 1]
    count = np.prod(x_last.shape[1:-1])
    d = np.empty_like(x_last)
    d[...] = (dlogits / count)[:, None, None, None, None, :]
    grads = {}
    for spec in reversed(layer_plan(config)[acts.start:]):
        j = spec.depth
        d, g = layer_backward(spec, d, acts.xs[j - 1], acts.caches[j], params, config,
                              need_dx=j > acts.start + 1)
        grads.update(g)
    order = [n for n in param_shapes(config) if n in grads]
    return loss, {n: grads[n] for n in order}


# --- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: dict
    lr: float
    momentum: float = 0.9
    weight_decay: float = 2e-4
    epoch: int = 0

    @classmethod
    def zeros(cls, params, lr, momentum=0.9, weight_decay=2e-4) -> "OptimizerState":
        return cls({n: np.zeros_like(p) for n, p in params.items()}, lr, momentum, weight_decay)


def sgd_step(params, grads, state: OptimizerState):
    """Heavy-ball step with L2 decay on every trainable array:
    ``v <- m v - lr (g + wd theta)``, ``theta <- theta + v``.

    Returns fresh dictionaries; the inputs are left untouched.
    """
    if state.lr <= 0:
        raise HCNNError(f"learning rate must be positive, got {state.lr}")
    new_params, new_vel = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        step = g + state.weight_decay * theta if state.weight_decay else g
        v = state.momentum * state.velocity[name] - state.lr * step
        new_vel[name] = v.astype(theta.dtype, copy=False)
        new_params[name] = (theta + v).astype(theta.dtype, copy=False)
    return new_params, OptimizerState(new_vel, state.lr, state.momentum, state.weight_decay,
                                      state.epoch)


# --- augmentation ----------------------------------------------------------

def augment(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator):
    """Random integer translations in ``[-max_shift, max_shift]`` per spatial
    axis (zero fill) and horizontal flips."""
    if not policy.enabled:
        return images
    b, n, m = images.shape[:3]
    s = policy.max_shift
    shifts = rng.integers(-s, s + 1, size=(b, 2))
    flips = rng.random(b) < policy.flip_prob
    padded = np.zeros((b, n + 2 * s, m + 2 * s) + images.shape[3:], images.dtype)
    padded[:, s:s + n, s:s + m] = images
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(shifts):
        # out[y, x] = image[y - dy, x - dx]
        out[i] = padded[i, s - dy:s - dy + n, s - dx:s - dx + m]
    out[flips] = out[flips, :, ::-1]
    return out


# --- evaluation ------------------------------------------------------------

def evaluate(model: Model, ds: LabeledImageSet, batch_size: int = 100):
    """Evaluation-mode accuracy and predicted labels."""
    preds = []
    for i in range(0, len(ds), batch_size):
        x = ds.images[i:i + batch_size].astype(model.params["w1"].dtype, copy=False)
        preds.append(predict(x, model.params, model.config, model.buffers)[0])
    preds = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    acc = float(np.mean(preds == ds.labels)) if len(ds) else 0.0
    return acc, preds


# --- training loop ---------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    records: list
    step_losses: list = field(default_factory=list)


def train(train_set: LabeledImageSet, test_set: LabeledImageSet | None, run: RunConfig,
          output_dir: str | None = None, progress=None) -> TrainResult:
    """Minibatch SGD over ``run.schedule``; every random draw derives from
    ``run.seed``.

    With ``output_dir`` set, metrics are appended to ``metrics.jsonl`` and a
    checkpoint is written every ``run.checkpoint_every`` epochs and at the end.
    ``progress`` receives each epoch record; returning True stops training.
    """
    with threadpool_limits(limits=run.threads):
        return _train(train_set, test_set, run, output_dir, progress)


def _train(train_set, test_set, run, output_dir, progress):
    config, sched = run.network, run.schedule
    dtype = np.dtype(run.dtype)
    init_ss, shuffle_ss, aug_ss = np.random.SeedSequence(run.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    model = Model.create(config, np.random.default_rng(init_ss), dtype)
    if train_set.mean is not None:
        model.data_mean = [float(v) for v in train_set.mean]
        model.data_std = [float(v) for v in train_set.std]
    params = model.params
    opt = OptimizerState.zeros(params, sched.rate(0), sched.momentum, sched.weight_decay)
    metrics_path = ckpt_path = None
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        metrics_path = os.path.join(output_dir, METRICS_NAME)
        ckpt_path = os.path.join(output_dir, CHECKPOINT_NAME)
        open(metrics_path, "w").close()
    records, step_losses = [], []
    images = train_set.images.astype(dtype, copy=False)
    n = len(train_set)
    step = 0
    done = False
    for epoch in range(sched.epochs):
        t0 = time.perf_counter()
        opt.lr = sched.rate(epoch)
        opt.epoch = epoch
        perm = shuffle_rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for i in range(0, n, sched.batch_size):
            idx = perm[i:i + sched.batch_size]
            x = augment(images[idx], run.augmentation, aug_rng)
            y = train_set.labels[idx]
            acts = forward(x, params, config, model.buffers, training=True)
            loss, grads = backward(acts, params, config, y)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step} (epoch {epoch})")
            params, opt = sgd_step(params, grads, opt)
            step += 1
            step_losses.append(loss)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(acts.logits, axis=1) == y))
            seen += len(idx)
            if sched.max_steps is not None and step >= sched.max_steps:
                done = True
                break
        model.params, model.step = params, step
        test_acc = evaluate(model, test_set)[0] if test_set is not None and len(test_set) else None
        rec = {
            "epoch": epoch,
            "step": step,
            "lr": opt.lr,
            "train_loss": loss_sum / max(seen, 1),
            "train_acc": correct / max(seen, 1),
            "test_acc": test_acc,
        }
        if run.log_wall_time:
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        records.append(rec)
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            if (epoch + 1) % run.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model)
        if progress is not None and progress(rec):
            done = True
        if done:
            break
    model.params, model.step = params, step
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model)
    return TrainResult(model, records, step_losses)
