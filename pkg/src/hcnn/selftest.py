"""Fast built-in checks behind ``hcnn selftest``: kernel oracle, separable
equivalence, finite-difference gradients and the invariance probe."""
from __future__ import annotations

import numpy as np

from .config import NetworkConfig
from .model import forward, init_buffers, init_params, layer_plan
from .nn import (BatchNormState, SeparableFilterBank, materialize_filter, separable_attribute_conv,
                 softmax_cross_entropy)
from .tensor import conv_nd, conv_nd_reference, mc_conv


def check_conv_oracle(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        ndim = int(rng.integers(1, 4))
        shape = tuple(int(n) for n in rng.integers(1, 6, ndim))
        naxes = int(rng.integers(1, ndim + 1))
        axes = sorted(rng.choice(ndim, naxes, replace=False).tolist())
        mode = "periodic" if rng.random() < 0.5 else "zero"
        w = rng.standard_normal(tuple(int(rng.integers(1, shape[a] + 1)) for a in axes))
        strides = [int(s) for s in rng.integers(1, 3, naxes)]
        z = rng.standard_normal(shape)
        got = conv_nd(z, w, axes, mode, strides)
        ref = conv_nd_reference(z, w, axes, mode, strides)
        worst = max(worst, float(np.abs(got - ref).max(initial=0.0)))
    return worst <= 1e-10, f"max abs error {worst:.2e} over {trials} instances"


def check_separable(rng):
    cfg = NetworkConfig.toy()
    Q, K = 3, cfg.K
    bank = SeparableFilterBank(rng.standard_normal((3, 3, Q)),
                               rng.standard_normal((*cfg.attribute_support, Q, K)))
    bn = BatchNormState.fresh(Q)
    x = rng.standard_normal((2, 6, 6, K // 4, K // 2, K))
    kw = dict(spatial_stride=1, attr_strides=(2, 2), mode="periodic", marginalize=True,
              training=False, activate=False)
    got, _ = separable_attribute_conv(x, bank, np.zeros(K), bn, variant="standard", **kw)
    scale = 1.0 / np.sqrt(1.0 + bn.eps)
    w = materialize_filter(bank, np.full(Q, scale))
    dense = mc_conv(x.sum(axis=3)[..., None], w[..., None, :], (1, 2, 3, 4), "periodic", (1, 1, 2, 2))
    err = float(np.abs(got - dense).max() / np.abs(dense).max())
    return err <= 1e-5, f"relative error {err:.2e}"


def check_gradients(rng, per_group=2, eps=1e-5):
    from .train import backward

    cfg = NetworkConfig.toy()
    params = init_params(cfg, rng, np.float64)
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.1, params[k].shape)
    x = rng.standard_normal((2, cfg.N, cfg.N, 3))
    y = np.array([0, 1])

    def loss(p):
        acts = forward(x, p, cfg, init_buffers(cfg, np.float64), training=True)
        return softmax_cross_entropy(acts.logits, y)[0]

    acts = forward(x, params, cfg, init_buffers(cfg, np.float64), training=True)
    _, grads = backward(acts, params, cfg, y)
    worst = 0.0
    for name, g in grads.items():
        flat = params[name].reshape(-1)
        for i in rng.choice(flat.size, min(per_group, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            lp = loss(params)
            flat[i] = old - eps
            lm = loss(params)
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = g.reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst < 1e-3, f"max relative error {worst:.2e} over {len(grads)} groups"


def check_invariance(rng):
    from .analysis import covariance_probe

    worst = 0.0
    for variant in ("standard", "plus"):
        cfg = NetworkConfig.toy(variant=variant)
        params = init_params(cfg, rng, np.float64)
        report = covariance_probe(params, cfg, rng.standard_normal((2, cfg.N, cfg.N, 3)))
        if not report.passed:
            return False, f"{variant}: deviation {report.max_deviation:.2e}"
        worst = max(worst, report.max_deviation)
    return True, f"max relative deviation {worst:.2e}"


def check_shapes(rng):
    cfg = NetworkConfig.cifar10()
    got = [spec.out_shape for spec in layer_plan(cfg)]
    ok = got[0] == (32, 32, 16) and got[1] == (32, 32, 16, 16) and got[2] == (32, 32, 4, 8, 16)
    return ok, f"x_1..x_3 shapes {got[:3]}"


CHECKS = {
    "conv_oracle": check_conv_oracle,
    "shape_schedule": check_shapes,
    "separable_equivalence": check_separable,
    "gradients": check_gradients,
    "invariance": check_invariance,
}


def run_selftest(seed: int = 0):
    """List of ``(name, passed, detail)``."""
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as e:  # a crash is a failed check, not a crashed CLI
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, bool(ok), detail))
    return out
