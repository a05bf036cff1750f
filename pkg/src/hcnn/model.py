"""The hierarchical network: layer plan, parameters, forward pass, per-layer
adjoints, parameter accounting and checkpoints.

Layouts (batch first, channel/new attribute last)::

    x_0      (B, N, N, 3)                     image, colour last
    x_1      (B, N, N, K)                     (u, v1)
    x_2      (B, n, n, K, K)                  (u, v1, v2)
    x_j      (B, n, n, K/4, K/2, K)  j >= 3   (u, v_{j-2}, v_{j-1}, v_j)
    x_{J-1}  (B, n, n, K/4, K/2, C)           last attribute is the class
    x_J      (B, C)                           average over all other axes
"""
from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig, canonical_json
from .errors import ConfigError, DataError, MissingFileError, ShapeError
from .nn import (BN_MOMENTUM, BatchNormState, SeparableFilterBank, elu, elu_grad,
                 separable_attribute_conv, separable_attribute_conv_backward, softmax)
from .tensor import (flip, mc_conv, mc_conv_backward, patches, patches_adjoint, read_tensor,
                     write_tensor)


@dataclass(frozen=True)
class LayerSpec:
    depth: int
    kind: str  # "first" | "dense" | "separable"
    in_shape: tuple
    out_shape: tuple
    spatial_stride: int
    attr_strides: tuple = ()
    marginalize: bool = False


def layer_plan(config: NetworkConfig) -> list[LayerSpec]:
    """Per-image shapes of every layer ``1 .. J-1``."""
    K, N = config.K, config.N
    plan = []
    n = N
    shape = (N, N, config.in_channels)
    for j in range(1, config.J):
        s = config.spatial_stride(j)
        n_out = -(-n // s)
        kout = config.out_channels(j)
        if j == 1:
            out = (n_out, n_out, kout)
            spec = LayerSpec(j, "first", shape, out, s)
        elif j == 2:
            out = (n_out, n_out, K, kout)
            spec = LayerSpec(j, "dense", shape, out, s)
        else:
            out = (n_out, n_out, K // 4, K // 2, kout)
            if j == 3:
                spec = LayerSpec(j, "separable", shape, out, s, (4, 2), False)
            else:
                spec = LayerSpec(j, "separable", shape, out, s, (2, 2), True)
        plan.append(spec)
        shape, n = out, n_out
    return plan


def shape_schedule(config: NetworkConfig) -> list[tuple]:
    """Per-image shapes of ``x_0 .. x_J``."""
    plan = layer_plan(config)
    return [plan[0].in_shape] + [p.out_shape for p in plan] + [(config.num_classes,)]


# --- parameters ------------------------------------------------------------

def param_shapes(config: NetworkConfig) -> dict[str, tuple]:
    """Trainable arrays in their canonical (checkpoint / optimizer) order."""
    s1, s2 = config.spatial_support
    sa, sb = config.attribute_support
    K, Q = config.K, config.Q
    shapes = {
        "w1": (s1, s2, config.in_channels, K),
        "b1": (K,),
        "w2": (s1, s2, sb, 1, K),
        "b2": (K,),
    }
    for j in range(3, config.J):
        kout = config.out_channels(j)
        shapes[f"h{j}"] = (s1, s2, Q)
        shapes[f"g{j}"] = (sa, sb, Q, kout)
        shapes[f"gamma{j}"] = (Q,)
        shapes[f"beta{j}"] = (Q,)
        shapes[f"b{j}"] = (kout,)
    return shapes


def buffer_shapes(config: NetworkConfig) -> dict[str, tuple]:
    shapes = {}
    for j in range(3, config.J):
        shapes[f"mean{j}"] = (config.Q,)
        shapes[f"var{j}"] = (config.Q,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith("w1"):
        return math.prod(shape[:3])
    if name.startswith("w2"):
        return math.prod(shape[:4])
    if name.startswith("h"):
        return math.prod(shape[:2])
    if name.startswith("g"):
        return math.prod(shape[:3])
    raise KeyError(name)


def init_params(config: NetworkConfig, rng: np.random.Generator, dtype=np.float32):
    """Fan-in scaled uniform filters, zero biases, unit/zero normalization."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith(("w", "h", "g")) and not name.startswith("gamma"):
            a = math.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-a, a, size=shape).astype(dtype)
        elif name.startswith("gamma"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return params


def init_buffers(config: NetworkConfig, dtype=np.float32):
    return {name: (np.zeros if name.startswith("mean") else np.ones)(shape, dtype)
            for name, shape in buffer_shapes(config).items()}


def count_parameters(config: NetworkConfig) -> dict:
    """Exact scalar counts per layer.

    ``trainable`` counts the arrays actually optimized (factorized ``h``/``g``
    plus normalization affines). ``materialized`` counts the equivalent dense
    filters ``w_{v_j}`` with normalization folded in; it is the honest size of
    the standard network, while the ``plus`` variant cannot be folded.
    ``total`` is the figure for the configured variant.
    """
    s1, s2 = config.spatial_support
    sa, sb = config.attribute_support
    K, Q = config.K, config.Q
    layers = []
    n1 = s1 * s2 * config.in_channels * K + K
    layers.append({"depth": 1, "trainable": n1, "materialized": n1})
    n2 = s1 * s2 * sb * K + K
    layers.append({"depth": 2, "trainable": n2, "materialized": n2})
    for j in range(3, config.J):
        kout = config.out_channels(j)
        trainable = s1 * s2 * Q + sa * sb * Q * kout + 2 * Q + kout
        materialized = s1 * s2 * sa * sb * kout + kout
        layers.append({"depth": j, "trainable": trainable, "materialized": materialized})
    layers.append({"depth": config.J, "trainable": 0, "materialized": 0})
    trainable = sum(l["trainable"] for l in layers)
    materialized = sum(l["materialized"] for l in layers)
    return {
        "variant": config.variant,
        "layers": layers,
        "trainable": trainable,
        "materialized": materialized,
        "total": materialized if config.variant == "standard" else trainable,
    }


# --- forward / backward ------------------------------------------------------

@dataclass
class Activations:
    """Layer outputs ``xs[start..J]`` and per-layer caches for backprop."""

    xs: list
    caches: dict
    training: bool
    start: int = 0
    params_id: int = 0

    @property
    def logits(self) -> np.ndarray:
        return self.xs[-1]


def bn_state(params, buffers, j, momentum=BN_MOMENTUM) -> BatchNormState:
    return BatchNormState(params[f"gamma{j}"], params[f"beta{j}"],
                          buffers[f"mean{j}"], buffers[f"var{j}"], momentum=momentum)


def bank(params, j) -> SeparableFilterBank:
    return SeparableFilterBank(params[f"h{j}"], params[f"g{j}"])


def _dense_operands(x, w2, mode, s):
    """Layer 2 as spatial patches plus a 1-D channel-mixing convolution along
    ``v1``: equal to ``mc_conv(x[..., None], w2, (1, 2, 3))`` but without the
    large im2col over all three axes."""
    s1, s2, sb, _, k = w2.shape
    wc = flip(w2[:, :, :, 0, :], 2).reshape(s1 * s2, sb, k).transpose(1, 0, 2)
    cols = None if x is None else patches(x[..., None], (1, 2), (s1, s2), mode, (s, s))
    return cols, np.ascontiguousarray(wc)


def layer_forward(spec: LayerSpec, x, params, buffers, config: NetworkConfig, training: bool,
                  bn_momentum=BN_MOMENTUM):
    j, mode = spec.depth, config.boundary
    s = spec.spatial_stride
    if spec.kind == "first":
        out = elu(mc_conv(x, params["w1"], (1, 2), mode, (s, s)), params["b1"])
        return out, out
    if spec.kind == "dense":
        cols, wc = _dense_operands(x, params["w2"], mode, s)
        out = elu(mc_conv(cols, wc, (3,), mode), params["b2"])
        return out, (cols, out)
    return separable_attribute_conv(
        x, bank(params, j), params[f"b{j}"], bn_state(params, buffers, j, bn_momentum),
        spatial_stride=s, attr_strides=spec.attr_strides, mode=mode,
        variant=config.variant, marginalize=spec.marginalize, training=training)


def layer_backward(spec: LayerSpec, dout, x, cache, params, config: NetworkConfig, need_dx=True):
    """Return ``(dx, grads)`` for one layer given the gradient of its output."""
    j, mode = spec.depth, config.boundary
    s = spec.spatial_stride
    if spec.kind == "first":
        dz = dout * elu_grad(cache)
        dx, dw = mc_conv_backward(dz, x, params["w1"], (1, 2), mode, (s, s), need_dx)
        return dx, {"w1": dw, "b1": dz.sum(axis=(0, 1, 2))}
    if spec.kind == "dense":
        cols, out = cache
        dz = dout * elu_grad(out)
        w2 = params["w2"]
        _, wc = _dense_operands(None, w2, mode, s)
        dcols, dwc = mc_conv_backward(dz, cols, wc, (3,), mode)
        s1, s2, sb = w2.shape[:3]
        dw = flip(dwc.transpose(1, 0, 2).reshape(s1, s2, sb, w2.shape[-1]), 2)[:, :, :, None, :]
        dx = None
        if need_dx:
            dx = patches_adjoint(dcols, x.shape + (1,), (1, 2), (s1, s2), mode, (s, s))[..., 0]
        return dx, {"w2": np.ascontiguousarray(dw), "b2": dz.sum(axis=(0, 1, 2, 3))}
    dx, g = separable_attribute_conv_backward(dout, bank(params, j), cache)
    return dx, {f"h{j}": g["h"], f"g{j}": g["g"], f"b{j}": g["bias"],
                f"gamma{j}": g["gamma"], f"beta{j}": g["beta"]}


def forward(x, params, config: NetworkConfig, buffers=None, training=False, start=0,
            bn_momentum=BN_MOMENTUM) -> Activations:
    """Run layers ``start+1 .. J`` on ``x`` (which plays the role of ``x_start``).

    In training mode batch statistics are used and ``buffers`` are updated
    with ``bn_momentum``.
    """
    plan = layer_plan(config)
    if buffers is None:
        if training:
            raise ConfigError("training-mode forward needs explicit buffers to update")
        buffers = init_buffers(config, x.dtype)
    if not 0 <= start <= config.J - 1:
        raise ShapeError(f"start depth {start} outside [0, {config.J - 1}]")
    expected = plan[start].in_shape if start < config.J - 1 else plan[-1].out_shape
    if tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"x_{start} should have per-image shape {expected}, got {x.shape[1:]}")
    xs = [None] * (config.J + 1)
    xs[start] = x
    caches = {}
    for spec in plan[start:]:
        xs[spec.depth], caches[spec.depth] = layer_forward(
            spec, xs[spec.depth - 1], params, buffers, config, training, bn_momentum)
    xs[config.J] = xs[config.J - 1].mean(axis=(1, 2, 3, 4))
    return Activations(xs, caches, training, start, id(params))


def calibrate_buffers(x, params, config: NetworkConfig) -> dict:
    """Running statistics equal to the batch statistics of ``x``, so that an
    evaluation-mode pass on ``x`` reproduces the training-mode one."""
    buffers = init_buffers(config, x.dtype)
    forward(x, params, config, buffers, training=True, bn_momentum=0.0)
    return buffers


def predict(x, params, config: NetworkConfig, buffers=None):
    """Class indices (lowest index wins ties) and softmax probabilities."""
    logits = forward(x, params, config, buffers).logits
    probs = softmax(logits, axis=1)
    return np.argmax(probs, axis=1), probs


# --- invariance bookkeeping --------------------------------------------------

def residual_strides(config: NetworkConfig, j: int) -> list:
    """Shift multiples along each per-image axis of ``x_j`` that leave ``x_J``
    exactly unchanged under periodic boundaries.

    An axis crossing a stride-``s`` convolution only maps shifts that are
    multiples of ``s``; summed axes accept any shift. ``None`` marks the colour
    axis of the input image, which is mixed by distinct filters rather than
    convolved.
    """
    plan = layer_plan(config)
    if not 0 <= j <= config.J - 2:
        raise ShapeError(f"depth {j} outside [0, {config.J - 2}]")
    ndim = len(shape_schedule(config)[j])
    req: list = [None] * ndim
    live = [(a, 1) for a in range(ndim)]  # (axis of x_j, accumulated stride)
    for spec in plan[j:]:
        s = spec.spatial_stride
        u = [(a, f * s) for a, f in live[:2]]
        rest = live[2:]
        if spec.kind == "first":
            new = []  # colour axis is summed with independent filters
        elif spec.kind == "dense":
            new = rest
        elif spec.marginalize:
            a0, f0 = rest[0]
            if a0 is not None:
                req[a0] = f0
            new = [(a, f * st) for (a, f), st in zip(rest[1:], spec.attr_strides)]
        else:
            new = [(a, f * st) for (a, f), st in zip(rest, spec.attr_strides)]
        live = u + new + [(None, 1)]
    for a, f in live[:-1]:  # the final average over everything but the class
        if a is not None:
            req[a] = f
    return req


# --- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"HCNN"
CKPT_VERSION = 1


@dataclass
class Model:
    config: NetworkConfig
    params: dict
    buffers: dict
    step: int = 0
    data_mean: list | None = None
    data_std: list | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: NetworkConfig, rng, dtype=np.float32) -> "Model":
        return cls(config, init_params(config, rng, dtype), init_buffers(config, dtype))


def checkpoint_bytes(model: Model) -> bytes:
    """HCNN checkpoint: magic, u32 version, u64-length-prefixed canonical JSON
    header, parameter tensors in canonical order, buffer tensors, u64 step."""
    names = list(param_shapes(model.config))
    bnames = list(buffer_shapes(model.config))
    header = {
        "network": model.config.to_dict(),
        "params": names,
        "buffers": bnames,
        "data_mean": model.data_mean,
        "data_std": model.data_std,
        "extra": model.extra,
    }
    blob = canonical_json(header).encode()
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
    out.write(blob)
    for n in names:
        write_tensor(out, model.params[n])
    for n in bnames:
        write_tensor(out, model.buffers[n])
    out.write(struct.pack("<Q", model.step))
    return out.getvalue()


def save_checkpoint(path, model: Model) -> None:
    data = checkpoint_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as f:
            return read_checkpoint(f)
    except FileNotFoundError:
        raise MissingFileError(f"checkpoint not found: {path}") from None


def read_checkpoint(f) -> Model:
    try:
        if f.read(4) != CKPT_MAGIC:
            raise ConfigError("not an HCNN checkpoint")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != CKPT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(n))
        config = NetworkConfig.from_dict(header["network"])
        if header["params"] != list(param_shapes(config)):
            raise ConfigError("checkpoint parameter list does not match its network config")
        params = {name: read_tensor(f) for name in header["params"]}
        buffers = {name: read_tensor(f) for name in header["buffers"]}
        (step,) = struct.unpack("<Q", f.read(8))
    except (struct.error, DataError, ValueError, KeyError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"corrupt checkpoint: {e}") from None
    for name, shape in param_shapes(config).items():
        if params[name].shape != shape:
            raise ConfigError(f"checkpoint array {name} has shape {params[name].shape}, expected {shape}")
    return Model(config, params, buffers, step, header.get("data_mean"),
                 header.get("data_std"), header.get("extra") or {})
