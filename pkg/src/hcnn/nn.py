"""Differentiable primitives: ELU, batch normalization, softmax/cross-entropy
and the factorized (spatial x attribute) convolution block.

Every forward function returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import ZERO, as_mode, flip, mc_conv, mc_conv_backward, patches, patches_adjoint

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# --- ELU -----------------------------------------------------------------

def elu(z: np.ndarray, bias=None) -> np.ndarray:
    """ELU of ``z + bias``; ``bias`` broadcasts along the trailing channel axis."""
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (z.shape[-1],):
            raise ShapeError(f"bias of shape {bias.shape} for {z.shape[-1]} channels")
        c = z + bias
    else:
        c = z
    return np.where(c >= 0, c, np.expm1(np.minimum(c, 0)))


def elu_grad(out: np.ndarray) -> np.ndarray:
    # out >= 0 exactly when the pre-activation is >= 0; otherwise e^c = out + 1
    return np.where(out >= 0, 1.0, out + 1.0).astype(out.dtype, copy=False)


# --- batch normalization --------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel normalization: affine parameters plus running estimates.

    Channels live on the trailing axis; statistics pool every other axis.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


def batch_norm(z, gamma, beta, running_mean, running_var, training: bool,
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Normalize over all axes but the last.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place with ``momentum``.
    """
    C = z.shape[-1]
    z2 = z.reshape(-1, C)
    if training:
        if z2.shape[0] < 2:
            raise ShapeError("batch_norm needs at least two values per channel in training mode")
        mean = z2.mean(axis=0)
        xhat = z2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / z2.shape[0]
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
        xhat = z2 - mean
    inv_std = (1.0 / np.sqrt(var + eps)).astype(z.dtype)
    xhat *= inv_std
    out = xhat * gamma
    out += beta
    return out.reshape(z.shape), (xhat.reshape(z.shape), inv_std, gamma, training)


def batch_norm_backward(dout, cache):
    """Return ``(dz, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training = cache
    C = dout.shape[-1]
    d2 = dout.reshape(-1, C)
    x2 = xhat.reshape(-1, C)
    dbeta = d2.sum(axis=0)
    dgamma = np.einsum("ij,ij->j", d2, x2)
    if not training:
        return dout * (gamma * inv_std), dgamma, dbeta
    m = d2.shape[0]
    dz = x2 * (-dgamma / m)
    dz += d2
    dz -= dbeta / m
    dz *= gamma * inv_std
    return dz.reshape(dout.shape), dgamma, dbeta


# --- softmax / loss -------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(picked)))


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Stable loss and its gradient w.r.t. ``logits`` for a minibatch."""
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# --- factorized attribute convolution ------------------------------------

@dataclass
class SeparableFilterBank:
    """``Q`` spatial filters ``h[..., q]`` and ``Q x K`` attribute filters.

    ``h`` has shape ``(su1, su2, Q)``; ``g`` has shape ``(sa, sb, Q, K)``.
    """

    h: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        if self.h.ndim != 3 or self.g.ndim != 4:
            raise ShapeError("h must be (su1, su2, Q) and g must be (sa, sb, Q, K)")
        if self.h.shape[-1] != self.g.shape[2]:
            raise ShapeError(f"rank mismatch: h has Q={self.h.shape[-1]}, g has Q={self.g.shape[2]}")

    @property
    def Q(self) -> int:
        return self.h.shape[-1]

    @property
    def K(self) -> int:
        return self.g.shape[-1]


@dataclass
class SeparableCache:
    x_shape: tuple
    marginalize: bool
    s: np.ndarray
    bn: tuple
    out: np.ndarray
    plus: bool
    mode: object
    spatial_stride: int
    attr_strides: tuple
    inner: np.ndarray
    activate: bool


def separable_attribute_conv(x_prev, bank: SeparableFilterBank, bias, bn: BatchNormState, *,
                             spatial_stride: int = 1, attr_strides=(2, 2), mode=ZERO,
                             variant: str = "standard", marginalize: bool = True,
                             training: bool = False, activate: bool = True, fused: bool = True):
    """One factorized hierarchical layer.

    ``x_prev`` is ``(batch, u1, u2, a0, a1, a2)`` when ``marginalize`` is set
    (``a0`` is summed out first) or ``(batch, u1, u2, a1, a2)`` otherwise.
    Each spatial filter is applied to every attribute coordinate, the Q maps
    are batch-normalized, optionally passed through ELU (``variant="plus"``),
    then mixed by a strided convolution along the two attribute axes. The
    result is ``(batch, u1', u2', a1', a2', K)``.

    For the standard variant ``fused=True`` evaluates the same function
    without forming the Q normalized maps: batch statistics come from the
    mean and second-moment matrix of the spatial patches, and the
    normalization is folded into one dense filter per output attribute.
    ``fused=False`` runs the factorized pipeline literally.
    """
    mode = as_mode(mode)
    if variant not in ("standard", "plus"):
        raise ValueError(f"unknown variant {variant!r}")
    expected = 6 if marginalize else 5
    if x_prev.ndim != expected:
        raise ShapeError(f"expected a rank-{expected} input, got shape {x_prev.shape}")
    s = x_prev.sum(axis=3) if marginalize else x_prev
    if fused and variant == "standard":
        out, cache = _fused_forward(s, bank, bias, bn, spatial_stride, tuple(attr_strides),
                                    mode, training, activate)
        cache.x_shape, cache.marginalize = x_prev.shape, marginalize
        return out, cache
    y = mc_conv(s[..., None], bank.h[:, :, None, :], axes=(1, 2), mode=mode,
                strides=(spatial_stride, spatial_stride))
    yn, bn_cache = batch_norm(y, bn.gamma, bn.beta, bn.running_mean, bn.running_var,
                              training, bn.eps, bn.momentum)
    plus = variant == "plus"
    inner = elu(yn) if plus else yn
    a = mc_conv(inner, bank.g, axes=(3, 4), mode=mode, strides=attr_strides)
    if activate:
        out = elu(a, bias)
    else:
        out = a + bias
    cache = SeparableCache(x_prev.shape, marginalize, s, bn_cache, out, plus, mode,
                           spatial_stride, tuple(attr_strides), inner, activate)
    return out, cache


def separable_attribute_conv_backward(dout, bank: SeparableFilterBank, cache: SeparableCache):
    """Return ``(dx_prev, grads)`` with grads keyed ``h, g, bias, gamma, beta``."""
    c = cache
    if isinstance(c, FusedCache):
        ds, grads = _fused_backward(dout, bank, c)
        if c.marginalize:
            return np.broadcast_to(np.expand_dims(ds, 3), c.x_shape).copy(), grads
        return ds, grads
    da = dout * elu_grad(c.out) if c.activate else dout
    dbias = da.sum(axis=tuple(range(da.ndim - 1)))
    dinner, dg = mc_conv_backward(da, c.inner, bank.g, axes=(3, 4), mode=c.mode,
                                  strides=c.attr_strides)
    dyn = dinner * elu_grad(c.inner) if c.plus else dinner
    dy, dgamma, dbeta = batch_norm_backward(dyn, c.bn)
    ds, dh = mc_conv_backward(dy, c.s[..., None], bank.h[:, :, None, :], axes=(1, 2),
                              mode=c.mode, strides=(c.spatial_stride,) * 2)
    ds = ds[..., 0]
    dh = dh[:, :, 0, :]
    if c.marginalize:
        dx = np.broadcast_to(np.expand_dims(ds, 3), c.x_shape).copy()
    else:
        dx = ds
    return dx, {"h": dh, "g": dg, "bias": dbias, "gamma": dgamma, "beta": dbeta}


@dataclass
class FusedCache:
    s_shape: tuple
    cols: np.ndarray
    hf: np.ndarray
    Wc: np.ndarray
    field: np.ndarray
    a: np.ndarray
    mean: np.ndarray
    inv_std: np.ndarray
    mu: np.ndarray | None
    M: np.ndarray | None
    gamma: np.ndarray
    out: np.ndarray
    mode: object
    spatial_stride: int
    attr_strides: tuple
    training: bool
    activate: bool
    x_shape: tuple = ()
    marginalize: bool = False


def _fused_forward(s, bank, bias, bn, ss, attr_strides, mode, training, activate):
    su = bank.h.shape[:2]
    cols = patches(s[..., None], (1, 2), su, mode, (ss, ss))
    hf = flip(bank.h, 2).reshape(-1, bank.Q)
    mu = M = None
    if training:
        c2 = cols.reshape(-1, cols.shape[-1])
        if c2.shape[0] < 2:
            raise ShapeError("batch_norm needs at least two values per channel in training mode")
        mu = c2.mean(axis=0)
        M = (c2.T @ c2) / c2.shape[0]
        mean = hf.T @ mu
        var = np.maximum(np.einsum("tq,tu,uq->q", hf, M, hf) - mean ** 2, 0)
        bn.running_mean *= bn.momentum
        bn.running_mean += (1 - bn.momentum) * mean
        bn.running_var *= bn.momentum
        bn.running_var += (1 - bn.momentum) * var
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    a = bn.gamma * inv_std
    bq = bn.beta - a * mean
    Wc = np.einsum("tq,q,abqk->abtk", hf, a, bank.g)
    z = mc_conv(cols, Wc, (3, 4), mode, attr_strides)
    field = np.ascontiguousarray(np.broadcast_to(bq, (1,) + s.shape[3:5] + (bank.Q,)))
    z += mc_conv(field, bank.g, (1, 2), mode, attr_strides)
    out = elu(z, bias) if activate else z + bias
    cache = FusedCache(s.shape, cols, hf, Wc, field, a, mean, inv_std, mu, M, bn.gamma, out,
                       mode, ss, attr_strides, training, activate)
    return out, cache


def _fused_backward(dout, bank, c: FusedCache):
    dz = dout * elu_grad(c.out) if c.activate else dout
    K = dz.shape[-1]
    dbias = dz.reshape(-1, K).sum(axis=0)
    dmap = dz.reshape((-1,) + dz.shape[-3:]).sum(axis=0, keepdims=True)
    dcols, dWc = mc_conv_backward(dz, c.cols, c.Wc, (3, 4), c.mode, c.attr_strides)
    dfield, dg = mc_conv_backward(dmap, c.field, bank.g, (1, 2), c.mode, c.attr_strides)
    dbq = dfield.sum(axis=(0, 1, 2))
    hf, a, g = c.hf, c.a, bank.g
    dg += np.einsum("tq,q,abtk->abqk", hf, a, dWc)
    dhf = np.einsum("q,abqk,abtk->tq", a, g, dWc)
    da = np.einsum("tq,abqk,abtk->q", hf, g, dWc) - c.mean * dbq
    dmean = -a * dbq
    dgamma = da * c.inv_std
    if c.training:
        dvar = -0.5 * da * c.gamma * c.inv_std ** 3
        dmean = dmean - 2 * c.mean * dvar
        dhf += np.outer(c.mu, dmean) + 2 * (c.M @ hf) * dvar
        c2 = dcols.reshape(-1, dcols.shape[-1])
        R = c2.shape[0]
        c2 += (hf @ dmean) / R
        c2 += c.cols.reshape(-1, c2.shape[-1]) @ ((2.0 / R) * ((hf * dvar) @ hf.T))
    su = bank.h.shape[:2]
    ds = patches_adjoint(dcols, c.s_shape + (1,), (1, 2), su, c.mode, (c.spatial_stride,) * 2)
    dh = flip(dhf.reshape(su + (bank.Q,)), 2)
    grads = {"h": np.ascontiguousarray(dh), "g": dg, "bias": dbias, "gamma": dgamma, "beta": dbq}
    return ds[..., 0], grads


def materialize_filter(bank: SeparableFilterBank, scale=None) -> np.ndarray:
    """Dense filters ``w[u1, u2, a, b, k] = sum_q scale_q h_q(u) g_{k,q}(a, b)``."""
    scale = np.ones(bank.Q) if scale is None else np.asarray(scale)
    return np.einsum("xyq,q,abqk->xyabk", bank.h, scale, bank.g)


def fit_separable(w_dense: np.ndarray, Q: int, rng: np.random.Generator):
    """Least-squares separable fit of dense filters ``(su1, su2, sa, sb, K)``.

    The spatial factors are drawn at random and the attribute factors solved
    for; with ``Q >= su1 * su2`` the fit is exact for any target.
    """
    su1, su2, sa, sb, K = w_dense.shape
    H = rng.standard_normal((su1 * su2, Q))
    target = w_dense.reshape(su1 * su2, sa * sb * K)
    G, *_ = np.linalg.lstsq(H, target, rcond=None)
    bank = SeparableFilterBank(H.reshape(su1, su2, Q),
                               G.reshape(Q, sa, sb, K).transpose(1, 2, 0, 3).copy())
    residual = float(np.linalg.norm(H @ G - target) / max(np.linalg.norm(target), 1e-300))
    return bank, residual
