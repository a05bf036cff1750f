"""Dense row-major tensors and multidimensional convolution.

Tensors are plain C-contiguous numpy arrays (float32 for training, float64
for gradient checks). This module fixes the index conventions every layer
relies on:

* A filter of length ``L`` along an axis has its origin at tap
  ``c = (L - 1) // 2``, so ``out[n] = sum_k z[n*s - (k - c)] * w[k]``.
  Odd filters are centred; ``[1, 1]`` gives ``out[n] = z[n] + z[n-1]``.
* Output length along a convolved axis is ``ceil(n / s)`` in both boundary
  modes and strided outputs keep input indices ``0, s, 2s, ...``.
"""
from __future__ import annotations

import enum
import functools
import io
import itertools
import math
import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import DataError, NumericError, ShapeError


class BoundaryMode(str, enum.Enum):
    ZERO = "zero"
    PERIODIC = "periodic"


ZERO = BoundaryMode.ZERO
PERIODIC = BoundaryMode.PERIODIC

# Above this many im2col elements the tap-loop kernel is used instead.
IM2COL_LIMIT = 1 << 25
# Largest dense operator (entries) built for convolutions over small trailing axes.
OPERATOR_LIMIT = 1 << 23


def as_mode(mode) -> BoundaryMode:
    try:
        return BoundaryMode(mode)
    except ValueError:
        raise ShapeError(f"unknown boundary mode {mode!r}") from None


def anchor(length: int) -> int:
    return (length - 1) // 2


def out_length(n: int, stride: int) -> int:
    return -(-n // stride)


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def _norm_axes(ndim: int, axes: Sequence[int]) -> list[int]:
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {list(axes)}")
    return out


def _norm_strides(strides, naxes: int) -> list[int]:
    if strides is None:
        return [1] * naxes
    strides = [int(s) for s in strides]
    if len(strides) != naxes:
        raise ShapeError(f"need {naxes} strides, got {len(strides)}")
    if any(s <= 0 for s in strides):
        raise ShapeError(f"strides must be positive, got {strides}")
    return strides


def _pad_widths(ndim, axes, support):
    widths = [(0, 0)] * ndim
    for a, L in zip(axes, support):
        c = anchor(L)
        widths[a] = (L - 1 - c, c)
    return widths


def _check_periodic(shape, axes, support, mode):
    for a, L in zip(axes, support):
        if mode is PERIODIC and L > shape[a]:
            raise ShapeError(f"periodic filter length {L} exceeds axis {a} of length {shape[a]}")


def _pad(x, axes, support, mode):
    _check_periodic(x.shape, axes, support, mode)
    widths = _pad_widths(x.ndim, axes, support)
    if mode is PERIODIC:
        return np.pad(x, widths, mode="wrap")
    return np.pad(x, widths)


def _fold(dxp, axes, support, shape, mode):
    """Adjoint of ``_pad``: crop, folding wrapped margins back under PERIODIC."""
    for a, L in zip(axes, support):
        lo = L - 1 - anchor(L)
        hi = anchor(L)
        n = shape[a]
        core = np.take(dxp, np.arange(lo, lo + n), axis=a)
        if mode is PERIODIC:
            core = np.moveaxis(core, a, 0)
            left = np.moveaxis(np.take(dxp, np.arange(0, lo), axis=a), a, 0)
            right = np.moveaxis(np.take(dxp, np.arange(lo + n, lo + n + hi), axis=a), a, 0)
            core[n - lo:] += left
            core[:hi] += right
            core = np.moveaxis(core, 0, a)
        dxp = core
    return dxp


def _tap_index(ndim, axes, tap, strides, out_lens):
    idx = [slice(None)] * ndim
    for a, m, s, o in zip(axes, tap, strides, out_lens):
        idx[a] = slice(m, m + s * (o - 1) + 1, s)
    return tuple(idx)


class _Geometry:
    """Shared bookkeeping for a channel-mixing convolution call."""

    def __init__(self, x_shape, w_shape, axes, mode, strides):
        ndim = len(x_shape)
        self.axes = _norm_axes(ndim, axes)
        if ndim - 1 in self.axes:
            raise ShapeError("the last axis holds input channels and cannot be convolved")
        self.support = tuple(w_shape[: len(self.axes)])
        if len(w_shape) != len(self.axes) + 2:
            raise ShapeError(
                f"filter rank {len(w_shape)} != {len(self.axes)} convolved axes + (cin, cout)"
            )
        self.cin, self.cout = w_shape[-2:]
        if x_shape[-1] != self.cin:
            raise ShapeError(f"input has {x_shape[-1]} channels, filter expects {self.cin}")
        self.mode = as_mode(mode)
        self.strides = _norm_strides(strides, len(self.axes))
        self.out_lens = [out_length(x_shape[a], s) for a, s in zip(self.axes, self.strides)]
        out_shape = list(x_shape)
        for a, o in zip(self.axes, self.out_lens):
            out_shape[a] = o
        out_shape[-1] = self.cout
        self.out_shape = tuple(out_shape)
        self.taps = list(np.ndindex(*self.support))
        self.rows = math.prod(out_shape[:-1])
        self.ndim = ndim
        self.in_lens = tuple(x_shape[a] for a in self.axes)
        p_in, p_out = math.prod(self.in_lens), math.prod(self.out_lens)
        trailing = self.axes == list(range(ndim - 1 - len(self.axes), ndim - 1))
        op_size = p_in * self.cin * p_out * self.cout
        self.use_operator = (trailing and op_size <= OPERATOR_LIMIT
                             and p_in <= 8 * len(self.taps))
        if self.use_operator:
            self.rows = math.prod(x_shape[: ndim - 1 - len(self.axes)])
        self.use_im2col = (not self.use_operator
                           and self.rows * len(self.taps) * self.cin <= IM2COL_LIMIT)

    def operator(self, w):
        """Dense matrix of the convolution over the trailing conv axes."""
        src, dst, tap = _operator_indices(self.in_lens, self.support, self.mode,
                                          tuple(self.strides))
        p_in, p_out = math.prod(self.in_lens), math.prod(self.out_lens)
        T = np.zeros((p_in, self.cin, p_out, self.cout), dtype=w.dtype)
        T[src, :, dst, :] = w.reshape(-1, self.cin, self.cout)[tap]
        return T.reshape(p_in * self.cin, p_out * self.cout)

    def operator_grad(self, dT):
        src, dst, tap = _operator_indices(self.in_lens, self.support, self.mode,
                                          tuple(self.strides))
        p_in, p_out = math.prod(self.in_lens), math.prod(self.out_lens)
        dT = dT.reshape(p_in, self.cin, p_out, self.cout)
        dw = np.zeros((len(self.taps), self.cin, self.cout), dtype=dT.dtype)
        np.add.at(dw, tap, dT[src, :, dst, :])
        return dw.reshape(self.support + (self.cin, self.cout))

    def index(self, tap):
        return _tap_index(self.ndim, self.axes, tap, self.strides, self.out_lens)

    def flipped(self, w):
        sl = tuple(slice(None, None, -1) for _ in self.axes)
        return w[sl]

    def im2col(self, xp):
        cols = np.empty(self.out_shape[:-1] + (len(self.taps), self.cin), dtype=xp.dtype)
        for t, tap in enumerate(self.taps):
            cols[..., t, :] = xp[self.index(tap)]
        return cols.reshape(self.rows, len(self.taps) * self.cin)


@functools.lru_cache(maxsize=256)
def _operator_indices(in_lens, support, mode, strides):
    """All (input cell, output cell, tap) triples of a convolution, flattened
    row-major; taps index the unflipped filter."""
    out_lens = [out_length(n, s) for n, s in zip(in_lens, strides)]
    grids = np.meshgrid(*[np.arange(o) for o in out_lens],
                        *[np.arange(L) for L in support], indexing="ij")
    d = len(in_lens)
    outs, ks = grids[:d], grids[d:]
    valid = np.ones(outs[0].shape, dtype=bool)
    src = []
    for o, k, s, L, n in zip(outs, ks, strides, support, in_lens):
        i = o * s - (k - anchor(L))
        if mode is PERIODIC:
            i = i % n
        else:
            valid &= (i >= 0) & (i < n)
        src.append(i)
    src = np.ravel_multi_index([np.where(valid, i, 0) for i in src], in_lens)[valid]
    dst = np.ravel_multi_index(outs, out_lens)[valid]
    tap = np.ravel_multi_index(ks, support)[valid]
    return src, dst, tap


def mc_conv(x: np.ndarray, w: np.ndarray, axes: Sequence[int], mode=ZERO, strides=None) -> np.ndarray:
    """Convolve along ``axes`` while mixing the trailing channel axis.

    ``x`` has shape ``(..., cin)`` and ``w`` has shape ``(*support, cin, cout)``;
    the result has shape ``(..., cout)`` with each convolved axis reduced to
    ``ceil(n / stride)``. Non-convolved leading axes pass through.
    """
    g = _Geometry(x.shape, w.shape, axes, mode, strides)
    if g.use_operator:
        _check_periodic(x.shape, g.axes, g.support, g.mode)
        out = x.reshape(g.rows, -1) @ g.operator(w)
        return out.reshape(g.out_shape)
    xp = _pad(x, g.axes, g.support, g.mode)
    wf = g.flipped(w)
    if g.use_im2col:
        out = g.im2col(xp) @ wf.reshape(-1, g.cout)
        return out.reshape(g.out_shape)
    out = np.zeros(g.out_shape, dtype=np.result_type(x, w))
    for tap in g.taps:
        out += np.tensordot(xp[g.index(tap)], wf[tap], axes=1)
    return out


def mc_conv_backward(dout, x, w, axes, mode=ZERO, strides=None, need_dx=True):
    """Return ``(dx, dw)`` for ``mc_conv``; ``dx`` is None when not requested."""
    g = _Geometry(x.shape, w.shape, axes, mode, strides)
    if g.use_operator:
        d2 = dout.reshape(g.rows, -1)
        dw = g.operator_grad(x.reshape(g.rows, -1).T @ d2)
        dx = (d2 @ g.operator(w).T).reshape(x.shape) if need_dx else None
        return dx, dw
    xp = _pad(x, g.axes, g.support, g.mode)
    wf = g.flipped(w)
    dxp = np.zeros_like(xp) if need_dx else None
    lead = tuple(range(x.ndim - 1))
    if g.use_im2col:
        d2 = dout.reshape(g.rows, g.cout)
        dwf = (g.im2col(xp).T @ d2).reshape(wf.shape)
        if need_dx:
            dcols = (d2 @ wf.reshape(-1, g.cout).T).reshape(
                g.out_shape[:-1] + (len(g.taps), g.cin)
            )
            for t, tap in enumerate(g.taps):
                dxp[g.index(tap)] += dcols[..., t, :]
    else:
        dwf = np.empty_like(wf)
        for tap in g.taps:
            sl = xp[g.index(tap)]
            dwf[tap] = np.tensordot(sl, dout, axes=(lead, lead))
            if need_dx:
                dxp[g.index(tap)] += np.tensordot(dout, wf[tap].T, axes=1)
    dw = g.flipped(dwf)
    dx = _fold(dxp, g.axes, g.support, x.shape, g.mode) if need_dx else None
    return dx, np.ascontiguousarray(dw)


def patches(x: np.ndarray, axes, support, mode=ZERO, strides=None) -> np.ndarray:
    """im2col: ``(..., taps * cin)`` so that ``mc_conv(x, w) == patches @ w'``
    with ``w'`` the filter flipped along its support and reshaped to
    ``(taps * cin, cout)``."""
    g = _Geometry(x.shape, tuple(support) + (x.shape[-1], 1), axes, mode, strides)
    xp = _pad(x, g.axes, g.support, g.mode)
    out = np.empty(g.out_shape[:-1] + (len(g.taps), g.cin), dtype=x.dtype)
    for t, tap in enumerate(g.taps):
        out[..., t, :] = xp[g.index(tap)]
    return out.reshape(g.out_shape[:-1] + (len(g.taps) * g.cin,))


def patches_adjoint(dcols: np.ndarray, x_shape, axes, support, mode=ZERO, strides=None):
    g = _Geometry(tuple(x_shape), tuple(support) + (x_shape[-1], 1), axes, mode, strides)
    dcols = dcols.reshape(g.out_shape[:-1] + (len(g.taps), g.cin))
    widths = _pad_widths(len(x_shape), g.axes, g.support)
    dxp = np.zeros([n + a + b for n, (a, b) in zip(x_shape, widths)], dtype=dcols.dtype)
    for t, tap in enumerate(g.taps):
        dxp[g.index(tap)] += dcols[..., t, :]
    return _fold(dxp, g.axes, g.support, tuple(x_shape), g.mode)


def flip(w: np.ndarray, naxes: int) -> np.ndarray:
    """Reverse the first ``naxes`` (support) axes of a filter."""
    return w[(slice(None, None, -1),) * naxes]


def conv_nd(z: np.ndarray, w: np.ndarray, axes: Sequence[int], mode=ZERO, strides=None,
            kernel: str = "blocked") -> np.ndarray:
    """Convolve ``z`` with the pure filter ``w`` along ``axes``.

    ``w`` has one extent per convolved axis. ``kernel="reference"`` runs the
    literal per-output-point sum; the default runs the production kernel.
    """
    axes = _norm_axes(z.ndim, axes)
    if w.ndim != len(axes):
        raise ShapeError(f"filter rank {w.ndim} != number of axes {len(axes)}")
    if kernel == "reference":
        return conv_nd_reference(z, w, axes, mode, strides)
    if kernel != "blocked":
        raise ValueError(f"unknown kernel {kernel!r}")
    out = mc_conv(z[..., None], w[..., None, None], axes, mode, strides)
    return out[..., 0]


def conv_nd_reference(z, w, axes, mode=ZERO, strides=None):
    """Naive kernel: evaluates the convolution sum at every output point."""
    mode = as_mode(mode)
    axes = _norm_axes(z.ndim, axes)
    strides = _norm_strides(strides, len(axes))
    if w.ndim != len(axes):
        raise ShapeError(f"filter rank {w.ndim} != number of axes {len(axes)}")
    lens = [z.shape[a] for a in axes]
    if mode is PERIODIC and any(L > n for L, n in zip(w.shape, lens)):
        raise ShapeError("periodic filter longer than axis")
    zm = np.moveaxis(z, axes, range(len(axes)))
    out_lens = [out_length(n, s) for n, s in zip(lens, strides)]
    out = np.zeros(tuple(out_lens) + zm.shape[len(axes):], dtype=np.result_type(z, w))
    centres = [anchor(L) for L in w.shape]
    for o in itertools.product(*map(range, out_lens)):
        acc = out[o]
        for k in itertools.product(*map(range, w.shape)):
            src = []
            for oi, ki, s, c, n in zip(o, k, strides, centres, lens):
                i = oi * s - (ki - c)
                if mode is PERIODIC:
                    i %= n
                elif not 0 <= i < n:
                    break
                src.append(i)
            else:
                acc += zm[tuple(src)] * w[k]
        out[o] = acc
    return np.moveaxis(out, range(len(axes)), axes)


def translate(z: np.ndarray, axis: int, shift: int, mode=PERIODIC) -> np.ndarray:
    """Shift along ``axis`` so that ``out[i] = z[i - shift]``."""
    (axis,) = _norm_axes(z.ndim, [axis])
    mode = as_mode(mode)
    if mode is PERIODIC:
        return np.roll(z, shift, axis=axis)
    out = np.zeros_like(z)
    n = z.shape[axis]
    if abs(shift) >= n:
        return out
    dst = [slice(None)] * z.ndim
    src = [slice(None)] * z.ndim
    if shift >= 0:
        dst[axis], src[axis] = slice(shift, n), slice(0, n - shift)
    else:
        dst[axis], src[axis] = slice(0, n + shift), slice(-shift, n)
    out[tuple(dst)] = z[tuple(src)]
    return out


def sum_axis(z: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    (axis,) = _norm_axes(z.ndim, [axis])
    return z.sum(axis=axis, keepdims=keepdims)


def pad(z: np.ndarray, axis: int, before: int, after: int, mode=ZERO) -> np.ndarray:
    (axis,) = _norm_axes(z.ndim, [axis])
    widths = [(0, 0)] * z.ndim
    widths[axis] = (before, after)
    return np.pad(z, widths, mode="wrap" if as_mode(mode) is PERIODIC else "constant")


def crop(z: np.ndarray, axis: int, start: int, length: int) -> np.ndarray:
    (axis,) = _norm_axes(z.ndim, [axis])
    if start < 0 or start + length > z.shape[axis]:
        raise ShapeError(f"crop [{start}, {start + length}) outside axis of length {z.shape[axis]}")
    return np.take(z, np.arange(start, start + length), axis=axis)


# --- serialization -------------------------------------------------------

TENSOR_MAGIC = b"HTNS"
TENSOR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensor(f: BinaryIO, z: np.ndarray) -> None:
    z = np.asarray(z)
    try:
        tag = _TAGS[z.dtype]
    except KeyError:
        raise ShapeError(f"unsupported dtype {z.dtype}") from None
    ensure_finite(z, "serialized tensor")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<II", TENSOR_VERSION, z.ndim))
    f.write(struct.pack(f"<{z.ndim}Q", *z.shape))
    f.write(struct.pack("<B", tag))
    f.write(np.ascontiguousarray(z, dtype=_DTYPES[tag]).tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise DataError("truncated tensor stream")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise DataError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(f, 8))
    if version != TENSOR_VERSION:
        raise DataError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    (tag,) = struct.unpack("<B", _read_exact(f, 1))
    if tag not in _DTYPES:
        raise DataError(f"unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    count = math.prod(shape)
    data = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt, count=count)
    return data.reshape(shape).astype(dt.newbyteorder("="))


def tensor_to_bytes(z: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, z)
    return buf.getvalue()


def tensor_from_bytes(b: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(b))
