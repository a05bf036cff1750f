"""Invariant attribute arrays, attribute-translation retrieval and the
splice-and-resume invariance probe."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig
from .errors import ConfigError, ShapeError
from .model import Activations, Model, calibrate_buffers, forward, residual_strides, shape_schedule
from .tensor import PERIODIC, conv_nd, read_tensor, translate, write_tensor


@dataclass
class AttributeArray:
    """``values[v_{j-1}, v_j]``: layer ``j`` summed over ``v_{j-2}`` at ``u0``."""

    values: np.ndarray
    image_id: int
    depth: int
    u0: tuple


def invariant_arrays(acts: Activations, j: int, ids=None) -> list[AttributeArray]:
    """One :class:`AttributeArray` per batch item of ``acts.xs[j]``."""
    J = len(acts.xs) - 1
    if not 3 <= j <= J - 1:
        raise ShapeError(f"invariant arrays need 3 <= j <= {J - 1}, got {j}")
    xj = acts.xs[j]
    if xj is None:
        raise ShapeError(f"layer {j} was not computed")
    c1, c2 = xj.shape[1] // 2, xj.shape[2] // 2
    vals = xj[:, c1, c2].sum(axis=1)
    ids = range(len(vals)) if ids is None else ids
    return [AttributeArray(np.ascontiguousarray(v), int(i), j, (c1, c2)) for v, i in zip(vals, ids)]


def invariant_array(acts: Activations, j: int, index: int = 0, image_id=None) -> AttributeArray:
    arr = invariant_arrays(acts, j)[index]
    arr.image_id = index if image_id is None else int(image_id)
    return arr


def smooth(values: np.ndarray, width: int) -> np.ndarray:
    """Circular box average of ``width`` consecutive samples along axis 0."""
    if width < 1:
        raise ConfigError(f"smoothing width must be >= 1, got {width}")
    if width == 1:
        return values
    box = np.full(width, 1.0 / width, dtype=values.dtype)
    return conv_nd(values, box, axes=(0,), mode=PERIODIC)


@dataclass(frozen=True)
class Match:
    image_id: int
    distance: float
    rank: int


def nearest_translated(query: AttributeArray, tau: int, corpus, smooth_width: int = 2,
                       exclude_id=None) -> list[Match]:
    """Rank ``corpus`` by distance to the query translated by ``tau`` along
    ``v_{j-1}`` after smoothing both; ties go to the lower image id."""
    target = translate(smooth(query.values, smooth_width), 0, tau, PERIODIC)
    scored = []
    for item in corpus:
        if item.values.shape != query.values.shape:
            raise ShapeError(f"corpus array {item.image_id} has shape {item.values.shape},"
                             f" query has {query.values.shape}")
        if exclude_id is not None and item.image_id == exclude_id:
            continue
        d = float(np.linalg.norm(smooth(item.values, smooth_width) - target))
        scored.append((d, item.image_id))
    scored.sort()
    return [Match(i, d, r + 1) for r, (d, i) in enumerate(scored)]


def attribute_corpus(model: Model, images, j: int, periodic: bool = True,
                     batch_size: int = 50, ids=None) -> list[AttributeArray]:
    """Attribute arrays of every image, by default with circular boundaries."""
    config = model.config.replace(boundary="periodic") if periodic else model.config
    out = []
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    dtype = model.params["w1"].dtype
    for i in range(0, len(images), batch_size):
        x = np.asarray(images[i:i + batch_size], dtype)
        acts = forward(x, model.params, config, model.buffers)
        out.extend(invariant_arrays(acts, j, ids[i:i + batch_size]))
    return out


def class_agreement(corpus, labels, tau: int, smooth_width: int = 2, queries=None) -> float:
    """Fraction of queries whose top match (itself excluded) shares its label."""
    label_of = {a.image_id: int(l) for a, l in zip(corpus, labels)}
    queries = corpus if queries is None else queries
    hits = 0
    for q in queries:
        best = nearest_translated(q, tau, corpus, smooth_width, exclude_id=q.image_id)[0]
        hits += label_of[best.image_id] == label_of[q.image_id]
    return hits / len(queries)


# --- corpus cache and heatmaps ------------------------------------------------

CORPUS_MAGIC = b"HATR"
CORPUS_VERSION = 1


def save_corpus(path, arrays) -> None:
    """Records of ``(i64 image id, u32 depth, 2 x u32 u0, tensor)``."""
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<IQ", CORPUS_VERSION, len(arrays)))
        for a in arrays:
            f.write(struct.pack("<qIII", a.image_id, a.depth, *a.u0))
            write_tensor(f, a.values)


def load_corpus(path) -> list[AttributeArray]:
    with open(path, "rb") as f:
        if f.read(4) != CORPUS_MAGIC:
            raise ConfigError(f"{path} is not an attribute corpus")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != CORPUS_VERSION:
            raise ConfigError(f"unsupported corpus version {version}")
        out = []
        for _ in range(n):
            image_id, depth, c1, c2 = struct.unpack("<qIII", f.read(20))
            out.append(AttributeArray(read_tensor(f), image_id, depth, (c1, c2)))
    return out


def heatmap_bytes(values: np.ndarray) -> bytes:
    """Binary PGM, min-max scaled to 0..255."""
    v = np.asarray(values, np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes()


def write_heatmap(path, values) -> None:
    with open(path, "wb") as f:
        f.write(heatmap_bytes(values))


# --- invariance probe ---------------------------------------------------------

def axis_names(config: NetworkConfig, j: int) -> list[str]:
    if j == 0:
        return ["u1", "u2", "v0"]
    if j == 1:
        return ["u1", "u2", "v1"]
    if j == 2:
        return ["u1", "u2", "v1", "v2"]
    return ["u1", "u2", f"v{j - 2}", f"v{j - 1}", f"v{j}"]


@dataclass(frozen=True)
class ProbeEntry:
    depth: int
    axis: str
    shift: int
    deviation: float
    passed: bool


@dataclass
class ProbeReport:
    boundary: str
    variant: str
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def informational(self) -> bool:
        """Zero padding breaks exact shift equivariance; results are not a verdict."""
        return self.boundary != "periodic"

    @property
    def max_deviation(self) -> float:
        return max((e.deviation for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def records(self) -> list[dict]:
        return [{"depth": e.depth, "axis": e.axis, "shift": e.shift, "deviation": e.deviation,
                 "passed": e.passed, "informational": self.informational} for e in self.entries]


def covariance_probe(params, config: NetworkConfig, x, buffers=None, depths=None,
                     multiples=(1, 3), tolerance: float = 1e-5) -> ProbeReport:
    """Translate ``x_j`` along each axis by multiples of its residual stride,
    resume the forward pass from depth ``j`` and compare ``x_J``.

    Without ``buffers`` the normalization statistics are calibrated on ``x``.
    """
    if buffers is None:
        buffers = calibrate_buffers(x, params, config)
    base = forward(x, params, config, buffers)
    ref = base.logits
    scale = max(float(np.abs(ref).max()), np.finfo(ref.dtype).tiny)
    report = ProbeReport(config.boundary, config.variant, tolerance)
    shapes = shape_schedule(config)
    depths = range(config.J - 1) if depths is None else depths
    for j in depths:
        names = axis_names(config, j)
        for a, r in enumerate(residual_strides(config, j)):
            if r is None:
                continue
            extent = shapes[j][a]
            for m in multiples:
                tau = m * r
                if tau >= extent and m > 1:
                    continue
                xs = translate(base.xs[j], a + 1, tau, config.boundary)
                out = forward(xs, params, config, buffers, start=j).logits
                dev = float(np.abs(out - ref).max()) / scale
                report.entries.append(ProbeEntry(j, names[a], tau, dev, dev <= tolerance))
    return report
