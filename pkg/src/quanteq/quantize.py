"""Uniform affine quantization grids and batch-norm folding.

Simulated fixed-point inference runs everything through
``quantize_dequantize``: values are mapped to the integer grid and straight
back to float32, so the network stays in float while seeing exactly the
rounding and clamping a fixed-point implementation would apply.

Grid conventions:

    symmetric   signed integers, zero_point = 0,
                q in [-(2**(bits-1) - 1), 2**(bits-1) - 1]
    asymmetric  unsigned integers, q in [0, 2**bits - 1]; the float range is
                first extended to include 0.0 and the zero point is rounded
                to an integer so 0.0 is exactly representable

Rounding is round-half-to-even everywhere (np.round). A range that collapses
to {0.0} gets scale 1.0 and a ``degenerate`` flag instead of dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import graph as g
from .errors import GraphError, QuanteqError, ShapeError
from .piecewise import PiecewiseLinear
from .tensor import DTYPE, as_f32


class RangeMode(str, Enum):
    """How per-channel weight ranges are measured."""

    SYMMETRIC = "symmetric"  # r_i = 2 * max|w|, centered on zero
    MINMAX = "minmax"        # r_i = max - min


@dataclass(frozen=True)
class QScheme:
    """Quantizer configuration: bit width, symmetry, granularity."""

    bits: int = 8
    symmetric: bool = False
    per_channel: bool = False

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise QuanteqError(f"bit width must be in [2, 16], got {self.bits}")

    @property
    def q_min(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1


@dataclass
class QParams:
    """A concrete grid: scale/zero-point plus the integer clamp range.

    ``scale`` and ``zero_point`` are scalars for per-tensor grids or
    [channels] arrays for per-channel grids (channel axis 0).
    """

    scale: np.ndarray
    zero_point: np.ndarray
    q_min: int
    q_max: int
    degenerate: np.ndarray

    def to_json(self) -> dict:
        scalar = self.scale.ndim == 0
        return {
            "scale": float(self.scale) if scalar else self.scale.tolist(),
            "zero_point": int(self.zero_point) if scalar else self.zero_point.tolist(),
            "q_min": self.q_min,
            "q_max": self.q_max,
            "degenerate": bool(self.degenerate) if scalar else self.degenerate.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QParams":
        return cls(
            scale=np.asarray(obj["scale"], dtype=np.float64),
            zero_point=np.asarray(obj["zero_point"], dtype=np.int64),
            q_min=int(obj["q_min"]),
            q_max=int(obj["q_max"]),
            degenerate=np.asarray(obj["degenerate"], dtype=bool),
        )


def make_qparams(lo, hi, scheme: QScheme) -> QParams:
    """Build a grid covering [lo, hi] under ``scheme``.

    ``lo`` / ``hi`` may be scalars or matching arrays (one grid per entry).
    Asymmetric grids are nudged so 0.0 sits exactly on the grid; symmetric
    grids use scale = max(|lo|, |hi|) / q_max with zero point 0.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != hi.shape:
        raise ShapeError(f"lo shape {lo.shape} != hi shape {hi.shape}")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise QuanteqError("range bounds must be finite")
    if np.any(lo > hi):
        raise QuanteqError("range lower bound exceeds upper bound")
    if scheme.symmetric:
        m = np.maximum(np.abs(lo), np.abs(hi))
        degenerate = m == 0.0
        scale = np.where(degenerate, 1.0, m / scheme.q_max)
        zero_point = np.zeros_like(scale, dtype=np.int64)
    else:
        lo_x = np.minimum(lo, 0.0)
        hi_x = np.maximum(hi, 0.0)
        span = hi_x - lo_x
        degenerate = span == 0.0
        scale = np.where(degenerate, 1.0, span / (scheme.q_max - scheme.q_min))
        zero_point = np.where(
            degenerate,
            scheme.q_min,
            np.round(scheme.q_min - lo_x / scale),
        ).astype(np.int64)
        zero_point = np.clip(zero_point, scheme.q_min, scheme.q_max)
    # scale stays float64: it is grid metadata, and the worked tie-breaking
    # examples only come out right when the division happens at full precision
    return QParams(
        scale=scale,
        zero_point=zero_point,
        q_min=scheme.q_min,
        q_max=scheme.q_max,
        degenerate=degenerate,
    )


def quantize_dequantize(t: np.ndarray, qp: QParams) -> np.ndarray:
    """Round ``t`` onto the grid and map back to float32.

    Per-channel grids apply along axis 0. The operation is idempotent: once a
    tensor sits on the grid it reproduces bit for bit.
    """
    t = as_f32(t).astype(np.float64)
    scale = qp.scale.astype(np.float64)
    zp = qp.zero_point.astype(np.float64)
    if scale.ndim == 1:
        if t.shape[0] != scale.shape[0]:
            raise ShapeError(
                f"per-channel grid has {scale.shape[0]} channels, tensor has {t.shape[0]}"
            )
        bshape = (scale.shape[0],) + (1,) * (t.ndim - 1)
        scale = scale.reshape(bshape)
        zp = zp.reshape(bshape)
    elif scale.ndim != 0:
        raise ShapeError(f"scale must be scalar or rank 1, got rank {scale.ndim}")
    q = np.round(t / scale) + zp
    q = np.clip(q, qp.q_min, qp.q_max)
    return ((q - zp) * scale).astype(DTYPE)


@dataclass
class ChannelRanges:
    """Per-channel weight ranges along axis 0, plus the per-tensor span."""

    mode: RangeMode
    r: np.ndarray    # per-channel range width
    lo: np.ndarray   # per-channel lower bound
    hi: np.ndarray   # per-channel upper bound

    @property
    def total(self) -> float:
        """The per-tensor range width R = max_i r_i."""
        return float(self.r.max())

    @property
    def precision(self) -> np.ndarray:
        """Relative per-channel precision p_i = r_i / R (0 when R == 0)."""
        big = self.total
        if big == 0.0:
            return np.zeros_like(self.r)
        return self.r / big


def channel_ranges(W: np.ndarray, mode: RangeMode, axis: int = 0) -> ChannelRanges:
    """Measure per-channel ranges of ``W`` along ``axis``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim < 2:
        raise ShapeError(f"weight tensor must have rank >= 2, got {W.ndim}")
    flat = np.moveaxis(W, axis, 0).reshape(W.shape[axis], -1)
    if mode == RangeMode.SYMMETRIC:
        m = np.abs(flat).max(axis=1)
        return ChannelRanges(mode, r=2.0 * m, lo=-m, hi=m)
    lo = flat.min(axis=1)
    hi = flat.max(axis=1)
    return ChannelRanges(mode, r=hi - lo, lo=lo, hi=hi)


def weight_ranges(W: np.ndarray, mode: RangeMode = RangeMode.SYMMETRIC) -> ChannelRanges:
    """Per-output-channel ranges (channel axis 0)."""
    return channel_ranges(W, mode, axis=0)


def weight_qparams(W: np.ndarray, scheme: QScheme) -> QParams:
    """Grid for a weight tensor from its min/max (per tensor or per channel)."""
    W = np.asarray(W)
    if scheme.per_channel:
        cr = channel_ranges(W, RangeMode.MINMAX, axis=0)
        return make_qparams(cr.lo, cr.hi, scheme)
    return make_qparams(float(W.min()), float(W.max()), scheme)


def fold_batch_norm(graph: g.LayerGraph) -> g.LayerGraph:
    """Fold every batch-norm layer into the affine layer that feeds it.

    With scale = gamma / sqrt(var + epsilon), the affine layer becomes
    W' = W * scale (per output channel) and b' = (b - mean) * scale + beta,
    and the batch-norm node disappears from the graph. The folded layer
    records eff_shift = beta and eff_scale = gamma: the per-channel shift and
    scale of its pre-activation distribution, which later transforms consume.

    Raises GraphError when a batch-norm does not directly follow an affine
    layer it exclusively consumes (nothing else may read the raw pre-norm
    output, or folding would change that branch).
    """
    out = graph.copy()
    bn_indices = [i for i, l in enumerate(out.layers) if l.kind == g.BATCHNORM]
    parent: dict[int, int] = {}
    for idx in bn_indices:
        prods = out.producers(idx)
        if len(prods) != 1 or prods[0] == g.INPUT:
            raise GraphError(
                f"batch-norm {out.layers[idx].name!r} must follow exactly one layer"
            )
        src = prods[0]
        owner = out.layers[src]
        if not owner.is_affine:
            raise GraphError(
                f"batch-norm {out.layers[idx].name!r} follows {owner.kind} layer "
                f"{owner.name!r}; it must follow an affine layer"
            )
        if out.consumers(src) != [idx]:
            raise GraphError(
                f"cannot fold {out.layers[idx].name!r}: {owner.name!r} has other "
                f"consumers reading its un-normalized output"
            )
        bn = out.layers[idx].bn
        n = owner.out_channels
        if bn.gamma.shape[0] != n:
            raise GraphError(
                f"batch-norm {out.layers[idx].name!r} has {bn.gamma.shape[0]} "
                f"channels, affine layer {owner.name!r} has {n}"
            )
        scale = bn.gamma / np.sqrt(bn.var + np.float32(bn.epsilon))
        bshape = (n,) + (1,) * (owner.weight.ndim - 1)
        owner.weight = (owner.weight * scale.reshape(bshape)).astype(DTYPE)
        owner.bias = ((owner.bias - bn.mean) * scale + bn.beta).astype(DTYPE)
        owner.eff_shift = bn.beta.copy()
        owner.eff_scale = bn.gamma.copy()
        parent[idx] = src
    # Drop the folded nodes and rewire their outgoing edges to the owner.
    keep = [i for i in range(len(out.layers)) if i not in parent]
    remap = {old: new for new, old in enumerate(keep)}
    remap[g.INPUT] = g.INPUT
    new_edges = []
    for f, t in out.edges:
        if t in parent:  # the affine -> bn edge disappears
            continue
        new_edges.append((remap[parent.get(f, f)], remap[t]))
    folded = g.LayerGraph([out.layers[i] for i in keep], new_edges, out.input_shape)
    folded.validate()
    return folded


def activation_range_from_bn(
    shift: np.ndarray,
    scale: np.ndarray,
    n: float = 6.0,
    act: list[PiecewiseLinear] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel activation range estimate from batch-norm statistics.

    Returns (lo, hi) with lo_i = shift_i - n*scale_i and
    hi_i = shift_i + n*scale_i. When the activation clips from below (ReLU
    family), lo is raised to the clip floor. The per-tensor range is simply
    (lo.min(), hi.max()).
    """
    shift = np.asarray(shift, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if shift.shape != scale.shape or shift.ndim != 1:
        raise ShapeError("shift and scale must be matching vectors")
    if np.any(scale <= 0):
        raise QuanteqError("scale statistics must be strictly positive")
    lo = shift - n * scale
    hi = shift + n * scale
    if act is not None:
        if len(act) not in (1, shift.shape[0]):
            raise ShapeError(
                f"{len(act)} activation functions for {shift.shape[0]} channels"
            )
        floors = np.array([f.clip_bounds()[0] for f in act])
        lo = np.maximum(lo, floors)
        # A fully clipped channel (floor above the +n*scale bound) still
        # needs a non-inverted range.
        hi = np.maximum(hi, lo)
    return lo, hi
