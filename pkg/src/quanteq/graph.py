"""Layer-graph intermediate representation.

A model is a topologically ordered list of layers plus explicit edges.
Edge (f, t) feeds layer f's output into layer t; the pseudo-index -1 is the
graph input. Because every edge must satisfy f < t, the layer list order is
a topological order and cycles cannot be expressed.

Supported layer kinds:

    linear            weight [out_features, in_features], bias [out_features]
    conv2d            weight [out_c, in_c, kh, kw], bias [out_c]
    depthwise_conv2d  weight [channels, 1, kh, kw], bias [channels]
    batchnorm         per-channel (gamma, beta, mean, var, epsilon)
    activation        one shared or per-channel piecewise-linear function
    residual_add      elementwise sum of >= 2 producers

Only sequential chains with residual-add merges are supported: a layer's
output may fan out only when every consumer beyond the first non-add one is a
residual_add (the skip connection pattern). Activations are explicit nodes
because the equalization transform rewrites their parameters per channel.

Affine layers may carry ``eff_shift`` / ``eff_scale`` vectors: the per-channel
shift/scale of their pre-activation distribution, recorded when a following
batch-norm layer is folded in. Downstream transforms (bias absorption,
activation range derivation, analytic bias correction) read them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError
from .piecewise import PiecewiseLinear
from .tensor import DTYPE, _out_hw, as_f32

LINEAR = "linear"
CONV2D = "conv2d"
DEPTHWISE_CONV2D = "depthwise_conv2d"
BATCHNORM = "batchnorm"
ACTIVATION = "activation"
RESIDUAL_ADD = "residual_add"

AFFINE_KINDS = (LINEAR, CONV2D, DEPTHWISE_CONV2D)
ALL_KINDS = AFFINE_KINDS + (BATCHNORM, ACTIVATION, RESIDUAL_ADD)

INPUT = -1  # pseudo producer index for the graph input


@dataclass
class BatchNormParams:
    """Inference-time batch-norm statistics for one layer."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.gamma = as_f32(self.gamma)
        self.beta = as_f32(self.beta)
        self.mean = as_f32(self.mean)
        self.var = as_f32(self.var)

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(
            self.gamma.copy(), self.beta.copy(), self.mean.copy(),
            self.var.copy(), self.epsilon,
        )


@dataclass
class Layer:
    kind: str
    name: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    bn: BatchNormParams | None = None
    # Piecewise functions: a one-element list is shared across channels,
    # otherwise one function per channel.
    act: list[PiecewiseLinear] | None = None
    eff_shift: np.ndarray | None = None
    eff_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.weight is not None:
            self.weight = as_f32(self.weight)
        if self.bias is not None:
            self.bias = as_f32(self.bias)
        if self.eff_shift is not None:
            self.eff_shift = as_f32(self.eff_shift)
        if self.eff_scale is not None:
            self.eff_scale = as_f32(self.eff_scale)

    @property
    def is_affine(self) -> bool:
        return self.kind in AFFINE_KINDS

    @property
    def out_channels(self) -> int:
        if not self.is_affine:
            raise GraphError(f"{self.kind} layer has no weight channels")
        return self.weight.shape[0]

    def copy(self) -> "Layer":
        return Layer(
            kind=self.kind,
            name=self.name,
            weight=None if self.weight is None else self.weight.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            stride=self.stride,
            padding=self.padding,
            bn=None if self.bn is None else self.bn.copy(),
            act=None if self.act is None else list(self.act),
            eff_shift=None if self.eff_shift is None else self.eff_shift.copy(),
            eff_scale=None if self.eff_scale is None else self.eff_scale.copy(),
        )


def linear(name: str, weight, bias, **kw) -> Layer:
    return Layer(LINEAR, name, weight=weight, bias=bias, **kw)


def conv2d(name: str, weight, bias, stride: int = 1, padding: int = 0, **kw) -> Layer:
    return Layer(CONV2D, name, weight=weight, bias=bias, stride=stride, padding=padding, **kw)


def depthwise_conv2d(name: str, weight, bias, stride: int = 1, padding: int = 0, **kw) -> Layer:
    return Layer(DEPTHWISE_CONV2D, name, weight=weight, bias=bias,
                 stride=stride, padding=padding, **kw)


def batchnorm(name: str, gamma, beta, mean, var, epsilon: float = 1e-5) -> Layer:
    return Layer(BATCHNORM, name, bn=BatchNormParams(gamma, beta, mean, var, epsilon))


def activation(name: str, fn: PiecewiseLinear | list[PiecewiseLinear]) -> Layer:
    fns = [fn] if isinstance(fn, PiecewiseLinear) else list(fn)
    return Layer(ACTIVATION, name, act=fns)


def residual_add(name: str) -> Layer:
    return Layer(RESIDUAL_ADD, name)


@dataclass
class LayerGraph:
    """Topologically ordered layers plus explicit wiring."""

    layers: list[Layer]
    edges: list[tuple[int, int]]
    input_shape: tuple[int, ...]

    _producers: dict[int, list[int]] = field(default_factory=dict, repr=False, compare=False)
    _consumers: dict[int, list[int]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.edges = [(int(f), int(t)) for f, t in self.edges]
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self._reindex()

    def _reindex(self) -> None:
        self._producers = {i: [] for i in range(len(self.layers))}
        self._consumers = {i: [] for i in range(-1, len(self.layers))}
        for f, t in self.edges:
            if not (-1 <= f < t < len(self.layers)):
                raise GraphError(
                    f"edge ({f}, {t}) violates topological order over "
                    f"{len(self.layers)} layers"
                )
            self._producers[t].append(f)
            self._consumers[f].append(t)

    def producers(self, i: int) -> list[int]:
        return self._producers[i]

    def consumers(self, i: int) -> list[int]:
        return self._consumers[i]

    def output_index(self) -> int:
        sinks = [i for i in range(len(self.layers)) if not self._consumers[i]]
        if len(sinks) != 1:
            raise GraphError(f"graph must have exactly one output layer, found {sinks}")
        return sinks[0]

    def index_of(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise GraphError(f"no layer named {name!r}")

    def layer_named(self, name: str) -> "Layer":
        return self.layers[self.index_of(name)]

    def copy(self) -> "LayerGraph":
        return LayerGraph(
            [l.copy() for l in self.layers], list(self.edges), self.input_shape
        )

    # -- validation ---------------------------------------------------------

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Propagate shapes from the input; raises GraphError on mismatch."""
        shapes: list[tuple[int, ...]] = []
        for i, layer in enumerate(self.layers):
            prods = self._producers[i]
            if not prods:
                raise GraphError(f"layer {i} ({layer.name}) has no producer")
            in_shapes = [self.input_shape if p == INPUT else shapes[p] for p in prods]
            shapes.append(self._shape_of(layer, in_shapes, i))
        return shapes

    def _shape_of(self, layer: Layer, in_shapes: list[tuple[int, ...]], i: int) -> tuple[int, ...]:
        kind = layer.kind
        if kind == RESIDUAL_ADD:
            if len(in_shapes) < 2:
                raise GraphError(f"residual_add {layer.name} needs >= 2 producers")
            if any(s != in_shapes[0] for s in in_shapes[1:]):
                raise GraphError(
                    f"residual_add {layer.name} producer shapes differ: {in_shapes}"
                )
            return in_shapes[0]
        if len(in_shapes) != 1:
            raise GraphError(f"{kind} layer {layer.name} must have exactly one producer")
        s = in_shapes[0]
        if kind == LINEAR:
            if len(s) != 1:
                raise GraphError(
                    f"linear layer {layer.name} needs a rank-1 input, got shape {s}"
                )
            if s[0] != layer.weight.shape[1]:
                raise GraphError(
                    f"linear layer {layer.name}: input {s[0]} != in_features "
                    f"{layer.weight.shape[1]}"
                )
            return (layer.weight.shape[0],)
        if kind in (CONV2D, DEPTHWISE_CONV2D):
            if len(s) != 3:
                raise GraphError(
                    f"{kind} layer {layer.name} needs a rank-3 input, got shape {s}"
                )
            c_in = layer.weight.shape[0] if kind == DEPTHWISE_CONV2D else layer.weight.shape[1]
            if s[0] != c_in:
                raise GraphError(
                    f"{kind} layer {layer.name}: input channels {s[0]} != {c_in}"
                )
            kh, kw = layer.weight.shape[2], layer.weight.shape[3]
            ho, wo = _out_hw(s[1], s[2], kh, kw, layer.stride, layer.padding)
            return (layer.out_channels, ho, wo)
        if kind in (BATCHNORM, ACTIVATION):
            n = None
            if kind == BATCHNORM:
                n = layer.bn.gamma.shape[0]
            elif layer.act is not None and len(layer.act) > 1:
                n = len(layer.act)
            if n is not None and s[0] != n:
                raise GraphError(
                    f"{kind} layer {layer.name}: {n} channel params vs input channels {s[0]}"
                )
            return s
        raise GraphError(f"unknown layer kind {kind!r}")

    def validate(self) -> None:
        """Check structure, parameter shapes and finiteness. Raises GraphError."""
        if not self.layers:
            raise GraphError("graph has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise GraphError(f"duplicate layer names: {dupes}")
        for i, layer in enumerate(self.layers):
            self._validate_params(layer, i)
        # Fan-out: beyond the first non-add consumer, only residual_add allowed.
        for src in range(-1, len(self.layers)):
            cons = self._consumers[src]
            non_add = [c for c in cons if self.layers[c].kind != RESIDUAL_ADD]
            if len(non_add) > 1:
                names = [self.layers[c].name for c in non_add]
                raise GraphError(
                    f"output of {'input' if src == INPUT else self.layers[src].name} "
                    f"fans out to multiple non-add consumers {names}; only "
                    f"residual skips may branch"
                )
        self.output_index()
        self.output_shapes()

    def _validate_params(self, layer: Layer, i: int) -> None:
        kind = layer.kind
        if kind not in ALL_KINDS:
            raise GraphError(f"layer {i}: unknown kind {kind!r}")
        if layer.is_affine:
            w, b = layer.weight, layer.bias
            if w is None or b is None:
                raise GraphError(f"{layer.name}: affine layer needs weight and bias")
            want_rank = 2 if kind == LINEAR else 4
            if w.ndim != want_rank:
                raise GraphError(f"{layer.name}: weight rank {w.ndim}, want {want_rank}")
            if kind == DEPTHWISE_CONV2D and w.shape[1] != 1:
                raise GraphError(f"{layer.name}: depthwise weight must be [c,1,kh,kw]")
            if b.shape != (w.shape[0],):
                raise GraphError(f"{layer.name}: bias shape {b.shape} != ({w.shape[0]},)")
            arrays = [w, b]
            for v in (layer.eff_shift, layer.eff_scale):
                if v is not None:
                    if v.shape != (w.shape[0],):
                        raise GraphError(f"{layer.name}: effective stats shape {v.shape}")
                    arrays.append(v)
            if layer.eff_scale is not None and not np.all(layer.eff_scale > 0):
                raise GraphError(f"{layer.name}: eff_scale must be strictly positive")
        elif kind == BATCHNORM:
            bn = layer.bn
            if bn is None:
                raise GraphError(f"{layer.name}: batchnorm layer needs parameters")
            n = bn.gamma.shape[0]
            for fname in ("beta", "mean", "var"):
                if getattr(bn, fname).shape != (n,):
                    raise GraphError(f"{layer.name}: bn {fname} shape mismatch")
            if not np.all(bn.gamma > 0):
                raise GraphError(f"{layer.name}: bn gamma must be strictly positive")
            if not np.all(bn.var + bn.epsilon > 0):
                raise GraphError(f"{layer.name}: bn var + epsilon must be positive")
            arrays = [bn.gamma, bn.beta, bn.mean, bn.var]
        elif kind == ACTIVATION:
            if not layer.act:
                raise GraphError(f"{layer.name}: activation layer needs a function")
            arrays = []
        else:  # residual_add
            arrays = []
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise GraphError(f"{layer.name}: non-finite parameter values")


def find_equalizable_pairs(graph: LayerGraph) -> list[tuple[int, int, int]]:
    """Locate (affine, activation, affine) triples eligible for equalization.

    Both affine layers must be connected through exactly one piecewise-linear
    activation with no other fan-in or fan-out on the path, and the producing
    layer's output channels must line up with the dimension the consumer
    scales (in_features / in_channels, or the channel axis for depthwise).
    Residual adds break the chain, so pairs never span one. Requires
    batch-norm layers to be folded away first.
    """
    for layer in graph.layers:
        if layer.kind == BATCHNORM:
            raise GraphError(
                f"graph still contains batch-norm layer {layer.name!r}; "
                f"fold it before looking for equalizable pairs"
            )
    pairs = []
    for a_idx, a in enumerate(graph.layers):
        if not a.is_affine:
            continue
        cons = graph.consumers(a_idx)
        if len(cons) != 1:
            continue
        m_idx = cons[0]
        mid = graph.layers[m_idx]
        if mid.kind != ACTIVATION:
            continue
        mcons = graph.consumers(m_idx)
        if len(mcons) != 1:
            continue
        b_idx = mcons[0]
        b = graph.layers[b_idx]
        if not b.is_affine or graph.producers(b_idx) != [m_idx]:
            continue
        scaled = b.weight.shape[0] if b.kind == DEPTHWISE_CONV2D else b.weight.shape[1]
        if scaled != a.out_channels:
            continue
        pairs.append((a_idx, m_idx, b_idx))
    return pairs
