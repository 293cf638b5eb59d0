"""Seeded synthetic models whose quantization difficulty is dialed in.

Each generated network is built in two phases. First a balanced network:
every affine layer's per-channel weight range is pinned to exactly the same
value (each row gets one +r/2 and one -r/2 entry, placed so whole columns are
covered too), and every batch-norm layer is calibrated against a probe batch
(its mean/var are the measured per-channel moments, so post-norm activations
really do have the configured shift/scale). Then an adversarial rescaling:
per hidden interface a vector t_i, log-uniform over [1, kappa] with the
endpoints pinned, multiplies batch-norm (gamma_i, beta_i) while the consuming
weight axis of the next layer is divided by t_i. That transform preserves the
network function exactly (positive-scaling equivariance of the activations)
but makes the folded per-channel weight ranges proportional to t_i: the
realized folded range ratio is exactly kappa, which per-tensor grids cannot
represent without starving the small-t channels. Range equalization provably
recovers the balanced parameterization.

Injecting the imbalance into raw weights instead would not survive folding:
calibrated batch-norm divides each channel by its own measured scale, which
normalizes raw-weight imbalance away. Only the batch-norm scale carries it
through.

Labels are the argmax of the float32 forward pass on the generated inputs,
so float32 accuracy is 1.0 by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import graph as g
from .engine import _eval_layer
from .errors import QuanteqError
from .graph import Layer, LayerGraph
from .piecewise import relu, relu6
from .tensor import DTYPE

_BN_EPS = 1e-5
_HALF_RANGE = 0.5  # pinned per-channel extreme; balanced raw range is 1.0


@dataclass
class ZooSpec:
    """Recipe for one synthetic model plus its self-labeled dataset.

    ``widths`` holds the channel counts the blocks map through (length
    depth + 1 for chains; residual blocks keep widths[0] throughout).
    ``kappa`` is the folded per-channel range imbalance ratio. ``bn_shift``
    and ``bn_scale`` bound the balanced post-norm shift/scale draws before
    the imbalance multiplies them.
    """

    seed: int = 0
    block: str = "depthwise_separable"  # or "plain_chain" / "residual"
    depth: int = 2
    widths: list[int] = dc_field(default_factory=lambda: [8, 8, 8])
    kappa: float = 1.0
    classes: int = 8
    n_examples: int = 1024
    input_hw: int = 8
    act: str = "relu"  # or "relu6"
    bn_shift: tuple[float, float] = (0.5, 2.5)
    bn_scale: tuple[float, float] = (0.35, 0.65)

    def check(self) -> None:
        if self.block not in ("plain_chain", "depthwise_separable", "residual"):
            raise QuanteqError(f"unknown block style {self.block!r}")
        if self.depth < 1:
            raise QuanteqError("depth must be >= 1")
        if self.kappa < 1.0:
            raise QuanteqError("kappa must be >= 1")
        if self.classes < 2:
            raise QuanteqError("need at least two classes for argmax labels")
        if self.n_examples < 1:
            raise QuanteqError("n_examples must be >= 1")
        if self.act not in ("relu", "relu6"):
            raise QuanteqError(f"unsupported activation {self.act!r}")
        if self.block in ("plain_chain", "depthwise_separable"):
            if len(self.widths) != self.depth + 1:
                raise QuanteqError(
                    f"{self.block} needs depth+1 widths, got {len(self.widths)}"
                )
        if min(self.widths) < 2:
            raise QuanteqError("widths must be >= 2")
        if self.block == "depthwise_separable":
            if self.input_hw - 2 * self.depth < 1:
                raise QuanteqError(
                    f"input_hw {self.input_hw} too small for {self.depth} "
                    f"unpadded 3x3 blocks"
                )


def _imbalance(rng: np.random.Generator, n: int, kappa: float) -> np.ndarray:
    """Per-channel scales, log-uniform over [1, kappa], endpoints pinned."""
    if kappa == 1.0 or n < 2:
        return np.ones(n)
    t = kappa ** rng.uniform(size=n)
    lo, hi = rng.permutation(n)[:2]
    t[lo], t[hi] = 1.0, kappa
    return t


def _draw_balanced(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Random weights with every per-channel range pinned to exactly 1.0.

    Rows (axis 0) get one +0.5 and one -0.5 entry each; for cross-channel
    layers the extreme positions walk permutations of the input channels so
    columns are pinned too (exactly, whenever out_channels >= in_channels).
    """
    rows = shape[0]
    w = rng.uniform(-0.45, 0.45, size=shape)
    flat = w.reshape(rows, -1)
    width = flat.shape[1]
    if len(shape) == 2 or shape[1] > 1:  # linear / full conv: spread over columns
        cols = shape[1] if len(shape) == 4 else shape[1]
        per_col = width // cols  # kernel taps per input channel
        reps = -(-rows // cols)
        perm1 = np.concatenate([rng.permutation(cols) for _ in range(reps)])[:rows]
        step = 1 + rng.integers(cols - 1, size=rows) if cols > 1 else np.zeros(rows, int)
        perm2 = (perm1 + step) % cols
        q1 = perm1 * per_col + rng.integers(per_col, size=rows)
        q2 = perm2 * per_col + rng.integers(per_col, size=rows)
        same = q1 == q2
        if np.any(same):  # single-channel corner: just move within the row
            q2[same] = (q2[same] + 1) % width
        flat[np.arange(rows), q1] = _HALF_RANGE
        flat[np.arange(rows), q2] = -_HALF_RANGE
    else:  # depthwise: two distinct taps inside each channel's kernel
        for i in range(rows):
            q1, q2 = rng.choice(width, size=2, replace=False)
            flat[i, q1] = _HALF_RANGE
            flat[i, q2] = -_HALF_RANGE
    return w


def _prepare_weight(
    rng: np.random.Generator,
    kind: str,
    shape: tuple[int, ...],
    t_in: np.ndarray | None,
    renorm: bool = True,
) -> np.ndarray:
    """Balanced draw, then undo the incoming imbalance on the consuming axis.

    ``renorm`` re-pins every row's range to exactly 1.0 afterwards; the
    following calibrated batch-norm absorbs the per-row factor, so the
    function is unaffected while the folded ranges stay exact. The head
    (no batch-norm to absorb it) must skip renormalization.
    """
    w = _draw_balanced(rng, shape)
    if t_in is not None:
        axis = 0 if kind == g.DEPTHWISE_CONV2D else 1
        bshape = [1] * len(shape)
        bshape[axis] = shape[axis]
        w = w / t_in.reshape(bshape)
    if renorm:
        flat = np.abs(w.reshape(shape[0], -1)).max(axis=1)
        w = w * (_HALF_RANGE / flat).reshape((shape[0],) + (1,) * (len(shape) - 1))
    return w.astype(DTYPE)


class _Builder:
    """Accumulates layers/edges while pushing the probe batch through."""

    def __init__(self, input_shape: tuple[int, ...], probe: np.ndarray):
        self.layers: list[Layer] = []
        self.edges: list[tuple[int, int]] = []
        self.input_shape = input_shape
        self.probe = probe
        self.outs: list[np.ndarray] = []

    def add(self, layer: Layer, producers: list[int]) -> int:
        idx = len(self.layers)
        ins = [self.probe if p == g.INPUT else self.outs[p] for p in producers]
        self.layers.append(layer)
        self.outs.append(_eval_layer(layer, ins))
        self.edges.extend((p, idx) for p in producers)
        return idx

    def graph(self) -> LayerGraph:
        return LayerGraph(self.layers, self.edges, self.input_shape)


def _norm_act_unit(
    b: _Builder,
    rng: np.random.Generator,
    spec: ZooSpec,
    name: str,
    affine_idx: int,
    t_out: np.ndarray,
    act_name: str | None,
) -> int:
    """Append calibrated batch-norm (+ optional activation) after a layer."""
    z = b.outs[affine_idx]
    ax = (0,) if z.ndim == 2 else (0, 2, 3)
    mu = z.mean(axis=ax)
    var = z.var(axis=ax)
    if var.min() <= 1e-8:
        raise QuanteqError(
            f"degenerate pre-norm variance in generated layer {name!r}; "
            f"widen the network or change the seed"
        )
    spread = np.sqrt(var + _BN_EPS)
    gain = rng.uniform(*spec.bn_scale)
    gamma = gain * spread / spread.mean()
    beta = rng.uniform(*spec.bn_shift, size=mu.shape[0])
    bn_idx = b.add(
        g.batchnorm(f"bn_{name}", gamma * t_out, beta * t_out, mu, var, _BN_EPS),
        [affine_idx],
    )
    if act_name is None:
        return bn_idx
    fn = relu6() if act_name == "relu6" else relu()
    return b.add(g.activation(f"act_{name}", fn), [bn_idx])


def _build_plain(spec: ZooSpec, rng: np.random.Generator, probe: np.ndarray) -> _Builder:
    b = _Builder((spec.widths[0],), probe)
    prev, t_prev = g.INPUT, None
    for k in range(spec.depth):
        w = _prepare_weight(rng, g.LINEAR, (spec.widths[k + 1], spec.widths[k]), t_prev)
        idx = b.add(g.linear(f"fc{k}", w, np.zeros(spec.widths[k + 1])), [prev])
        t_prev = _imbalance(rng, spec.widths[k + 1], spec.kappa)
        prev = _norm_act_unit(b, rng, spec, f"fc{k}", idx, t_prev, spec.act)
    w = _prepare_weight(rng, g.LINEAR, (spec.classes, spec.widths[-1]), t_prev, renorm=False)
    b.add(g.linear("head", w, np.zeros(spec.classes)), [prev])
    return b


def _build_depthwise(spec: ZooSpec, rng: np.random.Generator, probe: np.ndarray) -> _Builder:
    hw = spec.input_hw
    b = _Builder((spec.widths[0], hw, hw), probe)
    prev, t_prev = g.INPUT, None
    for k in range(spec.depth):
        c, c_next = spec.widths[k], spec.widths[k + 1]
        w = _prepare_weight(rng, g.DEPTHWISE_CONV2D, (c, 1, 3, 3), t_prev)
        idx = b.add(g.depthwise_conv2d(f"dw{k}", w, np.zeros(c)), [prev])
        t_mid = _imbalance(rng, c, spec.kappa)
        prev = _norm_act_unit(b, rng, spec, f"dw{k}", idx, t_mid, spec.act)
        hw -= 2
        w = _prepare_weight(rng, g.CONV2D, (c_next, c, 1, 1), t_mid)
        idx = b.add(g.conv2d(f"pw{k}", w, np.zeros(c_next)), [prev])
        t_prev = _imbalance(rng, c_next, spec.kappa)
        prev = _norm_act_unit(b, rng, spec, f"pw{k}", idx, t_prev, spec.act)
    w = _prepare_weight(
        rng, g.CONV2D, (spec.classes, spec.widths[-1], hw, hw), t_prev, renorm=False
    )
    b.add(g.conv2d("head", w, np.zeros(spec.classes)), [prev])
    return b


def _build_residual(spec: ZooSpec, rng: np.random.Generator, probe: np.ndarray) -> _Builder:
    c = spec.widths[0]
    hw = spec.input_hw
    b = _Builder((c, hw, hw), probe)
    w = _prepare_weight(rng, g.CONV2D, (c, c, 3, 3), None)
    idx = b.add(g.conv2d("stem", w, np.zeros(c), padding=1), [g.INPUT])
    # Block boundaries cross residual adds, which equalization must not span,
    # so only the inside-block interface carries imbalance.
    prev = _norm_act_unit(b, rng, spec, "stem", idx, np.ones(c), spec.act)
    for k in range(spec.depth):
        skip = prev
        w = _prepare_weight(rng, g.CONV2D, (c, c, 3, 3), None)
        idx = b.add(g.conv2d(f"block{k}_conv1", w, np.zeros(c), padding=1), [prev])
        t_mid = _imbalance(rng, c, spec.kappa)
        prev = _norm_act_unit(b, rng, spec, f"block{k}_conv1", idx, t_mid, spec.act)
        w = _prepare_weight(rng, g.CONV2D, (c, c, 3, 3), t_mid)
        idx = b.add(g.conv2d(f"block{k}_conv2", w, np.zeros(c), padding=1), [prev])
        bn_idx = _norm_act_unit(b, rng, spec, f"block{k}_conv2", idx, np.ones(c), None)
        add_idx = b.add(g.residual_add(f"block{k}_add"), [skip, bn_idx])
        fn = relu6() if spec.act == "relu6" else relu()
        prev = b.add(g.activation(f"block{k}_act", fn), [add_idx])
    w = _prepare_weight(rng, g.CONV2D, (spec.classes, c, hw, hw), None, renorm=False)
    b.add(g.conv2d("head", w, np.zeros(spec.classes)), [prev])
    return b


def generate(spec: ZooSpec) -> tuple[LayerGraph, np.ndarray, np.ndarray]:
    """Build the model and dataset for ``spec``.

    Returns (graph, inputs, labels): inputs [n_examples, *input_shape] drawn
    standard-normal, labels the argmax of the model's own float32 outputs.
    Deterministic in ``spec.seed`` down to the bit level.
    """
    spec.check()
    rng = np.random.default_rng(spec.seed)
    if spec.block == "plain_chain":
        shape: tuple[int, ...] = (spec.widths[0],)
    else:
        shape = (spec.widths[0], spec.input_hw, spec.input_hw)
    inputs = rng.standard_normal((spec.n_examples, *shape), dtype=DTYPE)
    if spec.block == "plain_chain":
        b = _build_plain(spec, rng, inputs)
    elif spec.block == "depthwise_separable":
        b = _build_depthwise(spec, rng, inputs)
    else:
        b = _build_residual(spec, rng, inputs)
    graph = b.graph()
    graph.validate()
    logits = b.outs[-1]
    labels = logits.reshape(logits.shape[0], -1).argmax(axis=1).astype(np.int32)
    return graph, inputs, labels
