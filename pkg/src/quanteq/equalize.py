"""Cross-layer range equalization and high-bias absorption.

Positive per-channel rescaling is a symmetry of (affine, piecewise-linear,
affine) chains: with a diagonal S = diag(s), s > 0,

    W2 f(W1 x + b1) + b2  ==  (W2 S) f_hat(S^-1 W1 x + S^-1 b1) + b2

where f_hat rescales each function's offsets and breakpoints by 1/s_i. The
network function is untouched while the per-channel weight ranges move
between the two layers. Equalization picks

    s_i = sqrt(r1_i * r2_i) / r2_i

(r1_i: range of output channel i of layer 1, r2_i: range of the weights of
layer 2 consuming channel i, both measured symmetrically as 2*max|w|), which
makes both realized ranges equal sqrt(r1_i * r2_i) and maximizes the summed
per-channel precision of the pair. Chains sharing layers are swept in
topological order until the largest |log s_i| of a sweep falls under ``tol``.

High-bias absorption shifts c = max(0, shift - multiplier*scale) of a
channel's ReLU output into the following layer's bias: b1 -= c,
b2 += W2 @ c. Exact whenever the pre-activation exceeds c, which under the
recorded batch-norm statistics holds for all but the lower Gaussian tail
(about 0.135% of values per channel at the default multiplier 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as g
from .errors import GraphError, MissingStatsError, ShapeError
from .graph import LayerGraph, find_equalizable_pairs
from .piecewise import PiecewiseLinear, is_exact_relu, relu
from .quantize import RangeMode, channel_ranges
from .tensor import DTYPE


def equalization_scale(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Closed-form per-channel scales for one pair of range vectors.

    Channels where either range is zero get s_i = 1 (nothing to move).
    """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    if r1.shape != r2.shape or r1.ndim != 1:
        raise ShapeError(f"range vectors must match: {r1.shape} vs {r2.shape}")
    if np.any(r1 < 0) or np.any(r2 < 0):
        raise ShapeError("ranges must be non-negative")
    s = np.ones_like(r1)
    ok = (r1 > 0) & (r2 > 0)
    s[ok] = np.sqrt(r1[ok] * r2[ok]) / r2[ok]
    return s


def reparam_piecewise(f: PiecewiseLinear, s: float) -> PiecewiseLinear:
    """f_hat with f(s*x) == s*f_hat(x); see PiecewiseLinear.reparam."""
    return f.reparam(s)


def _consumer_axis(layer: g.Layer) -> int:
    """Axis of ``layer.weight`` indexed by the incoming channel."""
    return 0 if layer.kind == g.DEPTHWISE_CONV2D else 1


def apply_pair_scaling(
    layer1: g.Layer, act: g.Layer, layer2: g.Layer, s: np.ndarray
) -> None:
    """Rescale one (affine, activation, affine) triple in place by ``s``.

    Channel i of layer1 (its weight row, bias entry and recorded statistics)
    is divided by s_i; the weights of layer2 consuming channel i are
    multiplied by s_i; the activation between them is reparameterized.
    Scale-invariant activations (ReLU, PReLU, identity) are left shared;
    anything else becomes per-channel.
    """
    s = np.asarray(s, dtype=np.float64)
    n = layer1.out_channels
    if s.shape != (n,):
        raise ShapeError(f"scale vector shape {s.shape} != ({n},)")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ShapeError("scales must be finite and strictly positive")
    if act.kind != g.ACTIVATION or not act.act:
        raise GraphError(f"{act.name!r} is not an activation layer")
    axis2 = _consumer_axis(layer2)
    if layer2.weight.shape[axis2] != n:
        raise ShapeError(
            f"layer {layer2.name!r} consumes {layer2.weight.shape[axis2]} "
            f"channels, scale vector has {n}"
        )
    s32 = s.astype(DTYPE)
    shape1 = (n,) + (1,) * (layer1.weight.ndim - 1)
    layer1.weight = (layer1.weight / s32.reshape(shape1)).astype(DTYPE)
    layer1.bias = (layer1.bias / s32).astype(DTYPE)
    if layer1.eff_shift is not None:
        layer1.eff_shift = (layer1.eff_shift / s32).astype(DTYPE)
    if layer1.eff_scale is not None:
        layer1.eff_scale = (layer1.eff_scale / s32).astype(DTYPE)
    shape2 = [1] * layer2.weight.ndim
    shape2[axis2] = n
    layer2.weight = (layer2.weight * s32.reshape(shape2)).astype(DTYPE)
    fns = act.act
    if len(fns) == 1 and fns[0].is_scale_invariant():
        pass  # reparameterization is the identity for these
    else:
        if len(fns) not in (1, n):
            raise GraphError(
                f"activation {act.name!r} has {len(fns)} functions for {n} channels"
            )
        act.act = [
            fns[i if len(fns) > 1 else 0].reparam(float(s[i])) for i in range(n)
        ]


def _pair_ranges(
    graph: LayerGraph, pair: tuple[int, int, int]
) -> tuple[np.ndarray, np.ndarray]:
    a = graph.layers[pair[0]]
    b = graph.layers[pair[2]]
    r1 = channel_ranges(a.weight, RangeMode.SYMMETRIC, axis=0).r
    r2 = channel_ranges(b.weight, RangeMode.SYMMETRIC, axis=_consumer_axis(b)).r
    return r1, r2


def _pair_objective(r1: np.ndarray, r2: np.ndarray) -> float:
    """Summed per-channel precision product for one pair."""
    big1, big2 = r1.max(initial=0.0), r2.max(initial=0.0)
    if big1 == 0.0 or big2 == 0.0:
        return 0.0
    return float(np.sum((r1 / big1) * (r2 / big2)))


@dataclass
class EqualizationReport:
    """What an equalization run did, for reports and regression tests."""

    iterations: int
    converged: bool
    max_abs_log_scale: float
    objective_before: float
    objective_after: float
    pairs: list[dict] = field(default_factory=list)
    per_channel_activations: int = 0

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "max_abs_log_scale": self.max_abs_log_scale,
            "objective_before": self.objective_before,
            "objective_after": self.objective_after,
            "per_channel_activations": self.per_channel_activations,
            "pairs": self.pairs,
        }


def equalize_graph(
    graph: LayerGraph, tol: float = 1e-4, max_iters: int = 20
) -> tuple[LayerGraph, EqualizationReport]:
    """Equalize every eligible pair; returns (new graph, report).

    Sweeps the pairs in topological order; a sweep's convergence measure is
    the largest |log s_i| it applied. The transform preserves the network
    function (up to float32 rounding) and is idempotent once converged.
    """
    out = graph.copy()
    pairs = find_equalizable_pairs(out)
    pre = [_pair_ranges(out, p) for p in pairs]
    objective_before = sum(_pair_objective(r1, r2) for r1, r2 in pre)
    iterations = 0
    converged = not pairs
    max_log = 0.0
    while iterations < max_iters and not converged:
        max_log = 0.0
        for ai, mi, bi in pairs:
            r1, r2 = _pair_ranges(out, (ai, mi, bi))
            s = equalization_scale(r1, r2)
            apply_pair_scaling(out.layers[ai], out.layers[mi], out.layers[bi], s)
            max_log = max(max_log, float(np.abs(np.log(s)).max(initial=0.0)))
        iterations += 1
        converged = max_log < tol
    post = [_pair_ranges(out, p) for p in pairs]
    objective_after = sum(_pair_objective(r1, r2) for r1, r2 in post)
    pair_entries = []
    for (ai, mi, bi), (r1b, r2b), (r1a, r2a) in zip(pairs, pre, post):
        pair_entries.append(
            {
                "layer_a": out.layers[ai].name,
                "layer_b": out.layers[bi].name,
                "ranges_before": {"a": r1b.tolist(), "b": r2b.tolist()},
                "ranges_after": {"a": r1a.tolist(), "b": r2a.tolist()},
            }
        )
    per_channel = sum(
        1 for l in out.layers if l.kind == g.ACTIVATION and len(l.act) > 1
    )
    report = EqualizationReport(
        iterations=iterations,
        converged=converged,
        max_abs_log_scale=max_log,
        objective_before=objective_before,
        objective_after=objective_after,
        pairs=pair_entries,
        per_channel_activations=per_channel,
    )
    out.validate()
    return out, report


def replace_relu6(graph: LayerGraph) -> tuple[LayerGraph, int]:
    """Swap every relu6 activation for plain ReLU; returns (graph, count).

    This changes the network function wherever activations used to saturate
    at 6; callers treat the result as the new float reference, trading that
    deviation for per-tensor-friendly activation ranges.
    """
    out = graph.copy()
    count = 0
    for layer in out.layers:
        if layer.kind == g.ACTIVATION and all(f.name == "relu6" for f in layer.act):
            layer.act = [relu()]
            count += 1
    return out, count


def absorb_high_bias(
    layer1: g.Layer,
    act: g.Layer,
    layer2: g.Layer,
    multiplier: float = 3.0,
) -> np.ndarray:
    """Move c = max(0, shift - multiplier*scale) across the ReLU, in place.

    Subtracts c from layer1's bias (and recorded shift) and adds W2 @ c to
    layer2's bias, using the interior-tap spatial sum for convolutions.
    Returns the absorbed vector c. Requires an exact ReLU between the layers
    and batch-norm statistics on layer1.
    """
    if act.kind != g.ACTIVATION or not all(is_exact_relu(f) for f in act.act):
        raise GraphError(
            f"high-bias absorption needs an exact ReLU after {layer1.name!r}"
        )
    if layer1.eff_shift is None or layer1.eff_scale is None:
        raise MissingStatsError(
            f"layer {layer1.name!r} carries no batch-norm statistics; "
            f"fold batch norm before absorbing bias"
        )
    n = layer1.out_channels
    axis2 = _consumer_axis(layer2)
    if layer2.weight.shape[axis2] != n:
        raise ShapeError(
            f"layer {layer2.name!r} does not consume {n} channels"
        )
    shift = layer1.eff_shift.astype(np.float64)
    scale = layer1.eff_scale.astype(np.float64)
    c = np.maximum(0.0, shift - multiplier * scale).astype(DTYPE)
    if not np.any(c > 0):
        return c
    layer1.bias = (layer1.bias - c).astype(DTYPE)
    layer1.eff_shift = (layer1.eff_shift - c).astype(DTYPE)
    if layer2.kind == g.LINEAR:
        delta = layer2.weight @ c
    elif layer2.kind == g.CONV2D:
        delta = layer2.weight.sum(axis=(2, 3)) @ c
    else:  # depthwise
        delta = layer2.weight[:, 0].sum(axis=(1, 2)) * c
    layer2.bias = (layer2.bias + delta).astype(DTYPE)
    return c


def absorb_graph_high_bias(
    graph: LayerGraph, multiplier: float = 3.0
) -> tuple[LayerGraph, dict]:
    """Absorb high biases across every eligible pair of the graph.

    Pairs whose activation is not an exact ReLU or whose producing layer has
    no statistics are skipped; the info dict lists what happened per pair.
    """
    out = graph.copy()
    info: dict = {"absorbed": [], "skipped": []}
    for ai, mi, bi in find_equalizable_pairs(out):
        a, mid, b = out.layers[ai], out.layers[mi], out.layers[bi]
        if not all(is_exact_relu(f) for f in mid.act):
            info["skipped"].append(
                {"layer_a": a.name, "reason": "activation is not exact relu"}
            )
            continue
        if a.eff_shift is None or a.eff_scale is None:
            info["skipped"].append(
                {"layer_a": a.name, "reason": "no batch-norm statistics"}
            )
            continue
        c = absorb_high_bias(a, mid, b, multiplier)
        info["absorbed"].append(
            {
                "layer_a": a.name,
                "layer_b": b.name,
                "channels_shifted": int(np.count_nonzero(c)),
                "max_shift": float(c.max(initial=0.0)),
            }
        )
    out.validate()
    return out, info
