"""Deterministic forward passes: float32 reference and quantization simulation.

``forward_fp32`` evaluates the graph in topological order in plain float32.
``forward_quantsim`` simulates fixed-point deployment: every affine layer's
weights are passed through quantize_dequantize once (per-tensor or
per-channel), and each activation output and residual-add output is passed
through a per-tensor (or per-channel) activation grid. Activation grids are
derived without data, from the batch-norm statistics the fold recorded:
range = shift +- n * scale, clipped from below by the activation's floor.
A residual add's range is estimated from its branches (means add, scales
combine root-sum-square, treating branches as independent).

The network input and the final layer's raw output are left unquantized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as g
from .errors import GraphError, MissingStatsError, NumericalError, ShapeError
from .graph import LayerGraph
from .quantize import (
    QParams,
    QScheme,
    activation_range_from_bn,
    make_qparams,
    quantize_dequantize,
    weight_qparams,
)
from .tensor import conv2d as _conv2d
from .tensor import depthwise_conv2d as _depthwise
from .tensor import matmul as _matmul


@dataclass
class QuantSimConfig:
    """How simulation quantizes: weight grids, activation grids, range source.

    ``act_range_n`` is the +-n*scale width of batch-norm derived activation
    ranges. ``explicit_act_ranges`` overrides derivation with fixed
    (lo, hi) per activation/add layer name.
    """

    weight_scheme: QScheme = field(default_factory=lambda: QScheme(8, symmetric=False))
    act_scheme: QScheme = field(default_factory=lambda: QScheme(8, symmetric=False))
    act_range_n: float = 6.0
    explicit_act_ranges: dict[str, tuple[float, float]] | None = None


def _eval_layer(layer: g.Layer, inputs: list[np.ndarray]) -> np.ndarray:
    kind = layer.kind
    if kind == g.RESIDUAL_ADD:
        out = inputs[0]
        for other in inputs[1:]:
            out = out + other
        return out
    (x,) = inputs
    if kind == g.LINEAR:
        return _matmul(layer.weight, x, layer.bias)
    if kind == g.CONV2D:
        return _conv2d(layer.weight, x, layer.bias, layer.stride, layer.padding)
    if kind == g.DEPTHWISE_CONV2D:
        return _depthwise(layer.weight, x, layer.bias, layer.stride, layer.padding)
    if kind == g.BATCHNORM:
        bn = layer.bn
        shape = (1, bn.gamma.shape[0]) + (1,) * (x.ndim - 2)
        inv = (bn.gamma / np.sqrt(bn.var + np.float32(bn.epsilon))).reshape(shape)
        return (x - bn.mean.reshape(shape)) * inv + bn.beta.reshape(shape)
    if kind == g.ACTIVATION:
        fns = layer.act
        if len(fns) == 1:
            return fns[0](x)
        if x.shape[1] != len(fns):
            raise ShapeError(
                f"{layer.name}: {len(fns)} per-channel functions, input has "
                f"{x.shape[1]} channels"
            )
        out = np.empty_like(x)
        for c, fn in enumerate(fns):
            out[:, c] = fn(x[:, c])
        return out
    raise GraphError(f"cannot evaluate layer kind {kind!r}")


def _run(
    graph: LayerGraph,
    x: np.ndarray,
    post: dict[int, QParams] | None = None,
    capture: bool = False,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Evaluate all layers on a batched input; optionally keep every output."""
    outputs: list[np.ndarray | None] = [None] * len(graph.layers)
    last_use = {}
    for i in range(len(graph.layers)):
        for p in graph.producers(i):
            last_use[p] = i
    for i, layer in enumerate(graph.layers):
        ins = [x if p == g.INPUT else outputs[p] for p in graph.producers(i)]
        out = _eval_layer(layer, ins)
        if post is not None and i in post:
            out = quantize_dequantize(out, post[i])
        outputs[i] = out
        if not capture:  # free tensors that no later layer reads
            for p in graph.producers(i):
                if p != g.INPUT and last_use.get(p) == i:
                    outputs[p] = None
    final = outputs[graph.output_index()]
    return final, (outputs if capture else None)  # type: ignore[return-value]


def _as_batch(graph: LayerGraph, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    if x.shape == graph.input_shape:
        return x[None], True
    if x.shape[1:] == graph.input_shape:
        return x, False
    raise ShapeError(
        f"input shape {x.shape} does not match graph input {graph.input_shape} "
        f"(with or without a leading batch dimension)"
    )


def forward_fp32(graph: LayerGraph, x: np.ndarray) -> np.ndarray:
    """Reference float32 forward pass (single input or batch)."""
    xb, single = _as_batch(graph, x)
    out, _ = _run(graph, xb)
    return out[0] if single else out


def branch_stats(graph: LayerGraph, idx: int) -> tuple[np.ndarray, np.ndarray]:
    """(shift, scale) per channel describing layer ``idx``'s output spread.

    Affine layers report their recorded batch-norm statistics; activations
    pass their producer's through unchanged (the range derivation applies the
    clip floor itself); residual adds sum shifts and combine scales
    root-sum-square, an estimate that treats branches as independent.
    """
    layer = graph.layers[idx]
    if layer.is_affine:
        if layer.eff_shift is None or layer.eff_scale is None:
            raise MissingStatsError(
                f"layer {layer.name!r} has no batch-norm statistics to derive "
                f"activation ranges from"
            )
        return layer.eff_shift.astype(np.float64), layer.eff_scale.astype(np.float64)
    if layer.kind == g.ACTIVATION:
        (p,) = graph.producers(idx)
        if p == g.INPUT:
            raise MissingStatsError(f"activation {layer.name!r} reads the raw input")
        return branch_stats(graph, p)
    if layer.kind == g.RESIDUAL_ADD:
        shifts, variances = None, None
        for p in graph.producers(idx):
            if p == g.INPUT:
                raise MissingStatsError(
                    f"residual add {layer.name!r} reads the raw input"
                )
            s, sc = branch_stats(graph, p)
            shifts = s if shifts is None else shifts + s
            variances = sc**2 if variances is None else variances + sc**2
        return shifts, np.sqrt(variances)
    raise MissingStatsError(f"no statistics available for {layer.kind} layer")


def activation_qparams(graph: LayerGraph, cfg: QuantSimConfig) -> dict[int, QParams]:
    """One grid per activation/residual-add node, keyed by layer index."""
    grids: dict[int, QParams] = {}
    explicit = cfg.explicit_act_ranges or {}
    for idx, layer in enumerate(graph.layers):
        if layer.kind not in (g.ACTIVATION, g.RESIDUAL_ADD):
            continue
        if layer.name in explicit:
            lo, hi = explicit[layer.name]
            lo = np.asarray(lo, dtype=np.float64)
            hi = np.asarray(hi, dtype=np.float64)
        else:
            if layer.kind == g.ACTIVATION:
                (p,) = graph.producers(idx)
                if p == g.INPUT:
                    raise MissingStatsError(
                        f"activation {layer.name!r} reads the raw input; give it "
                        f"an explicit range"
                    )
                shift, scale = branch_stats(graph, p)
                lo, hi = activation_range_from_bn(
                    shift, scale, cfg.act_range_n, layer.act
                )
            else:
                shift, scale = branch_stats(graph, idx)
                lo = shift - cfg.act_range_n * scale
                hi = shift + cfg.act_range_n * scale
        if cfg.act_scheme.per_channel:
            grids[idx] = make_qparams(lo, hi, cfg.act_scheme)
        else:
            grids[idx] = make_qparams(float(np.min(lo)), float(np.max(hi)), cfg.act_scheme)
    return grids


def quantize_graph_weights(
    graph: LayerGraph, scheme: QScheme
) -> tuple[LayerGraph, dict[str, QParams]]:
    """Copy of the graph with every affine weight passed through its grid."""
    out = graph.copy()
    params: dict[str, QParams] = {}
    for layer in out.layers:
        if layer.is_affine:
            qp = weight_qparams(layer.weight, scheme)
            layer.weight = quantize_dequantize(layer.weight, qp)
            params[layer.name] = qp
    return out, params


def forward_quantsim(graph: LayerGraph, x: np.ndarray, cfg: QuantSimConfig) -> np.ndarray:
    """Simulated fixed-point forward pass (single input or batch)."""
    xb, single = _as_batch(graph, x)
    baked, _ = quantize_graph_weights(graph, cfg.weight_scheme)
    post = activation_qparams(baked, cfg)
    out, _ = _run(baked, xb, post=post)
    return out[0] if single else out


@dataclass
class EvalResult:
    """Quality metrics of a (possibly simulated fixed-point) model."""

    n_examples: int
    fp32_accuracy: float | None
    accuracy: float | None
    mean_abs_deviation: float
    max_abs_deviation: float
    per_layer_sqnr_db: dict[str, float | None]
    per_layer_bias: dict[str, dict[str, float]]

    def to_json(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "fp32_accuracy": self.fp32_accuracy,
            "accuracy": self.accuracy,
            "mean_abs_deviation": self.mean_abs_deviation,
            "max_abs_deviation": self.max_abs_deviation,
            "per_layer_sqnr_db": self.per_layer_sqnr_db,
            "per_layer_bias": self.per_layer_bias,
        }


def _argmax_classes(out: np.ndarray) -> np.ndarray:
    return out.reshape(out.shape[0], -1).argmax(axis=1)


def evaluate(
    graph: LayerGraph,
    inputs: np.ndarray,
    labels: np.ndarray | None = None,
    cfg: QuantSimConfig | None = None,
    batch_size: int = 256,
    deployed: LayerGraph | None = None,
) -> EvalResult:
    """Run the model over a dataset and score it against its float32 twin.

    Without ``cfg`` this is a plain float32 evaluation (deviation metrics are
    zero). With ``cfg`` the quantized simulation runs alongside the float32
    twin of the same graph: accuracy is scored for the simulated model,
    deviations and per-layer SQNR compare the two, and per-layer bias is the
    per-channel mean output difference (largest and average magnitudes).
    ``deployed`` substitutes a structurally identical graph (same layers,
    different parameters, e.g. after bias correction) as the model under
    simulation; weight grids still apply, a no-op when already baked.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.shape[1:] != graph.input_shape:
        raise ShapeError(
            f"dataset inputs {inputs.shape[1:]} do not match graph input "
            f"{graph.input_shape}"
        )
    n = inputs.shape[0]
    if labels is not None and len(labels) != n:
        raise ShapeError("labels length does not match inputs")
    if cfg is not None:
        target = graph if deployed is None else deployed
        if len(target.layers) != len(graph.layers) or any(
            a.kind != b.kind for a, b in zip(target.layers, graph.layers)
        ):
            raise GraphError("deployed graph does not mirror the reference graph")
        baked, _ = quantize_graph_weights(target, cfg.weight_scheme)
        post = activation_qparams(baked, cfg)
    names = [l.name for l in graph.layers]
    sig = np.zeros(len(names))
    noise = np.zeros(len(names))
    bias_sum: list[np.ndarray | None] = [None] * len(names)
    bias_count = np.zeros(len(names))
    dev_sum = 0.0
    dev_count = 0
    dev_max = 0.0
    fp_hits = 0
    q_hits = 0
    for start in range(0, n, batch_size):
        xb = inputs[start : start + batch_size]
        fp_out, fp_caps = _run(graph, xb, capture=cfg is not None)
        if not np.all(np.isfinite(fp_out)):
            raise NumericalError("float32 forward produced non-finite outputs")
        if labels is not None:
            fp_hits += int(np.sum(_argmax_classes(fp_out) == labels[start : start + batch_size]))
        if cfg is None:
            continue
        q_out, q_caps = _run(baked, xb, post=post, capture=True)
        if not np.all(np.isfinite(q_out)):
            raise NumericalError("quantized forward produced non-finite outputs")
        if labels is not None:
            q_hits += int(np.sum(_argmax_classes(q_out) == labels[start : start + batch_size]))
        diff = np.abs(q_out.astype(np.float64) - fp_out.astype(np.float64))
        dev_sum += float(diff.sum())
        dev_count += diff.size
        dev_max = max(dev_max, float(diff.max()))
        for i, (f_t, q_t) in enumerate(zip(fp_caps, q_caps)):
            f64 = f_t.astype(np.float64)
            e = q_t.astype(np.float64) - f64
            sig[i] += float(np.sum(f64 * f64))
            noise[i] += float(np.sum(e * e))
            if graph.layers[i].is_affine:
                ax = (0,) if e.ndim == 2 else (0, 2, 3)
                ch_sum = e.sum(axis=ax)
                cnt = e.size // e.shape[1]
                bias_sum[i] = ch_sum if bias_sum[i] is None else bias_sum[i] + ch_sum
                bias_count[i] += cnt
    sqnr: dict[str, float | None] = {}
    bias: dict[str, dict[str, float]] = {}
    if cfg is not None:
        for i, name in enumerate(names):
            if noise[i] == 0.0:
                sqnr[name] = None
            else:
                sqnr[name] = float(10.0 * np.log10(sig[i] / noise[i])) if sig[i] > 0 else None
            if bias_sum[i] is not None and bias_count[i] > 0:
                ch = np.abs(bias_sum[i] / bias_count[i])
                bias[name] = {"mean_abs": float(ch.mean()), "max_abs": float(ch.max())}
    return EvalResult(
        n_examples=n,
        fp32_accuracy=(fp_hits / n) if labels is not None else None,
        accuracy=(q_hits / n) if labels is not None and cfg is not None else None,
        mean_abs_deviation=(dev_sum / dev_count) if dev_count else 0.0,
        max_abs_deviation=dev_max,
        per_layer_sqnr_db=sqnr,
        per_layer_bias=bias,
    )
