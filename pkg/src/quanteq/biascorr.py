"""Quantization bias: Gaussian clipping moments and bias correction.

Quantizing weights perturbs them by eps = W_q - W, which shifts every output
channel's mean by E[eps @ x]. Because the shift is input-independent to first
order, subtracting eps @ E[x] from the layer bias cancels it. E[x] comes from
the batch-norm statistics recorded at folding time: a channel entering the
layer through a clipping activation with bounds [a, b] is a clipped normal

    x = clip(z, a, b),  z ~ N(shift, scale^2)

whose mean and variance have closed forms in phi/Phi (standard normal pdf and
cdf; float64 throughout). Residual-add inputs sum the expectations of their
branches (variances summed as if independent).

The empirical variant needs no statistics: it measures each layer's
per-channel pre-activation mean on calibration data in the float model and in
the weight-quantized model, and subtracts the difference from the bias,
walking layers in topological order so every layer is corrected only after
the layers feeding it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import graph as g
from .engine import _as_batch, _run
from .errors import GraphError, MissingStatsError, QuanteqError, ShapeError
from .graph import LayerGraph
from .quantize import QScheme, quantize_dequantize, weight_qparams
from .tensor import DTYPE

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _phi(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / _SQRT_2PI


def _masses(alpha, beta):
    """Phi(alpha), Phi(beta) - Phi(alpha), and 1 - Phi(beta), without cancellation.

    When the window lies right of the mean, both cdf values sit near 1 and
    their difference keeps only the last few digits; the mirrored survival
    values carry the same difference at full precision.
    """
    ca = ndtr(alpha)
    sb = ndtr(-beta)
    mid = np.where(alpha > -beta, ndtr(-alpha) - sb, ndtr(beta) - ca)
    return ca, mid, sb


def _standardize(mu, sigma, a, b):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(sigma < 0):
        raise QuanteqError("sigma must be non-negative")
    if np.any(a > b):
        raise QuanteqError("clip range must satisfy a <= b")
    mu, sigma, a, b = np.broadcast_arrays(mu, sigma, a, b)
    safe = np.where(sigma > 0, sigma, 1.0)
    alpha = (a - mu) / safe
    beta = (b - mu) / safe
    # Bounds at +-inf contribute through terms that carry an exactly-zero
    # phi/Phi factor, so replacing them by 0 in the products avoids inf*0.
    a_fin = np.where(np.isfinite(a), a, 0.0)
    b_fin = np.where(np.isfinite(b), b, 0.0)
    return mu, sigma, a, b, a_fin, b_fin, alpha, beta


def clipped_normal_mean(mu, sigma, a, b):
    """E[clip(z, a, b)] for z ~ N(mu, sigma^2); bounds may be +-inf.

    Vectorizes over broadcastable arguments; sigma == 0 degenerates to
    clip(mu, a, b).
    """
    mu, sigma, a, b, a_fin, b_fin, alpha, beta = _standardize(mu, sigma, a, b)
    ca, mid, sb = _masses(alpha, beta)
    mean = sigma * (_phi(alpha) - _phi(beta)) + mu * mid + a_fin * ca + b_fin * sb
    mean = np.where(sigma > 0, mean, np.clip(mu, a, b))
    return mean if mean.ndim else float(mean)


def clipped_normal_var(mu, sigma, a, b):
    """Var[clip(z, a, b)] for z ~ N(mu, sigma^2); bounds may be +-inf."""
    mu, sigma, a, b, a_fin, b_fin, alpha, beta = _standardize(mu, sigma, a, b)
    pa, pb = _phi(alpha), _phi(beta)
    ca, mid, sb = _masses(alpha, beta)
    mc = sigma * (pa - pb) + mu * mid + a_fin * ca + b_fin * sb
    var = (
        mid * (mu**2 + sigma**2 + mc**2 - 2.0 * mc * mu)
        + sigma * (a_fin * pa - b_fin * pb)
        + sigma * (mu - 2.0 * mc) * (pa - pb)
        + (a_fin - mc) ** 2 * ca
        + (b_fin - mc) ** 2 * sb
    )
    var = np.where(sigma > 0, np.maximum(var, 0.0), 0.0)
    return var if var.ndim else float(var)


def truncated_normal_mean(mu, sigma, a, b):
    """E[z | a <= z <= b] for z ~ N(mu, sigma^2).

    When the window holds essentially no mass the conditional degenerates;
    the nearest point of [a, b] to mu is returned as the limit.
    """
    mu, sigma, a, b, _, _, alpha, beta = _standardize(mu, sigma, a, b)
    _, z, _ = _masses(alpha, beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = mu + sigma * (_phi(alpha) - _phi(beta)) / z
    out = np.where((z > 1e-300) & (sigma > 0), inner, np.clip(mu, a, b))
    return out if out.ndim else float(out)


@dataclass
class ClipMoments:
    """Mean and variance of per-channel clipped-normal activations."""

    mean: np.ndarray
    var: np.ndarray


def clip_moments(mu, sigma, a, b) -> ClipMoments:
    return ClipMoments(
        mean=np.atleast_1d(clipped_normal_mean(mu, sigma, a, b)),
        var=np.atleast_1d(clipped_normal_var(mu, sigma, a, b)),
    )


# -- statistics flow through the graph ---------------------------------------


def _clip_bounds_per_channel(layer: g.Layer, channels: int) -> tuple[np.ndarray, np.ndarray]:
    fns = layer.act
    if len(fns) not in (1, channels):
        raise ShapeError(
            f"activation {layer.name!r}: {len(fns)} functions for {channels} channels"
        )
    for fn in fns:
        if not fn.is_clipped_linear():
            raise MissingStatsError(
                f"activation {layer.name!r} ({fn.name}) is not a clip; cannot "
                f"propagate Gaussian statistics through it"
            )
    bounds = [fn.clip_bounds() for fn in fns]
    lo = np.array([bb[0] for bb in bounds])
    hi = np.array([bb[1] for bb in bounds])
    if len(fns) == 1:
        lo = np.full(channels, lo[0])
        hi = np.full(channels, hi[0])
    return lo, hi


def node_output_moments(graph: LayerGraph, idx: int) -> ClipMoments:
    """Per-channel (mean, var) estimate of layer ``idx``'s output.

    Affine layers report their recorded batch-norm statistics, activations
    apply the clipped-normal moments, residual adds sum branch moments
    (independence estimate).
    """
    layer = graph.layers[idx]
    if layer.is_affine:
        if layer.eff_shift is None or layer.eff_scale is None:
            raise MissingStatsError(
                f"layer {layer.name!r} carries no batch-norm statistics"
            )
        mu = layer.eff_shift.astype(np.float64)
        sd = layer.eff_scale.astype(np.float64)
        return ClipMoments(mean=mu, var=sd**2)
    if layer.kind == g.ACTIVATION:
        (p,) = graph.producers(idx)
        if p == g.INPUT:
            raise MissingStatsError(
                f"activation {layer.name!r} reads the raw network input"
            )
        m = node_output_moments(graph, p)
        lo, hi = _clip_bounds_per_channel(layer, m.mean.shape[0])
        sd = np.sqrt(m.var)
        return ClipMoments(
            mean=np.atleast_1d(clipped_normal_mean(m.mean, sd, lo, hi)),
            var=np.atleast_1d(clipped_normal_var(m.mean, sd, lo, hi)),
        )
    if layer.kind == g.RESIDUAL_ADD:
        mean, var = None, None
        for p in graph.producers(idx):
            if p == g.INPUT:
                raise MissingStatsError(
                    f"residual add {layer.name!r} reads the raw network input"
                )
            m = node_output_moments(graph, p)
            mean = m.mean if mean is None else mean + m.mean
            var = m.var if var is None else var + m.var
        return ClipMoments(mean=mean, var=var)
    raise MissingStatsError(f"no statistics for {layer.kind} layer {layer.name!r}")


def expected_input(graph: LayerGraph, idx: int) -> np.ndarray:
    """Per-channel E[x] of the input feeding affine layer ``idx``."""
    layer = graph.layers[idx]
    if not layer.is_affine:
        raise GraphError(f"layer {layer.name!r} is not affine")
    (p,) = graph.producers(idx)
    if p == g.INPUT:
        raise MissingStatsError(
            f"layer {layer.name!r} reads the network input, which carries no "
            f"batch-norm statistics"
        )
    return node_output_moments(graph, p).mean


def expected_output_error(layer: g.Layer, qlayer: g.Layer, expected_in: np.ndarray) -> np.ndarray:
    """Per-output-channel E[(W_q - W) @ x] given per-channel E[x].

    Convolutions fold the error spatially (sum over kernel taps) before
    weighting by E[x]; this treats E[x] as spatially uniform, exact for
    unpadded convolutions and an interior approximation otherwise.
    """
    if layer.kind != qlayer.kind or layer.weight.shape != qlayer.weight.shape:
        raise ShapeError(
            f"layers {layer.name!r} and {qlayer.name!r} are not the same shape"
        )
    eps = qlayer.weight.astype(np.float64) - layer.weight.astype(np.float64)
    e = np.asarray(expected_in, dtype=np.float64)
    if layer.kind == g.LINEAR:
        want = layer.weight.shape[1]
    elif layer.kind == g.CONV2D:
        want = layer.weight.shape[1]
    else:
        want = layer.weight.shape[0]
    if e.shape != (want,):
        raise ShapeError(f"expected_in shape {e.shape} != ({want},)")
    if layer.kind == g.LINEAR:
        return eps @ e
    if layer.kind == g.CONV2D:
        return eps.sum(axis=(2, 3)) @ e
    return eps[:, 0].sum(axis=(1, 2)) * e


def bias_correct_analytic(
    graph: LayerGraph,
    scheme: QScheme | None,
    reference: LayerGraph | None = None,
) -> tuple[LayerGraph, dict]:
    """Subtract each layer's expected quantization-induced mean shift.

    Per affine layer: deploy-time weights are the layer's weights passed
    through their grid (``scheme``; pass None when the graph's weights are
    already the deployed values, e.g. after clipping), the error is measured
    against ``reference`` (default: the graph itself), folded with E[x] from
    upstream statistics, and subtracted from the bias. Layers with no
    recoverable input statistics (nothing with batch-norm upstream) are
    skipped and reported.
    """
    out = graph.copy()
    ref = reference if reference is not None else graph
    if len(ref.layers) != len(out.layers):
        raise GraphError("reference graph does not match")
    corrected: dict[str, np.ndarray] = {}
    skipped: dict[str, str] = {}
    for idx, layer in enumerate(out.layers):
        if not layer.is_affine:
            continue
        try:
            e_x = expected_input(out, idx)
        except MissingStatsError as exc:
            skipped[layer.name] = str(exc)
            continue
        if scheme is not None:
            deployed = layer.copy()
            deployed.weight = quantize_dequantize(
                layer.weight, weight_qparams(layer.weight, scheme)
            )
        else:
            deployed = layer
        shift = expected_output_error(ref.layers[idx], deployed, e_x)
        layer.bias = (layer.bias - shift.astype(DTYPE)).astype(DTYPE)
        corrected[layer.name] = shift
    return out, {"corrected": corrected, "skipped": skipped}


# -- empirical path -----------------------------------------------------------


def _check_twins(fp_graph: LayerGraph, q_graph: LayerGraph) -> None:
    if len(fp_graph.layers) != len(q_graph.layers):
        raise GraphError("graphs differ in layer count")
    for a, b in zip(fp_graph.layers, q_graph.layers):
        if a.kind != b.kind or a.name != b.name:
            raise GraphError(
                f"graphs are not structural twins at {a.name!r} vs {b.name!r}"
            )


def _affine_output_means(
    graph: LayerGraph, batches: list[np.ndarray], only: int | None = None
) -> dict[int, np.ndarray]:
    """Per-channel mean of each affine layer's output over all batches."""
    idxs = [
        i for i, l in enumerate(graph.layers)
        if l.is_affine and (only is None or i == only)
    ]
    sums = {i: 0.0 for i in idxs}
    counts = {i: 0 for i in idxs}
    for xb in batches:
        xb, _ = _as_batch(graph, np.asarray(xb, dtype=np.float32))
        _, caps = _run(graph, xb, capture=True)
        for i in idxs:
            t = caps[i].astype(np.float64)
            ax = (0,) if t.ndim == 2 else (0, 2, 3)
            sums[i] = sums[i] + t.sum(axis=ax)
            counts[i] += t.size // t.shape[1]
    return {i: sums[i] / counts[i] for i in idxs}


def measure_biased_error(
    fp_graph: LayerGraph, q_graph: LayerGraph, batches: list[np.ndarray]
) -> dict[str, np.ndarray]:
    """Per-channel mean pre-activation error (quantized minus float) per layer."""
    _check_twins(fp_graph, q_graph)
    fp_means = _affine_output_means(fp_graph, batches)
    q_means = _affine_output_means(q_graph, batches)
    return {
        fp_graph.layers[i].name: q_means[i] - fp_means[i] for i in fp_means
    }


def bias_correct_empirical(
    fp_graph: LayerGraph, q_graph: LayerGraph, batches: list[np.ndarray]
) -> tuple[LayerGraph, dict[str, np.ndarray]]:
    """Remove measured per-channel mean error on calibration data, in place
    of statistics.

    ``q_graph`` holds the deployed weights (already quantized and/or clipped;
    activations stay in float during the procedure), ``fp_graph`` the float
    reference with identical structure. Layers are corrected first-to-last so
    each measurement sees all upstream layers already corrected. Returns the
    corrected graph and the per-layer shift that was subtracted.
    """
    _check_twins(fp_graph, q_graph)
    if not batches:
        raise QuanteqError("empirical bias correction needs calibration batches")
    out = q_graph.copy()
    fp_means = _affine_output_means(fp_graph, batches)
    shifts: dict[str, np.ndarray] = {}
    for idx in sorted(fp_means):
        q_mean = _affine_output_means(out, batches, only=idx)[idx]
        delta = q_mean - fp_means[idx]
        layer = out.layers[idx]
        layer.bias = (layer.bias - delta.astype(DTYPE)).astype(DTYPE)
        shifts[layer.name] = delta
    return out, shifts


def clip_weights(graph: LayerGraph, lo: float, hi: float) -> LayerGraph:
    """Clamp every affine weight to [lo, hi] (outlier-range baseline).

    Changes the network function; pair with bias correction against the
    unclipped reference to restore output means.
    """
    if not lo < hi:
        raise QuanteqError(f"clip range [{lo}, {hi}] is empty")
    out = graph.copy()
    for layer in out.layers:
        if layer.is_affine:
            layer.weight = np.clip(layer.weight, DTYPE(lo), DTYPE(hi))
    return out
