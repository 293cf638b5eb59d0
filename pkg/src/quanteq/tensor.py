"""Dense float32 tensor helpers.

Tensors are plain numpy float32 arrays of rank 1..4. The reference
convolutions below are written im2col-style on top of np.matmul/np.einsum so
the accumulation order is fixed by the patch layout: within one output
element the reduction runs over (in_channel, kernel_row, kernel_col) in that
order. Repeated runs on identical inputs therefore produce identical bits,
which the equalization and serialization tests rely on.

Weight layouts:
    linear     [out_features, in_features]
    conv2d     [out_channels, in_channels, kh, kw]
    depthwise  [channels, 1, kh, kw]
Activations: [channels, h, w] or [batch, channels, h, w]; linear inputs
[features] or [batch, features].
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def as_f32(x) -> np.ndarray:
    """Coerce to a float32 ndarray (copying only when needed)."""
    return np.asarray(x, dtype=DTYPE)


def channel_slice(t: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Return the view of ``t`` at ``index`` along ``axis``.

    The result shares memory with ``t``: writes through the slice are visible
    in the parent. Raises ShapeError on a bad axis or an out-of-range index
    (negative indices are rejected rather than wrapped).
    """
    t = np.asarray(t)
    if not 0 <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank-{t.ndim} tensor")
    if not 0 <= index < t.shape[axis]:
        raise ShapeError(
            f"index {index} out of range for axis {axis} of length {t.shape[axis]}"
        )
    sl = [slice(None)] * t.ndim
    sl[axis] = index
    return t[tuple(sl)]


def matmul(weight: np.ndarray, x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``weight @ x + bias`` for a linear layer.

    ``x`` may be a single feature vector [in] or a batch [n, in]; the result
    has shape [out] or [n, out] accordingly.
    """
    weight = as_f32(weight)
    x = as_f32(x)
    bias = as_f32(bias)
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be rank 2, got rank {weight.ndim}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    if x.ndim == 1:
        if x.shape[0] != weight.shape[1]:
            raise ShapeError(f"input length {x.shape[0]} != in_features {weight.shape[1]}")
        return weight @ x + bias
    if x.ndim == 2:
        if x.shape[1] != weight.shape[1]:
            raise ShapeError(f"input width {x.shape[1]} != in_features {weight.shape[1]}")
        return x @ weight.T + bias
    raise ShapeError(f"linear input must be rank 1 or 2, got rank {x.ndim}")


def _out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"does not fit input {h}x{w}"
        )
    return ho, wo


def _patches(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Gather conv patches: [n, c, h, w] -> [n, c, kh, kw, ho, wo]."""
    n, c, h, w = x.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    for m in range(kh):
        for k in range(kw):
            out[:, :, m, k] = x[:, :, m : m + stride * ho : stride, k : k + stride * wo : stride]
    return out


def conv2d(
    weight: np.ndarray,
    x: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    weight [out_c, in_c, kh, kw]; x [in_c, h, w] or [n, in_c, h, w];
    bias [out_c]. Returns [out_c, ho, wo] (or batched).
    """
    weight = as_f32(weight)
    bias = as_f32(bias)
    x = as_f32(x)
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be rank 4, got rank {weight.ndim}")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 3 or 4, got rank {x.ndim}")
    oc, ic, kh, kw = weight.shape
    if x.shape[1] != ic:
        raise ShapeError(f"input channels {x.shape[1]} != weight in_channels {ic}")
    if bias.shape != (oc,):
        raise ShapeError(f"bias shape {bias.shape} != ({oc},)")
    p = _patches(x, kh, kw, stride, padding)
    n, _, _, _, ho, wo = p.shape
    # One matmul per batch: [oc, ic*kh*kw] @ [ic*kh*kw, ho*wo].
    cols = p.reshape(n, ic * kh * kw, ho * wo)
    out = np.matmul(weight.reshape(oc, ic * kh * kw)[None], cols)
    out = out.reshape(n, oc, ho, wo) + bias[None, :, None, None]
    return out[0] if single else out


def depthwise_conv2d(
    weight: np.ndarray,
    x: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Per-channel 2-D cross-correlation (channel multiplier 1).

    weight [channels, 1, kh, kw]; x [channels, h, w] or [n, channels, h, w].
    """
    weight = as_f32(weight)
    bias = as_f32(bias)
    x = as_f32(x)
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be [c, 1, kh, kw], got {weight.shape}")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"depthwise input must be rank 3 or 4, got rank {x.ndim}")
    c, _, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"input channels {x.shape[1]} != weight channels {c}")
    if bias.shape != (c,):
        raise ShapeError(f"bias shape {bias.shape} != ({c},)")
    p = _patches(x, kh, kw, stride, padding)
    out = np.einsum("cmk,ncmkhw->nchw", weight[:, 0], p, dtype=DTYPE, casting="same_kind")
    out = out + bias[None, :, None, None]
    return out[0] if single else out
