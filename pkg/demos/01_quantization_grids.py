"""
Fixed-point grids and batch-norm folding
========================================

How a float tensor maps onto a uniform integer grid, what the round-trip
costs, why per-channel grids help imbalanced weights, and how a batch-norm
layer disappears into the affine layer before it.
"""

import numpy as np

import quanteq as q

rng = np.random.default_rng(7)

# --- a per-tensor 8-bit grid ------------------------------------------------

w = rng.normal(size=(4, 16)).astype(np.float32)
scheme = q.QScheme(bits=8, symmetric=False)
qp = q.make_qparams(float(w.min()), float(w.max()), scheme)
print("tensor range      ", (float(w.min()), float(w.max())))
print("grid scale        ", qp.scale)
print("grid zero point   ", qp.zero_point)

back = q.quantize_dequantize(w, qp)
err = np.abs(back - w)
print("max round-trip err", float(err.max()), "<= scale/2 =", qp.scale / 2)

# quantizing an already-quantized tensor changes nothing
again = q.quantize_dequantize(back, qp)
print("idempotent        ", bool(np.array_equal(again, back)))

# --- per-channel rescues imbalanced rows -------------------------------------

# one output channel 50x wider than the rest: a shared grid wastes almost all
# of its codes on that channel
w[0] *= 50.0


def sqnr_db(x, y):
    return 10.0 * np.log10(float(np.sum(x * x)) / float(np.sum((x - y) ** 2)))


per_tensor = q.quantize_dequantize(w, q.weight_qparams(w, scheme))
per_channel = q.quantize_dequantize(
    w, q.weight_qparams(w, q.QScheme(bits=8, symmetric=False, per_channel=True))
)
print()
print("imbalanced weight, 8-bit grids (SQNR of the ordinary rows)")
print("  per-tensor  %.1f dB" % sqnr_db(w[1:], per_tensor[1:]))
print("  per-channel %.1f dB" % sqnr_db(w[1:], per_channel[1:]))

# --- batch-norm folding -------------------------------------------------------

# conv followed by batch norm; folding rewrites the conv weights and bias so
# the normalization is free at inference time
conv = q.conv2d("stem", rng.normal(size=(6, 3, 3, 3)).astype(np.float32) / 3.0,
                np.zeros(6, dtype=np.float32), padding=1)
bn = q.batchnorm("stem_bn", gamma=rng.uniform(0.5, 2.0, 6), beta=rng.normal(size=6),
                 mean=rng.normal(size=6), var=rng.uniform(0.5, 2.0, 6))
graph = q.LayerGraph([conv, bn], [(-1, 0), (0, 1)], (3, 8, 8))

folded = q.fold_batch_norm(graph)
x = rng.normal(size=(4, 3, 8, 8)).astype(np.float32)
drift = np.abs(q.forward_fp32(folded, x) - q.forward_fp32(graph, x)).max()
print()
print("layers before fold", [layer.name for layer in graph.layers])
print("layers after fold ", [layer.name for layer in folded.layers])
print("max output drift  ", float(drift))

# folding also records the normalization statistics on the layer; the bias
# correction demo shows what they buy
stem = folded.layers[0]
print("recorded stats    ", "shift" if stem.eff_shift is not None else "-",
      "scale" if stem.eff_scale is not None else "-")
