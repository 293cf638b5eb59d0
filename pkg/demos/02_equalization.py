"""
Cross-layer range equalization and high-bias absorption
=======================================================

A pair of layers joined by a positive-homogeneous activation can trade
per-channel scale freely: divide channel i of the first layer by s_i,
multiply column i of the second by s_i, and the composed function does not
move. Equalization picks the s that balances the two weight ranges so a
shared quantization grid hurts neither layer; absorption then shifts
oversized biases into the next layer so activation grids stay tight.
"""

import numpy as np

import quanteq as q

rng = np.random.default_rng(11)

# --- an imbalanced pair --------------------------------------------------------

# channel 3 of the first layer is 40x wider than its siblings, which squeezes
# every other channel into a few quantization codes
w1 = rng.normal(size=(6, 8)).astype(np.float32)
w1[3] *= 40.0
w2 = (rng.normal(size=(4, 6)) / np.sqrt(6.0)).astype(np.float32)
graph = q.LayerGraph(
    [
        q.linear("up", w1, rng.normal(size=6).astype(np.float32)),
        q.activation("act", q.relu()),
        q.linear("down", w2, rng.normal(size=4).astype(np.float32)),
    ],
    [(-1, 0), (0, 1), (1, 2)],
    (8,),
)

r1 = q.weight_ranges(graph.layers[0].weight).r
print("first-layer channel ranges ", np.round(r1, 2))

balanced, report = q.equalize_graph(graph, max_iters=40)
r1b = q.weight_ranges(balanced.layers[0].weight).r
print("after equalization         ", np.round(r1b, 2))
print("precision objective        ", round(report.objective_before, 3), "->",
      round(report.objective_after, 3))
print("sweeps                     ", report.iterations, "converged:", report.converged)

# the rescaling is exactly function-preserving up to float rounding
x = rng.normal(size=(16, 8)).astype(np.float32)
drift = np.abs(q.forward_fp32(balanced, x) - q.forward_fp32(graph, x)).max()
print("max output drift           ", float(drift))

# --- what it buys at 8 bits ----------------------------------------------------


def quantized_rmse(g):
    dep = q.quantize_graph_weights(g, q.QScheme(bits=8, symmetric=False))[0]
    ref = q.forward_fp32(g, x)
    return float(np.sqrt(np.mean((q.forward_fp32(dep, x) - ref) ** 2)))


print()
print("8-bit weight quantization RMSE")
print("  naive     ", quantized_rmse(graph))
print("  equalized ", quantized_rmse(balanced))

# --- high-bias absorption --------------------------------------------------------

# a large positive bias pushes the whole activation distribution up; when the
# folded statistics say channel i stays above c = shift - 3*scale almost
# surely, the c can move through the ReLU into the next layer's bias instead
# of widening the activation grid
shift = np.array([6.0, 0.5, 5.0, 0.2, 0.1, 0.3], dtype=np.float32)
scale = np.full(6, 0.75, dtype=np.float32)
tall = q.LayerGraph(
    [
        q.linear("up", np.diag(scale), shift, eff_shift=shift, eff_scale=scale),
        q.activation("act", q.relu()),
        q.linear("down", w2, rng.normal(size=4).astype(np.float32)),
    ],
    [(-1, 0), (0, 1), (1, 2)],
    (6,),
)
absorbed, info = q.absorb_graph_high_bias(tall, multiplier=3.0)
print()
print("absorbed channels          ", info["absorbed"])

# with x ~ N(0, I) the pre-activations really are N(shift, scale^2), so the
# move is exact except on far-tail samples that dip below c
x = rng.standard_normal((2048, 6), dtype=np.float32)


def act_peak(g):
    first = np.maximum(x @ g.layers[0].weight.T + g.layers[0].bias, 0.0)
    return float(first.max())


print("activation max, before     ", act_peak(tall))
print("activation max, after      ", act_peak(absorbed))
drift = np.abs(q.forward_fp32(absorbed, x) - q.forward_fp32(tall, x)).max(axis=1)
clipped = int(np.count_nonzero(drift > 1e-4))
print("samples past ulp rounding  ", clipped, "of", len(x), "(far-tail dips below c)")
print("max drift on those         ", float(drift.max()))
print("drift on the rest          ", float(np.where(drift > 1e-4, 0.0, drift).max()))
