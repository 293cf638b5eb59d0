"""
Quantization bias and its correction
====================================

Rounding weights to a grid perturbs them by eps = W_q - W, and every output
channel's mean shifts by eps @ E[x]. The shift is systematic, not noise, so
it can be subtracted from the layer bias. E[x] comes either from batch-norm
statistics (each channel behind a ReLU is a clipped normal with a closed-form
mean) or from a handful of calibration batches.
"""

import numpy as np

import quanteq as q

rng = np.random.default_rng(3)

# --- clipped-normal moments -----------------------------------------------------

# a channel with batch-norm shift 0.4 and scale 1.2, passed through a ReLU:
mean = q.clipped_normal_mean(0.4, 1.2, 0.0, np.inf)
var = q.clipped_normal_var(0.4, 1.2, 0.0, np.inf)
z = 0.4 + 1.2 * rng.standard_normal(2_000_000)
mc = np.maximum(z, 0.0)
print("E[relu(z)]   closed form %.6f   Monte Carlo %.6f" % (mean, mc.mean()))
print("Var[relu(z)] closed form %.6f   Monte Carlo %.6f" % (var, mc.var()))

# a ReLU6 channel clips on both sides
print("E[clip(z,0,6)] at shift 5.5:", round(q.clipped_normal_mean(5.5, 1.2, 0.0, 6.0), 4))

# --- a biased layer ---------------------------------------------------------------

# first layer carries folded statistics; x ~ N(0, I) makes its pre-activation
# exactly match them, so the analytic path has the true E[x] available
n_mid, n_out = 12, 5
gamma = rng.uniform(0.5, 2.0, n_mid).astype(np.float32)
beta = rng.uniform(-0.5, 1.5, n_mid).astype(np.float32)
w2 = rng.normal(size=(n_out, n_mid)).astype(np.float32)
ref = q.LayerGraph(
    [
        q.linear("l1", np.diag(gamma), beta, eff_shift=beta, eff_scale=gamma),
        q.activation("r", q.relu()),
        q.linear("l2", w2, rng.normal(size=n_out).astype(np.float32)),
    ],
    [(-1, 0), (0, 1), (1, 2)],
    (n_mid,),
)
batches = [rng.standard_normal((65_536, n_mid), dtype=np.float32) for _ in range(8)]

# deploy a copy whose second-layer weights sit on a coarse 4-bit grid
scheme = q.QScheme(bits=4, symmetric=False)
deployed = ref.copy()
deployed.layers[2].weight = q.quantize_dequantize(w2, q.weight_qparams(w2, scheme))


def l2_bias(g):
    return np.abs(q.measure_biased_error(ref, g, batches)["l2"]).mean()


print()
print("mean |output bias| of the 4-bit layer")
print("  uncorrected        %.4f" % l2_bias(deployed))

fixed, info = q.bias_correct_analytic(deployed, None, reference=ref)
print("  analytic correction %.6f  (from folded statistics alone)" % l2_bias(fixed))

fixed, shifts = q.bias_correct_empirical(ref, deployed, batches)
print("  empirical correction %.7f (from calibration data)" % l2_bias(fixed))

# the two corrections estimate the same quantity
print()
print("per-channel bias shifts, analytic vs empirical:")
print("  ", np.round(info["corrected"]["l2"], 4))
print("  ", np.round(shifts["l2"], 4))
