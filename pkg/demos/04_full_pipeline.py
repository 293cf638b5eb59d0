"""
The whole pipeline on a synthetic model
=======================================

Builds a deliberately imbalanced depthwise-separable model (the built-in
model zoo makes these reproducibly), runs the data-free sequence, and shows
the accuracy recovered at 8 and 6 bits. Everything here is also reachable
from the command line; the matching invocations are printed at the end.
"""

import tempfile
from pathlib import Path

import quanteq as q

# kappa is the per-channel range imbalance baked into the weights: 256x is
# enough to wreck a shared 8-bit grid
spec = q.ZooSpec(seed=0, widths=[8, 8, 8], kappa=256.0, n_examples=1024)
model, inputs, labels = q.zoo.generate(spec)
print("model:", [layer.name for layer in model.layers][:6], "...")
print("inputs:", inputs.shape, "labels are the model's own float32 argmax")


def accuracy(steps, bits):
    cfg = q.PipelineConfig(steps=steps, bits=bits)
    result = q.run_pipeline(model, cfg)
    return q.evaluate_pipeline(result, inputs, labels, cfg).accuracy


print()
print("bits   quantize-only   full pipeline")
for bits in (8, 6):
    naive = accuracy(["fold_bn", "quantize"], bits)
    full = accuracy(list(q.DEFAULT_STEPS), bits)
    print(f"  {bits}       {naive:.4f}          {full:.4f}")

# the per-step reports say what each stage did
cfg = q.PipelineConfig()
result = q.run_pipeline(model, cfg)
eq = result.reports["equalize"]
print()
print("steps run          ", result.steps_run)
print("equalize sweeps    ", eq["iterations"], "objective",
      round(eq["objective_before"], 2), "->", round(eq["objective_after"], 2))
print("bias corrections   ", list(result.reports["bias_correct_analytic"]["corrected"]))

# --- the same thing from the shell ------------------------------------------------

workdir = Path(tempfile.mkdtemp(prefix="quanteq-demo-"))
q.save_model(model, workdir / "model.qeq")
q.save_dataset(inputs, labels, workdir / "calib.qds")
print()
print("artifacts in", workdir)
print("try:")
print(f"  quanteq inspect --model {workdir}/model.qeq")
print(f"  quanteq run --model {workdir}/model.qeq --data {workdir}/calib.qds \\")
print(f"      --out {workdir}/out --bits 6")
print(f"  quanteq report --out {workdir}/out")
