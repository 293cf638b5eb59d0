"""Acceptance gate: eight end-to-end criteria, one verdict line each.

Each test prints ``A<n> ...: PASS/FAIL (measured numbers)`` before asserting,
so a report run (``pytest tests/test_acceptance.py -v -rP``) shows the verdict
lines for passing criteria too. Expected values marked as derived were fixed
by independent oracles (quadrature, Monte Carlo, exhaustive search) and frozen.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ndtr

import quanteq as q
from quanteq.biascorr import (
    bias_correct_analytic,
    bias_correct_empirical,
    clipped_normal_mean,
    clipped_normal_var,
    measure_biased_error,
)
from quanteq.equalize import apply_pair_scaling, equalization_scale
from quanteq.pipeline import DEFAULT_STEPS, PipelineConfig, evaluate_pipeline, run_pipeline
from quanteq.quantize import (
    QScheme,
    RangeMode,
    channel_ranges,
    fold_batch_norm,
    make_qparams,
    quantize_dequantize,
    weight_qparams,
)
from quanteq.zoo import ZooSpec, generate

INF = float("inf")
FROZEN_ZOO = ZooSpec(seed=0, widths=[8, 8, 8], kappa=256.0, n_examples=1024)


def _verdict(tag: str, ok: bool, detail: str) -> None:
    print(f"{tag}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{tag}: {detail}"


@pytest.fixture(scope="module")
def frozen_zoo():
    return generate(FROZEN_ZOO)


def _zoo_accuracy(zoo, steps, bits=8):
    graph, x, labels = zoo
    cfg = PipelineConfig(steps=list(steps), bits=bits)
    res = run_pipeline(graph, cfg)
    return evaluate_pipeline(res, x, labels, cfg)


# -- A1: scaling equivariance --------------------------------------------------


def _random_pair_graph(rng, kind):
    n_mid = int(rng.integers(3, 9))
    act = [q.relu(), q.relu6(), q.prelu(0.2)][int(rng.integers(3))]
    if kind == "linear":
        n_in, n_out = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        w1 = (rng.normal(size=(n_mid, n_in)) / np.sqrt(n_in)).astype(np.float32)
        w2 = (rng.normal(size=(n_out, n_mid)) / np.sqrt(n_mid)).astype(np.float32)
        layers = [
            q.linear("a", w1, rng.normal(size=n_mid).astype(np.float32)),
            q.activation("m", act),
            q.linear("b", w2, rng.normal(size=n_out).astype(np.float32)),
        ]
        shape = (n_in,)
    elif kind == "conv":
        n_in, n_out = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        w1 = (rng.normal(size=(n_mid, n_in, 3, 3)) / 3.0).astype(np.float32)
        w2 = (rng.normal(size=(n_out, n_mid, 3, 3)) / 3.0).astype(np.float32)
        layers = [
            q.conv2d("a", w1, rng.normal(size=n_mid).astype(np.float32), padding=1),
            q.activation("m", act),
            q.conv2d("b", w2, rng.normal(size=n_out).astype(np.float32), padding=1),
        ]
        shape = (n_in, 6, 6)
    elif kind == "conv_dw":
        n_in = int(rng.integers(2, 5))
        w1 = (rng.normal(size=(n_mid, n_in, 3, 3)) / 3.0).astype(np.float32)
        w2 = (rng.normal(size=(n_mid, 1, 3, 3)) / 3.0).astype(np.float32)
        layers = [
            q.conv2d("a", w1, rng.normal(size=n_mid).astype(np.float32), padding=1),
            q.activation("m", act),
            q.depthwise_conv2d("b", w2, rng.normal(size=n_mid).astype(np.float32), padding=1),
        ]
        shape = (n_in, 6, 6)
    else:  # dw_conv
        n_out = int(rng.integers(2, 5))
        w1 = (rng.normal(size=(n_mid, 1, 3, 3)) / 3.0).astype(np.float32)
        w2 = (rng.normal(size=(n_out, n_mid, 1, 1))).astype(np.float32)
        layers = [
            q.depthwise_conv2d("a", w1, rng.normal(size=n_mid).astype(np.float32), padding=1),
            q.activation("m", act),
            q.conv2d("b", w2, rng.normal(size=n_out).astype(np.float32)),
        ]
        shape = (n_mid, 6, 6)
    return q.LayerGraph(layers, [(-1, 0), (0, 1), (1, 2)], shape)


def test_a1_equalization_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    kinds = ["linear", "conv", "conv_dw", "dw_conv"]
    worst = 0.0
    for i in range(200):
        g = _random_pair_graph(rng, kinds[i % 4])
        x = rng.normal(size=(8, *g.input_shape)).astype(np.float32)
        before = q.forward_fp32(g, x)
        g2 = g.copy()
        if i % 2 == 0:
            n_mid = g2.layers[0].out_channels
            s = np.exp(rng.uniform(-1.5, 1.5, size=n_mid))
            apply_pair_scaling(g2.layers[0], g2.layers[1], g2.layers[2], s)
        else:
            g2, _ = q.equalize_graph(g2, max_iters=30)
        after = q.forward_fp32(g2, x)
        worst = max(worst, float(np.abs(after - before).max()))

    grid = np.linspace(-12.0, 12.0, 1000).astype(np.float32)
    worst_rep = 0.0
    for fn in (q.relu(), q.relu6(), q.prelu(0.25)):
        for s in (0.5, 2.0, 7.3, 1.0 / 3.0):
            lhs = fn(np.float32(s) * grid)
            rhs = np.float32(s) * fn.reparam(s)(grid)
            worst_rep = max(worst_rep, float(np.abs(lhs - rhs).max()))

    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and worst_rep <= 1e-6 and dt < 10.0
    _verdict(
        "A1 equalization equivariance",
        ok,
        f"max |output delta| {worst:.2e} over 200 cases, "
        f"reparam identity {worst_rep:.2e} on 1000-pt grid, {dt:.1f}s",
    )


# -- A2: closed-form scales vs exhaustive search --------------------------------


def _precision_objective(r1, r2, s):
    a = r1 / s
    b = r2 * s
    return float(np.sum((a / a.max()) * (b / b.max())))


def _grid_search_objective(r1, r2):
    """Coordinate sweeps over a 1.01-step log grid; exhaustive for n=2.

    The objective only depends on scale ratios, so fixing one coordinate and
    sweeping the other over [1/256, 256] covers the whole 2-channel space at
    grid resolution; for wider pairs repeated sweeps are hill-climbing on the
    same grid.
    """
    n = len(r1)
    k = math.ceil(math.log(256.0) / math.log(1.01))
    factors = 1.01 ** np.arange(-k, k + 1)
    s = np.ones(n)
    best = _precision_objective(r1, r2, s)
    for _ in range(60):
        improved = False
        for i in range(n):
            cand = np.repeat(s[None, :], len(factors), axis=0)
            cand[:, i] = s[i] * factors
            a = r1[None, :] / cand
            b = r2[None, :] * cand
            obj = np.sum(
                (a / a.max(axis=1, keepdims=True)) * (b / b.max(axis=1, keepdims=True)),
                axis=1,
            )
            j = int(np.argmax(obj))
            if obj[j] > best + 1e-12:
                best = float(obj[j])
                s = cand[j]
                improved = True
        if not improved:
            break
    return best


def test_a2_optimal_scale_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_gap = 0.0
    worst_req = 0.0
    shared = True
    for _ in range(100):
        n = int(rng.integers(2, 9))
        r1 = 10.0 ** rng.uniform(-1, 1, size=n)
        r2 = 10.0 ** rng.uniform(-1, 1, size=n)
        s = equalization_scale(r1, r2)
        r1h, r2h = r1 / s, r2 * s
        worst_req = max(worst_req, float(np.abs(r1h - r2h).max() / r2h.max()))
        shared = shared and int(np.argmax(r1h)) == int(np.argmax(r2h))
        closed = _precision_objective(r1, r2, s)
        searched = _grid_search_objective(r1, r2)
        worst_gap = max(worst_gap, (searched - closed) / searched)
    dt = time.perf_counter() - t0
    ok = worst_gap <= 0.01 and worst_req <= 1e-6 and shared and dt < 30.0
    _verdict(
        "A2 closed-form optimality",
        ok,
        f"worst objective gap {worst_gap:.2e} vs grid search, "
        f"range mismatch {worst_req:.2e}, limiting channel shared: {shared}, {dt:.1f}s",
    )


# -- A3: end-to-end ablation ordering -------------------------------------------


def test_a3_ablation_shape(frozen_zoo):
    t0 = time.perf_counter()
    ev_qo = _zoo_accuracy(frozen_zoo, ["fold_bn", "quantize"])
    ev_eq = _zoo_accuracy(frozen_zoo, ["fold_bn", "replace_relu6", "equalize", "quantize"])
    ev_ab = _zoo_accuracy(
        frozen_zoo, ["fold_bn", "replace_relu6", "equalize", "absorb_bias", "quantize"]
    )
    ev_full = _zoo_accuracy(frozen_zoo, DEFAULT_STEPS)
    qo, eq, ab, full = ev_qo.accuracy, ev_eq.accuracy, ev_ab.accuracy, ev_full.accuracy
    dt = time.perf_counter() - t0
    # labels are the original model's own argmax, so the float baseline is
    # 100% by construction; the snapshot the evaluator reports is taken after
    # the function-preserving steps, where 1e-4 drift can flip argmax ties
    ok = (
        ev_full.fp32_accuracy >= 0.99
        and qo < 0.90
        and qo < eq <= ab <= full
        and full >= 0.98
        and dt < 120.0
    )
    _verdict(
        "A3 ablation ordering",
        ok,
        f"quantize-only {qo:.4f} < +equalize {eq:.4f} <= +absorb {ab:.4f} "
        f"<= full {full:.4f}, float32 {ev_full.fp32_accuracy:.4f}, {dt:.1f}s",
    )


# -- A4: clipped-normal moments vs quadrature and Monte Carlo --------------------

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _quad_clip_moments(mu, sigma, a, b):
    pdf = lambda x: math.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * _SQRT_2PI)
    lo = max(a, mu - 13.0 * sigma)
    hi = min(b, mu + 13.0 * sigma)
    m1 = m2 = 0.0
    if lo < hi:
        m1 = quad(lambda x: x * pdf(x), lo, hi, epsabs=1e-18, epsrel=1e-12, limit=500)[0]
        m2 = quad(lambda x: x * x * pdf(x), lo, hi, epsabs=1e-18, epsrel=1e-12, limit=500)[0]
    if math.isfinite(a):
        mass = ndtr((a - mu) / sigma)
        m1 += a * mass
        m2 += a * a * mass
    if math.isfinite(b):
        mass = 1.0 - ndtr((b - mu) / sigma)
        m1 += b * mass
        m2 += b * b * mass
    return m1, m2 - m1 * m1


# symmetric windows at mu=0 make the first-moment integrand odd: quad returns
# exactly 0.0 but warns it cannot certify epsabs=1e-18 against its roundoff
# floor (~1e-15, still far below the 1e-12 comparison floor used here)
@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
def test_a4_clipped_normal_moments():
    t0 = time.perf_counter()
    n_mc = 10_000_000
    z = np.random.default_rng(404).standard_normal(n_mc, dtype=np.float32)
    windows = [(0.0, INF), (0.0, 6.0), (-1.0, 1.0), (-INF, INF)]
    worst_quad = 0.0
    mc_ok = True
    cases = 0
    for mu in range(-5, 6):
        for sigma in (0.1, 1.0, 10.0):
            for a, b in windows:
                cases += 1
                m = clipped_normal_mean(mu, sigma, a, b)
                v = clipped_normal_var(mu, sigma, a, b)
                qm, qv = _quad_clip_moments(mu, sigma, a, b)
                worst_quad = max(
                    worst_quad,
                    abs(m - qm) / max(abs(qm), 1e-12),
                    abs(v - qv) / max(abs(qv), 1e-12),
                )
                y = np.clip(np.float32(mu) + np.float32(sigma) * z, a, b)
                mc_m = float(y.mean(dtype=np.float64))
                d = y - np.float32(mc_m)
                d2 = d * d
                mc_v = float(d2.mean(dtype=np.float64))
                mc_m4 = float((d2 * d2).mean(dtype=np.float64))
                se_m = math.sqrt(mc_v / n_mc)
                se_v = math.sqrt(max(mc_m4 - mc_v**2, 0.0) / n_mc)
                mc_ok = mc_ok and abs(m - mc_m) <= 4.0 * se_m + 1e-9
                mc_ok = mc_ok and abs(v - mc_v) <= 4.0 * se_v + 1e-9
    dt = time.perf_counter() - t0
    ok = worst_quad <= 1e-8 and mc_ok and dt < 60.0
    _verdict(
        "A4 clipped-normal moments",
        ok,
        f"{cases} cases, worst quadrature mismatch {worst_quad:.2e} (rel), "
        f"Monte Carlo within 4 SE at 1e7 samples: {mc_ok}, {dt:.1f}s",
    )


# -- A5: bias correction efficacy ------------------------------------------------


def test_a5_bias_correction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    n_mid, n_out, n_data = 16, 8, 2_000_000
    gamma = rng.uniform(0.5, 2.0, n_mid).astype(np.float32)
    beta = rng.uniform(-0.5, 1.5, n_mid).astype(np.float32)
    w2 = rng.normal(size=(n_out, n_mid)).astype(np.float32)
    b2 = rng.normal(size=n_out).astype(np.float32)
    layers = [
        q.linear("l1", np.diag(gamma), beta, eff_shift=beta, eff_scale=gamma),
        q.activation("r", q.relu()),
        q.linear("l2", w2, b2),
    ]
    ref = q.LayerGraph(layers, [(-1, 0), (0, 1), (1, 2)], (n_mid,))
    # x ~ N(0, I) makes l1's pre-activation exactly N(beta, gamma^2)
    x = rng.standard_normal((n_data, n_mid), dtype=np.float32)
    batches = [x[i : i + 250_000] for i in range(0, n_data, 250_000)]

    scheme = QScheme(bits=6, symmetric=False)
    dep = ref.copy()
    dep.layers[2].weight = quantize_dequantize(w2, weight_qparams(w2, scheme))

    def mean_abs_l2_bias(g):
        return float(np.abs(measure_biased_error(ref, g, batches)["l2"]).mean())

    before = mean_abs_l2_bias(dep)
    fixed_a, info_a = bias_correct_analytic(dep, None, reference=ref)
    after_a = mean_abs_l2_bias(fixed_a)
    fixed_e, shifts_e = bias_correct_empirical(ref, dep, batches)
    after_e = mean_abs_l2_bias(fixed_e)

    # per-channel agreement of the two corrections, against the Monte Carlo
    # standard error of the empirical one
    eps = dep.layers[2].weight.astype(np.float64) - w2.astype(np.float64)
    total = np.zeros(n_out)
    total_sq = np.zeros(n_out)
    for xb in batches:
        mid = np.maximum(gamma * xb + beta, 0.0).astype(np.float64)
        d = mid @ eps.T
        total += d.sum(axis=0)
        total_sq += (d * d).sum(axis=0)
    se = np.sqrt((total_sq / n_data - (total / n_data) ** 2) / n_data)
    delta_a = np.asarray(info_a["corrected"]["l2"], dtype=np.float64)
    delta_e = np.asarray(shifts_e["l2"], dtype=np.float64)
    agree = bool(np.all(np.abs(delta_a - delta_e) <= 3.0 * se + 1e-9))

    dt = time.perf_counter() - t0
    ok = after_a <= 0.10 * before and after_e <= 1e-5 and agree and dt < 60.0
    _verdict(
        "A5 bias correction",
        ok,
        f"mean |bias| {before:.3e} -> analytic {after_a:.3e} "
        f"(<=10%: {after_a <= 0.10 * before}), empirical {after_e:.2e} (<=1e-5), "
        f"methods within 3 SE: {agree}, {dt:.1f}s",
    )


# -- A6: high-bias absorption soundness -------------------------------------------


def test_a6_absorption_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    n_ch, n_data = 8, 2_000_000
    beta, gamma = 8.0, 2.0  # c = max(0, beta - 3*gamma) = 2, integral
    # dyadic construction: pre-activations on the 1/256 grid, diagonal second
    # layer with power-of-two weights, dyadic biases -> every forward pass is
    # exact in float32 and bit-level comparison is meaningful
    z = np.round(256.0 * (beta + gamma * rng.standard_normal((n_data, n_ch), dtype=np.float32))) / np.float32(256.0)
    w2 = np.diag(rng.choice([1.0, -1.0, 0.5, -0.5], size=n_ch)).astype(np.float32)
    b2 = (rng.integers(-512, 513, size=n_ch) / 256.0).astype(np.float32)
    layers = [
        q.linear("l1", np.eye(n_ch, dtype=np.float32), np.zeros(n_ch),
                 eff_shift=np.full(n_ch, beta), eff_scale=np.full(n_ch, gamma)),
        q.activation("r", q.relu()),
        q.linear("l2", w2, b2),
    ]
    graph = q.LayerGraph(layers, [(-1, 0), (0, 1), (1, 2)], (n_ch,))
    absorbed, info = q.absorb_graph_high_bias(graph, multiplier=3.0)
    assert info["absorbed"], "nothing absorbed"

    out_ref = q.forward_fp32(graph, z)
    out_abs = q.forward_fp32(absorbed, z)
    rate = float(np.mean(out_ref != out_abs))
    # diagonal second layer: output j is driven by pre-activation j alone
    above = z > np.float32(2.0)
    exact_above = bool(np.array_equal(out_ref[above], out_abs[above]))

    dt = time.perf_counter() - t0
    ok = 0.0 < rate <= 0.002 and exact_above and dt < 30.0
    _verdict(
        "A6 absorption soundness",
        ok,
        f"disagreement rate {rate:.5f} (<=0.002), bit-exact above c: {exact_above}, "
        f"{dt:.1f}s",
    )


# -- A7: quantizer contract --------------------------------------------------------


def test_a7_quantizer_contract():
    t0 = time.perf_counter()
    rng = np.random.default_rng(707)
    worst_rt = 0.0
    idem = True
    for i in range(700):
        if i % 2 == 0:
            x = (10.0 ** rng.uniform(-3, 3)) * rng.normal(size=rng.integers(2, 65))
            x = x.astype(np.float32) + np.float32(rng.uniform(-2, 2) * np.abs(x).max())
        else:
            x = (10.0 ** rng.uniform(-3, 3)) * rng.normal(size=(rng.integers(2, 17), rng.integers(2, 17)))
            x = x.astype(np.float32)
        scheme = QScheme(
            bits=int(rng.integers(2, 17)),
            symmetric=bool(rng.integers(2)),
            per_channel=bool(x.ndim == 2 and rng.integers(2)),
        )
        if scheme.per_channel:
            qp = weight_qparams(x, scheme)
        else:
            qp = make_qparams(float(x.min()), float(x.max()), scheme)
        y = quantize_dequantize(x, qp)
        scale = np.asarray(qp.scale)
        bound = 0.5 * scale.reshape(-1, *([1] * (x.ndim - 1))) if scale.ndim else 0.5 * float(scale)
        err = np.abs(y.astype(np.float64) - x.astype(np.float64))
        margin = float((err - bound).max()) - 2e-7 * float(np.abs(x).max())
        worst_rt = max(worst_rt, margin)
        idem = idem and bool(np.array_equal(quantize_dequantize(y, qp), y))

    worst_fold = 0.0
    for i in range(300):
        kind = ("linear", "conv", "dw")[i % 3]
        ch = int(rng.integers(2, 9))
        if kind == "linear":
            fan = int(rng.integers(2, 9))
            layer = q.linear("f", rng.normal(size=(ch, fan)).astype(np.float32) / np.sqrt(fan),
                             rng.normal(size=ch).astype(np.float32))
            shape = (fan,)
        elif kind == "conv":
            fan = int(rng.integers(2, 5))
            layer = q.conv2d("f", rng.normal(size=(ch, fan, 3, 3)).astype(np.float32) / 3.0,
                             rng.normal(size=ch).astype(np.float32), padding=1)
            shape = (fan, 5, 5)
        else:
            layer = q.depthwise_conv2d("f", rng.normal(size=(ch, 1, 3, 3)).astype(np.float32) / 3.0,
                                       rng.normal(size=ch).astype(np.float32), padding=1)
            shape = (ch, 5, 5)
        bn = q.batchnorm("bn", rng.uniform(0.2, 3.0, ch), rng.normal(size=ch),
                         rng.normal(size=ch), rng.uniform(0.25, 4.0, ch))
        g = q.LayerGraph([layer, bn], [(-1, 0), (0, 1)], shape)
        folded = fold_batch_norm(g)
        x = rng.normal(size=(8, *shape)).astype(np.float32)
        worst_fold = max(worst_fold, float(np.abs(q.forward_fp32(folded, x) - q.forward_fp32(g, x)).max()))

    dt = time.perf_counter() - t0
    ok = worst_rt <= 0.0 and idem and worst_fold <= 1e-4 and dt < 30.0
    _verdict(
        "A7 quantizer contract",
        ok,
        f"round-trip margin {worst_rt:.2e} (<=0 means within scale/2), "
        f"idempotent: {idem}, fold deviation {worst_fold:.2e} over 300 layers, {dt:.1f}s",
    )


# -- A8: bitwidth sweep -------------------------------------------------------------


def test_a8_bitwidth_sweep(frozen_zoo):
    t0 = time.perf_counter()
    bits = [4, 6, 8, 10, 12, 16]
    dfq = {b: _zoo_accuracy(frozen_zoo, DEFAULT_STEPS, bits=b).accuracy for b in bits}
    qo8 = _zoo_accuracy(frozen_zoo, ["fold_bn", "quantize"], bits=8).accuracy
    inversions = sum(1 for lo, hi in zip(bits, bits[1:]) if dfq[hi] < dfq[lo])
    dt = time.perf_counter() - t0
    ok = dfq[6] >= qo8 and inversions <= 1 and dt < 180.0
    sweep = ", ".join(f"{b}b {dfq[b]:.4f}" for b in bits)
    _verdict(
        "A8 bitwidth sweep",
        ok,
        f"dfq: {sweep}; quantize-only 8b {qo8:.4f} <= dfq 6b {dfq[6]:.4f}, "
        f"inversions {inversions} (<=1), {dt:.1f}s",
    )
