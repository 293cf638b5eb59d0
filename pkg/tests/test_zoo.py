"""Synthetic model generator: determinism, imbalance, solvability."""

import numpy as np
import pytest

import quanteq as q
from quanteq.errors import QuanteqError
from quanteq.quantize import RangeMode, channel_ranges
from quanteq.zoo import ZooSpec, generate


def _ranges(layer):
    axis = 0 if layer.kind == "depthwise_conv2d" else None
    if axis == 0:
        return channel_ranges(layer.weight, RangeMode.SYMMETRIC, axis=0).r
    return channel_ranges(layer.weight, RangeMode.SYMMETRIC).r


def test_generation_is_deterministic():
    spec = ZooSpec(seed=3, kappa=16.0, n_examples=64)
    g1, x1, y1 = generate(spec)
    g2, x2, y2 = generate(spec)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(y1, y2)
    for a, b in zip(g1.layers, g2.layers):
        assert a.kind == b.kind and a.name == b.name
        if a.weight is not None:
            np.testing.assert_array_equal(a.weight, b.weight)


def test_seeds_differ():
    a = generate(ZooSpec(seed=0, n_examples=32))[0]
    b = generate(ZooSpec(seed=1, n_examples=32))[0]
    assert not np.array_equal(a.layers[0].weight, b.layers[0].weight)


def test_labels_come_from_the_float_model():
    graph, x, labels = generate(ZooSpec(seed=2, kappa=64.0, n_examples=128))
    out = q.forward_fp32(graph, x)
    np.testing.assert_array_equal(out.reshape(len(x), -1).argmax(axis=1), labels)
    assert len(np.unique(labels)) > 1


@pytest.mark.parametrize("block", ["plain_chain", "depthwise_separable", "residual"])
def test_block_styles_build_and_run(block):
    widths = [6, 6, 6] if block != "residual" else [6, 6]
    spec = ZooSpec(seed=1, block=block, depth=2, widths=widths, kappa=8.0, n_examples=32)
    graph, x, labels = generate(spec)
    out = q.forward_fp32(graph, x)
    assert out.shape[0] == 32
    assert np.all(np.isfinite(out))
    ev = q.evaluate(graph, x, labels)
    assert ev.fp32_accuracy == 1.0


def test_folded_imbalance_hits_kappa():
    kappa = 64.0
    graph, _, _ = generate(ZooSpec(seed=0, kappa=kappa, n_examples=64))
    folded = q.fold_batch_norm(graph)
    checked = 0
    for layer in folded.layers:
        # layers that absorbed a batch norm carry its statistics; the head
        # has none and keeps balanced ranges
        if layer.is_affine and layer.eff_shift is not None:
            r = _ranges(layer)
            assert r.max() / r.min() == pytest.approx(kappa, rel=1e-3)
            checked += 1
    assert checked >= 2


def test_raw_weights_look_balanced():
    # The imbalance hides in the batch-norm scales: before folding, every
    # weight row spans exactly [-0.5, 0.5].
    graph, _, _ = generate(ZooSpec(seed=0, kappa=256.0, n_examples=64))
    for layer in graph.layers[:-1]:
        if layer.is_affine:
            flat = layer.weight.reshape(layer.weight.shape[0], -1)
            np.testing.assert_allclose(np.abs(flat).max(axis=1), 0.5, rtol=1e-6)


def test_kappa_one_needs_no_differential_scaling():
    graph, _, _ = generate(ZooSpec(seed=0, kappa=1.0, n_examples=64))
    folded = q.fold_batch_norm(graph)
    _, report = q.equalize_graph(folded, max_iters=50)
    for pair in report.pairs:
        # per-channel net scale is the before/after range ratio; balanced
        # inputs need the same scale everywhere
        s = np.asarray(pair["ranges_before"]["a"]) / np.asarray(pair["ranges_after"]["a"])
        assert s.max() / s.min() == pytest.approx(1.0, abs=1e-3)


def test_generated_graph_is_equalizable_after_folding():
    graph, _, _ = generate(ZooSpec(seed=0, n_examples=32))
    assert q.find_equalizable_pairs(q.fold_batch_norm(graph))
    res_graph, _, _ = generate(
        ZooSpec(seed=0, block="residual", depth=2, widths=[6, 6], n_examples=32)
    )
    assert q.find_equalizable_pairs(q.fold_batch_norm(res_graph))


def test_equalization_recovers_balance():
    kappa = 256.0
    graph, x, _ = generate(ZooSpec(seed=0, kappa=kappa, n_examples=64))
    folded = q.fold_batch_norm(graph)
    eq, _ = q.equalize_graph(folded, max_iters=50)
    before = q.forward_fp32(folded, x)
    after = q.forward_fp32(eq, x)
    scale = np.abs(before).max()
    np.testing.assert_allclose(after, before, atol=1e-4 * scale)
    worst = max(
        _ranges(l).max() / _ranges(l).min()
        for l in eq.layers
        if l.is_affine and l.eff_shift is not None
    )
    assert worst < kappa / 4


def test_spec_validation():
    with pytest.raises(QuanteqError):
        generate(ZooSpec(block="transformer"))
    with pytest.raises(QuanteqError):
        generate(ZooSpec(depth=0))
    with pytest.raises(QuanteqError):
        generate(ZooSpec(kappa=0.5))
    with pytest.raises(QuanteqError):
        generate(ZooSpec(classes=1))
    with pytest.raises(QuanteqError):
        generate(ZooSpec(widths=[8, 8]))
    with pytest.raises(QuanteqError):
        generate(ZooSpec(depth=4, widths=[8] * 5, input_hw=8))
    with pytest.raises(QuanteqError):
        generate(ZooSpec(act="gelu"))
