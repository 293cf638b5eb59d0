"""Graph IR contracts: wiring rules, validation, pair discovery."""

import numpy as np
import pytest

import quanteq as q
from quanteq.errors import GraphError, ShapeError
from quanteq.graph import INPUT, find_equalizable_pairs


def _chain(*layers, input_shape):
    edges = [(i - 1, i) for i in range(len(layers))]
    return q.LayerGraph(list(layers), edges, input_shape)


def _fc(name, out_f, in_f, seed=0):
    rng = np.random.default_rng(seed)
    return q.linear(name, rng.normal(size=(out_f, in_f)), rng.normal(size=out_f))


def test_simple_chain_wiring():
    g = _chain(_fc("a", 4, 3), q.activation("r", q.relu()), _fc("b", 2, 4), input_shape=(3,))
    assert g.producers(0) == [INPUT]
    assert g.producers(2) == [1]
    assert g.consumers(0) == [1]
    assert g.output_index() == 2
    assert g.layer_named("b").name == "b"
    assert g.index_of("r") == 1


def test_edges_must_point_forward():
    layers = [_fc("a", 2, 2), _fc("b", 2, 2, seed=1)]
    with pytest.raises(GraphError):
        q.LayerGraph(layers, [(1, 0), (-1, 1)], (2,))
    with pytest.raises(GraphError):
        q.LayerGraph(layers, [(0, 0), (-1, 0)], (2,))


def test_single_sink_enforced():
    layers = [_fc("a", 2, 2), _fc("b", 3, 2, seed=1), _fc("c", 3, 2, seed=2)]
    g = q.LayerGraph(layers, [(-1, 0), (0, 1), (0, 2)], (2,))
    with pytest.raises(GraphError):
        g.output_index()


def test_duplicate_names_rejected():
    g = _chain(_fc("a", 2, 2), _fc("a", 2, 2, seed=1), input_shape=(2,))
    with pytest.raises(GraphError):
        g.validate()


def test_depthwise_weight_shape():
    w = np.zeros((4, 2, 3, 3), dtype=np.float32)  # second dim must be 1
    g = _chain(q.depthwise_conv2d("dw", w, np.zeros(4)), input_shape=(4, 8, 8))
    with pytest.raises((GraphError, ShapeError)):
        g.validate()


def test_bias_length_checked():
    g = _chain(q.linear("fc", np.zeros((3, 2)), np.zeros(4)), input_shape=(2,))
    with pytest.raises((GraphError, ShapeError)):
        g.validate()


def test_batchnorm_gamma_positive():
    layers = [
        _fc("fc", 2, 2),
        q.batchnorm("bn", [1.0, -1.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]),
    ]
    g = q.LayerGraph(layers, [(-1, 0), (0, 1)], (2,))
    with pytest.raises(GraphError):
        g.validate()


def test_fanout_only_into_residual_adds():
    # a feeding two linear layers is rejected ...
    layers = [_fc("a", 2, 2), _fc("b", 2, 2, seed=1), _fc("c", 2, 2, seed=2)]
    g = q.LayerGraph(layers, [(-1, 0), (0, 1), (0, 2)], (2,))
    with pytest.raises(GraphError):
        g.validate()
    # ... but feeding one layer plus a residual add is fine
    layers = [
        _fc("a", 2, 2),
        _fc("b", 2, 2, seed=1),
        q.residual_add("add"),
    ]
    g = q.LayerGraph(layers, [(-1, 0), (0, 1), (0, 2), (1, 2)], (2,))
    g.validate()


def test_output_shapes_linear_chain():
    g = _chain(_fc("a", 4, 3), q.activation("r", q.relu()), _fc("b", 2, 4), input_shape=(3,))
    shapes = g.output_shapes()
    assert shapes == [(4,), (4,), (2,)]


def test_output_shapes_conv():
    w1 = np.zeros((5, 3, 3, 3), dtype=np.float32)
    w2 = np.zeros((2, 5, 2, 2), dtype=np.float32)
    g = _chain(
        q.conv2d("c1", w1, np.zeros(5), stride=2, padding=1),
        q.conv2d("c2", w2, np.zeros(2)),
        input_shape=(3, 8, 8),
    )
    shapes = g.output_shapes()
    assert shapes[0] == (5, 4, 4)
    assert shapes[1] == (2, 3, 3)


def test_linear_rejects_spatial_input():
    # no implicit flatten: a linear layer cannot consume a conv output
    w1 = np.zeros((5, 3, 3, 3), dtype=np.float32)
    g = _chain(
        q.conv2d("c1", w1, np.zeros(5)),
        q.linear("fc", np.zeros((2, 5)), np.zeros(2)),
        input_shape=(3, 8, 8),
    )
    with pytest.raises((GraphError, ShapeError)):
        g.output_shapes()


def test_residual_add_needs_matching_shapes():
    layers = [
        _fc("a", 2, 2),
        _fc("b", 3, 2, seed=1),
        q.residual_add("add"),
    ]
    g = q.LayerGraph(layers, [(-1, 0), (-1, 1), (0, 2), (1, 2)], (2,))
    with pytest.raises((GraphError, ShapeError)):
        g.output_shapes()


def test_copy_is_deep_for_parameters():
    g = _chain(_fc("a", 2, 2), input_shape=(2,))
    c = g.copy()
    c.layers[0].weight[0, 0] += 100.0
    assert g.layers[0].weight[0, 0] != c.layers[0].weight[0, 0]


def test_find_pairs_simple_chain():
    g = _chain(_fc("a", 4, 3), q.activation("r", q.relu()), _fc("b", 2, 4), input_shape=(3,))
    pairs = find_equalizable_pairs(g)
    assert pairs == [(0, 1, 2)]


def test_find_pairs_requires_folded_graph():
    layers = [
        _fc("a", 2, 2),
        q.batchnorm("bn", [1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]),
        q.activation("r", q.relu()),
        _fc("b", 2, 2, seed=1),
    ]
    g = q.LayerGraph(layers, [(-1, 0), (0, 1), (1, 2), (2, 3)], (2,))
    with pytest.raises(GraphError):
        find_equalizable_pairs(g)


def test_find_pairs_skips_shared_activations():
    # the activation branches into a residual add as well: not equalizable
    layers = [
        _fc("a", 2, 2),
        q.activation("r", q.relu()),
        _fc("b", 2, 2, seed=1),
        q.residual_add("add"),
    ]
    g = q.LayerGraph(layers, [(-1, 0), (0, 1), (1, 2), (1, 3), (2, 3)], (2,))
    assert find_equalizable_pairs(g) == []


def test_find_pairs_depthwise_channel_match():
    rng = np.random.default_rng(0)
    g = _chain(
        q.conv2d("pw", rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4)),
        q.activation("r", q.relu()),
        q.depthwise_conv2d("dw", rng.normal(size=(4, 1, 3, 3)), rng.normal(size=4)),
        input_shape=(3, 8, 8),
    )
    assert find_equalizable_pairs(g) == [(0, 1, 2)]


def test_find_pairs_channel_mismatch_not_paired():
    rng = np.random.default_rng(0)
    g = _chain(
        _fc("a", 4, 3),
        q.activation("r", q.relu()),
        _fc("b", 2, 5, seed=1),
        input_shape=(3,),
    )
    assert find_equalizable_pairs(g) == []
