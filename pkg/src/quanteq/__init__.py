"""Data-free post-training quantization for serialized feed-forward nets.

The pieces compose in a fixed order: fold batch norm into the preceding
affine layers, replace hard clips that would block rescaling, equalize
per-channel weight ranges across layer pairs, absorb oversized biases
upstream, then quantize and correct the induced output bias either
analytically (from batch-norm statistics) or empirically (from calibration
data). ``run_pipeline`` drives the whole sequence; everything is also usable
piecemeal.
"""

from . import zoo
from .biascorr import (
    ClipMoments,
    bias_correct_analytic,
    bias_correct_empirical,
    clip_moments,
    clip_weights,
    clipped_normal_mean,
    clipped_normal_var,
    expected_input,
    expected_output_error,
    measure_biased_error,
    node_output_moments,
    truncated_normal_mean,
)
from .engine import (
    EvalResult,
    QuantSimConfig,
    activation_qparams,
    branch_stats,
    evaluate,
    forward_fp32,
    forward_quantsim,
    quantize_graph_weights,
)
from .equalize import (
    EqualizationReport,
    absorb_graph_high_bias,
    absorb_high_bias,
    apply_pair_scaling,
    equalization_scale,
    equalize_graph,
    replace_relu6,
)
from .errors import (
    BlobError,
    ConfigError,
    GraphError,
    ManifestError,
    MissingStatsError,
    NumericalError,
    QuanteqError,
    ShapeError,
)
from .graph import (
    BatchNormParams,
    Layer,
    LayerGraph,
    activation,
    batchnorm,
    conv2d,
    depthwise_conv2d,
    find_equalizable_pairs,
    linear,
    residual_add,
)
from .piecewise import PiecewiseLinear, identity, prelu, relu, relu6
from .pipeline import (
    CANONICAL_STEPS,
    DEFAULT_STEPS,
    PipelineConfig,
    PipelineResult,
    evaluate_pipeline,
    run_pipeline,
)
from .quantize import (
    QParams,
    QScheme,
    RangeMode,
    activation_range_from_bn,
    channel_ranges,
    fold_batch_norm,
    make_qparams,
    quantize_dequantize,
    weight_qparams,
    weight_ranges,
)
from .serialize import (
    load_dataset,
    load_model,
    load_quant_extension,
    save_dataset,
    save_model,
)
from .zoo import ZooSpec

__version__ = "0.1.0"

__all__ = [
    "BatchNormParams",
    "BlobError",
    "CANONICAL_STEPS",
    "ClipMoments",
    "ConfigError",
    "DEFAULT_STEPS",
    "EqualizationReport",
    "EvalResult",
    "GraphError",
    "Layer",
    "LayerGraph",
    "ManifestError",
    "MissingStatsError",
    "NumericalError",
    "PiecewiseLinear",
    "PipelineConfig",
    "PipelineResult",
    "QParams",
    "QScheme",
    "QuantSimConfig",
    "QuanteqError",
    "RangeMode",
    "ShapeError",
    "ZooSpec",
    "absorb_graph_high_bias",
    "absorb_high_bias",
    "activation",
    "activation_qparams",
    "activation_range_from_bn",
    "apply_pair_scaling",
    "batchnorm",
    "bias_correct_analytic",
    "bias_correct_empirical",
    "branch_stats",
    "channel_ranges",
    "clip_moments",
    "clip_weights",
    "clipped_normal_mean",
    "clipped_normal_var",
    "conv2d",
    "depthwise_conv2d",
    "equalization_scale",
    "equalize_graph",
    "evaluate",
    "evaluate_pipeline",
    "expected_input",
    "expected_output_error",
    "find_equalizable_pairs",
    "forward_fp32",
    "forward_quantsim",
    "identity",
    "linear",
    "load_dataset",
    "load_model",
    "load_quant_extension",
    "make_qparams",
    "measure_biased_error",
    "node_output_moments",
    "prelu",
    "quantize_dequantize",
    "quantize_graph_weights",
    "relu",
    "relu6",
    "replace_relu6",
    "residual_add",
    "run_pipeline",
    "save_dataset",
    "save_model",
    "truncated_normal_mean",
    "weight_qparams",
    "weight_ranges",
    "zoo",
]
