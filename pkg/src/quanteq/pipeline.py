"""End-to-end transform pipelines over a loaded model.

A pipeline is an ordered subset of the canonical steps:

    fold_bn -> replace_relu6 -> equalize -> absorb_bias
        -> clip_weights -> quantize
        -> bias_correct_analytic -> bias_correct_empirical

The first four preserve the float32 function (up to activation replacement);
the snapshot taken after the last of them is the float32 reference the
corrections and evaluations compare against. Steps must be requested in
canonical order, each at most once; anything else is a configuration error,
not a silent reorder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .biascorr import bias_correct_analytic, bias_correct_empirical, clip_weights
from .engine import EvalResult, QuantSimConfig, evaluate, quantize_graph_weights
from .equalize import absorb_graph_high_bias, equalize_graph, replace_relu6
from .errors import ConfigError
from .graph import BATCHNORM, LayerGraph
from .quantize import QParams, QScheme, fold_batch_norm

CANONICAL_STEPS = (
    "fold_bn",
    "replace_relu6",
    "equalize",
    "absorb_bias",
    "clip_weights",
    "quantize",
    "bias_correct_analytic",
    "bias_correct_empirical",
)
PRESERVING_STEPS = CANONICAL_STEPS[:4]

DEFAULT_STEPS = [
    "fold_bn",
    "replace_relu6",
    "equalize",
    "absorb_bias",
    "quantize",
    "bias_correct_analytic",
]


@dataclass
class PipelineConfig:
    """Which steps run and how the grids are shaped."""

    steps: list[str] = field(default_factory=lambda: list(DEFAULT_STEPS))
    bits: int = 8
    scheme: str = "asym"  # or "sym"
    granularity: str = "tensor"  # or "channel"
    act_bits: int | None = None  # defaults to ``bits``
    act_range_n: float = 6.0
    equalize_tol: float = 1e-4
    equalize_max_iters: int = 20
    absorb_multiplier: float = 3.0
    clip_lo: float | None = None
    clip_hi: float | None = None
    calib_batch: int = 256

    _FIELDS = (
        "steps", "bits", "scheme", "granularity", "act_bits", "act_range_n",
        "equalize_tol", "equalize_max_iters", "absorb_multiplier",
        "clip_lo", "clip_hi", "calib_batch",
    )

    def validate(self) -> None:
        order = []
        for s in self.steps:
            if s not in CANONICAL_STEPS:
                raise ConfigError(
                    f"unknown step {s!r}; valid steps: {', '.join(CANONICAL_STEPS)}"
                )
            order.append(CANONICAL_STEPS.index(s))
        if len(set(order)) != len(order):
            raise ConfigError("each step may appear at most once")
        if order != sorted(order):
            raise ConfigError(
                "steps out of order; canonical order is " + " -> ".join(CANONICAL_STEPS)
            )
        has_corr = any(s.startswith("bias_correct") for s in self.steps)
        if has_corr and "quantize" not in self.steps:
            raise ConfigError("bias correction without a quantize step corrects nothing")
        if "clip_weights" in self.steps:
            if self.clip_lo is None or self.clip_hi is None:
                raise ConfigError("clip_weights needs clip_lo and clip_hi")
            if not self.clip_lo < self.clip_hi:
                raise ConfigError("clip_lo must be below clip_hi")
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must be in [2, 16], got {self.bits}")
        if self.act_bits is not None and not 2 <= self.act_bits <= 16:
            raise ConfigError(f"act_bits must be in [2, 16], got {self.act_bits}")
        if self.scheme not in ("sym", "asym"):
            raise ConfigError(f"scheme must be 'sym' or 'asym', got {self.scheme!r}")
        if self.granularity not in ("tensor", "channel"):
            raise ConfigError(
                f"granularity must be 'tensor' or 'channel', got {self.granularity!r}"
            )
        if self.act_range_n <= 0:
            raise ConfigError("act_range_n must be positive")
        if self.equalize_max_iters < 1:
            raise ConfigError("equalize_max_iters must be >= 1")
        if self.calib_batch < 1:
            raise ConfigError("calib_batch must be >= 1")

    def weight_scheme(self) -> QScheme:
        return QScheme(
            bits=self.bits,
            symmetric=self.scheme == "sym",
            per_channel=self.granularity == "channel",
        )

    def quantsim(self) -> QuantSimConfig:
        return QuantSimConfig(
            weight_scheme=self.weight_scheme(),
            act_scheme=QScheme(self.act_bits or self.bits, symmetric=False),
            act_range_n=self.act_range_n,
        )

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_json(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("pipeline config must be a JSON object")
        unknown = set(data) - set(cls._FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from exc
        cfg.validate()
        return cfg


@dataclass
class PipelineResult:
    """Deployed artifact plus the reference and per-step reports."""

    model: LayerGraph
    reference: LayerGraph
    steps_run: list[str]
    weight_qparams: dict[str, QParams] | None
    reports: dict[str, Any]

    def report_json(self) -> dict:
        return {"steps": self.steps_run, "reports": self.reports}


def _chunks(inputs: np.ndarray, size: int) -> list[np.ndarray]:
    return [inputs[i : i + size] for i in range(0, len(inputs), size)]


def run_pipeline(
    graph: LayerGraph,
    cfg: PipelineConfig,
    calib_inputs: np.ndarray | None = None,
) -> PipelineResult:
    """Apply the configured steps to a copy of ``graph``.

    ``calib_inputs`` (unlabeled, batched) are only consulted by
    bias_correct_empirical; every other step is data-free.
    """
    cfg.validate()
    current = graph.copy()
    reference: LayerGraph | None = None
    reports: dict[str, Any] = {}
    qparams: dict[str, QParams] | None = None
    for step in cfg.steps:
        if reference is None and step not in PRESERVING_STEPS:
            reference = current.copy()
        if step == "fold_bn":
            n_bn = sum(1 for l in current.layers if l.kind == BATCHNORM)
            current = fold_batch_norm(current)
            reports[step] = {"folded": n_bn}
        elif step == "replace_relu6":
            current, n_repl = replace_relu6(current)
            reports[step] = {"replaced": n_repl}
        elif step == "equalize":
            current, eq = equalize_graph(
                current, tol=cfg.equalize_tol, max_iters=cfg.equalize_max_iters
            )
            reports[step] = eq.to_json()
        elif step == "absorb_bias":
            current, info = absorb_graph_high_bias(
                current, multiplier=cfg.absorb_multiplier
            )
            reports[step] = info
        elif step == "clip_weights":
            current = clip_weights(current, cfg.clip_lo, cfg.clip_hi)
            reports[step] = {"lo": cfg.clip_lo, "hi": cfg.clip_hi}
        elif step == "quantize":
            current, qparams = quantize_graph_weights(current, cfg.weight_scheme())
            reports[step] = {name: qp.to_json() for name, qp in qparams.items()}
        elif step == "bias_correct_analytic":
            current, info = bias_correct_analytic(current, None, reference=reference)
            reports[step] = {
                "corrected": {k: np.asarray(v).tolist() for k, v in info["corrected"].items()},
                "skipped": info["skipped"],
            }
        elif step == "bias_correct_empirical":
            if calib_inputs is None:
                raise ConfigError(
                    "bias_correct_empirical needs calibration data (none given)"
                )
            current, deltas = bias_correct_empirical(
                reference, current, _chunks(calib_inputs, cfg.calib_batch)
            )
            reports[step] = {k: np.asarray(v).tolist() for k, v in deltas.items()}
    if reference is None:
        reference = current.copy()
    return PipelineResult(
        model=current,
        reference=reference,
        steps_run=list(cfg.steps),
        weight_qparams=qparams,
        reports=reports,
    )


def evaluate_pipeline(
    result: PipelineResult,
    inputs: np.ndarray,
    labels: np.ndarray | None,
    cfg: PipelineConfig,
    batch_size: int = 256,
) -> EvalResult:
    """Score the pipeline's artifact against its float32 reference."""
    return evaluate(
        result.reference,
        inputs,
        labels,
        cfg.quantsim(),
        batch_size=batch_size,
        deployed=result.model,
    )
