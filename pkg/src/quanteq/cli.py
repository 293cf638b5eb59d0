"""Command-line front end.

Three subcommands:

* ``inspect``: per-layer, per-channel weight range summary as JSON (or a
  flat CSV table when the output path ends in .csv).
* ``run``: apply a transform pipeline to a model file and write the
  transformed model plus JSON reports into an output directory.
* ``report``: render the JSON reports of a previous run as text tables.

Exit codes: 0 success, 1 configuration error (bad flags, bad config file,
bad step list, missing calibration data), 2 model error (unreadable or
invalid model/dataset file, graph contract violations, missing statistics),
3 numerical failure during evaluation.

All JSON is written with sorted keys and no timestamps, so identical inputs
produce byte-identical reports.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .engine import activation_qparams
from .errors import ConfigError, NumericalError, QuanteqError
from .pipeline import (
    CANONICAL_STEPS,
    PipelineConfig,
    evaluate_pipeline,
    run_pipeline,
)
from .serialize import load_dataset, load_model, save_model

_PROBE_EXAMPLES = 256
_PROBE_SEED = 0


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="quanteq", description="post-training quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    ins = sub.add_parser("inspect", help="summarize per-channel weight ranges")
    ins.add_argument("--model", required=True, help="model manifest (.json)")
    ins.add_argument(
        "--out",
        help="output path; .csv gives a flat table, anything else JSON "
        "(default: JSON to stdout)",
    )

    run = sub.add_parser("run", help="apply a transform pipeline and write artifacts")
    run.add_argument("--model", required=True, help="model manifest (.json)")
    run.add_argument("--out", required=True, help="output directory for artifacts")
    run.add_argument("--config", help="pipeline config JSON file")
    run.add_argument("--data", help="calibration/evaluation dataset (.json)")
    run.add_argument("--bits", type=int, help="weight/activation bit width")
    run.add_argument("--scheme", choices=("sym", "asym"), help="weight grid scheme")
    run.add_argument(
        "--granularity", choices=("tensor", "channel"), help="weight grid granularity"
    )
    run.add_argument(
        "--steps",
        help="comma-separated pipeline steps, in order; valid: "
        + ",".join(CANONICAL_STEPS),
    )

    rep = sub.add_parser("report", help="render a run's JSON reports as tables")
    rep.add_argument("--out", required=True, help="artifact directory of a previous run")
    return p


def _five_numbers(values: np.ndarray) -> dict[str, float]:
    q = np.quantile(values.astype(np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "min": float(q[0]),
        "q25": float(q[1]),
        "median": float(q[2]),
        "q75": float(q[3]),
        "max": float(q[4]),
    }


def _inspect_data(graph) -> dict:
    layers = []
    for layer in graph.layers:
        if not layer.is_affine:
            continue
        w = layer.weight.reshape(layer.weight.shape[0], -1)
        ranges = 2.0 * np.abs(w).max(axis=1).astype(np.float64)
        positive = ranges[ranges > 0]
        layers.append(
            {
                "layer": layer.name,
                "kind": layer.kind,
                "channels": int(w.shape[0]),
                "range_ratio": float(positive.max() / positive.min()) if positive.size else None,
                "per_channel": [
                    {"channel": c, **_five_numbers(w[c])} for c in range(w.shape[0])
                ],
            }
        )
    return {"input_shape": list(graph.input_shape), "layers": layers}


def _inspect_csv(data: dict) -> str:
    lines = ["layer,channel,min,q25,q75,max"]
    for entry in data["layers"]:
        for ch in entry["per_channel"]:
            lines.append(
                "{},{},{:.8g},{:.8g},{:.8g},{:.8g}".format(
                    entry["layer"], ch["channel"], ch["min"], ch["q25"],
                    ch["q75"], ch["max"],
                )
            )
    return "\n".join(lines) + "\n"


def _dump_json(data: dict, path: Path | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def cmd_inspect(args) -> int:
    graph = load_model(args.model)
    data = _inspect_data(graph)
    if args.out and args.out.endswith(".csv"):
        Path(args.out).write_text(_inspect_csv(data), encoding="utf-8")
    else:
        _dump_json(data, Path(args.out) if args.out else None)
    return 0


def _load_config(args) -> PipelineConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("pipeline config must be a JSON object")
    if args.bits is not None:
        raw["bits"] = args.bits
    if args.scheme is not None:
        raw["scheme"] = args.scheme
    if args.granularity is not None:
        raw["granularity"] = args.granularity
    if args.steps is not None:
        raw["steps"] = [s for s in args.steps.split(",") if s]
    return PipelineConfig.from_json(raw)


def _probe_inputs(shape: tuple[int, ...]) -> np.ndarray:
    rng = np.random.default_rng(_PROBE_SEED)
    return rng.standard_normal((_PROBE_EXAMPLES, *shape), dtype=np.float32)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    graph = load_model(args.model)
    inputs = labels = None
    if args.data:
        inputs, labels = load_dataset(args.data)
    result = run_pipeline(graph, cfg, calib_inputs=inputs)
    eval_inputs = inputs if inputs is not None else _probe_inputs(graph.input_shape)
    ev = evaluate_pipeline(result, eval_inputs, labels, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.quantsim()
    act_grids = activation_qparams(result.model, sim)
    quant = {
        "config": cfg.to_json(),
        "weights": {
            name: qp.to_json() for name, qp in (result.weight_qparams or {}).items()
        },
        "activations": {
            result.model.layers[i].name: qp.to_json() for i, qp in act_grids.items()
        },
    }
    save_model(result.model, out / "model.json", quant=quant)

    transform_keys = ("fold_bn", "replace_relu6", "equalize", "absorb_bias")
    _dump_json(
        {k: result.reports[k] for k in transform_keys if k in result.reports},
        out / "equalization.json",
    )
    _dump_json(
        {
            "bias_correct_analytic": result.reports.get("bias_correct_analytic"),
            "bias_correct_empirical": result.reports.get("bias_correct_empirical"),
            "per_layer_bias": ev.per_layer_bias,
        },
        out / "bias_error.json",
    )
    _dump_json(
        {"config": cfg.to_json(), "steps": result.steps_run, **ev.to_json()},
        out / "eval.json",
    )
    if ev.accuracy is not None:
        print(f"accuracy {ev.accuracy:.4f} (float32 {ev.fp32_accuracy:.4f})")
    else:
        print(f"mean |deviation| {ev.mean_abs_deviation:.6g} on probe inputs")
    print(f"artifacts written to {out}")
    return 0


def _table(rows: list[list[str]], header: list[str]) -> str:
    cols = [header] + rows
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def _fmt(x, digits: int = 4) -> str:
    if x is None:
        return "-"
    return f"{x:.{digits}g}"


def cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise ConfigError(f"{out} is not a directory")

    def read(name: str) -> dict | None:
        path = out / name
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    ev = read("eval.json")
    if ev is not None:
        print("== evaluation ==")
        print(f"examples:          {ev['n_examples']}")
        print(f"float32 accuracy:  {_fmt(ev['fp32_accuracy'])}")
        print(f"quantized accuracy:{_fmt(ev['accuracy'])}")
        print(f"mean |deviation|:  {_fmt(ev['mean_abs_deviation'])}")
        print(f"max |deviation|:   {_fmt(ev['max_abs_deviation'])}")
        rows = [
            [name, _fmt(db)]
            for name, db in sorted(ev["per_layer_sqnr_db"].items())
        ]
        if rows:
            print()
            print(_table(rows, ["layer", "sqnr_db"]))
        print()

    eq = read("equalization.json")
    if eq is not None and eq.get("equalize"):
        e = eq["equalize"]
        print("== equalization ==")
        print(f"iterations: {e['iterations']}  converged: {e['converged']}")
        print(f"objective:  {_fmt(e['objective_before'])} -> {_fmt(e['objective_after'])}")
        def ratio(values) -> str:
            r = np.asarray(values, dtype=np.float64)
            r = r[r > 0]
            return _fmt(float(r.max() / r.min()) if r.size else 1.0)

        rows = [
            [
                f"{pair['layer_a']} / {pair['layer_b']}",
                ratio(pair["ranges_before"]["a"]),
                ratio(pair["ranges_after"]["a"]),
                ratio(pair["ranges_before"]["b"]),
                ratio(pair["ranges_after"]["b"]),
            ]
            for pair in e["pairs"]
        ]
        print(_table(rows, ["pair", "r1 ratio", "after", "r2 ratio", "after"]))
        print()

    be = read("bias_error.json")
    if be is not None:
        print("== bias ==")
        for key in ("bias_correct_analytic", "bias_correct_empirical"):
            entry = be.get(key)
            if not entry:
                continue
            corrected = entry.get("corrected", entry) or {}
            rows = [
                [name, _fmt(float(np.abs(np.asarray(v)).max()))]
                for name, v in sorted(corrected.items())
            ]
            print(f"{key}:")
            if rows:
                print(_table(rows, ["layer", "max |shift|"]))
            else:
                print("  (nothing corrected)")
        resid = be.get("per_layer_bias") or {}
        rows = [
            [name, _fmt(v["mean_abs"]), _fmt(v["max_abs"])]
            for name, v in sorted(resid.items())
        ]
        if rows:
            print("residual per-layer output bias:")
            print(_table(rows, ["layer", "mean |bias|", "max |bias|"]))

    if ev is None and eq is None and be is None:
        raise ConfigError(f"no report files found in {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "inspect":
            return cmd_inspect(args)
        if args.command == "run":
            return cmd_run(args)
        return cmd_report(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except QuanteqError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
