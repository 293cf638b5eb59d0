"""Model and dataset files: JSON manifest + raw binary sidecar.

A model is stored as two files: ``<name>.json`` (UTF-8 manifest) and the blob
sidecar it names (raw little-endian float32 values, no header). Each array is
addressed by a blob reference ``{"offset": <bytes>, "len": <bytes>,
"crc32": <zlib crc of the slice>}``. The manifest schema is frozen by golden
tests; the field names are:

    version      always 1
    input_shape  list of ints
    blob         sidecar file name, relative to the manifest
    layers       list of layer entries (see below)
    edges        list of [from, to] index pairs (-1 = graph input)
    quant        optional extension object, stored verbatim

Layer entries by kind (blob refs marked *):

    linear            name, out_features, in_features, weight*, bias*
    conv2d            name, out_channels, in_channels, kernel [kh, kw],
                      stride, padding, weight*, bias*
    depthwise_conv2d  name, channels, kernel, stride, padding, weight*, bias*
    batchnorm         name, channels, epsilon, gamma*, beta*, mean*, var*
    activation        name, activation (function name), slopes, offsets,
                      breakpoints (lists of per-function lists, length 1 when
                      shared across channels)
    residual_add      name

Affine entries may carry optional ``eff_shift`` / ``eff_scale`` refs so that a
partially transformed model (folded batch norm) survives a save/load cycle.

A dataset file uses the same encoding: manifest with ``count``,
``input_shape``, ``blob``, an ``inputs`` f32 blob ref and an optional
``labels`` ref holding little-endian int32 values.

Blob bytes are written in layer order with fields in the documented order, so
saving a loaded model reproduces the blob byte for byte.
"""

from __future__ import annotations

import json
import logging
import zlib
from pathlib import Path

import numpy as np

from .errors import BlobError, ManifestError
from .graph import (
    ACTIVATION,
    BATCHNORM,
    CONV2D,
    DEPTHWISE_CONV2D,
    LINEAR,
    RESIDUAL_ADD,
    BatchNormParams,
    Layer,
    LayerGraph,
)
from .piecewise import PiecewiseLinear

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray, dtype: str = "<f4") -> dict:
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        ref = {"offset": self.offset, "len": len(raw), "crc32": zlib.crc32(raw)}
        self.chunks.append(raw)
        self.offset += len(raw)
        return ref

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


class _BlobReader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.path = path

    def read(self, ref: dict, shape: tuple[int, ...], dtype: str = "<f4") -> np.ndarray:
        try:
            offset, length, crc = int(ref["offset"]), int(ref["len"]), int(ref["crc32"])
        except (TypeError, KeyError) as e:
            raise ManifestError(f"malformed blob reference {ref!r}") from e
        if offset < 0 or length < 0 or offset + length > len(self.buf):
            raise BlobError(
                f"{self.path}: blob slice [{offset}, {offset + length}) exceeds "
                f"sidecar size {len(self.buf)}"
            )
        raw = self.buf[offset : offset + length]
        if zlib.crc32(raw) != crc:
            raise BlobError(f"{self.path}: checksum mismatch at offset {offset}")
        itemsize = np.dtype(dtype).itemsize
        n = int(np.prod(shape)) if shape else length // itemsize
        if n * itemsize != length:
            raise BlobError(
                f"{self.path}: blob length {length} does not hold {n} {dtype} values"
            )
        arr = np.frombuffer(raw, dtype=dtype)
        return arr.reshape(shape).copy() if shape else arr.copy()


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise ManifestError(f"{where}: missing field {key!r}")
    return entry[key]


def _layer_entry(layer: Layer, blob: _BlobWriter) -> dict:
    entry: dict = {"kind": layer.kind, "name": layer.name}
    if layer.kind == LINEAR:
        entry["out_features"] = int(layer.weight.shape[0])
        entry["in_features"] = int(layer.weight.shape[1])
        entry["weight"] = blob.add(layer.weight)
        entry["bias"] = blob.add(layer.bias)
    elif layer.kind in (CONV2D, DEPTHWISE_CONV2D):
        if layer.kind == CONV2D:
            entry["out_channels"] = int(layer.weight.shape[0])
            entry["in_channels"] = int(layer.weight.shape[1])
        else:
            entry["channels"] = int(layer.weight.shape[0])
        entry["kernel"] = [int(layer.weight.shape[2]), int(layer.weight.shape[3])]
        entry["stride"] = int(layer.stride)
        entry["padding"] = int(layer.padding)
        entry["weight"] = blob.add(layer.weight)
        entry["bias"] = blob.add(layer.bias)
    elif layer.kind == BATCHNORM:
        entry["channels"] = int(layer.bn.gamma.shape[0])
        entry["epsilon"] = float(layer.bn.epsilon)
        entry["gamma"] = blob.add(layer.bn.gamma)
        entry["beta"] = blob.add(layer.bn.beta)
        entry["mean"] = blob.add(layer.bn.mean)
        entry["var"] = blob.add(layer.bn.var)
    elif layer.kind == ACTIVATION:
        entry["activation"] = layer.act[0].name
        entry["slopes"] = [f.slopes.tolist() for f in layer.act]
        entry["offsets"] = [f.offsets.tolist() for f in layer.act]
        entry["breakpoints"] = [f.breakpoints.tolist() for f in layer.act]
    elif layer.kind != RESIDUAL_ADD:
        raise ManifestError(f"cannot serialize layer kind {layer.kind!r}")
    if layer.is_affine:
        if layer.eff_shift is not None:
            entry["eff_shift"] = blob.add(layer.eff_shift)
        if layer.eff_scale is not None:
            entry["eff_scale"] = blob.add(layer.eff_scale)
    return entry


def _layer_from_entry(entry: dict, blob: _BlobReader) -> Layer:
    kind = _require(entry, "kind", "layer entry")
    name = str(_require(entry, "name", "layer entry"))
    where = f"layer {name!r}"
    if kind == LINEAR:
        out_f = int(_require(entry, "out_features", where))
        in_f = int(_require(entry, "in_features", where))
        layer = Layer(
            LINEAR, name,
            weight=blob.read(_require(entry, "weight", where), (out_f, in_f)),
            bias=blob.read(_require(entry, "bias", where), (out_f,)),
        )
    elif kind in (CONV2D, DEPTHWISE_CONV2D):
        kh, kw = (int(v) for v in _require(entry, "kernel", where))
        if kind == CONV2D:
            oc = int(_require(entry, "out_channels", where))
            ic = int(_require(entry, "in_channels", where))
        else:
            oc = int(_require(entry, "channels", where))
            ic = 1
        layer = Layer(
            kind, name,
            weight=blob.read(_require(entry, "weight", where), (oc, ic, kh, kw)),
            bias=blob.read(_require(entry, "bias", where), (oc,)),
            stride=int(_require(entry, "stride", where)),
            padding=int(_require(entry, "padding", where)),
        )
    elif kind == BATCHNORM:
        n = int(_require(entry, "channels", where))
        layer = Layer(
            BATCHNORM, name,
            bn=BatchNormParams(
                gamma=blob.read(_require(entry, "gamma", where), (n,)),
                beta=blob.read(_require(entry, "beta", where), (n,)),
                mean=blob.read(_require(entry, "mean", where), (n,)),
                var=blob.read(_require(entry, "var", where), (n,)),
                epsilon=float(_require(entry, "epsilon", where)),
            ),
        )
    elif kind == ACTIVATION:
        fn_name = str(_require(entry, "activation", where))
        slopes = _require(entry, "slopes", where)
        offsets = _require(entry, "offsets", where)
        breaks = _require(entry, "breakpoints", where)
        if not (len(slopes) == len(offsets) == len(breaks)) or not slopes:
            raise ManifestError(f"{where}: inconsistent activation parameter lists")
        fns = [
            PiecewiseLinear(a, b, c, name=fn_name)
            for a, b, c in zip(slopes, offsets, breaks)
        ]
        layer = Layer(ACTIVATION, name, act=fns)
    elif kind == RESIDUAL_ADD:
        layer = Layer(RESIDUAL_ADD, name)
    else:
        raise ManifestError(f"{where}: unknown layer kind {kind!r}")
    if layer.is_affine:
        n = layer.weight.shape[0]
        if "eff_shift" in entry:
            layer.eff_shift = blob.read(entry["eff_shift"], (n,))
        if "eff_scale" in entry:
            layer.eff_scale = blob.read(entry["eff_scale"], (n,))
    return layer


def _blob_path(manifest_path: Path, manifest: dict) -> Path:
    blob_name = _require(manifest, "blob", str(manifest_path))
    p = Path(blob_name)
    if p.is_absolute() or len(p.parts) != 1:
        raise ManifestError(f"blob name {blob_name!r} must be a bare file name")
    return manifest_path.parent / p


def _load_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(manifest, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported format version {version!r}")
    return manifest


def save_model(graph: LayerGraph, path: str | Path, quant: dict | None = None) -> Path:
    """Write ``graph`` to ``path`` (manifest) plus a ``.bin`` sidecar.

    ``quant`` is an optional JSON-serializable object stored verbatim under
    the manifest's "quant" key. Returns the manifest path.
    """
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    writer = _BlobWriter()
    layers = [_layer_entry(l, writer) for l in graph.layers]
    manifest = {
        "version": FORMAT_VERSION,
        "input_shape": [int(d) for d in graph.input_shape],
        "blob": blob_path.name,
        "layers": layers,
        "edges": [[int(f), int(t)] for f, t in graph.edges],
    }
    if quant is not None:
        manifest["quant"] = quant
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(writer.bytes())
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("saved model: %s (%d layers, %d blob bytes)", path, len(layers), writer.offset)
    return path


def load_model(path: str | Path) -> LayerGraph:
    """Load a model manifest and its blob sidecar into a validated graph."""
    path = Path(path)
    manifest = _load_manifest(path)
    blob_path = _blob_path(path, manifest)
    try:
        buf = blob_path.read_bytes()
    except OSError as e:
        raise BlobError(f"cannot read blob sidecar {blob_path}: {e}") from e
    reader = _BlobReader(buf, blob_path)
    entries = _require(manifest, "layers", str(path))
    edges = _require(manifest, "edges", str(path))
    shape = _require(manifest, "input_shape", str(path))
    if not isinstance(entries, list) or not isinstance(edges, list):
        raise ManifestError(f"{path}: layers and edges must be lists")
    layers = [_layer_from_entry(e, reader) for e in entries]
    try:
        graph = LayerGraph(layers, [tuple(e) for e in edges], tuple(shape))
        graph.validate()
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{path}: {e}") from e
    return graph


def load_quant_extension(path: str | Path) -> dict | None:
    """Return the manifest's optional "quant" object without loading blobs."""
    return _load_manifest(Path(path)).get("quant")


def save_dataset(
    inputs: np.ndarray, labels: np.ndarray | None, path: str | Path
) -> Path:
    """Write a dataset (inputs [n, ...], optional int labels [n]) next to ``path``."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.ndim < 2:
        raise ManifestError("dataset inputs must have a leading batch dimension")
    writer = _BlobWriter()
    inputs_ref = writer.add(inputs)
    labels_ref = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (inputs.shape[0],):
            raise ManifestError(
                f"labels shape {labels.shape} != ({inputs.shape[0]},)"
            )
        labels_ref = writer.add(labels, dtype="<i4")
    manifest = {
        "version": FORMAT_VERSION,
        "count": int(inputs.shape[0]),
        "input_shape": [int(d) for d in inputs.shape[1:]],
        "blob": blob_path.name,
        "inputs": inputs_ref,
        "labels": labels_ref,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(writer.bytes())
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Load a dataset file; returns (inputs, labels-or-None)."""
    path = Path(path)
    manifest = _load_manifest(path)
    blob_path = _blob_path(path, manifest)
    try:
        buf = blob_path.read_bytes()
    except OSError as e:
        raise BlobError(f"cannot read blob sidecar {blob_path}: {e}") from e
    reader = _BlobReader(buf, blob_path)
    count = int(_require(manifest, "count", str(path)))
    shape = tuple(int(d) for d in _require(manifest, "input_shape", str(path)))
    inputs = reader.read(_require(manifest, "inputs", str(path)), (count, *shape))
    labels_ref = manifest.get("labels")
    labels = None
    if labels_ref is not None:
        labels = reader.read(labels_ref, (count,), dtype="<i4")
    return inputs, labels
