"""Exception types raised by the toolkit.

Every error the library raises deliberately derives from QuanteqError so
callers can catch toolkit failures without masking programming errors.
The CLI maps these onto its exit codes.
"""


class QuanteqError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QuanteqError):
    """Tensor rank or dimension mismatch."""


class GraphError(QuanteqError):
    """Structurally invalid layer graph (cycles, bad wiring, bad params)."""


class ManifestError(QuanteqError):
    """Model or dataset manifest is malformed or has unsupported fields."""


class BlobError(QuanteqError):
    """Binary sidecar problem: out-of-bounds slice or checksum mismatch."""


class ConfigError(QuanteqError):
    """Invalid pipeline configuration (unknown step, bad ordering, missing input)."""


class MissingStatsError(QuanteqError):
    """An operation needed batch-norm statistics that the layer does not carry."""


class NumericalError(QuanteqError):
    """Non-finite values appeared where the toolkit guarantees finiteness."""
