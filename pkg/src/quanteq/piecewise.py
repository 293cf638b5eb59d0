"""Continuous piecewise-linear activation functions.

A function with n segments is stored as slopes a[0..n-1], offsets b[0..n-1]
and strictly increasing breakpoints c[0..n-2]:

    f(x) = a[0]*x + b[0]          for x <= c[0]
           a[i]*x + b[i]          for c[i-1] < x <= c[i]
           a[n-1]*x + b[n-1]      for x > c[n-2]

The key algebraic fact used by range equalization: for s > 0,

    f(s * x) == s * f_hat(x)    with f_hat = (a, b / s, c / s).

Functions whose offsets and breakpoints are all zero (ReLU, PReLU, identity)
are invariant under that rewrite.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError
from .tensor import DTYPE

_CONTINUITY_TOL = 1e-6


class PiecewiseLinear:
    """One continuous piecewise-linear scalar function, applied elementwise."""

    __slots__ = ("slopes", "offsets", "breakpoints", "name")

    def __init__(self, slopes, offsets, breakpoints, name: str = "custom"):
        self.slopes = np.asarray(slopes, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.breakpoints = np.asarray(breakpoints, dtype=np.float64)
        self.name = name
        self._validate()

    def _validate(self) -> None:
        n = self.slopes.shape[0]
        if n < 1 or self.slopes.ndim != 1:
            raise GraphError("piecewise function needs at least one segment")
        if self.offsets.shape != (n,):
            raise GraphError(f"offsets shape {self.offsets.shape} != ({n},)")
        if self.breakpoints.shape != (n - 1,):
            raise GraphError(
                f"{n} segments need {n - 1} breakpoints, got {self.breakpoints.shape}"
            )
        if n > 1 and not np.all(np.diff(self.breakpoints) > 0):
            raise GraphError("breakpoints must be strictly increasing")
        # Continuity at every breakpoint: segments must meet.
        for i, c in enumerate(self.breakpoints):
            left = self.slopes[i] * c + self.offsets[i]
            right = self.slopes[i + 1] * c + self.offsets[i + 1]
            scale = max(1.0, abs(left), abs(right))
            if abs(left - right) > _CONTINUITY_TOL * scale:
                raise GraphError(
                    f"discontinuity at breakpoint {c}: {left} vs {right}"
                )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if self.slopes.shape[0] == 1:
            out = self.slopes[0] * x + self.offsets[0]
        else:
            # side='left': x == c[i] belongs to segment i, matching "x <= c".
            idx = np.searchsorted(self.breakpoints, x, side="left")
            out = self.slopes[idx] * x + self.offsets[idx]
        return out.astype(DTYPE, copy=False)

    def reparam(self, s: float) -> "PiecewiseLinear":
        """Return f_hat with f(s*x) == s*f_hat(x) for the given s > 0."""
        if not s > 0:
            raise GraphError(f"reparameterization scale must be > 0, got {s}")
        return PiecewiseLinear(
            self.slopes, self.offsets / s, self.breakpoints / s, self.name
        )

    def is_scale_invariant(self) -> bool:
        """True when reparam(s) is a no-op for every s (ReLU, PReLU, identity)."""
        return bool(np.all(self.offsets == 0.0) and np.all(self.breakpoints == 0.0))

    def clip_bounds(self) -> tuple[float, float]:
        """(lower, upper) saturation values; infinite where the tail has slope.

        Only meaningful for functions whose outer segments are flat; a sloped
        tail reports the corresponding bound as +-inf.
        """
        lo = float(self.offsets[0]) if self.slopes[0] == 0.0 else -np.inf
        hi = float(self.offsets[-1]) if self.slopes[-1] == 0.0 else np.inf
        return lo, hi

    def is_clipped_linear(self) -> bool:
        """True for clip(x, a, b) shapes: flat tails around a unit-slope core.

        Identity (single unit-slope segment) counts, with infinite bounds.
        """
        n = self.slopes.shape[0]
        if n == 1:
            return self.slopes[0] == 1.0 and self.offsets[0] == 0.0
        if n == 2:
            # One flat side, one identity side.
            flat_lo = self.slopes[0] == 0.0 and self.slopes[1] == 1.0 and self.offsets[1] == 0.0
            flat_hi = self.slopes[1] == 0.0 and self.slopes[0] == 1.0 and self.offsets[0] == 0.0
            return flat_lo or flat_hi
        if n == 3:
            return (
                self.slopes[0] == 0.0
                and self.slopes[1] == 1.0
                and self.offsets[1] == 0.0
                and self.slopes[2] == 0.0
            )
        return False

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PiecewiseLinear)
            and np.array_equal(self.slopes, other.slopes)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.breakpoints, other.breakpoints)
        )

    def __repr__(self) -> str:
        return (
            f"PiecewiseLinear({self.name}: a={self.slopes.tolist()}, "
            f"b={self.offsets.tolist()}, c={self.breakpoints.tolist()})"
        )


def relu() -> PiecewiseLinear:
    return PiecewiseLinear([0.0, 1.0], [0.0, 0.0], [0.0], name="relu")


def relu6() -> PiecewiseLinear:
    return PiecewiseLinear([0.0, 1.0, 0.0], [0.0, 0.0, 6.0], [0.0, 6.0], name="relu6")


def prelu(alpha: float) -> PiecewiseLinear:
    return PiecewiseLinear([float(alpha), 1.0], [0.0, 0.0], [0.0], name="prelu")


def identity() -> PiecewiseLinear:
    return PiecewiseLinear([1.0], [0.0], [], name="identity")


def is_exact_relu(f: PiecewiseLinear) -> bool:
    return f == relu()
