"""Uniform weight quantizers (vanilla and rescaled), STE gating, and bit-width utilization.

Codes live on the unsigned grid ``{0, ..., 2**b - 1}``; dequantized weights are
``gamma * (2 * code - s * z) / s`` with ``s = 2**b - 1`` and zero point ``z = 1``.
Vanilla quantization is the special case ``gamma = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .numerics import as_tensor, l1_mean, percentile, round_half_away

SUPPORTED_BITS = (2, 4, 8)
GAMMA_OPTIONS = ("none", "max_abs", "percentile", "l1_mean")


def grid_count(bits):
    """``s(b) = 2**b - 1``, the number of grid intervals."""
    return (1 << bits) - 1


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int = 8
    gamma_option: str = "l1_mean"
    percentile_x: float = 0.01
    zero_point: int = 1

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise InvalidArgumentError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.gamma_option not in GAMMA_OPTIONS:
            raise InvalidArgumentError(f"unknown gamma option {self.gamma_option!r}")
        if self.zero_point != 1:
            raise InvalidArgumentError("zero point is fixed at 1")
        if not 0.0 < self.percentile_x < 1.0:
            raise InvalidArgumentError("percentile_x must lie in (0, 1)")

    @property
    def levels(self):
        return grid_count(self.bits)

    @property
    def rescaled(self):
        return self.gamma_option != "none"

    def to_dict(self):
        return {
            "bits": self.bits,
            "gamma_option": self.gamma_option,
            "percentile_x": self.percentile_x,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            bits=int(d["bits"]),
            gamma_option=d.get("gamma_option", "l1_mean"),
            percentile_x=float(d.get("percentile_x", 0.01)),
        )


@dataclass(frozen=True)
class Quantized:
    gamma: float
    codes: np.ndarray
    w_hat: np.ndarray

    @property
    def scaled(self):
        """Dequantized weights divided by gamma (grid values in [-1, 1])."""
        return self.w_hat / self.gamma


def compute_gamma(w, spec: QuantizerSpec):
    w = as_tensor(w, "weights")
    opt = spec.gamma_option
    if opt == "none":
        return 1.0
    if opt == "max_abs":
        gamma = float(np.abs(w).max()) if w.size else 0.0
    elif opt == "percentile":
        x = spec.percentile_x
        gamma = max(abs(percentile(w, 1.0 - x)), abs(percentile(w, x)))
    else:
        gamma = l1_mean(w)
    if gamma == 0.0:
        raise DegenerateInputError(f"scale coefficient is zero for gamma option {opt!r}")
    return gamma


def _codes(scaled, spec):
    s = spec.levels
    return round_half_away(s / 2.0 * (np.clip(scaled, -1.0, 1.0) + spec.zero_point)).astype(np.int64)


def dequantize(codes, spec: QuantizerSpec, gamma=1.0):
    s = spec.levels
    # integer numerator first so that codes c and s - c dequantize to exact negatives
    return gamma * ((2.0 * np.asarray(codes, dtype=np.float64) - s * spec.zero_point) / s)


def quantize_vanilla(w, spec: QuantizerSpec):
    """Clamp to [-1, 1] and snap to the grid. Returns ``(codes, w_hat)``."""
    if spec.rescaled:
        raise InvalidArgumentError("quantize_vanilla requires gamma_option 'none'")
    w = as_tensor(w, "weights")
    codes = _codes(w, spec)
    return codes, dequantize(codes, spec)


def quantize_rescaw(w, spec: QuantizerSpec):
    """Rescale by gamma, quantize on [-1, 1], rescale back. Returns ``(gamma, codes, w_hat)``."""
    if not spec.rescaled:
        raise InvalidArgumentError("quantize_rescaw requires a gamma option")
    w = as_tensor(w, "weights")
    gamma = compute_gamma(w, spec)
    codes = _codes(w / gamma, spec)
    return gamma, codes, dequantize(codes, spec, gamma)


def quantize(w, spec: QuantizerSpec) -> Quantized:
    """Dispatch on ``spec.gamma_option``; vanilla reports ``gamma = 1``."""
    if spec.rescaled:
        return Quantized(*quantize_rescaw(w, spec))
    codes, w_hat = quantize_vanilla(w, spec)
    return Quantized(1.0, codes, w_hat)


def ste_backward(grad_out, w_scaled):
    """Straight-through gradient: identity where ``|w_scaled| <= 1``, zero elsewhere."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    w_scaled = np.asarray(w_scaled, dtype=np.float64)
    if grad_out.shape != w_scaled.shape:
        raise InvalidArgumentError(f"gradient shape {grad_out.shape} != weight shape {w_scaled.shape}")
    return np.where(np.abs(w_scaled) <= 1.0, grad_out, 0.0)


def analytic_utilization(a, bits):
    """Utilization predicted for weights confined to [-a, a]: ``(s*a + 1) / (s + 1)``."""
    s = grid_count(bits)
    return (s * a + 1.0) / (s + 1.0)


def outlier_free_range(w, x=0.01):
    """``max(|P_x(w)|, |P_{1-x}(w)|)``, the half-width used by the analytic estimate."""
    return max(abs(percentile(w, x)), abs(percentile(w, 1.0 - x)))


@dataclass(frozen=True)
class UtilizationEntry:
    bits: int
    n_actual: int
    n_total: int
    analytic: float | None = None
    range_a: float | None = None
    layer: int | None = None

    @property
    def ratio(self):
        return self.n_actual / self.n_total

    def to_dict(self):
        return {
            "layer": self.layer,
            "bits": self.bits,
            "n_actual": self.n_actual,
            "n_total": self.n_total,
            "ratio": self.ratio,
            "analytic": self.analytic,
            "range_a": self.range_a,
        }


def utilization(codes, bits, weights=None, layer=None) -> UtilizationEntry:
    """Count distinct codes in use; optionally add the percentile-based analytic estimate."""
    codes = np.asarray(codes)
    n_total = 1 << bits
    if codes.size == 0:
        raise InvalidArgumentError("no codes to analyze")
    if codes.min() < 0 or codes.max() > n_total - 1:
        raise InvalidArgumentError(f"codes outside [0, {n_total - 1}] for {bits}-bit grid")
    if not np.all(codes == np.round(codes)):
        raise InvalidArgumentError("codes must be integers")
    n_actual = int(np.unique(codes).size)
    analytic = range_a = None
    if weights is not None:
        range_a = outlier_free_range(weights)
        analytic = analytic_utilization(range_a, bits)
    return UtilizationEntry(bits, n_actual, n_total, analytic, range_a, layer)
