"""Uniform group quantization and second-order quantization of group scales.

Every group is quantized over a range that always contains zero, so the
zero-point fits in ``N`` bits without clamping and the value ``0.0`` maps
exactly onto the zero-point code.  Constant groups get a step chosen so the
constant reconstructs bit-for-bit in float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FP16_MAX = float(np.finfo(np.float16).max)
FP16_TINY = np.float16(2.0**-24)  # smallest positive subnormal
F32_TINY = np.float32(2.0**-149)


def round_half_away(x):
    """Round to nearest integer, ties away from zero (exact for float64 input)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    frac = x - t
    return t + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


def _exact_steps(mag: np.ndarray, qmax: int) -> tuple[np.ndarray, np.ndarray]:
    """For each positive float32 magnitude, pick the largest step count k <= qmax
    and a float32 step s with float32(k * s) == mag."""
    mag = mag.astype(np.float32)
    steps = np.ones(mag.shape, dtype=np.int64)
    scale = mag.copy()
    todo = np.ones(mag.shape, dtype=bool)
    for k in range(qmax, 1, -1):
        if not todo.any():
            break
        kf = np.float32(k)
        base = (mag.astype(np.float64) / k).astype(np.float32)
        for cand in (base, np.nextafter(base, np.float32(np.inf)),
                     np.nextafter(base, np.float32(0))):
            hit = todo & (cand * kf == mag)
            scale = np.where(hit, cand, scale)
            steps = np.where(hit, k, steps)
            todo &= ~hit
    return scale, steps


def fit_groups(values: np.ndarray, n_bits: int, mask: np.ndarray | None = None):
    """Fit (scale, zero) for every group along the last axis.

    ``mask`` marks the entries that take part in the fit; excluded entries are
    ignored when computing the range.  Returns float32 scales and int64 zeros
    with the group axis removed.
    """
    values = np.asarray(values, dtype=np.float32)
    if values.shape[-1] == 0:
        raise ValueError("empty group")
    qmax = (1 << n_bits) - 1
    if mask is None:
        mn = values.min(axis=-1)
        mx = values.max(axis=-1)
    else:
        mn = np.where(mask, values, np.inf).min(axis=-1)
        mx = np.where(mask, values, -np.inf).max(axis=-1)
        empty = ~mask.any(axis=-1)
        mn = np.where(empty, 0.0, mn).astype(np.float32)
        mx = np.where(empty, 0.0, mx).astype(np.float32)
    lo = np.minimum(mn, 0).astype(np.float64)
    hi = np.maximum(mx, 0).astype(np.float64)

    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scale = (safe / qmax).astype(np.float32)
    # a subnormal span can underflow to a zero step
    scale = np.where(scale > 0, scale, F32_TINY).astype(np.float32)
    zero = np.clip(round_half_away(-lo / scale.astype(np.float64)), 0, qmax)

    degenerate = (mn == mx) & (mn != 0)
    if degenerate.any():
        v = mn[degenerate].astype(np.float32)
        # positive constants sit k steps above zero=0, negative ones k steps below zero=qmax
        scale[degenerate], _ = _exact_steps(np.abs(v), qmax)
        zero[degenerate] = np.where(v > 0, 0, qmax)
    allzero = span == 0
    scale[allzero] = 1.0
    zero[allzero] = 0
    return scale, zero.astype(np.int64)


def quantize_groups(values, scale, zero, n_bits: int) -> np.ndarray:
    """Vectorized quantization; ``scale``/``zero`` broadcast over the last axis."""
    qmax = (1 << n_bits) - 1
    values = np.asarray(values, dtype=np.float32).astype(np.float64)
    s = np.asarray(scale, dtype=np.float32).astype(np.float64)[..., None]
    z = np.asarray(zero, dtype=np.int64)[..., None]
    live = s > 0
    q = round_half_away(values / np.where(live, s, 1.0)) + z
    q = np.where(live, q, z)
    return np.clip(q, 0, qmax).astype(np.uint8)


def dequantize_groups(codes, scale, zero) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    z = np.asarray(zero, dtype=np.int64)[..., None]
    s = np.asarray(scale, dtype=np.float32)[..., None]
    return (codes - z).astype(np.float32) * s


def fit_scale_zero(values, n_bits: int) -> tuple[float, int]:
    """Scale and zero-point for one group (see :func:`fit_groups`)."""
    values = np.asarray(values, dtype=np.float32)
    if values.size == 0:
        raise ValueError("empty group")
    if not np.all(np.isfinite(values)):
        raise ValueError("group contains non-finite values")
    s, z = fit_groups(values.reshape(1, -1), n_bits)
    return float(s[0]), int(z[0])


def quantize_values(values, scale: float, zero: int, n_bits: int) -> np.ndarray:
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    values = np.asarray(values, dtype=np.float32).reshape(1, -1)
    return quantize_groups(values, np.float32([scale]), [zero], n_bits)[0]


def dequantize_values(codes, scale: float, zero: int) -> np.ndarray:
    codes = np.asarray(codes).reshape(1, -1)
    return dequantize_groups(codes, np.float32([scale]), [zero])[0]


@dataclass(frozen=True)
class ScaleQuant2:
    """Second-order quantization of a vector of first-order scales."""

    codes: np.ndarray  # uint8, one per first-order group
    zero2: int
    scale2: np.float16
    n_bits: int = 4


def fit_scales_2order(scales: np.ndarray, n_bits: int = 4):
    """Fit (zero2, scale2) over the last axis of non-negative scales.

    scale2 is the float16 rounding of the float32 step; codes are computed
    against that float16 value, which is what the decoder sees.
    """
    scales = np.asarray(scales, dtype=np.float32)
    if scales.shape[-1] == 0:
        raise ValueError("empty group")
    if np.any(scales < 0):
        raise ValueError("scales must be non-negative")
    qmax = (1 << n_bits) - 1
    hi = scales.max(axis=-1).astype(np.float64)
    step32 = np.where(hi > 0, hi / qmax, 1.0).astype(np.float32)
    if np.any(step32 > FP16_MAX):
        raise OverflowError("second-order scale does not fit in float16")
    step16 = step32.astype(np.float16)
    step16 = np.where((step16 == 0) & (hi > 0), FP16_TINY, step16).astype(np.float16)
    # in the subnormal range rounding can leave the top scale past code qmax; step up once
    clipped = round_half_away(hi / step16.astype(np.float64)) > qmax
    step16 = np.where(clipped, np.nextafter(step16, np.float16(np.inf)), step16).astype(np.float16)
    # range always starts at 0 for non-negative input, so zero2 is 0
    zero2 = np.zeros(hi.shape, dtype=np.int64)
    codes = quantize_groups(scales, step16.astype(np.float32), zero2, n_bits)
    return codes, zero2, step16


def quantize_scales_2order(scales, n_bits: int = 4) -> ScaleQuant2:
    scales = np.asarray(scales, dtype=np.float32).reshape(1, -1)
    codes, zero2, scale2 = fit_scales_2order(scales, n_bits)
    return ScaleQuant2(codes=codes[0], zero2=int(zero2[0]), scale2=scale2[0], n_bits=n_bits)


def dequantize_scale(code, zero2, scale2) -> np.ndarray | np.float32:
    """First-order scale from its second-order code: (code - zero2) * scale2 in float32."""
    diff = np.asarray(code, dtype=np.int64) - np.asarray(zero2, dtype=np.int64)
    return diff.astype(np.float32) * np.asarray(scale2, dtype=np.float16).astype(np.float32)
