"""End-to-end layer quantization: plan, outliers, both quantization orders, packing."""
from __future__ import annotations

import logging

import numpy as np

from .bitpack import LayerCodes, LayerConfig, PackedLayer, effective_scale_codes, pack_layer
from .outliers import outlier_budget, score_outliers, select_outliers, split_dense_sparse
from .plan import GROUP, GROUPS_PER_TILE, TILE4, ChannelPlan, build_plan, compute_amplitudes
from .quant import FP16_MAX, FP16_TINY, dequantize_scale, fit_groups, fit_scales_2order, quantize_groups, round_half_away

log = logging.getLogger(__name__)


def _zero_points(lo: np.ndarray, scale: np.ndarray, qmax: int) -> np.ndarray:
    s = scale.astype(np.float64)
    z = round_half_away(-lo.astype(np.float64) / np.where(s > 0, s, 1.0))
    return np.where(s > 0, np.clip(z, 0, qmax), 0).astype(np.int64)


def _group_low(values: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    v = values if mask is None else np.where(mask, values, 0.0)
    return np.minimum(v.min(axis=-1), 0.0)


def quantize_2bit_part(dense: np.ndarray, keep: np.ndarray, g2: int, n2: int = 4):
    """Quantize the 2-bit slots (rows x 48T) with first- and second-order scales.

    First-order scales are fitted on the kept slots, quantized per
    (row block, group column) to ``n2`` bits, and the weights are then coded
    against the decoded scales.  Groups 1 and 2 of each tile keep only the
    top 3 bits of their scale code.
    """
    oc, width = dense.shape
    ngroups = width // GROUP
    groups = dense.reshape(oc, ngroups, GROUP)
    mask = keep.reshape(oc, ngroups, GROUP)
    scale1, _ = fit_groups(groups, 2, mask)

    blocks = -(-oc // g2)
    padded = np.zeros((blocks * g2, ngroups), dtype=np.float32)
    padded[:oc] = scale1
    stacked = padded.reshape(blocks, g2, ngroups).transpose(0, 2, 1)
    codes, zero2, scale2 = fit_scales_2order(stacked, n2)
    code4 = codes.transpose(0, 2, 1).reshape(blocks * g2, ngroups)[:oc].astype(np.int64)
    lsb_dropped = np.tile(np.array([0, 1, 1]), ngroups // GROUPS_PER_TILE)
    scodes = (code4 >> lsb_dropped).astype(np.uint8)

    row_block = np.arange(oc) // g2
    decoded = dequantize_scale(effective_scale_codes(scodes), zero2[row_block], scale2[row_block])
    zeros = _zero_points(_group_low(groups, mask), decoded, 3)
    codes2 = quantize_groups(np.where(mask, groups, 0.0), decoded, zeros, 2)
    return codes2.reshape(oc, width), zeros.astype(np.uint8), scodes, zero2.astype(np.uint8), scale2


def quantize_4bit_part(dense: np.ndarray):
    """Quantize the 4-bit slots (rows x 16T); scales are stored as float16."""
    oc, width = dense.shape
    groups = dense.reshape(oc, width // TILE4, TILE4)
    scale, _ = fit_groups(groups, 4)
    if np.any(scale > FP16_MAX):
        raise OverflowError("4-bit group scale does not fit in float16")
    s16 = scale.astype(np.float16)
    s16 = np.where((s16 == 0) & (scale > 0), FP16_TINY, s16).astype(np.float16)
    zeros = _zero_points(_group_low(groups, None), s16.astype(np.float32), 15)
    codes = quantize_groups(groups, s16.astype(np.float32), zeros, 4)
    return codes.reshape(oc, width), s16, zeros.astype(np.uint8)


def quantize_layer(
    weights,
    calib=None,
    *,
    alpha: float = 0.25,
    g2: int = 16,
    n2: int = 4,
    outlier_ratio: float = 0.002,
    plan: ChannelPlan | None = None,
) -> PackedLayer:
    w = np.asarray(weights, dtype=np.float32)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    oc, ic = w.shape
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    h = np.ones(ic, dtype=np.float32) if calib is None else np.asarray(calib, dtype=np.float32)
    if h.shape != (ic,) or np.any(~(h > 0)):
        raise ValueError("calibration must be positive with one entry per input channel")
    if n2 != 4:
        raise ValueError("the packed layout stores 4/3/3-bit scale codes, so N2 must be 4")
    if g2 < 1:
        raise ValueError("g2 must be at least 1")

    if plan is None:
        plan = build_plan(compute_amplitudes(w, h), alpha)
    elif plan.ic != ic:
        raise ValueError("plan does not match the weight matrix")

    k = outlier_budget(outlier_ratio, oc, ic)
    selection = select_outliers(score_outliers(w, h, plan), k)
    dense, csr = split_dense_sparse(w, plan, selection)
    keep = ~csr.mask(plan.padded_ic)
    log.info("plan: %d 4-bit channels, %d tiles, %d outliers (budget %d)",
             plan.n4, plan.tiles, csr.nnz, k)

    w2 = plan.width2
    codes2, zeros2, scodes, zero2, scale2 = quantize_2bit_part(dense[:, :w2], keep[:, :w2], g2, n2)
    if plan.has4:
        codes4, scale4, zero4 = quantize_4bit_part(dense[:, w2:])
    else:
        codes4 = np.zeros((oc, 0), np.uint8)
        scale4 = np.zeros((oc, 0), np.float16)
        zero4 = np.zeros((oc, 0), np.uint8)

    config = LayerConfig.for_plan(plan, oc, g2=g2, n2=n2, alpha=float(alpha),
                                  outlier_ratio=float(outlier_ratio))
    return pack_layer(LayerCodes(config, plan, codes2, zeros2, scodes, zero2, scale2,
                                 codes4, scale4, zero4, csr))
