"""Consistency checks of a packed layer against its source weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitpack import PackedLayer, effective_scale_codes, unpack_layer
from .container import encode_packed_layer
from .engine import matvec_oracle, matvec_pipelined, reconstruct_dense, reconstruct_full
from .quant import dequantize_scale


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def __str__(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def slot_params(layer: PackedLayer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-slot (scale, zero, qmax) as stored in the layer, rows x padded_ic."""
    c, plan = layer.config, layer.plan
    codes = unpack_layer(layer)
    blocks = np.arange(c.oc) // c.g2
    s1 = dequantize_scale(effective_scale_codes(codes.scodes), codes.zero2[blocks], codes.scale2[blocks])
    scale = np.repeat(s1, 16, axis=1)
    zero = np.repeat(codes.zeros2.astype(np.int64), 16, axis=1)
    qmax = np.full(scale.shape, 3)
    if plan.has4:
        scale = np.concatenate([scale, np.repeat(codes.scale4.astype(np.float32), 16, axis=1)], axis=1)
        zero = np.concatenate([zero, np.repeat(codes.zero4.astype(np.int64), 16, axis=1)], axis=1)
        qmax = np.concatenate([qmax, np.full((c.oc, plan.width4), 15)], axis=1)
    return scale.astype(np.float32), zero, qmax


def reconstruction_bound(layer: PackedLayer, weights: np.ndarray) -> np.ndarray:
    """Largest error a clamp-and-round quantizer with the stored (s, z) may make at each slot."""
    s, z, qmax = slot_params(layer)
    s64 = s.astype(np.float64)
    w = layer.plan.to_slots(np.asarray(weights, np.float32)).astype(np.float64)
    lo, hi = -z * s64, (qmax - z) * s64
    outside = np.maximum(lo - w, 0) + np.maximum(w - hi, 0)
    return s64 / 2 + outside + 1e-6 * (np.abs(w) + s64)


def verify_layer(layer: PackedLayer, weights, blob: bytes | None = None, seed: int = 0) -> list[CheckResult]:
    c, plan = layer.config, layer.plan
    w = np.asarray(weights, dtype=np.float32)
    if w.shape != (c.oc, c.ic):
        raise ValueError(f"weights are {w.shape[0]}x{w.shape[1]} but the layer is {c.oc}x{c.ic}")
    results = []

    if blob is not None:
        same = encode_packed_layer(layer) == bytes(blob)
        results.append(CheckResult("round-trip", same, "" if same else "re-encoded bytes differ"))

    dense = reconstruct_dense(layer)
    full = reconstruct_full(layer)
    wp = plan.to_slots(w)
    pads = plan.channel_of_slot < 0
    outl = layer.csr.mask(plan.padded_ic)
    pad_ok = not np.any(dense[:, pads])
    results.append(CheckResult("pads-zero", pad_ok, "" if pad_ok else "pad slot reconstructs nonzero"))

    err = np.abs(dense.astype(np.float64) - wp.astype(np.float64))
    bound = reconstruction_bound(layer, w)
    check = ~outl & ~pads[None, :]
    bad = np.argwhere(check & (err > bound))
    results.append(CheckResult(
        "reconstruction-bound", bad.size == 0,
        "" if bad.size == 0 else f"{len(bad)} slots exceed the bound, first at (row, slot) {tuple(bad[0])}"))

    rows, cols = layer.csr.row_index(), layer.csr.col_ind.astype(np.int64)
    zero_ok = not np.any(dense[rows, cols])
    exact_ok = np.array_equal(full[rows, cols], wp[rows, cols].astype(np.float16).astype(np.float32))
    results.append(CheckResult("outlier-additivity", zero_ok and exact_ok,
                               "" if zero_ok and exact_ok else "dense+sparse differs from float16 weights"))

    x = np.random.default_rng(seed).standard_normal(c.ic).astype(np.float32)
    ref = matvec_oracle(layer, x)
    same = all(np.array_equal(ref.y.view(np.uint32), matvec_pipelined(layer, x, k).y.view(np.uint32))
               for k in (1, 4))
    y64 = full.astype(np.float64) @ plan.to_slots(x).astype(np.float64)
    denom = max(np.linalg.norm(y64), np.finfo(np.float32).tiny)
    rel = float(np.linalg.norm(ref.y - y64) / denom)
    results.append(CheckResult("oracle-equivalence", same and rel <= 1e-3,
                               f"pipelined bitwise={'yes' if same else 'no'}, rel err vs float64 {rel:.2e}"))
    return results
