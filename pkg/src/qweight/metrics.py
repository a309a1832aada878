"""Average-bit accounting, reconstruction error statistics and group-range reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .bitpack import PackedLayer
from .container import HEADER_BYTES
from .engine import reconstruct_full
from .plan import ChannelPlan

DENSE_SECTIONS = ("main", "secondary", "meta", "second_order", "four_bit")
CSR_SECTIONS = ("csr_row_ptr", "csr_col_ind", "csr_values")
PAYLOAD_SECTIONS = DENSE_SECTIONS + CSR_SECTIONS
PLAN_SECTIONS = ("plan_bits", "plan_perm")


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


def avg_bit_1order(n_bits: int, g1: int) -> float:
    return float(n_bits + Fraction(n_bits + 16, g1))


def avg_bit_2order(n_bits: int, n2: int, g1: int, g2: int) -> float:
    return float(n_bits + Fraction(n_bits + n2, g1) + Fraction(n2 + 16, g1 * g2))


def avg_bit_mixed(frac_2bit: float, n2: int, g1: int, g2: int) -> float:
    """Average bit of a layer whose ``frac_2bit`` share of weights is 2-bit, the rest 4-bit."""
    a = _frac(frac_2bit)
    two = 2 + Fraction(2 + n2, g1) + Fraction(n2 + 16, g1 * g2)
    return float(a * two + (1 - a) * 4)


def outlier_overhead(ratio: float) -> float:
    """Extra bits per weight for 16-bit outliers: value + column index, minus the 2-bit slot."""
    return float((16 + 16 - 2) * _frac(ratio))


@dataclass
class BitReport:
    weights: int
    frac_2bit: Fraction
    n2: int
    g1: int
    g2: int
    outlier_ratio: float
    component_bits: dict[str, int]
    overhead_bits: dict[str, int]
    formula_bit_1order: float
    formula_bit_2order: float
    formula_bit_mixed: float
    outlier_overhead_bit: float

    @property
    def payload_bits(self) -> int:
        return sum(self.component_bits.values())

    @property
    def dense_payload_bit(self) -> float:
        """Codes plus every scale and zero-point, without the outlier matrix."""
        return float(Fraction(sum(self.component_bits[k] for k in DENSE_SECTIONS), self.weights))

    @property
    def outlier_payload_bit(self) -> float:
        return float(Fraction(sum(self.component_bits[k] for k in CSR_SECTIONS), self.weights))

    @property
    def actual_container_bit(self) -> float:
        return float(Fraction(self.payload_bits, self.weights))

    @property
    def file_bit(self) -> float:
        return float(Fraction(self.payload_bits + sum(self.overhead_bits.values()), self.weights))

    def gap_vs_formula(self) -> dict[str, float]:
        """Actual minus formula bits per weight, per component; sums to
        ``actual_container_bit - formula_bit_mixed - outlier_overhead_bit``."""
        a = self.frac_2bit
        formula = {
            "codes": 2 * a + 4 * (1 - a),
            "meta": a * Fraction(2 + self.n2, self.g1),
            "second_order": a * Fraction(self.n2 + 16, self.g1 * self.g2),
            "four_bit": Fraction(0),
            "outliers": 30 * Fraction(str(self.outlier_ratio)),
        }
        b = self.component_bits
        actual = {
            "codes": b["main"] + b["secondary"],
            "meta": b["meta"],
            "second_order": b["second_order"],
            "four_bit": b["four_bit"],
            "outliers": sum(b[k] for k in CSR_SECTIONS),
        }
        return {k: float(Fraction(actual[k], self.weights) - formula[k]) for k in formula}

    def per_weight(self) -> dict[str, float]:
        items = {**self.component_bits, **self.overhead_bits}
        return {k: float(Fraction(v, self.weights)) for k, v in items.items()}

    def rows(self) -> list[tuple[str, float]]:
        out = [(k, v) for k, v in self.per_weight().items()]
        out += [
            ("dense_payload", self.dense_payload_bit),
            ("outlier_payload", self.outlier_payload_bit),
            ("payload_total", self.actual_container_bit),
            ("file_total", self.file_bit),
            ("formula_1order", self.formula_bit_1order),
            ("formula_2order", self.formula_bit_2order),
            ("formula_mixed", self.formula_bit_mixed),
            ("formula_outlier_overhead", self.outlier_overhead_bit),
        ]
        return out

    def format(self) -> str:
        lines = [f"{name:<26}{value:.6f}" for name, value in self.rows()]
        lines += [f"gap_{name:<22}{value:+.6f}" for name, value in self.gap_vs_formula().items()]
        return "\n".join(lines)


def storage_bits_actual(layer: PackedLayer) -> BitReport:
    """Bits per real weight actually spent by the container (pads excluded from the count)."""
    c = layer.config
    sizes = c.section_sizes(layer.csr.nnz)
    weights = c.oc * c.ic
    frac_2bit = Fraction(c.ic - c.n4, c.ic)
    return BitReport(
        weights=weights,
        frac_2bit=frac_2bit, n2=c.n2, g1=c.g1, g2=c.g2, outlier_ratio=c.outlier_ratio,
        component_bits={k: 8 * sizes[k] for k in PAYLOAD_SECTIONS},
        overhead_bits={**{k: 8 * sizes[k] for k in PLAN_SECTIONS}, "header": 8 * HEADER_BYTES},
        formula_bit_1order=avg_bit_1order(c.n_bits, c.g1),
        formula_bit_2order=avg_bit_2order(c.n_bits, c.n2, c.g1, c.g2),
        formula_bit_mixed=avg_bit_mixed(frac_2bit, c.n2, c.g1, c.g2),
        outlier_overhead_bit=outlier_overhead(c.outlier_ratio),
    )


@dataclass
class ErrorStats:
    mse: float
    max_abs_err: float
    scopes: dict[str, tuple[float, float]] = field(default_factory=dict)
    group_mse: np.ndarray | None = None  # rows x groups, slot order
    group_max: np.ndarray | None = None


def quant_error_stats(weights, layer: PackedLayer) -> ErrorStats:
    """Reconstruction error (dense + outliers) against the original weights, pads excluded."""
    plan = layer.plan
    w = np.asarray(weights, dtype=np.float32)
    if w.shape != (layer.config.oc, layer.config.ic):
        raise ValueError(f"weights of shape {w.shape} do not match the layer")
    diff = reconstruct_full(layer).astype(np.float64) - plan.to_slots(w).astype(np.float64)
    real = plan.channel_of_slot >= 0
    sq = diff * diff
    scopes = {}
    for name, sel in (("layer", real), ("2bit", real & (plan.slot_bits == 2)),
                      ("4bit", real & (plan.slot_bits == 4))):
        if sel.any():
            scopes[name] = (float(sq[:, sel].mean()), float(np.abs(diff[:, sel]).max()))
    if layer.csr.nnz:
        d = diff[layer.csr.row_index(), layer.csr.col_ind.astype(np.int64)]
        scopes["outliers"] = (float(np.mean(d * d)), float(np.abs(d).max()))
    groups = sq.reshape(sq.shape[0], -1, 16)
    counts = real.reshape(-1, 16).sum(axis=1)
    group_mse = np.where(counts > 0, groups.sum(axis=2) / np.maximum(counts, 1), 0.0)
    group_max = np.abs(diff).reshape(diff.shape[0], -1, 16).max(axis=2)
    mse, mx = scopes["layer"]
    return ErrorStats(mse, mx, scopes, group_mse, group_max)


@dataclass
class GroupRanges:
    row: np.ndarray
    group: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def range(self) -> np.ndarray:
        return self.hi - self.lo

    def histogram(self, bins: int = 32) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.range, bins=bins)


def group_range_report(weights, plan: ChannelPlan, g1: int = 16) -> GroupRanges:
    """Per-group (min, max) over groups of ``g1`` consecutive slots; all-pad groups are skipped."""
    w = np.asarray(weights, dtype=np.float32)
    wp = plan.to_slots(w)
    if wp.shape[1] % g1:
        raise ValueError(f"padded width {wp.shape[1]} is not a multiple of {g1}")
    real = (plan.channel_of_slot >= 0).reshape(-1, g1)
    groups = wp.reshape(w.shape[0], -1, g1)
    mask = np.broadcast_to(real, groups.shape)
    lo = np.where(mask, groups, np.inf).min(axis=2)
    hi = np.where(mask, groups, -np.inf).max(axis=2)
    keep = real.any(axis=1)
    r, g = np.nonzero(np.broadcast_to(keep, lo.shape))
    return GroupRanges(r, g, lo[r, g], hi[r, g])


def write_group_range_csv(path, ranges: GroupRanges) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["row", "group", "min", "max", "range"])
        for row in zip(ranges.row, ranges.group, ranges.lo, ranges.hi, ranges.range):
            out.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3])), repr(float(row[4]))])


def write_error_stats_csv(path, stats: ErrorStats) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["scope", "mse", "max_abs_err"])
        for scope, (mse, mx) in stats.scopes.items():
            out.writerow([scope, repr(mse), repr(mx)])


def write_bits_csv(path, report: BitReport) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["component", "bits_per_weight"])
        for name, value in report.rows():
            out.writerow([name, repr(value)])
