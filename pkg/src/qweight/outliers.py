"""Sparse 16-bit outliers taken out of the 2-bit channels and stored as CSR."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .plan import GROUP, ChannelPlan
from .quant import FP16_MAX, dequantize_groups, fit_groups, quantize_groups, round_half_away


@dataclass(frozen=True, eq=False)
class CsrOutliers:
    row_ptr: np.ndarray  # uint32, rows + 1
    col_ind: np.ndarray  # uint16, slot index
    values: np.ndarray  # float16

    def __post_init__(self):
        rp = np.ascontiguousarray(self.row_ptr, dtype=np.uint32)
        ci = np.ascontiguousarray(self.col_ind, dtype=np.uint16)
        vals = np.ascontiguousarray(self.values, dtype=np.float16)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_ind", ci)
        object.__setattr__(self, "values", vals)
        if rp.size < 1 or rp[0] != 0:
            raise ValueError("row_ptr must start at 0")
        if np.any(np.diff(rp.astype(np.int64)) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if int(rp[-1]) != ci.size or ci.size != vals.size:
            raise ValueError("row_ptr[-1], col_ind and values disagree on nnz")
        rows = self.row_index()
        bad = (np.diff(rows) == 0) & (np.diff(ci.astype(np.int64)) <= 0)
        if bad.any():
            raise ValueError(f"columns of row {rows[np.argmax(bad)]} are not strictly increasing")

    @property
    def rows(self) -> int:
        return self.row_ptr.size - 1

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @classmethod
    def empty(cls, rows: int) -> "CsrOutliers":
        return cls(np.zeros(rows + 1, np.uint32), np.zeros(0, np.uint16), np.zeros(0, np.float16))

    def row_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), np.diff(self.row_ptr.astype(np.int64)))

    def to_dense(self, cols: int, dtype=np.float32) -> np.ndarray:
        out = np.zeros((self.rows, cols), dtype=dtype)
        out[self.row_index(), self.col_ind.astype(np.int64)] = self.values.astype(dtype)
        return out

    def mask(self, cols: int) -> np.ndarray:
        m = np.zeros((self.rows, cols), dtype=bool)
        m[self.row_index(), self.col_ind.astype(np.int64)] = True
        return m

    def check_eligible(self, plan: ChannelPlan) -> None:
        if self.nnz and np.any(plan.channel_of_slot[self.col_ind.astype(np.int64)] < 0):
            raise ValueError("outlier stored in a pad slot")
        if self.nnz and np.any(plan.slot_bits[self.col_ind.astype(np.int64)] != 2):
            raise ValueError("outlier stored in a 4-bit channel")


def outlier_budget(ratio: float, rows: int, cols: int) -> int:
    """Outlier count allowed for a matrix: ratio of ALL weights, rounded."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"outlier ratio must lie in [0, 1), got {ratio}")
    return int(round_half_away(float(Fraction(str(ratio)) * rows * cols)))


def _calib_slots(calib: np.ndarray, plan: ChannelPlan) -> np.ndarray:
    """H per slot; pads get 1 (their score is forced to 0 anyway)."""
    h = np.ones(plan.padded_ic, dtype=np.float64)
    h[plan.slot_of_channel] = np.asarray(calib, dtype=np.float64)
    return h


def _residual_scores(wp: np.ndarray, n_bits: int, h: np.ndarray) -> np.ndarray:
    rows, width = wp.shape
    groups = wp.reshape(rows, width // GROUP, GROUP)
    s, z = fit_groups(groups, n_bits)
    deq = dequantize_groups(quantize_groups(groups, s, z, n_bits), s, z)
    resid = (groups.astype(np.float64) - deq.astype(np.float64)).reshape(rows, width)
    return resid * resid / (h * h)


def score_outliers(weights: np.ndarray, calib: np.ndarray, plan: ChannelPlan) -> np.ndarray:
    """Hessian-weighted squared requantization residual for every 2-bit slot.

    The residual uses each group's baseline (s, z) fitted on all of its
    values. Returns a rows x padded_ic float64 matrix; 4-bit and pad slots
    score 0.
    """
    wp = plan.to_slots(np.asarray(weights, dtype=np.float32))
    h = _calib_slots(calib, plan)
    scores = np.zeros(wp.shape, dtype=np.float64)
    w2 = plan.width2
    scores[:, :w2] = _residual_scores(wp[:, :w2], 2, h[:w2])
    scores[:, plan.channel_of_slot < 0] = 0.0
    return scores


def select_outliers(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Global top-``k`` positive scores, ties broken by (row, col) ascending.

    Returns (rows, cols) sorted in row-major order.
    """
    if k < 0:
        raise ValueError("budget must be non-negative")
    scores = np.asarray(scores, dtype=np.float64)
    flat = scores.ravel()
    cand = np.flatnonzero(flat > 0)
    if k == 0 or cand.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if cand.size > k:
        vals = flat[cand]
        thresh = np.partition(vals, cand.size - k)[cand.size - k]
        above = cand[vals > thresh]
        tied = cand[vals == thresh]  # already ascending flat index
        cand = np.concatenate([above, tied[: k - above.size]])
    cand = np.sort(cand)
    return np.divmod(cand, scores.shape[1])


def split_dense_sparse(weights: np.ndarray, plan: ChannelPlan, selection) -> tuple[np.ndarray, CsrOutliers]:
    """Move the selected slots into a float16 CSR matrix.

    Returns the dense part in padded slot order with every selected slot set to
    0.0. Quantizers fit their groups with the selected slots excluded; since
    every quantization range contains zero, the 0.0 left behind lands exactly
    on the group's zero-point.
    """
    rows_sel, cols_sel = (np.asarray(a, dtype=np.int64) for a in selection)
    wp = plan.to_slots(np.asarray(weights, dtype=np.float32))
    oc = wp.shape[0]
    if rows_sel.size:
        if np.any(plan.slot_bits[cols_sel] != 2) or np.any(plan.channel_of_slot[cols_sel] < 0):
            raise ValueError("outlier selection touches a 4-bit or pad slot")
        order = np.lexsort((cols_sel, rows_sel))
        rows_sel, cols_sel = rows_sel[order], cols_sel[order]
        if np.any((np.diff(rows_sel) == 0) & (np.diff(cols_sel) == 0)):
            raise ValueError("duplicate outlier position")
    vals = wp[rows_sel, cols_sel]
    if np.any(np.abs(vals) > FP16_MAX):
        raise OverflowError("outlier value does not fit in float16")
    counts = np.bincount(rows_sel, minlength=oc)
    row_ptr = np.concatenate([[0], np.cumsum(counts)])
    csr = CsrOutliers(row_ptr, cols_sel, vals.astype(np.float16))
    dense = wp.copy()
    dense[rows_sel, cols_sel] = 0.0
    return dense, csr


def sparse_accumulate(csr: CsrOutliers, acc: np.ndarray, x: np.ndarray, r0: int = 0, r1: int | None = None) -> np.ndarray:
    """Continue each row's float32 running sum over its outliers, columns ascending.

    ``acc`` holds the running sums of rows ``r0:r1`` and is returned updated.
    """
    r1 = csr.rows if r1 is None else r1
    acc = np.array(acc, dtype=np.float32)
    rp = csr.row_ptr.astype(np.int64)
    start = rp[r0:r1]
    count = rp[r0 + 1:r1 + 1] - start
    x = np.asarray(x, dtype=np.float32)
    vals = csr.values.astype(np.float32)
    cols = csr.col_ind.astype(np.int64)
    for j in range(int(count.max()) if count.size else 0):
        live = np.flatnonzero(count > j)
        pos = start[live] + j
        acc[live] = acc[live] + vals[pos] * x[cols[pos]]
    return acc


def sparse_matvec(csr: CsrOutliers, x: np.ndarray) -> np.ndarray:
    return sparse_accumulate(csr, np.zeros(csr.rows, np.float32), x)


@dataclass(frozen=True)
class OutlierDistribution:
    count_2bit: int
    count_4bit: int

    @property
    def total(self) -> int:
        return self.count_2bit + self.count_4bit

    @property
    def frac_2bit(self) -> float:
        return self.count_2bit / self.total if self.total else 0.0

    @property
    def frac_4bit(self) -> float:
        return self.count_4bit / self.total if self.total else 0.0


def outlier_distribution_report(weights, calib, plan: ChannelPlan, k: int) -> OutlierDistribution:
    """Where the top-``k`` outliers fall when 4-bit channels are also eligible.

    4-bit slots are scored against their own 4-bit baseline quantization.
    """
    wp = plan.to_slots(np.asarray(weights, dtype=np.float32))
    h = _calib_slots(calib, plan)
    scores = np.zeros(wp.shape, dtype=np.float64)
    w2 = plan.width2
    scores[:, :w2] = _residual_scores(wp[:, :w2], 2, h[:w2])
    if plan.has4:
        scores[:, w2:] = _residual_scores(wp[:, w2:], 4, h[w2:])
    scores[:, plan.channel_of_slot < 0] = 0.0
    _, cols = select_outliers(scores, k)
    n4 = int((plan.slot_bits[cols] == 4).sum())
    return OutlierDistribution(count_2bit=int(cols.size) - n4, count_4bit=n4)
