"""Per-input-channel amplitudes and the 2-bit/4-bit channel plan.

Slot layout of the permuted, padded channel axis::

    [ 2-bit channels (ascending) | 2-bit pads | 4-bit channels (ascending) | 4-bit pads ]

Tile ``t`` covers 2-bit slots ``48t .. 48t+47`` and, when the layer has a
4-bit part, 4-bit slots ``48T + 16t .. 48T + 16t + 15``.  A layer without
4-bit channels uses 48-channel tiles with no 4-bit part.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

GROUP = 16
GROUPS_PER_TILE = 3
TILE2 = GROUP * GROUPS_PER_TILE  # 48 two-bit channels per tile
TILE4 = 16  # four-bit channels per tile
MAX_SLOTS = 1 << 16  # column indices are stored as u16


def compute_amplitudes(weights: np.ndarray, calib: np.ndarray) -> np.ndarray:
    """Hessian-calibrated amplitude of every input channel.

    ``amp[i] = sum_j W[j, i]**2 / H[i]**2``, accumulated in float64.
    """
    w = np.asarray(weights, dtype=np.float32)
    h = np.asarray(calib, dtype=np.float64)
    if w.ndim != 2 or h.shape != (w.shape[1],):
        raise ValueError(f"calibration length {h.shape} does not match {w.shape[1]} input channels")
    w64 = w.astype(np.float64)
    return np.einsum("ji,ji->i", w64, w64) / (h * h)


def n4_for(ic: int, alpha: float) -> int:
    """Number of 4-bit channels: alpha*IC rounded, then to the nearest multiple of 16 (ties up)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    k = int(np.floor(alpha * ic + 0.5))
    return TILE4 * ((2 * k + TILE4) // (2 * TILE4))


@dataclass(frozen=True, eq=False)
class ChannelPlan:
    bits: np.ndarray  # uint8 per original channel, 2 or 4

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or bits.size == 0:
            raise ValueError("plan needs at least one channel")
        if not np.all((bits == 2) | (bits == 4)):
            raise ValueError("channel bit widths must be 2 or 4")
        n4 = int((bits == 4).sum())
        if n4 % TILE4:
            raise ValueError(f"4-bit channel count {n4} is not a multiple of {TILE4}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        if self.padded_ic > MAX_SLOTS:
            raise ValueError(f"padded width {self.padded_ic} exceeds {MAX_SLOTS} columns")

    @property
    def ic(self) -> int:
        return int(self.bits.size)

    @cached_property
    def n4(self) -> int:
        return int((self.bits == 4).sum())

    @property
    def n2(self) -> int:
        return self.ic - self.n4

    @property
    def has4(self) -> bool:
        return self.n4 > 0

    @cached_property
    def tiles(self) -> int:
        t2 = -(-self.n2 // TILE2)
        return max(t2, self.n4 // TILE4) if self.has4 else t2

    @property
    def pad2(self) -> int:
        return TILE2 * self.tiles - self.n2

    @property
    def pad4(self) -> int:
        return TILE4 * self.tiles - self.n4 if self.has4 else 0

    @property
    def width2(self) -> int:
        return TILE2 * self.tiles

    @property
    def width4(self) -> int:
        return TILE4 * self.tiles if self.has4 else 0

    @property
    def padded_ic(self) -> int:
        return self.width2 + self.width4

    @property
    def tile_width(self) -> int:
        return TILE2 + TILE4 if self.has4 else TILE2

    @cached_property
    def perm(self) -> np.ndarray:
        """Original channel indices: 2-bit ones ascending, then 4-bit ones ascending."""
        idx = np.arange(self.ic)
        p = np.concatenate([idx[self.bits == 2], idx[self.bits == 4]])
        p.setflags(write=False)
        return p

    @cached_property
    def slot_of_channel(self) -> np.ndarray:
        slots = np.empty(self.ic, dtype=np.int64)
        slots[self.perm[: self.n2]] = np.arange(self.n2)
        slots[self.perm[self.n2:]] = self.width2 + np.arange(self.n4)
        slots.setflags(write=False)
        return slots

    @cached_property
    def channel_of_slot(self) -> np.ndarray:
        """Original channel per padded slot, -1 for pads."""
        ch = np.full(self.padded_ic, -1, dtype=np.int64)
        ch[self.slot_of_channel] = np.arange(self.ic)
        ch.setflags(write=False)
        return ch

    @cached_property
    def slot_bits(self) -> np.ndarray:
        b = np.full(self.padded_ic, 2, dtype=np.uint8)
        b[self.width2:] = 4
        return b

    @cached_property
    def acc_order(self) -> np.ndarray:
        """Slot visited at each step of the per-row accumulation (tiles ascending,
        48 two-bit slots then 16 four-bit slots per tile)."""
        t = self.tiles
        two = np.arange(self.width2).reshape(t, TILE2)
        if not self.has4:
            order = two
        else:
            four = self.width2 + np.arange(self.width4).reshape(t, TILE4)
            order = np.concatenate([two, four], axis=1)
        order = order.reshape(-1)
        order.setflags(write=False)
        return order

    def to_slots(self, x: np.ndarray) -> np.ndarray:
        """Scatter the last axis (original channel order) into padded slot order."""
        x = np.asarray(x)
        if x.shape[-1] != self.ic:
            raise ValueError(f"expected {self.ic} channels, got {x.shape[-1]}")
        out = np.zeros(x.shape[:-1] + (self.padded_ic,), dtype=x.dtype)
        out[..., self.slot_of_channel] = x
        return out

    def from_slots(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        if y.shape[-1] != self.padded_ic:
            raise ValueError(f"expected {self.padded_ic} slots, got {y.shape[-1]}")
        return y[..., self.slot_of_channel]

    def __eq__(self, other):
        return isinstance(other, ChannelPlan) and np.array_equal(self.bits, other.bits)

    __hash__ = None


def build_plan(amp: np.ndarray, alpha: float = 0.25) -> ChannelPlan:
    """Give 4 bits to the ``n4`` channels with the largest amplitude.

    Ties go to the lower channel index.
    """
    amp = np.asarray(amp, dtype=np.float64)
    ic = amp.size
    n4 = n4_for(ic, alpha)
    if n4 > ic:
        raise ValueError(f"{n4} four-bit channels requested but only {ic} channels exist")
    order = np.argsort(-amp, kind="stable")
    bits = np.full(ic, 2, dtype=np.uint8)
    bits[order[:n4]] = 4
    return ChannelPlan(bits)


def apply_permutation(x: np.ndarray, plan) -> np.ndarray:
    """``y[k] = x[perm[k]]``; with a :class:`ChannelPlan` the result is padded with zeros."""
    if isinstance(plan, ChannelPlan):
        return plan.to_slots(x)
    perm = np.asarray(plan)
    return np.asarray(x)[..., perm]


def invert_permutation(y: np.ndarray, plan) -> np.ndarray:
    if isinstance(plan, ChannelPlan):
        return plan.from_slots(y)
    perm = np.asarray(plan)
    y = np.asarray(y)
    x = np.empty_like(y)
    x[..., perm] = y
    return x
