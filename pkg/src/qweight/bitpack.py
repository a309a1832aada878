"""Bit-exact packed layout.

Per output row and tile:

* main block (16 B): bytes 0-11 hold the 48 two-bit codes, four per byte,
  LSB first; bytes 12-15 hold 4-bit codes of tile channels 48-55, even
  channel in the low nibble.  Layers without 4-bit channels use 12-byte
  main blocks.
* secondary block (4 B): 4-bit codes of tile channels 56-63.
* meta word (u16): bits 0-5 the three 2-bit zero-points, bits 6-9 the 4-bit
  scale code of group 0, bits 10-12 and 13-15 the 3-bit scale codes of
  groups 1 and 2.

Second-order parameters are one ``{zero2: u8, scale2: f16}`` record per
(row block of ``g2`` rows, 2-bit group column), flat index
``block * groups_per_row + column``.  4-bit parameters are one
``{scale: f16, zero: u8}`` record per (row, tile), row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .outliers import CsrOutliers
from .plan import GROUP, GROUPS_PER_TILE, TILE2, TILE4, ChannelPlan

MAIN_BYTES = 16
MAIN_BYTES_2BIT = 12
SECONDARY_BYTES = 4
SCODE_BITS = (4, 3, 3)

SECOND_ORDER_DTYPE = np.dtype([("zero2", "u1"), ("scale2", "<f2")])
FOUR_BIT_DTYPE = np.dtype([("scale", "<f2"), ("zero", "u1")])


@dataclass(frozen=True)
class LayerConfig:
    oc: int
    ic: int
    n4: int
    pad2: int
    pad4: int
    tiles: int
    g2: int = 16
    n_bits: int = 2
    n2: int = 4
    g1: int = GROUP
    alpha: float = 0.25
    outlier_ratio: float = 0.0

    @property
    def has4(self) -> bool:
        return self.n4 > 0

    @property
    def tile(self) -> int:
        return TILE2 + TILE4 if self.has4 else TILE2

    @property
    def groups_per_row(self) -> int:
        return GROUPS_PER_TILE * self.tiles

    @property
    def row_blocks(self) -> int:
        return -(-self.oc // self.g2)

    @property
    def padded_ic(self) -> int:
        return self.tiles * self.tile

    @property
    def main_unit(self) -> int:
        return MAIN_BYTES if self.has4 else MAIN_BYTES_2BIT

    def section_sizes(self, nnz: int) -> dict[str, int]:
        """Byte length of every section, derived from the configuration alone."""
        units = self.oc * self.tiles
        four = units if self.has4 else 0
        return {
            "plan_bits": -(-self.ic // 8),
            "plan_perm": 4 * self.ic,
            "main": units * self.main_unit,
            "secondary": four * SECONDARY_BYTES,
            "meta": units * 2,
            "second_order": self.row_blocks * self.groups_per_row * SECOND_ORDER_DTYPE.itemsize,
            "four_bit": four * FOUR_BIT_DTYPE.itemsize,
            "csr_row_ptr": 4 * (self.oc + 1),
            "csr_col_ind": 2 * nnz,
            "csr_values": 2 * nnz,
        }

    @classmethod
    def for_plan(cls, plan: ChannelPlan, oc: int, **kw) -> "LayerConfig":
        return cls(oc=oc, ic=plan.ic, n4=plan.n4, pad2=plan.pad2, pad4=plan.pad4,
                   tiles=plan.tiles, **kw)

    def check_plan(self, plan: ChannelPlan) -> None:
        got = (plan.ic, plan.n4, plan.pad2, plan.pad4, plan.tiles)
        want = (self.ic, self.n4, self.pad2, self.pad4, self.tiles)
        if got != want:
            raise ValueError(f"plan geometry {got} does not match config {want}")


# -- sub-byte helpers -------------------------------------------------------

def pack_2bit(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint8)
    c = c.reshape(*c.shape[:-1], -1, 4)
    return c[..., 0] | (c[..., 1] << 2) | (c[..., 2] << 4) | (c[..., 3] << 6)


def unpack_2bit(data: np.ndarray) -> np.ndarray:
    d = np.asarray(data, dtype=np.uint8)
    out = (d[..., None] >> np.array([0, 2, 4, 6], dtype=np.uint8)) & 3
    return out.reshape(*d.shape[:-1], -1)


def pack_4bit(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint8)
    c = c.reshape(*c.shape[:-1], -1, 2)
    return c[..., 0] | (c[..., 1] << 4)


def unpack_4bit(data: np.ndarray) -> np.ndarray:
    d = np.asarray(data, dtype=np.uint8)
    out = (d[..., None] >> np.array([0, 4], dtype=np.uint8)) & 15
    return out.reshape(*d.shape[:-1], -1)


def pack_meta(zeros: np.ndarray, scodes: np.ndarray) -> np.ndarray:
    z = np.asarray(zeros, dtype=np.uint16)
    s = np.asarray(scodes, dtype=np.uint16)
    return (z[..., 0] | (z[..., 1] << 2) | (z[..., 2] << 4)
            | (s[..., 0] << 6) | (s[..., 1] << 10) | (s[..., 2] << 13)).astype(np.uint16)


def unpack_meta(meta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(meta, dtype=np.uint16)
    zeros = np.stack([m & 3, (m >> 2) & 3, (m >> 4) & 3], axis=-1).astype(np.uint8)
    scodes = np.stack([(m >> 6) & 15, (m >> 10) & 7, (m >> 13) & 7], axis=-1).astype(np.uint8)
    return zeros, scodes


def _check_range(name: str, arr: np.ndarray, limit) -> None:
    arr = np.asarray(arr)
    if arr.size and (arr.min() < 0 or np.any(arr >= limit)):
        raise ValueError(f"{name} out of range (limit {limit})")


# -- single tile ------------------------------------------------------------

@dataclass(frozen=True)
class PackedTile:
    main: bytes
    secondary: bytes
    meta: int


def pack_tile(codes2, codes4, zeros, scodes) -> PackedTile:
    codes2 = np.asarray(codes2, dtype=np.int64)
    codes4 = np.asarray(codes4, dtype=np.int64)
    zeros = np.asarray(zeros, dtype=np.int64)
    scodes = np.asarray(scodes, dtype=np.int64)
    if codes2.shape != (TILE2,) or codes4.shape != (TILE4,) or zeros.shape != (3,) or scodes.shape != (3,):
        raise ValueError("a tile holds 48 2-bit codes, 16 4-bit codes, 3 zeros and 3 scale codes")
    _check_range("2-bit code", codes2, 4)
    _check_range("4-bit code", codes4, 16)
    _check_range("zero-point", zeros, 4)
    for j, nbits in enumerate(SCODE_BITS):
        _check_range(f"scale code {j}", scodes[j:j + 1], 1 << nbits)
    main = np.concatenate([pack_2bit(codes2), pack_4bit(codes4[:8])])
    return PackedTile(main.tobytes(), pack_4bit(codes4[8:]).tobytes(), int(pack_meta(zeros, scodes)))


def unpack_tile(tile: PackedTile):
    main = np.frombuffer(tile.main, dtype=np.uint8)
    sec = np.frombuffer(tile.secondary, dtype=np.uint8)
    if main.size != MAIN_BYTES or sec.size != SECONDARY_BYTES:
        raise ValueError("malformed tile")
    codes2 = unpack_2bit(main[:12])
    codes4 = np.concatenate([unpack_4bit(main[12:]), unpack_4bit(sec)])
    zeros, scodes = unpack_meta(np.uint16(tile.meta))
    return codes2, codes4, zeros, scodes


# -- whole layer ------------------------------------------------------------

@dataclass(eq=False)
class LayerCodes:
    """Logical content of a packed layer: codes, zero-points and parameters."""

    config: LayerConfig
    plan: ChannelPlan
    codes2: np.ndarray  # (oc, 48T) uint8
    zeros2: np.ndarray  # (oc, 3T) uint8
    scodes: np.ndarray  # (oc, 3T) uint8, 4/3/3 bits per tile
    zero2: np.ndarray  # (row_blocks, 3T) uint8
    scale2: np.ndarray  # (row_blocks, 3T) float16
    codes4: np.ndarray  # (oc, 16T) uint8, empty without 4-bit channels
    scale4: np.ndarray  # (oc, T) float16
    zero4: np.ndarray  # (oc, T) uint8
    csr: CsrOutliers = field(default=None)

    def __post_init__(self):
        if self.csr is None:
            self.csr = CsrOutliers.empty(self.config.oc)

    def equals(self, other: "LayerCodes") -> bool:
        ints = ("codes2", "zeros2", "scodes", "zero2", "codes4", "zero4")
        halves = ("scale2", "scale4")
        same = all(np.array_equal(np.asarray(getattr(self, n), dtype=np.int64),
                                  np.asarray(getattr(other, n), dtype=np.int64)) for n in ints)
        same = same and all(
            np.array_equal(np.asarray(getattr(self, n), dtype=np.float16).view(np.uint16),
                           np.asarray(getattr(other, n), dtype=np.float16).view(np.uint16))
            for n in halves)
        csr_same = (np.array_equal(self.csr.row_ptr, other.csr.row_ptr)
                    and np.array_equal(self.csr.col_ind, other.csr.col_ind)
                    and np.array_equal(self.csr.values.view(np.uint16), other.csr.values.view(np.uint16)))
        return same and csr_same and self.config == other.config and self.plan == other.plan


@dataclass(eq=False)
class PackedLayer:
    config: LayerConfig
    plan: ChannelPlan
    main: np.ndarray  # uint8
    secondary: np.ndarray  # uint8
    meta: np.ndarray  # <u2
    second_order: np.ndarray  # SECOND_ORDER_DTYPE
    four_bit: np.ndarray  # FOUR_BIT_DTYPE
    csr: CsrOutliers

    def sections(self) -> dict[str, bytes]:
        """Section payloads in file order."""
        bitmap = np.packbits(self.plan.bits == 4, bitorder="little")
        return {
            "plan_bits": bitmap.tobytes(),
            "plan_perm": self.plan.perm.astype("<u4").tobytes(),
            "main": self.main.tobytes(),
            "secondary": self.secondary.tobytes(),
            "meta": self.meta.astype("<u2").tobytes(),
            "second_order": self.second_order.tobytes(),
            "four_bit": self.four_bit.tobytes(),
            "csr_row_ptr": self.csr.row_ptr.astype("<u4").tobytes(),
            "csr_col_ind": self.csr.col_ind.astype("<u2").tobytes(),
            "csr_values": self.csr.values.astype("<f2").tobytes(),
        }

    def equals(self, other: "PackedLayer") -> bool:
        return self.config == other.config and self.sections() == other.sections()

    def main_blocks(self) -> np.ndarray:
        c = self.config
        return self.main.reshape(c.oc, c.tiles, c.main_unit)

    def secondary_blocks(self) -> np.ndarray:
        c = self.config
        return self.secondary.reshape(c.oc, c.tiles if c.has4 else 0, SECONDARY_BYTES)

    def meta_words(self) -> np.ndarray:
        c = self.config
        return self.meta.reshape(c.oc, c.tiles)

    def second_order_grid(self) -> np.ndarray:
        c = self.config
        return self.second_order.reshape(c.row_blocks, c.groups_per_row)

    def four_bit_grid(self) -> np.ndarray:
        c = self.config
        return self.four_bit.reshape(c.oc, c.tiles if c.has4 else 0)


def _check_shape(name: str, arr: np.ndarray, shape: tuple) -> None:
    if np.shape(arr) != shape:
        raise ValueError(f"{name} has shape {np.shape(arr)}, expected {shape}")


def pack_layer(codes: LayerCodes) -> PackedLayer:
    c, plan = codes.config, codes.plan
    c.check_plan(plan)
    if (c.n_bits, c.n2, c.g1) != (2, 4, GROUP):
        raise ValueError("the packed layout requires N=2, N2=4 and g1=16")
    oc, t = c.oc, c.tiles
    t4 = t if c.has4 else 0
    _check_shape("codes2", codes.codes2, (oc, TILE2 * t))
    _check_shape("zeros2", codes.zeros2, (oc, GROUPS_PER_TILE * t))
    _check_shape("scodes", codes.scodes, (oc, GROUPS_PER_TILE * t))
    _check_shape("zero2", codes.zero2, (c.row_blocks, c.groups_per_row))
    _check_shape("scale2", codes.scale2, (c.row_blocks, c.groups_per_row))
    _check_shape("codes4", codes.codes4, (oc, TILE4 * t4))
    _check_shape("scale4", codes.scale4, (oc, t4))
    _check_shape("zero4", codes.zero4, (oc, t4))
    if codes.csr.rows != oc:
        raise ValueError("CSR row count does not match the layer")
    codes.csr.check_eligible(plan)
    _check_range("2-bit code", codes.codes2, 4)
    _check_range("zero-point", codes.zeros2, 4)
    _check_range("4-bit code", codes.codes4, 16)
    _check_range("4-bit zero", codes.zero4, 16)
    _check_range("zero2", codes.zero2, 16)
    sc = np.asarray(codes.scodes).reshape(oc, t, 3)
    for j, nbits in enumerate(SCODE_BITS):
        _check_range(f"scale code {j}", sc[..., j], 1 << nbits)

    two = pack_2bit(np.asarray(codes.codes2).reshape(oc, t, TILE2))
    if c.has4:
        c4 = np.asarray(codes.codes4).reshape(oc, t, TILE4)
        main = np.concatenate([two, pack_4bit(c4[..., :8])], axis=-1)
        secondary = pack_4bit(c4[..., 8:])
    else:
        main = two
        secondary = np.zeros((oc, 0, SECONDARY_BYTES), dtype=np.uint8)
    meta = pack_meta(np.asarray(codes.zeros2).reshape(oc, t, 3), sc)

    so = np.empty(c.row_blocks * c.groups_per_row, dtype=SECOND_ORDER_DTYPE)
    so["zero2"] = np.asarray(codes.zero2).ravel()
    so["scale2"] = np.asarray(codes.scale2, dtype=np.float16).ravel()
    fb = np.empty(oc * t4, dtype=FOUR_BIT_DTYPE)
    fb["scale"] = np.asarray(codes.scale4, dtype=np.float16).ravel()
    fb["zero"] = np.asarray(codes.zero4).ravel()

    return PackedLayer(
        config=c, plan=plan,
        main=np.ascontiguousarray(main, dtype=np.uint8).ravel(),
        secondary=np.ascontiguousarray(secondary, dtype=np.uint8).ravel(),
        meta=meta.astype("<u2").ravel(),
        second_order=so, four_bit=fb, csr=codes.csr,
    )


def unpack_layer(layer: PackedLayer) -> LayerCodes:
    c = layer.config
    oc, t = c.oc, c.tiles
    main = layer.main_blocks()
    codes2 = unpack_2bit(main[..., :MAIN_BYTES_2BIT]).reshape(oc, TILE2 * t)
    if c.has4:
        codes4 = np.concatenate([unpack_4bit(main[..., MAIN_BYTES_2BIT:]),
                                 unpack_4bit(layer.secondary_blocks())], axis=-1).reshape(oc, TILE4 * t)
    else:
        codes4 = np.zeros((oc, 0), dtype=np.uint8)
    zeros, scodes = unpack_meta(layer.meta_words())
    so = layer.second_order_grid()
    fb = layer.four_bit_grid()
    return LayerCodes(
        config=c, plan=layer.plan,
        codes2=codes2,
        zeros2=zeros.reshape(oc, -1),
        scodes=scodes.reshape(oc, -1),
        zero2=so["zero2"].copy(),
        scale2=so["scale2"].astype(np.float16),
        codes4=codes4,
        scale4=fb["scale"].astype(np.float16),
        zero4=fb["zero"].copy(),
        csr=layer.csr,
    )


def effective_scale_codes(scodes: np.ndarray) -> np.ndarray:
    """4-bit-equivalent second-order codes: 3-bit codes of groups 1 and 2 are doubled."""
    sc = np.asarray(scodes, dtype=np.int64)
    shift = np.tile(np.array([0, 1, 1]), sc.shape[-1] // 3)
    return sc << shift
