"""Raw float32 inputs and the packed-layer container.

Container layout (all integers little-endian)::

    header   magic "QWL1", u16 version, u16 flags, layer config
    table    one (u16 id, u16 reserved, u32 offset, u32 length, u32 crc32) per section
    u32      crc32 of header + table
    payload  sections back to back, in table order
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .bitpack import FOUR_BIT_DTYPE, SECOND_ORDER_DTYPE, LayerConfig, PackedLayer
from .outliers import CsrOutliers
from .plan import ChannelPlan

MAGIC = b"QWL1"
VERSION = 1
FLAG_HAS4 = 1

_HEADER = struct.Struct("<4sHHBBHHHIIIIIIIddHH")
_ENTRY = struct.Struct("<HHIII")
_CRC = struct.Struct("<I")

SECTION_IDS = {
    "plan_bits": 1, "plan_perm": 2, "main": 3, "secondary": 4, "meta": 5,
    "second_order": 6, "four_bit": 7, "csr_row_ptr": 8, "csr_col_ind": 9, "csr_values": 10,
}
SECTION_NAMES = {v: k for k, v in SECTION_IDS.items()}


class ContainerError(ValueError):
    """Malformed packed-layer file."""

    def __init__(self, message: str, section: str | None = None):
        super().__init__(message)
        self.section = section


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class SectionSizeError(ContainerError):
    pass


class SizeMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"non-finite value at flat index {index}")
        self.index = index


class NonPositiveError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"non-positive calibration entry at index {index}")
        self.index = index


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    data: np.ndarray  # (rows, cols) float32, row-major

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"weight matrix must be 2-D and non-empty, got shape {d.shape}")
        bad = np.flatnonzero(~np.isfinite(d))
        if bad.size:
            raise NonFiniteError(int(bad[0]))
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def _read_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 4:
        raise SizeMismatchError(f"{path}: {len(raw)} bytes is not a whole number of float32 values")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def load_weights(path, rows: int, cols: int) -> WeightMatrix:
    raw = _read_f32(path)
    if raw.size != rows * cols:
        raise SizeMismatchError(f"{path}: expected {rows}x{cols} = {rows * cols} floats, found {raw.size}")
    return WeightMatrix(raw.reshape(rows, cols))


def load_calibration(path, cols: int) -> np.ndarray:
    """Hessian-inverse diagonal; ``path=None`` gives the identity calibration."""
    if path is None:
        return np.ones(cols, dtype=np.float32)
    h = _read_f32(path)
    if h.size != cols:
        raise SizeMismatchError(f"{path}: expected {cols} calibration entries, found {h.size}")
    bad = np.flatnonzero(~np.isfinite(h))
    if bad.size:
        raise NonFiniteError(int(bad[0]))
    bad = np.flatnonzero(h <= 0)
    if bad.size:
        raise NonPositiveError(int(bad[0]))
    return h


def save_f32(path, array) -> None:
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


# -- packed layer -----------------------------------------------------------

def encode_packed_layer(layer: PackedLayer) -> bytes:
    c = layer.config
    sections = layer.sections()
    expected = c.section_sizes(layer.csr.nnz)
    for name, blob in sections.items():
        if len(blob) != expected[name]:
            raise SectionSizeError(f"section {name} has {len(blob)} bytes, expected {expected[name]}", name)
    header = _HEADER.pack(
        MAGIC, VERSION, FLAG_HAS4 if c.has4 else 0,
        c.n_bits, c.n2, c.g1, c.g2, c.tile,
        c.oc, c.ic, layer.csr.nnz, c.n4, c.pad2, c.pad4, c.tiles,
        float(c.alpha), float(c.outlier_ratio),
        len(sections), 0,
    )
    offset = _HEADER.size + _ENTRY.size * len(sections) + _CRC.size
    table = bytearray()
    for name, blob in sections.items():
        table += _ENTRY.pack(SECTION_IDS[name], 0, offset, len(blob), zlib.crc32(blob))
        offset += len(blob)
    head = header + bytes(table)
    return head + _CRC.pack(zlib.crc32(head)) + b"".join(sections.values())


def decode_packed_layer(data: bytes) -> PackedLayer:
    data = memoryview(data)
    if len(data) < 4 or bytes(data[:4]) != MAGIC:
        raise BadMagicError("bad magic: not a packed-layer file", "header")
    if len(data) < _HEADER.size:
        raise TruncatedError("file truncated inside the header", "header")
    (_, version, flags, n_bits, n2, g1, g2, tile, oc, ic, nnz, n4, pad2, pad4, tiles,
     alpha, ratio, n_sections, _) = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}", "header")
    table_end = _HEADER.size + _ENTRY.size * n_sections
    if len(data) < table_end + _CRC.size:
        raise TruncatedError("file truncated inside the section table", "section table")
    (head_crc,) = _CRC.unpack_from(data, table_end)
    if zlib.crc32(data[:table_end]) != head_crc:
        raise ChecksumError("checksum mismatch in header", "header")

    config = LayerConfig(oc=oc, ic=ic, n4=n4, pad2=pad2, pad4=pad4, tiles=tiles, g2=g2,
                         n_bits=n_bits, n2=n2, g1=g1, alpha=alpha, outlier_ratio=ratio)
    if bool(flags & FLAG_HAS4) != config.has4 or tile != config.tile:
        raise ContainerError("header flags disagree with the layer geometry", "header")
    expected = config.section_sizes(nnz)

    blobs: dict[str, bytes] = {}
    for i in range(n_sections):
        sid, _, off, length, crc = _ENTRY.unpack_from(data, _HEADER.size + i * _ENTRY.size)
        name = SECTION_NAMES.get(sid)
        if name is None:
            raise ContainerError(f"unknown section id {sid}", "section table")
        if off + length > len(data):
            raise TruncatedError(f"file truncated inside section {name}", name)
        blob = bytes(data[off:off + length])
        if zlib.crc32(blob) != crc:
            raise ChecksumError(f"checksum mismatch in section {name}", name)
        if length != expected[name]:
            raise SectionSizeError(f"section {name} has {length} bytes, expected {expected[name]}", name)
        blobs[name] = blob
    missing = set(SECTION_IDS) - set(blobs)
    if missing:
        raise ContainerError(f"missing sections: {sorted(missing)}", sorted(missing)[0])

    bits4 = np.unpackbits(np.frombuffer(blobs["plan_bits"], np.uint8), count=ic, bitorder="little")
    try:
        plan = ChannelPlan(np.where(bits4 == 1, 4, 2).astype(np.uint8))
        config.check_plan(plan)
    except ValueError as e:
        raise ContainerError(f"inconsistent channel plan: {e}", "plan_bits") from e
    perm = np.frombuffer(blobs["plan_perm"], "<u4")
    if not np.array_equal(perm, plan.perm):
        raise ContainerError("stored permutation disagrees with the channel bitmap", "plan_perm")
    try:
        csr = CsrOutliers(
            np.frombuffer(blobs["csr_row_ptr"], "<u4").astype(np.uint32),
            np.frombuffer(blobs["csr_col_ind"], "<u2").astype(np.uint16),
            np.frombuffer(blobs["csr_values"], "<f2").astype(np.float16),
        )
        csr.check_eligible(plan)
    except ValueError as e:
        raise ContainerError(f"invalid outlier matrix: {e}", "csr_row_ptr") from e

    return PackedLayer(
        config=config, plan=plan,
        main=np.frombuffer(blobs["main"], np.uint8).copy(),
        secondary=np.frombuffer(blobs["secondary"], np.uint8).copy(),
        meta=np.frombuffer(blobs["meta"], "<u2").copy(),
        second_order=np.frombuffer(blobs["second_order"], SECOND_ORDER_DTYPE).copy(),
        four_bit=np.frombuffer(blobs["four_bit"], FOUR_BIT_DTYPE).copy(),
        csr=csr,
    )


def write_packed_layer(layer: PackedLayer, path) -> None:
    blob = encode_packed_layer(layer)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_packed_layer(path) -> PackedLayer:
    with open(path, "rb") as f:
        return decode_packed_layer(f.read())


def section_lengths(data: bytes) -> dict[str, int]:
    """Section name -> byte length, read from a container's section table."""
    n_sections = _HEADER.unpack_from(data, 0)[-2]
    out = {}
    for i in range(n_sections):
        sid, _, _, length, _ = _ENTRY.unpack_from(data, _HEADER.size + i * _ENTRY.size)
        out[SECTION_NAMES[sid]] = length
    return out


HEADER_BYTES = _HEADER.size + _ENTRY.size * len(SECTION_IDS) + _CRC.size
