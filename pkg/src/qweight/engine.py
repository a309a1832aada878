"""Dequantization and matrix-vector product over a packed layer.

Every row owns one float32 running sum.  It visits tiles in ascending order,
inside a tile the 48 two-bit slots and then the 16 four-bit slots, and
finally the row's outliers by ascending column; each step is
``acc = acc + w * x`` with both operations rounded to float32.  Both the
sequential oracle and the pipelined path follow this order, so their results
are bit-identical whatever the worker count.

Decoding a chunk of tiles runs in three stages (load second-order params and
scale codes; second-order dequantization plus code/zero unpacking;
first-order dequantization plus activation load); stage 4 multiplies and
accumulates.
"""
from __future__ import annotations

import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np

from .bitpack import MAIN_BYTES_2BIT, PackedLayer, effective_scale_codes, unpack_2bit, unpack_4bit, unpack_meta
from .outliers import sparse_accumulate
from .plan import GROUP, TILE2, TILE4, ChannelPlan
from .quant import dequantize_scale

DEFAULT_CHUNK_TILES = 4


@dataclass
class MatvecResult:
    y: np.ndarray
    wall_ns: int = 0
    stage_ns: list[int] = field(default_factory=lambda: [0, 0, 0, 0])


class _Clock:
    def __init__(self):
        self.ns = [0, 0, 0, 0]
        self._t = time.perf_counter_ns()

    def lap(self, stage: int) -> None:
        now = time.perf_counter_ns()
        self.ns[stage] += now - self._t
        self._t = now


def _check_activation(layer: PackedLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (layer.config.ic,):
        raise ValueError(f"activation must have {layer.config.ic} entries, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("activation contains non-finite values")
    return x


def _activation_in_order(layer: PackedLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Padded slot-order activation and the same values in accumulation order."""
    xp = layer.plan.to_slots(x)
    return xp, xp[layer.plan.acc_order]


def decode_chunk(layer: PackedLayer, r0: int, r1: int, t0: int, t1: int, clock: _Clock | None = None) -> np.ndarray:
    """Dequantized weights of rows r0:r1 and tiles t0:t1, shape (rows, tiles, tile width)."""
    c = layer.config
    clock = clock or _Clock()
    g0, g1 = 3 * t0, 3 * t1
    rows = r1 - r0

    # stage 1: scale codes and second-order params
    zeros, scodes = unpack_meta(layer.meta_words()[r0:r1, t0:t1])
    so = layer.second_order_grid()[np.arange(r0, r1) // c.g2, g0:g1]
    zero2, scale2 = so["zero2"], so["scale2"]
    clock.lap(0)

    # stage 2: second-order dequantization, weight codes and first-order zeros
    scale1 = dequantize_scale(effective_scale_codes(scodes.reshape(rows, -1)), zero2, scale2)
    main = layer.main_blocks()[r0:r1, t0:t1]
    codes2 = unpack_2bit(main[..., :MAIN_BYTES_2BIT]).reshape(rows, g1 - g0, GROUP)
    if c.has4:
        codes4 = np.concatenate([unpack_4bit(main[..., MAIN_BYTES_2BIT:]),
                                 unpack_4bit(layer.secondary_blocks()[r0:r1, t0:t1])], axis=-1)
        fb = layer.four_bit_grid()[r0:r1, t0:t1]
        scale4 = fb["scale"].astype(np.float32)
        zero4 = fb["zero"].astype(np.int64)
    clock.lap(1)

    # stage 3: first-order dequantization
    zeros = zeros.reshape(rows, -1).astype(np.int64)
    w2 = (codes2.astype(np.int64) - zeros[..., None]).astype(np.float32) * scale1[..., None]
    w2 = w2.reshape(rows, t1 - t0, TILE2)
    if c.has4:
        w4 = (codes4.astype(np.int64) - zero4[..., None]).astype(np.float32) * scale4[..., None]
        w = np.concatenate([w2, w4], axis=-1)
    else:
        w = w2
    clock.lap(2)
    return w


def _accumulate(acc: np.ndarray, w: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Continue every row's running sum over the columns of ``w`` (rows x n), in order."""
    rows = acc.shape[0]
    w = w.reshape(rows, -1)
    steps = np.empty((w.shape[1] + 1, rows), dtype=np.float32)
    steps[0] = acc
    np.multiply(w.T, xs[:, None], out=steps[1:])
    return np.add.accumulate(steps, axis=0, dtype=np.float32)[-1]


def reconstruct_dense(layer: PackedLayer) -> np.ndarray:
    """Dense weights in padded slot order; outlier slots come out as exactly 0."""
    c = layer.config
    w = decode_chunk(layer, 0, c.oc, 0, c.tiles).reshape(c.oc, -1)
    out = np.zeros((c.oc, c.padded_ic), dtype=np.float32)
    out[:, layer.plan.acc_order] = w
    return out


def reconstruct_full(layer: PackedLayer) -> np.ndarray:
    """Dense reconstruction with the outliers written back into their slots."""
    out = reconstruct_dense(layer)
    csr = layer.csr
    out[csr.row_index(), csr.col_ind.astype(np.int64)] += csr.values.astype(np.float32)
    return out


def dense_matvec(dense_slots: np.ndarray, x, plan: ChannelPlan) -> np.ndarray:
    """Ordered float32 matvec on a slot-order dense matrix (same order as the engine)."""
    xp = plan.to_slots(np.asarray(x, dtype=np.float32))
    order = plan.acc_order
    acc = np.zeros(dense_slots.shape[0], dtype=np.float32)
    return _accumulate(acc, np.asarray(dense_slots, np.float32)[:, order], xp[order])


def matvec_oracle(layer: PackedLayer, x, chunk_tiles: int = DEFAULT_CHUNK_TILES) -> MatvecResult:
    """Sequential reference: one thread, all rows, tile chunks in order."""
    c = layer.config
    start = time.perf_counter_ns()
    clock = _Clock()
    x = _check_activation(layer, x)
    xp, xs = _activation_in_order(layer, x)
    clock.lap(2)
    acc = np.zeros(c.oc, dtype=np.float32)
    tw = c.tile
    for t0 in range(0, c.tiles, chunk_tiles):
        t1 = min(t0 + chunk_tiles, c.tiles)
        w = decode_chunk(layer, 0, c.oc, t0, t1, clock)
        acc = _accumulate(acc, w, xs[t0 * tw:t1 * tw])
        clock.lap(3)
    acc = sparse_accumulate(layer.csr, acc, xp)
    clock.lap(3)
    return MatvecResult(acc, time.perf_counter_ns() - start, clock.ns)


class _Slice:
    def __init__(self, r0: int, r1: int, nchunks: int):
        self.r0, self.r1 = r0, r1
        self.nchunks = nchunks
        self.next_decode = 0
        self.next_acc = 0
        self.ready: dict[int, np.ndarray] = {}
        self.decoding = 0
        self.accumulating = False
        self.acc = np.zeros(r1 - r0, dtype=np.float32)

    def slots_in_use(self) -> int:
        return len(self.ready) + self.decoding + int(self.accumulating)

    @property
    def done(self) -> bool:
        return self.next_acc == self.nchunks


def matvec_pipelined(layer: PackedLayer, x, workers: int = 4,
                     chunk_tiles: int = DEFAULT_CHUNK_TILES) -> MatvecResult:
    """Rows split across ``workers`` threads; per row slice a two-slot buffer lets
    decoding of the next tile chunk overlap with accumulation of the current one.

    At most ``workers`` tasks run at once.  Accumulation for a slice runs chunk
    by chunk in order, so the result matches :func:`matvec_oracle` bit for bit.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    c = layer.config
    start = time.perf_counter_ns()
    setup = _Clock()
    x = _check_activation(layer, x)
    xp, xs = _activation_in_order(layer, x)
    setup.lap(2)
    tw = c.tile
    chunks = [(t0, min(t0 + chunk_tiles, c.tiles)) for t0 in range(0, c.tiles, chunk_tiles)]
    bounds = np.linspace(0, c.oc, min(workers, c.oc) + 1).astype(int)
    slices = [_Slice(int(a), int(b), len(chunks)) for a, b in zip(bounds[:-1], bounds[1:])]
    stage_ns = list(setup.ns)

    def decode_task(sl: _Slice, k: int):
        clock = _Clock()
        t0, t1 = chunks[k]
        w = decode_chunk(layer, sl.r0, sl.r1, t0, t1, clock)
        return w, clock.ns

    def acc_task(sl: _Slice, k: int, w: np.ndarray):
        clock = _Clock()
        t0, t1 = chunks[k]
        acc = _accumulate(sl.acc, w, xs[t0 * tw:t1 * tw])
        if k == sl.nchunks - 1:
            acc = sparse_accumulate(layer.csr, acc, xp, sl.r0, sl.r1)
        clock.lap(3)
        return acc, clock.ns

    pending = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        def pump():
            for sl in slices:
                if not sl.accumulating and sl.next_acc in sl.ready:
                    k = sl.next_acc
                    sl.accumulating = True
                    pending[pool.submit(acc_task, sl, k, sl.ready.pop(k))] = ("acc", sl, k)
                while sl.next_decode < sl.nchunks and sl.slots_in_use() < 2:
                    k = sl.next_decode
                    sl.next_decode += 1
                    sl.decoding += 1
                    pending[pool.submit(decode_task, sl, k)] = ("decode", sl, k)

        pump()
        while pending:
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                kind, sl, k = pending.pop(fut)
                result, ns = fut.result()
                stage_ns = [a + b for a, b in zip(stage_ns, ns)]
                if kind == "decode":
                    sl.decoding -= 1
                    sl.ready[k] = result
                else:
                    sl.accumulating = False
                    sl.acc = result
                    sl.next_acc += 1
            pump()

    y = np.empty(c.oc, dtype=np.float32)
    for sl in slices:
        if not sl.done:
            raise RuntimeError("pipeline stalled before finishing every chunk")
        y[sl.r0:sl.r1] = sl.acc
    if not slices:
        y[:] = 0
    return MatvecResult(y, time.perf_counter_ns() - start, stage_ns)
