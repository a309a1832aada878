"""Timing harness comparing the sequential oracle with the pipelined matvec."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, astuple

import numpy as np

from .bitpack import PackedLayer
from .engine import DEFAULT_CHUNK_TILES, matvec_oracle, matvec_pipelined

BENCH_HEADER = ["rows", "cols", "avg_bit", "workers", "mode", "wall_ns",
                "stage1_ns", "stage2_ns", "stage3_ns", "stage4_ns", "gflops"]
_TYPES = [int, int, float, int, str, int, int, int, int, int, float]


@dataclass
class BenchRow:
    rows: int
    cols: int
    avg_bit: float
    workers: int
    mode: str
    wall_ns: int
    stage1_ns: int
    stage2_ns: int
    stage3_ns: int
    stage4_ns: int
    gflops: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    bytes_touched: int

    def row(self, mode: str) -> BenchRow:
        return next(r for r in self.rows if r.mode == mode)

    @property
    def ratio(self) -> float:
        """Pipelined wall time over oracle wall time."""
        return self.row("pipelined").wall_ns / self.row("oracle").wall_ns

    def tokens_per_second(self, mode: str = "pipelined") -> float:
        return 1e9 / self.row(mode).wall_ns

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(BENCH_HEADER)
        for r in self.rows:
            out.writerow(astuple(r))
        return buf.getvalue()


def bench_matvec(layer: PackedLayer, x, repetitions: int, workers: int = 4,
                 chunk_tiles: int = DEFAULT_CHUNK_TILES) -> BenchReport:
    """Median wall and stage times of both matvec paths over ``repetitions`` interleaved runs."""
    from .metrics import storage_bits_actual

    if repetitions < 1:
        raise ValueError("repetitions must be at least 1, an empty report is not useful")
    c = layer.config
    runs = {"oracle": [], "pipelined": []}
    for _ in range(repetitions):
        ref = matvec_oracle(layer, x, chunk_tiles)
        got = matvec_pipelined(layer, x, workers, chunk_tiles)
        if not np.array_equal(ref.y.view(np.uint32), got.y.view(np.uint32)):
            raise RuntimeError("pipelined result differs from the oracle")
        runs["oracle"].append(ref)
        runs["pipelined"].append(got)

    avg_bit = storage_bits_actual(layer).actual_container_bit
    flops = 2 * c.oc * c.ic
    rows = []
    for mode, results in runs.items():
        wall = int(np.median([r.wall_ns for r in results]))
        stages = [int(np.median([r.stage_ns[i] for r in results])) for i in range(4)]
        rows.append(BenchRow(c.oc, c.ic, avg_bit, 1 if mode == "oracle" else workers, mode,
                             wall, *stages, flops / wall))
    touched = sum(len(b) for b in layer.sections().values()) + 4 * c.ic + 4 * c.oc
    return BenchReport(rows, touched)


def parse_bench_csv(text: str) -> list[BenchRow]:
    """Parse and validate bench CSV text against the documented schema."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != BENCH_HEADER:
        raise ValueError(f"unexpected bench header {header}")
    rows = []
    for n, fields in enumerate(reader, start=2):
        if len(fields) != len(BENCH_HEADER):
            raise ValueError(f"line {n}: expected {len(BENCH_HEADER)} fields, got {len(fields)}")
        values = [t(v) for t, v in zip(_TYPES, fields)]
        row = BenchRow(*values)
        if row.mode not in ("oracle", "pipelined") or row.wall_ns <= 0 or min(values[6:10]) < 0:
            raise ValueError(f"line {n}: invalid values {fields}")
        rows.append(row)
    return rows
