import numpy as np
import pytest

from factories import random_layer
from qweight.bench import BENCH_HEADER, bench_matvec, parse_bench_csv
from qweight.bitpack import LayerCodes, LayerConfig, effective_scale_codes, pack_layer, unpack_layer
from qweight.engine import (dense_matvec, matvec_oracle, matvec_pipelined, reconstruct_dense,
                            reconstruct_full)
from qweight.outliers import CsrOutliers
from qweight.pipeline import quantize_layer
from qweight.plan import ChannelPlan, build_plan
from qweight.quant import dequantize_groups, dequantize_scale


def bits_equal(a, b):
    return np.array_equal(np.asarray(a, np.float32).view(np.uint32), np.asarray(b, np.float32).view(np.uint32))


def compose_dense(layer):
    """Slot-order dense weights rebuilt from unpack_layer and the quant-core dequantizers."""
    codes = unpack_layer(layer)
    c, plan = layer.config, layer.plan
    blocks = np.arange(c.oc) // c.g2
    s1 = dequantize_scale(effective_scale_codes(codes.scodes), codes.zero2[blocks], codes.scale2[blocks])
    two = dequantize_groups(codes.codes2.reshape(c.oc, -1, 16), s1, codes.zeros2).reshape(c.oc, -1)
    parts = [two]
    if plan.has4:
        four = dequantize_groups(codes.codes4.reshape(c.oc, -1, 16), codes.scale4.astype(np.float32),
                                 codes.zero4)
        parts.append(four.reshape(c.oc, -1))
    return np.concatenate(parts, axis=1)


def scalar_matvec(layer, x):
    """Row-by-row float32 loop in the documented order, one multiply and one add per step."""
    dense = compose_dense(layer)
    plan, csr = layer.plan, layer.csr
    xp = plan.to_slots(np.asarray(x, np.float32))
    y = np.zeros(layer.config.oc, np.float32)
    for r in range(layer.config.oc):
        acc = np.float32(0)
        for slot in plan.acc_order:
            acc = np.float32(acc + np.float32(dense[r, slot] * xp[slot]))
        for k in range(int(csr.row_ptr[r]), int(csr.row_ptr[r + 1])):
            acc = np.float32(acc + np.float32(np.float32(csr.values[k]) * xp[csr.col_ind[k]]))
        y[r] = acc
    return y


class TestReconstruct:
    def test_constant_matrix(self):
        w = np.full((32, 128), 3.0, np.float32)
        layer = quantize_layer(w, outlier_ratio=0.0)
        plan = layer.plan
        err = np.abs(reconstruct_dense(layer) - plan.to_slots(w))
        scale2 = layer.second_order["scale2"].astype(np.float32).max()
        real = plan.channel_of_slot >= 0
        group = np.arange(plan.padded_ic) // 16
        full_code = real & ((plan.slot_bits == 4) | (group % 3 == 0))
        assert err[:, full_code].max() <= scale2
        # groups 1 and 2 decode a scale code with its low bit dropped: at most 1.5 steps of
        # scale2 lost on s1, times the 3 steps of a 2-bit code
        assert err[:, real].max() <= 4.5 * scale2

    def test_zero_matrix(self):
        layer = quantize_layer(np.zeros((16, 100), np.float32))
        assert not np.any(reconstruct_dense(layer)) and layer.csr.nnz == 0

    def test_matches_module_composition(self, rng):
        w = rng.standard_normal((64, 128)).astype(np.float32)
        layer = quantize_layer(w)
        assert bits_equal(reconstruct_dense(layer), compose_dense(layer))

    def test_arbitrary_codes_match_composition(self, rng):
        for oc, ic in [(5, 64), (17, 200), (3, 48)]:
            layer = random_layer(rng, oc, ic)
            assert bits_equal(reconstruct_dense(layer), compose_dense(layer))

    def test_outlier_slots(self, rng):
        w = rng.standard_normal((64, 128)).astype(np.float32)
        layer = quantize_layer(w, outlier_ratio=0.01)
        r, c = layer.csr.row_index(), layer.csr.col_ind.astype(np.int64)
        assert layer.csr.nnz > 0
        assert not np.any(reconstruct_dense(layer)[r, c])
        want = layer.plan.to_slots(w)[r, c].astype(np.float16).astype(np.float32)
        assert bits_equal(reconstruct_full(layer)[r, c], want)


def exact_layer():
    """Identity-like 64x64 layer whose parameters make every weight exactly representable."""
    plan = ChannelPlan(np.array([4] * 16 + [2] * 48))
    config = LayerConfig.for_plan(plan, 64, g2=16)
    codes2 = np.zeros((64, 48), np.uint8)
    codes4 = np.zeros((64, 16), np.uint8)
    for r in range(64):
        slot = plan.slot_of_channel[r]
        if slot < 48:
            codes2[r, slot] = 1 + r % 3
        else:
            codes4[r, slot - 48] = 1 + r % 15
    scodes = np.tile(np.uint8([4, 2, 2]), (64, 1))  # every decoded scale is 4 * 0.25 = 1
    codes = LayerCodes(config, plan, codes2, np.zeros((64, 3), np.uint8), scodes,
                       np.zeros((4, 3), np.uint8), np.full((4, 3), 0.25, np.float16),
                       codes4, np.ones((64, 1), np.float16), np.zeros((64, 1), np.uint8),
                       CsrOutliers.empty(64))
    want = np.zeros((64, 64), np.float32)
    for r in range(64):
        want[r, r] = 1 + r % 3 if plan.slot_of_channel[r] < 48 else 1 + r % 15
    return pack_layer(codes), want


class TestMatvec:
    def test_basis_vectors_give_columns(self):
        layer, w = exact_layer()
        for k in (0, 15, 16, 40, 63):
            x = np.zeros(64, np.float32)
            x[k] = 1
            assert np.array_equal(matvec_oracle(layer, x).y, w[:, k])

    def test_zero_activation(self, rng):
        layer = quantize_layer(rng.standard_normal((16, 64)).astype(np.float32))
        y = matvec_oracle(layer, np.zeros(64)).y
        assert not np.any(y)

    def test_close_to_float64(self, rng):
        w = rng.standard_normal((64, 128)).astype(np.float32)
        layer = quantize_layer(w)
        x = rng.standard_normal(128).astype(np.float32)
        ref = reconstruct_full(layer).astype(np.float64) @ layer.plan.to_slots(x).astype(np.float64)
        y = matvec_oracle(layer, x).y
        assert np.linalg.norm(y - ref) / np.linalg.norm(ref) <= 1e-3

    def test_scalar_loop_oracle(self, rng):
        for oc, ic, ratio in [(4, 64, 0.02), (3, 100, 0.05), (2, 48, 0.0)]:
            layer = quantize_layer(rng.standard_normal((oc, ic)).astype(np.float32), outlier_ratio=ratio)
            x = rng.standard_normal(ic).astype(np.float32)
            assert bits_equal(matvec_oracle(layer, x).y, scalar_matvec(layer, x))
        layer = random_layer(rng, 5, 130)
        x = rng.standard_normal(130).astype(np.float32)
        assert bits_equal(matvec_oracle(layer, x).y, scalar_matvec(layer, x))

    @pytest.mark.parametrize("workers", [1, 2, 3, 8])
    def test_pipelined_is_bitwise_oracle(self, rng, workers):
        layer = random_layer(rng, 37, 300)
        x = rng.standard_normal(300).astype(np.float32)
        assert bits_equal(matvec_pipelined(layer, x, workers).y, matvec_oracle(layer, x).y)

    @pytest.mark.parametrize("chunk", [1, 2, 5, 100])
    def test_chunking_does_not_change_result(self, rng, chunk):
        layer = random_layer(rng, 9, 400)
        x = rng.standard_normal(400).astype(np.float32)
        base = matvec_oracle(layer, x).y
        assert bits_equal(matvec_oracle(layer, x, chunk).y, base)
        assert bits_equal(matvec_pipelined(layer, x, 4, chunk).y, base)

    def test_no_outliers_equals_dense_matvec(self, rng):
        w = rng.standard_normal((32, 200)).astype(np.float32)
        layer = quantize_layer(w, outlier_ratio=0.0)
        x = rng.standard_normal(200).astype(np.float32)
        assert bits_equal(matvec_oracle(layer, x).y, dense_matvec(reconstruct_dense(layer), x, layer.plan))

    def test_power_of_two_scaling_is_exact(self, rng):
        layer = quantize_layer(rng.standard_normal((32, 128)).astype(np.float32))
        x = rng.standard_normal(128).astype(np.float32)
        assert bits_equal(matvec_oracle(layer, 4 * x).y, 4 * matvec_oracle(layer, x).y)

    @pytest.mark.parametrize("a", [0.3, 1.5, 3.7])
    def test_linearity(self, rng, a):
        layer = quantize_layer(rng.standard_normal((64, 256)).astype(np.float32))
        x = rng.standard_normal(256).astype(np.float32)
        y1 = matvec_oracle(layer, np.float32(a) * x).y.astype(np.float64)
        y0 = a * matvec_oracle(layer, x).y.astype(np.float64)
        assert np.linalg.norm(y1 - y0) / np.linalg.norm(y0) <= 1e-6

    def test_stage_times_fit_in_wall_time(self, rng):
        layer = random_layer(rng, 256, 1024)
        x = rng.standard_normal(1024).astype(np.float32)
        for workers in (1, 4):
            res = matvec_pipelined(layer, x, workers)
            assert all(t >= 0 for t in res.stage_ns) and res.wall_ns > 0
            assert sum(res.stage_ns) <= res.wall_ns * workers * 1.05
        res = matvec_oracle(layer, x)
        assert sum(res.stage_ns) <= res.wall_ns

    def test_rejects_bad_input(self, rng):
        layer = random_layer(rng, 4, 64)
        with pytest.raises(ValueError):
            matvec_oracle(layer, np.zeros(63))
        with pytest.raises(ValueError):
            matvec_oracle(layer, np.full(64, np.nan))
        with pytest.raises(ValueError):
            matvec_pipelined(layer, np.zeros(64), 0)


class TestBench:
    def test_zero_repetitions(self, rng):
        with pytest.raises(ValueError):
            bench_matvec(random_layer(rng, 4, 64), np.zeros(64), 0)

    def test_csv_schema(self, rng):
        layer = random_layer(rng, 8, 64)
        report = bench_matvec(layer, rng.standard_normal(64), 2, workers=2)
        text = report.to_csv()
        assert text.splitlines()[0] == ",".join(BENCH_HEADER)
        assert BENCH_HEADER == ["rows", "cols", "avg_bit", "workers", "mode", "wall_ns", "stage1_ns",
                                "stage2_ns", "stage3_ns", "stage4_ns", "gflops"]
        rows = parse_bench_csv(text)
        assert {r.mode for r in rows} == {"oracle", "pipelined"}
        assert report.ratio > 0 and report.tokens_per_second() > 0 and report.bytes_touched > 0

    def test_parser_rejects_bad_header(self):
        with pytest.raises(ValueError):
            parse_bench_csv("rows,cols\n1,2\n")
