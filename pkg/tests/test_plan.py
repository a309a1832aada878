import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from qweight.plan import (ChannelPlan, apply_permutation, build_plan, compute_amplitudes,
                          invert_permutation, n4_for)


def brute_top(amp, n):
    # sort by (-amp, index) with plain Python
    ranked = sorted(range(len(amp)), key=lambda i: (-amp[i], i))
    return set(ranked[:n])


class TestAmplitudes:
    def test_hand_example(self):
        amp = compute_amplitudes(np.float32([[1, 2], [3, 4]]), np.float32([1, 2]))
        assert amp.tolist() == [10.0, 5.0]

    def test_zero_column(self, rng):
        w = rng.standard_normal((5, 6)).astype(np.float32)
        w[:, 2] = 0
        assert compute_amplitudes(w, np.ones(6))[2] == 0

    def test_unit_calibration_is_column_norm(self, rng):
        w = rng.standard_normal((8, 8)).astype(np.float32)
        amp = compute_amplitudes(w, np.ones(8))
        for i in range(8):
            ref = sum(float(w[j, i]) ** 2 for j in range(8))
            assert amp[i] == pytest.approx(ref, rel=1e-12)

    def test_row_order_invariance(self, rng):
        w = rng.standard_normal((16, 32)).astype(np.float32)
        h = rng.uniform(0.5, 2, 32)
        a = compute_amplitudes(w, h)
        b = compute_amplitudes(w[rng.permutation(16)], h)
        assert np.allclose(a, b, rtol=1e-13, atol=0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_amplitudes(np.ones((2, 3), np.float32), np.ones(2))


class TestN4:
    @pytest.mark.parametrize("ic,alpha,want", [
        (64, 0.25, 16), (1024, 0.25, 256), (64, 0.0, 0), (40, 0.2, 16),  # 8 -> tie rounds up
        (100, 0.07, 0), (48, 1.0, 48), (96, 0.5, 48)])
    def test_rounding(self, ic, alpha, want):
        assert n4_for(ic, alpha) == want

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            n4_for(64, 1.5)


class TestBuildPlan:
    def test_decreasing_amplitudes(self):
        plan = build_plan(np.arange(64, 0, -1.0), 0.25)
        assert np.all(plan.bits[:16] == 4) and np.all(plan.bits[16:] == 2)
        assert plan.pad2 == 0 and plan.pad4 == 0 and plan.tiles == 1

    @pytest.mark.parametrize("ic", [1, 47, 48, 49, 100, 130])
    def test_alpha_zero(self, ic):
        plan = build_plan(np.ones(ic), 0.0)
        assert plan.n4 == 0 and np.all(plan.bits == 2)
        assert plan.pad2 == (48 - ic % 48) % 48

    def test_equal_amplitudes_pick_lowest_indices(self):
        plan = build_plan(np.ones(64), 0.25)
        assert np.flatnonzero(plan.bits == 4).tolist() == list(range(16))

    def test_too_many_channels(self):
        with pytest.raises(ValueError):
            build_plan(np.ones(8), 1.0)

    @given(arrays(np.float64, st.integers(16, 200), elements=st.floats(0, 1e6)),
           st.sampled_from([0.0, 0.1, 0.25, 0.5]))
    def test_matches_brute_force(self, amp, alpha):
        n = n4_for(amp.size, alpha)
        if n > amp.size:
            return
        plan = build_plan(amp, alpha)
        assert set(np.flatnonzero(plan.bits == 4)) == brute_top(amp.tolist(), n)

    @given(arrays(np.float64, 64, elements=st.floats(1e-3, 1e3)), st.integers(-20, 20))
    def test_scaling_invariance(self, amp, e):
        # powers of two scale every value exactly, so ties are preserved too
        a = build_plan(amp, 0.25)
        b = build_plan(amp * 2.0**e, 0.25)
        assert a == b

    def test_positive_scaling_random(self, rng):
        for _ in range(20):
            amp = rng.random(128)
            assert build_plan(amp, 0.25) == build_plan(amp * rng.uniform(0.1, 10), 0.25)


class TestGeometry:
    @given(st.integers(1, 700), st.sampled_from([0.0, 0.125, 0.25, 0.5]), st.integers(0, 2**31))
    def test_slot_layout(self, ic, alpha, seed):
        rng = np.random.default_rng(seed)
        try:
            plan = build_plan(rng.random(ic), alpha)
        except ValueError:
            return
        assert plan.n2 + plan.pad2 == 48 * plan.tiles
        if plan.has4:
            assert plan.n4 + plan.pad4 == 16 * plan.tiles
        ch = plan.channel_of_slot
        assert sorted(ch[ch >= 0].tolist()) == list(range(ic))
        # 2-bit channels first in ascending order, then 4-bit ones
        two = ch[:plan.width2][ch[:plan.width2] >= 0]
        four = ch[plan.width2:][ch[plan.width2:] >= 0]
        assert np.all(np.diff(two) > 0) and np.all(np.diff(four) > 0)
        assert np.all(plan.bits[two] == 2) and np.all(plan.bits[four] == 4)
        assert sorted(plan.acc_order.tolist()) == list(range(plan.padded_ic))

    def test_acc_order_interleaves_tiles(self):
        plan = build_plan(np.arange(128, 0, -1.0), 0.25)  # 32 four-bit, 96 two-bit, 2 tiles
        order = plan.acc_order
        assert order[:48].tolist() == list(range(48))
        assert order[48:64].tolist() == list(range(96, 112))
        assert order[64:112].tolist() == list(range(48, 96))

    def test_rejects_bad_bits(self):
        with pytest.raises(ValueError):
            ChannelPlan(np.array([2, 3]))
        with pytest.raises(ValueError):
            ChannelPlan(np.array([4] * 8 + [2] * 8))


class TestPermutation:
    def test_identity(self):
        x = np.arange(5.0)
        assert np.array_equal(apply_permutation(x, np.arange(5)), x)

    def test_reversal(self):
        x = np.arange(4.0)
        assert apply_permutation(x, [3, 2, 1, 0]).tolist() == [3, 2, 1, 0]
        assert np.array_equal(invert_permutation(apply_permutation(x, [3, 2, 1, 0]), [3, 2, 1, 0]), x)

    def test_plan_round_trip(self, rng):
        for ic in (10, 64, 100, 333):
            plan = build_plan(rng.random(ic), 0.25 if ic >= 64 else 0.0)
            x = rng.standard_normal(ic)
            y = apply_permutation(x, plan)
            assert y.size == plan.padded_ic
            assert not np.any(y[plan.channel_of_slot < 0])
            assert np.array_equal(invert_permutation(y, plan), x)

    @given(st.permutations(list(range(7))))
    def test_arbitrary_permutation_round_trip(self, perm):
        x = np.arange(7.0) * 3
        assert np.array_equal(invert_permutation(apply_permutation(x, perm), perm), x)

