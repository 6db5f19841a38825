"""Attention: plain, multi-head, windowed, and shifted-window, checked
against direct-formula and loop-over-windows oracles."""

import numpy as np
import pytest

from gridcap import autodiff as ad
from gridcap.attention import (
    MASK_OFF,
    AttentionConfig,
    MsaWeights,
    WindowSpec,
    attention,
    msa,
    reset_score_counter,
    score_counter,
    shift_window_mask,
    sw_msa,
    w_msa,
    window_merge,
    window_partition,
)
from gridcap.autodiff import ShapeError, Tensor
from gridcap.gradcheck import check_gradients

from oracles import attention_oracle, msa_oracle, sw_msa_gather_oracle, w_msa_oracle


def make_weights(rng, d, scale=0.4):
    return MsaWeights(*[Tensor(rng.normal(size=(d, d)) * scale) for _ in range(4)])


class TestAttention:
    def test_single_key_value_returns_v(self, rng):
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(rng.normal(size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 4)))
        out = attention(q, k, v)
        np.testing.assert_allclose(out.data, np.broadcast_to(v.data, (3, 4)), atol=1e-15)

    def test_identical_keys_split_weight(self, rng):
        q = Tensor(rng.normal(size=(1, 4)))
        row = rng.normal(size=4)
        k = Tensor(np.stack([row, row]))
        v = Tensor(rng.normal(size=(2, 4)))
        _, w = attention(q, k, v, return_weights=True)
        np.testing.assert_allclose(w.data, [[0.5, 0.5]], atol=1e-15)

    def test_matches_direct_formula(self, rng):
        q, k, v = (rng.normal(size=(3, 3)) for _ in range(3))
        out = attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, attention_oracle(q, k, v), atol=1e-12)

    def test_width_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            attention(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))))

    def test_masked_rows_still_sum_to_one(self, rng):
        q, k, v = (Tensor(rng.normal(size=(4, 5))) for _ in range(3))
        mask = np.zeros((4, 4))
        mask[0, 1:] = MASK_OFF
        mask[2, 0] = MASK_OFF
        _, w = attention(q, k, v, mask=mask, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), np.ones(4), atol=1e-12)
        assert w.data[0, 1:].max() < 1e-12
        assert w.data[2, 0] < 1e-12


class TestMsa:
    def test_single_head_reduces_to_attention(self, rng):
        d = 6
        w = make_weights(rng, d)
        q_in = Tensor(rng.normal(size=(2, d)))
        kv_in = Tensor(rng.normal(size=(3, d)))
        out = msa(q_in, kv_in, kv_in, w, n_heads=1)
        direct = attention(ad.matmul(q_in, w.wq), ad.matmul(kv_in, w.wk), ad.matmul(kv_in, w.wv))
        np.testing.assert_allclose(out.data, ad.matmul(direct, w.wo).data, atol=1e-12)

    def test_key_value_permutation_invariance(self, rng):
        d = 8
        w = make_weights(rng, d)
        q_in = Tensor(rng.normal(size=(2, d)))
        kv = rng.normal(size=(5, d))
        perm = rng.permutation(5)
        out1 = msa(q_in, Tensor(kv), Tensor(kv), w, n_heads=2)
        out2 = msa(q_in, Tensor(kv[perm]), Tensor(kv[perm]), w, n_heads=2)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)

    def test_matches_per_head_slice_oracle(self, rng):
        d, h = 4, 2
        w = make_weights(rng, d)
        q_in = rng.normal(size=(2, d))
        kv_in = rng.normal(size=(3, d))
        out = msa(Tensor(q_in), Tensor(kv_in), Tensor(kv_in), w, n_heads=h)
        want = msa_oracle(q_in, kv_in, kv_in, w.wq.data, w.wk.data, w.wv.data, w.wo.data, h)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_head_count_must_divide_width(self):
        with pytest.raises(ShapeError):
            AttentionConfig(d_model=6, n_heads=4)

    def test_masked_extra_token_equals_plain_msa(self, rng):
        # Masking an appended key/value token reproduces attention without it.
        d, h = 6, 2
        w = make_weights(rng, d)
        q_in = Tensor(rng.normal(size=(4, d)))
        kv = rng.normal(size=(4, d))
        extra = rng.normal(size=(1, d))
        mask = np.zeros((4, 5))
        mask[:, -1] = MASK_OFF
        with_extra = msa(q_in, Tensor(np.vstack([kv, extra])), Tensor(np.vstack([kv, extra])), w, h, mask=mask)
        without = msa(q_in, Tensor(kv), Tensor(kv), w, h)
        np.testing.assert_allclose(with_extra.data, without.data, atol=1e-12)

    def test_gradients(self, rng):
        d, h = 6, 3
        params = [ad.Parameter(rng.normal(size=(d, d)) * 0.4, n) for n in ("wq", "wk", "wv", "wo")]
        w = MsaWeights(*params)
        q_in = Tensor(rng.normal(size=(2, d)))
        kv_in = Tensor(rng.normal(size=(3, d)))
        probe = Tensor(rng.normal(size=(2, d)))

        def loss():
            return ad.tsum(msa(q_in, kv_in, kv_in, w, h) * probe)

        assert check_gradients(loss, params) < 1e-4


class TestWindowPartition:
    def test_four_windows_cell_layout(self):
        x = Tensor(np.arange(16.0).reshape(4, 4, 1))
        wins = window_partition(x, 2)
        assert wins.shape == (4, 4, 1)
        np.testing.assert_array_equal(wins.data[0, :, 0], [0.0, 1.0, 4.0, 5.0])

    def test_single_window_is_flattened_input(self, rng):
        x = rng.normal(size=(3, 3, 5))
        wins = window_partition(Tensor(x), 3)
        np.testing.assert_array_equal(wins.data, x.reshape(1, 9, 5))

    def test_merge_partition_identity_bit_exact(self, rng):
        for _ in range(50):
            h = int(rng.choice([2, 4, 6]))
            w_ = int(rng.choice([2, 4, 6]))
            ws = int(rng.choice([1, 2]))
            spec = WindowSpec(h, w_, ws)
            x = rng.normal(size=(h, w_, 3))
            back = window_merge(window_partition(Tensor(x), ws), spec)
            assert (back.data == x).all()

    def test_indivisible_extent_rejected(self, rng):
        with pytest.raises(ShapeError):
            window_partition(Tensor(rng.normal(size=(4, 4, 2))), 3)
        with pytest.raises(ShapeError):
            WindowSpec(4, 6, 4)


class TestWindowedMsa:
    def test_single_window_degenerates_to_full_msa_over_stack(self, rng):
        d, h = 8, 2
        w = make_weights(rng, d)
        grid = rng.normal(size=(9, d))
        vg = rng.normal(size=d)
        spec = WindowSpec(3, 3, 3, 0)
        out = w_msa(Tensor(grid), Tensor(vg), w, h, spec)
        stack = np.vstack([grid, vg])
        want = msa(Tensor(grid), Tensor(stack), Tensor(stack), w, h)
        np.testing.assert_allclose(out.data, want.data, atol=1e-12)

    def test_no_global_token_is_plain_per_window_msa(self, rng):
        d, h = 6, 3
        w = make_weights(rng, d)
        grid = rng.normal(size=(16, d))
        spec = WindowSpec(4, 4, 2, 0)
        out = w_msa(Tensor(grid), None, w, h, spec)
        want = w_msa_oracle(grid, None, w.wq.data, w.wk.data, w.wv.data, w.wo.data, h, 4, 4, 2)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_matches_loop_over_windows_oracle(self, rng):
        d, h = 8, 4
        w = make_weights(rng, d)
        grid = rng.normal(size=(16, d))
        vg = rng.normal(size=d)
        spec = WindowSpec(4, 4, 2, 0)
        out = w_msa(Tensor(grid), Tensor(vg), w, h, spec)
        want = w_msa_oracle(grid, vg, w.wq.data, w.wk.data, w.wv.data, w.wo.data, h, 4, 4, 2)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_locality_other_windows_do_not_leak(self, rng):
        d, h = 6, 2
        w = make_weights(rng, d)
        grid = rng.normal(size=(16, d))
        vg = rng.normal(size=d)
        spec = WindowSpec(4, 4, 2, 0)
        full = w_msa(Tensor(grid), Tensor(vg), w, h, spec).data
        # zero all cells outside window 0 (cells (0,0),(0,1),(1,0),(1,1))
        keep = [0, 1, 4, 5]
        zeroed = np.zeros_like(grid)
        zeroed[keep] = grid[keep]
        part = w_msa(Tensor(zeroed), Tensor(vg), w, h, spec).data
        np.testing.assert_array_equal(full[keep], part[keep])

    def test_equivariance_to_window_multiple_shift(self, rng):
        d, h = 6, 2
        w = make_weights(rng, d)
        spec = WindowSpec(4, 4, 2, 0)
        grid = rng.normal(size=(4, 4, d))
        vg = Tensor(rng.normal(size=d))
        out = w_msa(Tensor(grid.reshape(16, d)), vg, w, h, spec).data.reshape(4, 4, d)
        rolled_in = np.roll(grid, (2, 2), axis=(0, 1))
        out_rolled = w_msa(Tensor(rolled_in.reshape(16, d)), vg, w, h, spec).data.reshape(4, 4, d)
        np.testing.assert_allclose(out_rolled, np.roll(out, (2, 2), axis=(0, 1)), atol=1e-12)

    def test_score_work_scales_linearly_in_grid_size(self, rng):
        d, h = 4, 2
        w = make_weights(rng, d)
        vg = Tensor(rng.normal(size=d))

        def work(side):
            spec = WindowSpec(side, side, 2, 0)
            grid = Tensor(rng.normal(size=(side * side, d)))
            reset_score_counter()
            w_msa(grid, vg, w, h, spec)
            return score_counter()

        w4, w8 = work(4), work(8)
        assert w8 == 4 * w4  # 4x the cells -> exactly 4x the score entries


class TestShiftedWindowMsa:
    def test_zero_shift_equals_w_msa(self, rng):
        d, h = 8, 2
        w = make_weights(rng, d)
        grid = Tensor(rng.normal(size=(16, d)))
        vg = Tensor(rng.normal(size=d))
        a = sw_msa(grid, vg, w, h, WindowSpec(4, 4, 2, 0))
        b = w_msa(grid, vg, w, h, WindowSpec(4, 4, 2, 0))
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_matches_gather_oracle(self, rng):
        d, h = 8, 4
        w = make_weights(rng, d)
        grid = rng.normal(size=(16, d))
        vg = rng.normal(size=d)
        spec = WindowSpec(4, 4, 2, 1)
        out = sw_msa(Tensor(grid), Tensor(vg), w, h, spec)
        want = sw_msa_gather_oracle(
            grid, vg, w.wq.data, w.wk.data, w.wv.data, w.wo.data, h, 4, 4, 2, 1
        )
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_matches_gather_oracle_no_global(self, rng):
        d, h = 6, 2
        w = make_weights(rng, d)
        grid = rng.normal(size=(36, d))
        spec = WindowSpec(6, 6, 3, 2)
        out = sw_msa(Tensor(grid), None, w, h, spec)
        want = sw_msa_gather_oracle(
            grid, None, w.wq.data, w.wk.data, w.wv.data, w.wo.data, h, 6, 6, 3, 2
        )
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_cross_region_pairs_get_no_weight(self, rng):
        # Attention weights on masked pairs underflow to zero, so perturbing a
        # cell from a different pre-shift region never changes the output.
        d, h = 6, 2
        w = make_weights(rng, d)
        spec = WindowSpec(4, 4, 2, 1)
        grid = rng.normal(size=(16, d))
        vg = rng.normal(size=d)
        base = sw_msa(Tensor(grid), Tensor(vg), w, h, spec).data
        # shifted frame: cell (3,3) (wrapped, original (0,0)) shares a window
        # with cell (2,2) (original (3,3)) but a different region.
        bumped = grid.copy()
        bumped[0] += 10.0  # original cell (0,0)
        out = sw_msa(Tensor(bumped), Tensor(vg), w, h, spec).data
        np.testing.assert_array_equal(base[15], out[15])  # original (3,3) unchanged

    def test_mask_weight_magnitude(self, rng):
        spec = WindowSpec(4, 4, 2, 1)
        mask = shift_window_mask(spec)
        q = Tensor(rng.normal(size=(spec.n_windows, 4, 5)))
        k = Tensor(rng.normal(size=(spec.n_windows, 4, 5)))
        v = Tensor(rng.normal(size=(spec.n_windows, 4, 5)))
        _, weights = attention(q, k, v, mask=mask, return_weights=True)
        assert weights.data[mask < 0].max() < 1e-12
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones((spec.n_windows, 4)), atol=1e-12)

    def test_shift_must_be_smaller_than_window(self):
        with pytest.raises(ShapeError):
            WindowSpec(4, 4, 2, 2)

    def test_gradients_flow_through_shift_and_mask(self, rng):
        d, h = 4, 2
        params = [ad.Parameter(rng.normal(size=(d, d)) * 0.4, n) for n in ("wq", "wk", "wv", "wo")]
        w = MsaWeights(*params)
        grid = ad.Parameter(rng.normal(size=(16, d)), "grid")
        vg = ad.Parameter(rng.normal(size=d), "vg")
        probe = Tensor(rng.normal(size=(16, d)))
        spec = WindowSpec(4, 4, 2, 1)

        def loss():
            return ad.tsum(sw_msa(grid, vg, w, h, spec) * probe)

        assert check_gradients(loss, params + [grid, vg]) < 1e-4
