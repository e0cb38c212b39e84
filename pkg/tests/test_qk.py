import numpy as np
import pytest

from scfa import (
    BlockSpec,
    ContractError,
    KEY_PAD,
    QUERY_PAD,
    build_mask,
    causal_mask,
    compact,
    finite_diff_gradient,
    flash_backward,
    flash_forward,
    from_heads,
    max_rel_err,
    naive_attention,
    pad_index,
    qk_backward_kernel,
    qk_forward_kernel,
    qk_postprocess,
    qk_preprocess,
    qk_sparse_attention,
    qk_tile_schedule,
    random_keep,
    random_tensor,
    to_heads,
)
from conftest import make_batch


def simulate_qk_tiles(q_idx, k_idx, blocks):
    """Independent schedule count: plain double loop over every (i, j) pair,
    minima/maxima taken by slicing. No searchsorted, no shared code path."""
    m = blocks.query_blocks(len(q_idx))
    n = blocks.key_blocks(len(k_idx))
    tiles = 0
    for i in range(m):
        max_q = max(q_idx[i * blocks.B_m : (i + 1) * blocks.B_m])
        for j in range(n):
            if min(k_idx[j * blocks.B_n : (j + 1) * blocks.B_n]) <= max_q:
                tiles += 1
    return tiles


def keep_from_drops(T, drops):
    keep = np.ones((1, T, 1))
    keep[0, list(drops), 0] = 0.0
    return keep


class TestCompact:
    def test_identity_when_all_kept(self):
        x = from_heads(random_tensor((1, 2, 8, 4), seed=1))
        keep = np.ones((1, 8, 2))
        result = compact(keep, x)
        assert np.array_equal(result.compact, x)
        assert result.index.shape == (1, 8, 2)
        assert np.array_equal(result.index[0, :, 0], np.arange(8))
        assert np.array_equal(result.indices_per_head[0], [8, 8])

    def test_drop_two_positions(self):
        x = from_heads(random_tensor((1, 1, 8, 2), seed=2))
        result = compact(keep_from_drops(8, {4, 5}), x)
        assert np.array_equal(result.index[0, :6, 0], [0, 1, 2, 3, 6, 7])
        assert result.indices_per_head[0, 0] == 6
        assert np.array_equal(result.compact[0, :6, 0], x[0, [0, 1, 2, 3, 6, 7], 0])

    def test_unequal_head_counts(self):
        x = from_heads(random_tensor((1, 2, 8, 2), seed=3))
        keep = np.zeros((1, 8, 2))
        keep[0, [1, 4, 6], 0] = 1.0  # 3 kept in head 0
        keep[0, [0, 2, 3, 5, 7], 1] = 1.0  # 5 kept in head 1
        result = compact(keep, x)
        assert result.compact.shape[1] == 5
        assert np.array_equal(result.index[0, :3, 0], [1, 4, 6])
        assert np.array_equal(result.index[0, :, 1], [0, 2, 3, 5, 7])
        padded = pad_index(result.index, result.indices_per_head, QUERY_PAD)
        assert np.array_equal(padded[0, :, 0], [1, 4, 6, QUERY_PAD, QUERY_PAD])

    def test_supplied_index_used_verbatim(self):
        x = from_heads(random_tensor((1, 1, 6, 2), seed=4))
        idx = np.array([[[5], [0], [3]]])
        result = compact(None, x, index=idx)
        assert result.indices_per_head is None
        assert np.array_equal(result.compact[0, :, 0], x[0, [5, 0, 3], 0])


class TestPadIndex:
    def test_full_counts_unchanged(self):
        idx = np.arange(8).reshape(1, 8, 1)
        out = pad_index(idx, np.array([[8]]), QUERY_PAD)
        assert np.array_equal(out, idx)

    def test_full_prefix_at_buffer_unchanged(self):
        idx = np.array([0, 1, 2, 3, 6, 7]).reshape(1, 6, 1)
        out = pad_index(idx, np.array([[6]]), QUERY_PAD)
        assert np.array_equal(out, idx)

    def test_padding_written(self):
        idx = np.array([3, 5, 0, 0]).reshape(1, 4, 1)
        out = pad_index(idx, np.array([[2]]), QUERY_PAD)
        assert np.array_equal(out[0, :, 0], [3, 5, -1, -1])
        out_k = pad_index(idx, np.array([[2]]), KEY_PAD)
        assert np.array_equal(out_k[0, :, 0], [3, 5, KEY_PAD, KEY_PAD])


class TestSchedule:
    def test_full_causal_reduces_to_triangular(self):
        idx = np.arange(64)
        j_stop = qk_tile_schedule(idx, idx, BlockSpec(16, 16))
        assert np.array_equal(j_stop, [1, 2, 3, 4])

    def test_compacted_instance(self):
        # Queries [0,1,2,3,6,7] and keys [0,2,3,5,6,7] in blocks of two:
        # row-block maxima 1, 3, 7 against key-block minima 0, 3, 6.
        q_idx = np.array([0, 1, 2, 3, 6, 7])
        k_idx = np.array([0, 2, 3, 5, 6, 7])
        j_stop = qk_tile_schedule(q_idx, k_idx, BlockSpec(2, 2))
        assert np.array_equal(j_stop, [1, 2, 3])

    def test_matches_brute_force_on_random_drops(self):
        blocks = BlockSpec(32, 32)
        rng = np.random.default_rng(0)
        for trial in range(5):
            q_kept = np.nonzero(rng.random(256) >= 0.5)[0]
            k_kept = np.nonzero(rng.random(256) >= 0.5)[0]
            buf_q = len(q_kept) + int(rng.integers(0, 5))
            buf_k = len(k_kept) + int(rng.integers(0, 5))
            q_idx = np.concatenate([q_kept, np.full(buf_q - len(q_kept), QUERY_PAD)])
            k_idx = np.concatenate([k_kept, np.full(buf_k - len(k_kept), KEY_PAD)])
            j_stop = qk_tile_schedule(q_idx, k_idx, blocks)
            assert int(j_stop.sum()) == simulate_qk_tiles(q_idx, k_idx, blocks)


class TestForwardKernel:
    def test_no_drops_is_bitwise_dense(self):
        q, k, v = make_batch(2, 2, 48, 4, seed=5)
        blocks = BlockSpec(16, 16)
        dense_out = flash_forward(q, k, v, blocks)
        idx = np.broadcast_to(np.arange(48), (2, 2, 48))
        sparse_out = qk_forward_kernel(q, k, v, idx, idx, blocks=blocks)
        assert np.array_equal(sparse_out.O, dense_out.O)
        assert np.array_equal(sparse_out.M, dense_out.M)
        assert np.array_equal(sparse_out.L, dense_out.L)
        assert sparse_out.tiles_computed == dense_out.tiles_computed

    def test_compacted_instance_visible_key_counts(self):
        # Uniform logits + one-hot values turn attention weights into
        # averages over visible keys; row i then shows 1/count at each
        # visible key. Expected counts follow from the index sets.
        q_idx = np.array([0, 1, 2, 3, 6, 7]).reshape(1, 1, 6)
        k_idx = np.array([0, 2, 3, 5, 6, 7]).reshape(1, 1, 6)
        q = np.ones((1, 1, 6, 6))
        k = np.ones((1, 1, 6, 6))
        v = np.eye(6).reshape(1, 1, 6, 6)
        out = qk_forward_kernel(q, k, v, q_idx, k_idx, blocks=BlockSpec(2, 2))
        counts = (out.O[0, 0] > 0).sum(axis=1)
        assert np.array_equal(counts, [1, 1, 2, 3, 5, 6])
        nonzero = out.O[0, 0][out.O[0, 0] > 0]
        expected = np.repeat(1.0 / counts, counts)
        assert max_rel_err(nonzero, expected) < 1e-12

    def test_matches_oracle_on_random_drops(self):
        B, H, T, D = 2, 3, 128, 8
        q, k, v = make_batch(B, H, T, D, seed=7)
        keep_q = random_keep(B, T, H, 0.5, seed=11)
        keep_k = random_keep(B, T, H, 0.5, seed=12)
        prep = qk_preprocess(from_heads(q), from_heads(k), from_heads(v), keep_q, keep_k)
        out = qk_forward_kernel(prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx)
        ref = naive_attention(
            prep.q_c, prep.k_c, prep.v_c, build_mask(prep.q_idx, prep.k_idx)
        )
        assert max_rel_err(out.O, ref) < 1e-12

    def test_contract_error_on_unsorted_prefix(self):
        q, k, v = make_batch(1, 1, 4, 2, seed=13)
        bad = np.array([2, 0, 1, 3]).reshape(1, 1, 4)
        good = np.arange(4).reshape(1, 1, 4)
        with pytest.raises(ContractError):
            qk_forward_kernel(q, k, v, bad, good)
        with pytest.raises(ContractError):
            qk_forward_kernel(q, k, v, good, bad)

    def test_contract_error_on_interior_pad(self):
        q, k, v = make_batch(1, 1, 4, 2, seed=13)
        good = np.arange(4).reshape(1, 1, 4)
        interior = np.array([0, QUERY_PAD, 2, 3]).reshape(1, 1, 4)
        with pytest.raises(ContractError):
            qk_forward_kernel(q, k, v, interior, good)


class TestBackwardKernel:
    def test_no_drops_matches_dense(self):
        q, k, v = make_batch(1, 2, 32, 4, seed=15)
        blocks = BlockSpec(8, 8)
        idx = np.broadcast_to(np.arange(32), (1, 2, 32))
        d_out = random_tensor((1, 2, 32, 4), seed=17)
        dense_out = flash_forward(q, k, v, blocks)
        want = flash_backward(q, k, v, dense_out, d_out, blocks)
        sparse_out = qk_forward_kernel(q, k, v, idx, idx, blocks=blocks)
        got = qk_backward_kernel(q, k, v, sparse_out, d_out, idx, idx, blocks=blocks)
        for g, w in zip(got, want):
            assert np.array_equal(g, w)

    def test_zero_upstream(self):
        q, k, v = make_batch(1, 1, 16, 4, seed=19)
        keep = random_keep(1, 16, 1, 0.3, seed=20)
        prep = qk_preprocess(from_heads(q), from_heads(k), from_heads(v), keep, keep)
        out = qk_forward_kernel(prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx)
        grads = qk_backward_kernel(
            prep.q_c, prep.k_c, prep.v_c, out, np.zeros_like(prep.q_c),
            prep.q_idx, prep.k_idx,
        )
        assert not any(g.any() for g in grads)

    def test_matches_finite_differences(self):
        B, H, T, D = 1, 2, 48, 4
        q, k, v = make_batch(B, H, T, D, seed=21)
        keep_q = random_keep(B, T, H, 0.3, seed=22)
        keep_k = random_keep(B, T, H, 0.3, seed=23)
        blocks = BlockSpec(16, 16)
        prep = qk_preprocess(from_heads(q), from_heads(k), from_heads(v), keep_q, keep_k)
        out = qk_forward_kernel(
            prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx, blocks=blocks
        )
        d_out = random_tensor(prep.q_c.shape, seed=24)
        got = qk_backward_kernel(
            prep.q_c, prep.k_c, prep.v_c, out, d_out, prep.q_idx, prep.k_idx,
            blocks=blocks,
        )
        mask = build_mask(prep.q_idx, prep.k_idx)
        want = finite_diff_gradient(prep.q_c, prep.k_c, prep.v_c, mask, d_out)
        for g, w in zip(got, want):
            assert max_rel_err(g, w) < 1e-6

    def test_padded_rows_zero_gradients(self):
        q, k, v = make_batch(1, 1, 12, 3, seed=25)
        keep = keep_from_drops(12, {2, 9, 10})
        prep = qk_preprocess(from_heads(q), from_heads(k), from_heads(v), keep, keep)
        out = qk_forward_kernel(prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx)
        d_out = random_tensor(prep.q_c.shape, seed=26)
        dq, dk, dv = qk_backward_kernel(
            prep.q_c, prep.k_c, prep.v_c, out, d_out, prep.q_idx, prep.k_idx
        )
        pads_q = prep.q_idx[0, 0] == QUERY_PAD
        pads_k = prep.k_idx[0, 0] == KEY_PAD
        assert not dq[0, 0][pads_q].any()
        assert not dk[0, 0][pads_k].any()
        assert not dv[0, 0][pads_k].any()


class TestEndToEnd:
    def test_all_keep_equals_dense(self):
        q, k, v = make_batch(2, 2, 40, 4, seed=27)
        keep = np.ones((2, 40, 2))
        got = qk_sparse_attention(from_heads(q), from_heads(k), from_heads(v), keep, keep)
        want = flash_forward(q, k, v).O
        assert max_rel_err(to_heads(got), want) < 1e-12

    def test_all_queries_dropped(self):
        q, k, v = make_batch(1, 2, 16, 4, seed=29)
        none = np.zeros((1, 16, 2))
        some = random_keep(1, 16, 2, 0.3, seed=30)
        out = qk_sparse_attention(from_heads(q), from_heads(k), from_heads(v), none, some)
        assert out.shape == (1, 16, 2, 4)
        assert not out.any()
        assert np.isfinite(out).all()

    def test_all_keys_dropped(self):
        q, k, v = make_batch(1, 1, 16, 4, seed=31)
        keep = np.ones((1, 16, 1))
        out = qk_sparse_attention(
            from_heads(q), from_heads(k), from_heads(v), keep, np.zeros((1, 16, 1))
        )
        assert not out.any() and np.isfinite(out).all()

    def test_heavy_drop_against_oracle_float32(self):
        B, H, T, D = 1, 2, 1024, 8
        q, k, v = make_batch(B, H, T, D, seed=33, dtype=np.float32)
        keep_q = random_keep(B, T, H, 0.7, seed=34)
        keep_k = random_keep(B, T, H, 0.7, seed=35)
        got = qk_sparse_attention(from_heads(q), from_heads(k), from_heads(v), keep_q, keep_k)
        mask = causal_mask(B, H, T)
        mask &= to_heads(keep_q.astype(bool))[:, :, :, None]
        mask &= to_heads(keep_k.astype(bool))[:, :, None, :]
        want = naive_attention(q, k, v, mask)
        assert max_rel_err(to_heads(got), want) < 1e-5

    @pytest.mark.parametrize("drop", [0.0, 0.25, 0.9])
    def test_exactness_over_random_masks(self, drop):
        B, H, T, D = 2, 2, 50, 4
        q, k, v = make_batch(B, H, T, D, seed=37)
        keep_q = random_keep(B, T, H, drop, seed=38 + int(drop * 10))
        keep_k = random_keep(B, T, H, drop, seed=39 + int(drop * 10))
        got = qk_sparse_attention(
            from_heads(q), from_heads(k), from_heads(v), keep_q, keep_k,
            blocks=BlockSpec(16, 16),
        )
        mask = causal_mask(B, H, T)
        mask &= to_heads(keep_q.astype(bool))[:, :, :, None]
        mask &= to_heads(keep_k.astype(bool))[:, :, None, :]
        want = naive_attention(q, k, v, mask)
        assert max_rel_err(to_heads(got), want) < 1e-12
        # dropped query rows are exactly zero
        assert not got[keep_q == 0].any()


class TestScheduleProperties:
    def test_tile_monotonicity_under_key_drops(self):
        # Dropping a key shifts later keys into earlier slots, so every
        # key block's smallest index weakly increases: the schedule can
        # only shrink. (The query-side analogue is NOT monotone per drop:
        # a dropped query can pull a later query across a block boundary
        # and extend that block's reach.)
        T = 96
        blocks = BlockSpec(16, 16)
        rng = np.random.default_rng(41)
        q_idx = np.arange(T)
        keep_k = np.ones(T)
        prev = None
        for _ in range(60):
            alive = np.nonzero(keep_k)[0]
            keep_k[rng.choice(alive)] = 0.0
            k_idx = np.concatenate(
                [np.nonzero(keep_k)[0], np.full(T - int(keep_k.sum()), KEY_PAD)]
            )
            tiles = int(qk_tile_schedule(q_idx, k_idx, blocks).sum())
            if prev is not None:
                assert tiles <= prev
            prev = tiles

    def test_tiles_shrink_after_many_drops(self):
        # Aggregate form that holds on both axes: a heavily dropped grid
        # schedules far fewer tiles than the dense one.
        T = 96
        blocks = BlockSpec(16, 16)
        rng = np.random.default_rng(42)
        dense_tiles = int(qk_tile_schedule(np.arange(T), np.arange(T), blocks).sum())
        q_kept = np.nonzero(rng.random(T) >= 0.5)[0]
        k_kept = np.nonzero(rng.random(T) >= 0.5)[0]
        sparse_tiles = int(qk_tile_schedule(q_kept, k_kept, blocks).sum())
        assert sparse_tiles < dense_tiles

    def test_asymptotic_reduction_band(self):
        # Independent simulator first, then the engine schedule must agree
        # with it exactly; both land in the (1 - drop)^2 band.
        T, drop = 4096, 0.5
        blocks = BlockSpec(32, 32)
        dense_tiles = simulate_qk_tiles(np.arange(T), np.arange(T), blocks)
        rng = np.random.default_rng(43)
        q_kept = np.nonzero(rng.random(T) >= drop)[0]
        k_kept = np.nonzero(rng.random(T) >= drop)[0]
        q_idx = np.concatenate([q_kept, np.full(T - len(q_kept), QUERY_PAD)])[: len(q_kept)]
        k_idx = np.concatenate([k_kept, np.full(T - len(k_kept), KEY_PAD)])[: len(k_kept)]
        sim = simulate_qk_tiles(q_idx, k_idx, blocks)
        keep_sq = (1.0 - drop) ** 2
        assert keep_sq * 0.8 <= sim / dense_tiles <= keep_sq * 1.3
        engine = int(qk_tile_schedule(q_idx, k_idx, blocks).sum())
        assert engine == sim

    def test_padding_safety_fuzz(self):
        B, H, T, D = 1, 2, 24, 3
        q, k, v = make_batch(B, H, T, D, seed=45)
        keep_q = random_keep(B, T, H, 0.4, seed=46)
        keep_k = random_keep(B, T, H, 0.4, seed=47)
        prep = qk_preprocess(from_heads(q), from_heads(k), from_heads(v), keep_q, keep_k)
        out = qk_forward_kernel(prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx)
        d_out = random_tensor(prep.q_c.shape, seed=48)
        grads = qk_backward_kernel(
            prep.q_c, prep.k_c, prep.v_c, out, d_out, prep.q_idx, prep.k_idx
        )

        rng = np.random.default_rng(49)
        q_f, k_f, v_f = prep.q_c.copy(), prep.k_c.copy(), prep.v_c.copy()
        for b in range(B):
            for h in range(H):
                q_pads = prep.q_idx[b, h] == QUERY_PAD
                k_pads = prep.k_idx[b, h] == KEY_PAD
                q_f[b, h][q_pads] = rng.uniform(-1e8, 1e8, size=(q_pads.sum(), D))
                k_f[b, h][k_pads] = rng.uniform(-1e8, 1e8, size=(k_pads.sum(), D))
                v_f[b, h][k_pads] = rng.uniform(-1e8, 1e8, size=(k_pads.sum(), D))
        fuzzed = qk_forward_kernel(q_f, k_f, v_f, prep.q_idx, prep.k_idx)
        assert np.array_equal(fuzzed.O, out.O)
        fuzzed_grads = qk_backward_kernel(
            q_f, k_f, v_f, fuzzed, d_out, prep.q_idx, prep.k_idx
        )
        kept_q = prep.q_idx != QUERY_PAD
        kept_k = prep.k_idx != KEY_PAD
        assert np.array_equal(fuzzed_grads[0][kept_q], grads[0][kept_q])
        assert np.array_equal(fuzzed_grads[1][kept_k], grads[1][kept_k])
        assert np.array_equal(fuzzed_grads[2][kept_k], grads[2][kept_k])

    def test_scatter_roundtrip_via_postprocess(self):
        q, k, v = make_batch(1, 1, 10, 2, seed=51)
        keep = keep_from_drops(10, {0, 7})
        prep = qk_preprocess(from_heads(q), from_heads(k), from_heads(v), keep, keep)
        out = qk_forward_kernel(prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx)
        full = qk_postprocess(out.O, prep.scatter_index, prep.T_Q)
        kept_positions = np.nonzero(keep[0, :, 0])[0]
        assert np.array_equal(full[0, kept_positions, 0], out.O[0, 0, :8])
        assert not full[0, [0, 7], 0].any()
