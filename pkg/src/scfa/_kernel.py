"""Shared tiled-attention machinery.

All three kernels (dense causal, QK-sparse, hash-sparse) run the same
per-head tile loop; they differ only in how the per-query-block key-block
ranges are scheduled and in the mask applied inside each tile. Keeping one
code path means the sparse kernels degenerate bitwise to the dense one when
nothing is dropped or everything shares a bucket.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .softmax import init_state, update_stats


@dataclass
class FlashOutputs:
    """Tiled forward results: output plus per-query softmax statistics.

    M is the running max (-inf for stranded queries), L the softmax
    denominator (0 for stranded queries); both feed the backward pass.
    tiles_computed counts scheduled tiles over the whole (B, H) grid.
    """

    O: np.ndarray  # (B, H, T_Q, D)
    M: np.ndarray  # (B, H, T_Q)
    L: np.ndarray  # (B, H, T_Q)
    tiles_computed: int


def block_reduce_min(x, size):
    if x.size == 0:
        return np.empty(0, dtype=x.dtype)
    return np.minimum.reduceat(x, np.arange(0, x.size, size))


def block_reduce_max(x, size):
    if x.size == 0:
        return np.empty(0, dtype=x.dtype)
    return np.maximum.reduceat(x, np.arange(0, x.size, size))


def causal_j_stops(q_idx, k_idx, blocks):
    """Per query block, the count of key blocks with min(k_idx) <= max(q_idx).

    Requires per-block key minima to be non-decreasing, which holds for
    plain causal indexing and for padded compact indices.
    """
    max_q = block_reduce_max(q_idx, blocks.B_m)
    min_k = block_reduce_min(k_idx, blocks.B_n)
    return np.searchsorted(min_k, max_q, side="right")


def hash_tile_ranges(q_hash, q_idx, k_hash, k_idx, blocks):
    """Banded tile ranges [j_start, j_stop) per query block, sorted inputs.

    j_start counts key blocks whose bucket values all lie below the query
    block's smallest bucket; the provisional stop counts blocks whose
    smallest bucket does not exceed the query block's largest; the final
    stop is then pulled back to just past the last block in that span still
    causally reachable (min k_idx <= max q_idx), or to j_start when none is.
    """
    min_qh = block_reduce_min(q_hash, blocks.B_m)
    max_qh = block_reduce_max(q_hash, blocks.B_m)
    min_kh = block_reduce_min(k_hash, blocks.B_n)
    max_kh = block_reduce_max(k_hash, blocks.B_n)
    j_start = np.searchsorted(max_kh, min_qh, side="left")
    j_hash_stop = np.searchsorted(min_kh, max_qh, side="right")

    min_ki = block_reduce_min(k_idx, blocks.B_n)
    max_qi = block_reduce_max(q_idx, blocks.B_m)
    j_stop = np.empty_like(j_start)
    for i in range(j_start.size):
        a, b = j_start[i], j_hash_stop[i]
        hits = np.nonzero(min_ki[a:b] <= max_qi[i])[0]
        j_stop[i] = a + hits[-1] + 1 if hits.size else a
    return j_start, j_stop


def _tile_mask(q_idx_blk, k_idx_blk, q_hash_blk, k_hash_blk, exclude_self):
    if exclude_self:
        allowed = q_idx_blk[:, None] > k_idx_blk[None, :]
    else:
        allowed = q_idx_blk[:, None] >= k_idx_blk[None, :]
    if q_hash_blk is not None:
        allowed &= q_hash_blk[:, None] == k_hash_blk[None, :]
    return allowed


def forward_head(
    q, k, v, q_idx, k_idx, scale, blocks, j_start, j_stop,
    q_hash=None, k_hash=None, exclude_self=False,
):
    """Tiled forward for one (b, h) slice; returns (o, m, l, tiles)."""
    T_Q, D = q.shape
    T_KV = k.shape[0]
    o = np.zeros((T_Q, D), dtype=q.dtype)
    m_out = np.full(T_Q, -np.inf, dtype=q.dtype)
    l_out = np.zeros(T_Q, dtype=q.dtype)
    tiles = 0
    B_m, B_n = blocks.B_m, blocks.B_n
    for i in range(j_start.size):
        lo, hi = i * B_m, min((i + 1) * B_m, T_Q)
        qi = q[lo:hi]
        qidx = q_idx[lo:hi]
        qhash = q_hash[lo:hi] if q_hash is not None else None
        state = init_state(hi - lo, D, dtype=q.dtype)
        for j in range(j_start[i], j_stop[i]):
            klo, khi = j * B_n, min((j + 1) * B_n, T_KV)
            kidx = k_idx[klo:khi]
            khash = k_hash[klo:khi] if k_hash is not None else None
            s = qi @ k[klo:khi].T
            s *= scale
            allowed = _tile_mask(qidx, kidx, qhash, khash, exclude_self)
            np.copyto(s, -np.inf, where=~allowed)
            update_stats(state, s, v[klo:khi])
            tiles += 1
        o[lo:hi] = state.o
        m_out[lo:hi] = state.m
        l_out[lo:hi] = state.l
    return o, m_out, l_out, tiles


def _tile_probs(qi, kj, qidx, kidx, qhash, khash, m_hat, inv_l, scale, exclude_self):
    # Normalized softmax tile recomputed from stored statistics; masked and
    # stranded entries come out exactly zero.
    s = qi @ kj.T
    s *= scale
    allowed = _tile_mask(qidx, kidx, qhash, khash, exclude_self)
    np.copyto(s, -np.inf, where=~allowed)
    s -= m_hat[:, None]
    np.exp(s, out=s)
    s *= inv_l[:, None]
    return s


def backward_head(
    q, k, v, d_out, delta, m_vec, l_vec, q_idx, k_idx, scale, blocks,
    j_start, j_stop, q_hash=None, k_hash=None, exclude_self=False,
):
    """Tiled backward for one (b, h) slice; returns (dq, dk, dv).

    Recomputes each scheduled tile's probabilities from the stored (M, L),
    then runs two single-owner passes: query blocks accumulate dQ, key
    blocks accumulate dK/dV over the transposed schedule.
    """
    T_Q, D = q.shape
    T_KV = k.shape[0]
    B_m, B_n = blocks.B_m, blocks.B_n
    m_hat = np.where(np.isneginf(m_vec), 0.0, m_vec)
    with np.errstate(divide="ignore"):
        inv_l = np.where(l_vec == 0.0, 0.0, 1.0 / l_vec)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)

    def tile_inputs(i, j):
        lo, hi = i * B_m, min((i + 1) * B_m, T_Q)
        klo, khi = j * B_n, min((j + 1) * B_n, T_KV)
        p = _tile_probs(
            q[lo:hi], k[klo:khi], q_idx[lo:hi], k_idx[klo:khi],
            q_hash[lo:hi] if q_hash is not None else None,
            k_hash[klo:khi] if k_hash is not None else None,
            m_hat[lo:hi], inv_l[lo:hi], scale, exclude_self,
        )
        dp = d_out[lo:hi] @ v[klo:khi].T
        ds = p * (dp - delta[lo:hi, None])
        return (lo, hi), (klo, khi), p, ds

    for i in range(j_start.size):
        lo, hi = i * B_m, min((i + 1) * B_m, T_Q)
        acc = np.zeros((hi - lo, D), dtype=q.dtype)
        for j in range(j_start[i], j_stop[i]):
            _, (klo, khi), _, ds = tile_inputs(i, j)
            acc += ds @ k[klo:khi]
        dq[lo:hi] = scale * acc

    n_blocks = -(-T_KV // B_n) if T_KV else 0
    for j in range(n_blocks):
        rel = np.nonzero((j >= j_start) & (j < j_stop))[0]
        klo, khi = j * B_n, min((j + 1) * B_n, T_KV)
        acc_k = np.zeros((khi - klo, D), dtype=q.dtype)
        acc_v = np.zeros((khi - klo, D), dtype=q.dtype)
        for i in rel:
            (lo, hi), _, p, ds = tile_inputs(i, j)
            acc_v += p.T @ d_out[lo:hi]
            acc_k += ds.T @ q[lo:hi]
        dk[klo:khi] = scale * acc_k
        dv[klo:khi] = acc_v
    return dq, dk, dv


def check_forward_operands(q, k, v):
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError("attention operands must be 4-D (B, H, T, D)")
    if q.shape[:2] != k.shape[:2] or k.shape != v.shape or q.shape[3] != k.shape[3]:
        raise ShapeError(f"operand shapes disagree: {q.shape}, {k.shape}, {v.shape}")
