"""Baseline tiled causal attention and its triangular tile schedule."""

import numpy as np

from ._kernel import (
    FlashOutputs,
    backward_head,
    causal_j_stops,
    check_forward_operands,
    forward_head,
)
from .errors import ShapeError
from .tensors import BlockSpec, default_scale, map_heads


def dense_tile_count(T, blocks=BlockSpec()):
    """Tiles the causal schedule computes for one head at sequence length T.

    A key block is scheduled for query block i when its smallest key index
    does not exceed the block's largest query index; with B_m == B_n and
    B_m | T this is the triangular count m(m+1)/2.
    """
    if T < 1:
        raise ShapeError(f"T must be >= 1, got {T}")
    n = blocks.key_blocks(T)
    total = 0
    for i in range(blocks.query_blocks(T)):
        max_q = min((i + 1) * blocks.B_m, T) - 1
        total += min(n, max_q // blocks.B_n + 1)
    return total


def flash_forward(q, k, v, blocks=BlockSpec(), scale=None, workers=None):
    """Tiled causal attention over (B, H, T, D) operands.

    Equivalent to the naive oracle under the plain causal mask; the diagonal
    tile of each block row carries the local triangular mask, tiles above it
    are skipped entirely.
    """
    check_forward_operands(q, k, v)
    B, H, T_Q, D = q.shape
    if T_Q != k.shape[2]:
        raise ShapeError("dense causal attention requires T_Q == T_KV")
    if scale is None:
        scale = default_scale(D)
    idx = np.arange(T_Q)
    j_stop = causal_j_stops(idx, idx, blocks)
    j_start = np.zeros_like(j_stop)

    O = np.empty_like(q)
    M = np.empty((B, H, T_Q), dtype=q.dtype)
    L = np.empty((B, H, T_Q), dtype=q.dtype)
    tiles = np.zeros((B, H), dtype=np.int64)

    def run(b, h):
        o, m, l, t = forward_head(
            q[b, h], k[b, h], v[b, h], idx, idx, scale, blocks, j_start, j_stop
        )
        O[b, h], M[b, h], L[b, h] = o, m, l
        tiles[b, h] = t

    map_heads(run, B, H, workers)
    return FlashOutputs(O=O, M=M, L=L, tiles_computed=int(tiles.sum()))


def flash_backward(q, k, v, outputs, d_out, blocks=BlockSpec(), scale=None, workers=None):
    """Gradients of <O, dO> w.r.t. (Q, K, V), recomputing tiles from (M, L)."""
    check_forward_operands(q, k, v)
    B, H, T_Q, D = q.shape
    if outputs.M.shape != (B, H, T_Q) or outputs.L.shape != (B, H, T_Q):
        raise ShapeError("stored M/L statistics do not match the operands")
    if d_out.shape != q.shape:
        raise ShapeError(f"dO shape {d_out.shape} does not match Q {q.shape}")
    if scale is None:
        scale = default_scale(D)
    idx = np.arange(T_Q)
    j_stop = causal_j_stops(idx, idx, blocks)
    j_start = np.zeros_like(j_stop)
    delta = np.sum(d_out * outputs.O, axis=-1)

    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)

    def run(b, h):
        dq[b, h], dk[b, h], dv[b, h] = backward_head(
            q[b, h], k[b, h], v[b, h], d_out[b, h], delta[b, h],
            outputs.M[b, h], outputs.L[b, h], idx, idx, scale, blocks,
            j_start, j_stop,
        )

    map_heads(run, B, H, workers)
    return dq, dk, dv
