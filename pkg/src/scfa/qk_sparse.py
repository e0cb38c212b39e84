"""Per-head key/query dropping: compaction, index padding, irregular-causal
kernel, and scatter back to full shape.

Boundary-layout tensors are (B, T, H, D) with keep indicators (B, T, H);
the kernel operates on compacted (B, H, T_c, D) operands whose original
positions travel in padded index tensors. Query pads are -1, key pads 1e9,
so padded slots can never pass the causal comparison in either direction.
"""

from typing import NamedTuple

import numpy as np

from ._kernel import (
    FlashOutputs,
    backward_head,
    causal_j_stops,
    check_forward_operands,
    forward_head,
)
from .errors import ContractError, ShapeError
from .tensors import (
    DOMAIN_KEEP,
    KEY_PAD,
    QUERY_PAD,
    BlockSpec,
    default_scale,
    from_heads,
    map_heads,
    stream,
    to_heads,
)


class CompactResult(NamedTuple):
    compact: np.ndarray  # (B, buffer_size, H, D)
    index: np.ndarray  # (B, buffer_size, H) original positions
    indices_per_head: np.ndarray  # (B, H) kept counts, None when index was given


def compact(keep, x, index=None):
    """Gather kept rows of x into a dense prefix, per head.

    keep: (B, T, H) indicator (1 = keep); x: (B, T, H, D). The stable sort
    keeps kept rows in original time order; slots past a head's kept count
    hold arbitrary dropped rows up to the grid-wide buffer size. Passing a
    precomputed index (values sharing the keys' gather) skips the sort.
    """
    B, T, H, D = x.shape
    if index is None:
        keep = np.asarray(keep)
        if keep.shape != (B, T, H):
            raise ShapeError(f"keep shape {keep.shape} != {(B, T, H)}")
        if not np.isin(keep, (0, 1)).all():
            raise ShapeError("keep entries must be 0 or 1")
        kept = keep.astype(bool)
        counts = kept.sum(axis=1).astype(np.int64)
        buffer_size = int(counts.max()) if counts.size else 0
        order = np.argsort(~kept, axis=1, kind="stable")
        index = order[:, :buffer_size, :]
    else:
        index = np.asarray(index)
        if index.ndim != 3 or index.shape[0] != B or index.shape[2] != H:
            raise ShapeError(f"index shape {index.shape} incompatible with x")
        if index.size and (index.min() < 0 or index.max() >= T):
            raise ShapeError("supplied index out of range")
        counts = None
    gathered = np.take_along_axis(
        x, np.broadcast_to(index[:, :, :, None], index.shape + (D,)), axis=1
    )
    return CompactResult(gathered, index, counts)


def pad_index(index, indices_per_head, pad_idx):
    """Overwrite slots past each head's kept count with pad_idx; returns a copy."""
    B, buffer_size, H = index.shape
    out = index.astype(np.int64).copy()
    pads = (
        np.arange(buffer_size)[None, :, None]
        >= np.asarray(indices_per_head)[:, None, :]
    )
    out[pads] = pad_idx
    return out


def qk_tile_schedule(q_idx, k_idx, blocks=BlockSpec()):
    """j_stop per query block for one head's padded 1-D index vectors.

    Tiles j in [0, j_stop) are computed; j_stop counts key blocks whose
    smallest index is <= the query block's largest index.
    """
    return causal_j_stops(np.asarray(q_idx), np.asarray(k_idx), blocks)


def _check_padded(idx, pad, name):
    is_pad = idx == pad
    if is_pad.any():
        first = int(np.argmax(is_pad))
        if not is_pad[first:].all():
            raise ContractError(f"{name}: pad entries must form the tail")
        prefix = idx[:first]
    else:
        prefix = idx
    if prefix.size > 1 and not (np.diff(prefix) > 0).all():
        raise ContractError(f"{name}: non-pad prefix must be strictly increasing")
    return prefix


def _check_indices(q_idx, k_idx, B, H, T_Q, T_KV):
    if q_idx.shape != (B, H, T_Q) or k_idx.shape != (B, H, T_KV):
        raise ShapeError("index tensors do not match the compacted operands")
    for b in range(B):
        for h in range(H):
            _check_padded(q_idx[b, h], QUERY_PAD, "q_idx")
            prefix = _check_padded(k_idx[b, h], KEY_PAD, "k_idx")
            if prefix.size and prefix[-1] >= KEY_PAD:
                raise ContractError(f"key indices must stay below {KEY_PAD}")


def qk_forward_kernel(q_c, k_c, v_c, q_idx, k_idx, scale=None, blocks=BlockSpec(), workers=None):
    """Irregular-causal forward over compacted operands.

    q_c/k_c/v_c: (B, H, T_c, D); q_idx/k_idx: (B, H, T_c) padded original
    positions. Rows whose index is the query pad come out zero.
    """
    check_forward_operands(q_c, k_c, v_c)
    B, H, T_Q, D = q_c.shape
    T_KV = k_c.shape[2]
    _check_indices(q_idx, k_idx, B, H, T_Q, T_KV)
    if scale is None:
        scale = default_scale(D)

    O = np.empty_like(q_c)
    M = np.empty((B, H, T_Q), dtype=q_c.dtype)
    L = np.empty((B, H, T_Q), dtype=q_c.dtype)
    tiles = np.zeros((B, H), dtype=np.int64)

    def run(b, h):
        j_stop = causal_j_stops(q_idx[b, h], k_idx[b, h], blocks)
        o, m, l, t = forward_head(
            q_c[b, h], k_c[b, h], v_c[b, h], q_idx[b, h], k_idx[b, h],
            scale, blocks, np.zeros_like(j_stop), j_stop,
        )
        O[b, h], M[b, h], L[b, h] = o, m, l
        tiles[b, h] = t

    map_heads(run, B, H, workers)
    return FlashOutputs(O=O, M=M, L=L, tiles_computed=int(tiles.sum()))


def qk_backward_kernel(
    q_c, k_c, v_c, outputs, d_out_c, q_idx, k_idx,
    scale=None, blocks=BlockSpec(), workers=None,
):
    """Gradients w.r.t. compacted operands; padded rows get zero gradients.

    The dK/dV pass walks the transposed forward schedule, so each key block
    only visits query blocks that could reach it causally.
    """
    check_forward_operands(q_c, k_c, v_c)
    B, H, T_Q, D = q_c.shape
    T_KV = k_c.shape[2]
    _check_indices(q_idx, k_idx, B, H, T_Q, T_KV)
    if d_out_c.shape != q_c.shape:
        raise ShapeError(f"dO shape {d_out_c.shape} != {q_c.shape}")
    if scale is None:
        scale = default_scale(D)
    delta = np.sum(d_out_c * outputs.O, axis=-1)

    dq = np.empty_like(q_c)
    dk = np.empty_like(k_c)
    dv = np.empty_like(v_c)

    def run(b, h):
        j_stop = causal_j_stops(q_idx[b, h], k_idx[b, h], blocks)
        dq[b, h], dk[b, h], dv[b, h] = backward_head(
            q_c[b, h], k_c[b, h], v_c[b, h], d_out_c[b, h], delta[b, h],
            outputs.M[b, h], outputs.L[b, h], q_idx[b, h], k_idx[b, h],
            scale, blocks, np.zeros_like(j_stop), j_stop,
        )

    map_heads(run, B, H, workers)
    return dq, dk, dv


class QkPrepared(NamedTuple):
    q_c: np.ndarray  # (B, H, T_cq, D)
    k_c: np.ndarray  # (B, H, T_ck, D)
    v_c: np.ndarray  # (B, H, T_ck, D)
    q_idx: np.ndarray  # (B, H, T_cq) padded
    k_idx: np.ndarray  # (B, H, T_ck) padded
    scatter_index: np.ndarray  # (B, T_cq, H) unpadded query gather order
    T_Q: int


def qk_preprocess(q, k, v, q_keep, k_keep):
    """Compact, pad, and transpose boundary-layout inputs for the kernel."""
    B, T_Q, H, D = q.shape
    T_KV = k.shape[1]
    if T_KV >= KEY_PAD:
        raise ShapeError(f"T_KV must be < {KEY_PAD}")
    q_c, q_index, iph_q = compact(q_keep, q)
    k_c, k_index, iph_k = compact(k_keep, k)
    v_c, _, _ = compact(k_keep, v, index=k_index)
    q_idx = pad_index(q_index, iph_q, QUERY_PAD)
    k_idx = pad_index(k_index, iph_k, KEY_PAD)
    return QkPrepared(
        q_c=to_heads(q_c), k_c=to_heads(k_c), v_c=to_heads(v_c),
        q_idx=to_heads(q_idx), k_idx=to_heads(k_idx),
        scatter_index=q_index, T_Q=T_Q,
    )


def qk_postprocess(o_kernel, scatter_index, T_Q):
    """Scatter kernel outputs back to (B, T, H, D); dropped rows stay zero."""
    o_c = from_heads(o_kernel)
    B, _, H, D = o_c.shape
    out = np.zeros((B, T_Q, H, D), dtype=o_c.dtype)
    np.put_along_axis(
        out,
        np.broadcast_to(scatter_index[:, :, :, None], o_c.shape),
        o_c,
        axis=1,
    )
    return out


def qk_sparse_attention(q, k, v, q_keep, k_keep, scale=None, blocks=BlockSpec(), workers=None):
    """End-to-end QK-sparse attention in boundary layout (B, T, H, D).

    Dropped query rows of the output are exactly zero; kept rows equal
    masked attention over the kept keys.
    """
    prep = qk_preprocess(q, k, v, q_keep, k_keep)
    outputs = qk_forward_kernel(
        prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx,
        scale=scale, blocks=blocks, workers=workers,
    )
    return qk_postprocess(outputs.O, prep.scatter_index, prep.T_Q)


def random_keep(B, T, H, drop_prob, seed):
    """Indicator tensor dropping each (position, head) with probability drop_prob."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ShapeError(f"drop probability must be in [0, 1], got {drop_prob}")
    g = stream(seed, DOMAIN_KEEP)
    return (g.random((B, T, H)) >= drop_prob).astype(np.float64)
