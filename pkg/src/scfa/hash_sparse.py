"""Bucketed attention: LSH hashing, stable sort restructuring, and the
banded irregular-causal kernel with in-tile bucket masking.

Hashes arrive in boundary layout (B, T, H); the sort produces per-head
sorted operands whose original positions and bucket ids travel alongside.
Tile ranges are banded: [j_start, j_stop) per query block, from the bucket
bounds refined by the causal condition.
"""

from dataclasses import dataclass

import numpy as np

from ._kernel import (
    FlashOutputs,
    backward_head,
    check_forward_operands,
    forward_head,
    hash_tile_ranges,
)
from .errors import ContractError, NumericError, ParameterError, ShapeError
from .tensors import (
    DOMAIN_BUCKETS,
    DOMAIN_PROJECTIONS,
    BlockSpec,
    default_scale,
    from_heads,
    map_heads,
    stream,
    to_heads,
)


def lsh_buckets(x, nb, seed):
    """Angular LSH codes for boundary-layout vectors x of shape (B, T, H, D).

    Per (b, h) an independent D x (nb/2) normal projection R is drawn from
    the seed; the bucket is the argmax of the 2*(nb/2)-vector [xR, -xR].
    Vectors at small angles collide with elevated probability; scaling a
    vector never changes its bucket. nb must be even.
    """
    if nb < 2 or nb % 2 != 0:
        raise ParameterError(f"number of buckets must be even and >= 2, got {nb}")
    B, T, H, D = x.shape
    out = np.empty((B, T, H), dtype=np.int64)
    for b in range(B):
        for h in range(H):
            g = stream(seed, DOMAIN_PROJECTIONS, b * H + h)
            r = g.standard_normal((D, nb // 2))
            rot = x[b, :, h, :] @ r  # (T, nb/2)
            out[b, :, h] = np.argmax(np.concatenate([rot, -rot], axis=1), axis=1)
    return out


def random_buckets(B, T, H, nb, seed):
    """Uniform random bucket ids, the benchmark stand-in for real hashes."""
    if nb < 1:
        raise ParameterError(f"number of buckets must be >= 1, got {nb}")
    g = stream(seed, DOMAIN_BUCKETS)
    return g.integers(0, nb, size=(B, T, H), dtype=np.int64)


def normalize_keys(q):
    """Shared-QK keys: each row of q scaled to unit Euclidean norm."""
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norms == 0.0).any():
        raise NumericError("cannot normalize zero-norm rows")
    return q / norms


@dataclass
class SortedBatch:
    """Operands reordered by bucket, with their provenance.

    q_hash/k_hash are non-decreasing per head; within one bucket the
    original positions q_idx/k_idx increase strictly (stable sort), and
    q_idx is a permutation of [0, T_Q).
    """

    q: np.ndarray  # (B, H, T_Q, D)
    k: np.ndarray  # (B, H, T_KV, D)
    v: np.ndarray  # (B, H, T_KV, D)
    q_idx: np.ndarray  # (B, H, T_Q)
    k_idx: np.ndarray  # (B, H, T_KV)
    q_hash: np.ndarray  # (B, H, T_Q) sorted
    k_hash: np.ndarray  # (B, H, T_KV) sorted


def _bucket_order(hashes, idx):
    # Lexicographic (bucket, original position): for the default arange
    # positions this is exactly a stable sort on the bucket value, and it
    # canonicalizes arbitrary presentation orders otherwise.
    span = int(idx.max()) + 1 if idx.size else 1
    return np.argsort(hashes * span + idx, axis=-1, kind="stable")


def sort_by_bucket(q, k, v, q_hash, k_hash, q_idx=None, k_idx=None):
    """Reorder engine-layout operands by bucket id along the sequence axis.

    q_hash/k_hash: (B, H, T) integer buckets. Optional q_idx/k_idx override
    the original positions (defaults are [0, T)); sorting is by (bucket,
    position) so the result does not depend on the presentation order.
    V follows the keys' order.
    """
    check_forward_operands(q, k, v)
    B, H, T_Q, _ = q.shape
    T_KV = k.shape[2]
    q_hash = np.asarray(q_hash)
    k_hash = np.asarray(k_hash)
    if q_hash.shape != (B, H, T_Q) or k_hash.shape != (B, H, T_KV):
        raise ShapeError("hash tensors must be (B, H, T) matching the operands")
    if (q_hash < 0).any() or (k_hash < 0).any():
        raise ShapeError("bucket ids must be non-negative")
    if q_idx is None:
        q_idx = np.broadcast_to(np.arange(T_Q), (B, H, T_Q))
    if k_idx is None:
        k_idx = np.broadcast_to(np.arange(T_KV), (B, H, T_KV))

    q_order = _bucket_order(q_hash, q_idx)
    k_order = _bucket_order(k_hash, k_idx)

    def gather_rows(x, order):
        return np.take_along_axis(x, order[:, :, :, None], axis=2)

    return SortedBatch(
        q=gather_rows(q, q_order),
        k=gather_rows(k, k_order),
        v=gather_rows(v, k_order),
        q_idx=np.take_along_axis(np.ascontiguousarray(q_idx), q_order, axis=2),
        k_idx=np.take_along_axis(np.ascontiguousarray(k_idx), k_order, axis=2),
        q_hash=np.take_along_axis(q_hash, q_order, axis=2),
        k_hash=np.take_along_axis(k_hash, k_order, axis=2),
    )


def _check_sorted(hashes, idx, name):
    dh = np.diff(hashes)
    if (dh < 0).any():
        raise ContractError(f"{name}: bucket ids must be non-decreasing")
    same = dh == 0
    if (np.diff(idx)[same] <= 0).any():
        raise ContractError(f"{name}: positions must increase within a bucket")


def hash_forward_kernel(sorted_batch, scale=None, blocks=BlockSpec(), exclude_self=True, workers=None):
    """Banded forward over a SortedBatch.

    Each tile is masked by the causal comparison of original positions
    (strict when exclude_self) AND bucket equality; queries with no visible
    key produce zero rows.
    """
    sb = sorted_batch
    check_forward_operands(sb.q, sb.k, sb.v)
    B, H, T_Q, D = sb.q.shape
    if scale is None:
        scale = default_scale(D)

    O = np.empty_like(sb.q)
    M = np.empty((B, H, T_Q), dtype=sb.q.dtype)
    L = np.empty((B, H, T_Q), dtype=sb.q.dtype)
    tiles = np.zeros((B, H), dtype=np.int64)

    def run(b, h):
        _check_sorted(sb.q_hash[b, h], sb.q_idx[b, h], "q")
        _check_sorted(sb.k_hash[b, h], sb.k_idx[b, h], "k")
        j_start, j_stop = hash_tile_ranges(
            sb.q_hash[b, h], sb.q_idx[b, h], sb.k_hash[b, h], sb.k_idx[b, h], blocks
        )
        o, m, l, t = forward_head(
            sb.q[b, h], sb.k[b, h], sb.v[b, h], sb.q_idx[b, h], sb.k_idx[b, h],
            scale, blocks, j_start, j_stop,
            q_hash=sb.q_hash[b, h], k_hash=sb.k_hash[b, h],
            exclude_self=exclude_self,
        )
        O[b, h], M[b, h], L[b, h] = o, m, l
        tiles[b, h] = t

    map_heads(run, B, H, workers)
    return FlashOutputs(O=O, M=M, L=L, tiles_computed=int(tiles.sum()))


def hash_backward_kernel(
    sorted_batch, outputs, d_out_sorted,
    scale=None, blocks=BlockSpec(), exclude_self=True, workers=None,
):
    """Gradients w.r.t. the sorted operands; masked pairs contribute zero."""
    sb = sorted_batch
    check_forward_operands(sb.q, sb.k, sb.v)
    B, H, T_Q, D = sb.q.shape
    if d_out_sorted.shape != sb.q.shape:
        raise ShapeError(f"dO shape {d_out_sorted.shape} != {sb.q.shape}")
    if scale is None:
        scale = default_scale(D)
    delta = np.sum(d_out_sorted * outputs.O, axis=-1)

    dq = np.empty_like(sb.q)
    dk = np.empty_like(sb.k)
    dv = np.empty_like(sb.v)

    def run(b, h):
        j_start, j_stop = hash_tile_ranges(
            sb.q_hash[b, h], sb.q_idx[b, h], sb.k_hash[b, h], sb.k_idx[b, h], blocks
        )
        dq[b, h], dk[b, h], dv[b, h] = backward_head(
            sb.q[b, h], sb.k[b, h], sb.v[b, h], d_out_sorted[b, h], delta[b, h],
            outputs.M[b, h], outputs.L[b, h], sb.q_idx[b, h], sb.k_idx[b, h],
            scale, blocks, j_start, j_stop,
            q_hash=sb.q_hash[b, h], k_hash=sb.k_hash[b, h],
            exclude_self=exclude_self,
        )

    map_heads(run, B, H, workers)
    return dq, dk, dv


def hash_scatter(o_sorted, q_idx):
    """Route sorted kernel outputs back to original positions (engine layout)."""
    out = np.empty_like(o_sorted)
    np.put_along_axis(out, q_idx[:, :, :, None], o_sorted, axis=2)
    return out


def hash_sparse_attention(
    q, k, v, q_hash, k_hash,
    scale=None, blocks=BlockSpec(), exclude_self=True, workers=None,
):
    """End-to-end hash-sparse attention in boundary layout (B, T, H, D).

    q_hash/k_hash: (B, T, H) bucket ids. Sorts by bucket, runs the banded
    kernel, and scatters outputs back to their original positions.
    """
    qh = to_heads(np.asarray(q_hash))
    kh = to_heads(np.asarray(k_hash))
    sb = sort_by_bucket(to_heads(q), to_heads(k), to_heads(v), qh, kh)
    outputs = hash_forward_kernel(
        sb, scale=scale, blocks=blocks, exclude_self=exclude_self, workers=workers
    )
    return from_heads(hash_scatter(outputs.O, sb.q_idx))
