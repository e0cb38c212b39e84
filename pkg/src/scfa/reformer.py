"""Fixed-chunk bucketed attention baseline and the collision-coverage metric.

After the stable bucket sort, a chunked scheme lets the query at sorted
slot p see only sorted key slots in chunks floor(p/c) and floor(p/c) - 1,
further masked by bucket equality and causality. The coverage metric counts
how many same-bucket causal pairs such a window actually reaches; the
banded tile schedule reaches all of them.
"""

from dataclasses import dataclass

import numpy as np

from ._kernel import hash_tile_ranges
from .errors import ShapeError
from .tensors import BlockSpec, default_scale, from_heads, map_heads, to_heads
from .hash_sparse import hash_scatter, sort_by_bucket


@dataclass
class ChunkSpec:
    c: int

    def __post_init__(self):
        if self.c < 1:
            raise ShapeError(f"chunk length must be >= 1, got {self.c}")


@dataclass
class CoverageReport:
    required_pairs: int
    covered_pairs: int

    @property
    def coverage(self):
        if self.required_pairs == 0:
            return 1.0
        return self.covered_pairs / self.required_pairs


def equalized_buckets(T, chunk):
    """Bucket count that equalizes expected bucket population with chunk size."""
    return -(-T // chunk)


def _coverage_one_head(q_hash, k_hash, window, exclude_self):
    """Count same-bucket causal pairs, and those whose sorted key slot falls
    inside the per-query window. window(p) -> (lo, hi) sorted-slot interval."""
    side = "left" if exclude_self else "right"
    nb = int(max(q_hash.max(initial=0), k_hash.max(initial=0))) + 1
    q_counts = np.bincount(q_hash, minlength=nb)
    k_counts = np.bincount(k_hash, minlength=nb)
    q_lo = np.concatenate([[0], np.cumsum(q_counts)[:-1]])
    k_lo = np.concatenate([[0], np.cumsum(k_counts)[:-1]])
    required = 0
    covered = 0
    for g in range(nb):
        if q_counts[g] == 0 or k_counts[g] == 0:
            continue
        qg = np.nonzero(q_hash == g)[0]  # original positions, ascending
        kg = np.nonzero(k_hash == g)[0]
        causal = np.searchsorted(kg, qg, side=side)  # reachable keys per query
        required += int(causal.sum())
        slots = q_lo[g] + np.arange(qg.size)
        win_lo, win_hi = window(slots)
        rank_lo = np.clip(win_lo - k_lo[g], 0, k_counts[g])
        rank_hi = np.clip(win_hi - k_lo[g], 0, k_counts[g])
        covered += int(np.maximum(0, np.minimum(causal, rank_hi) - rank_lo).sum())
    return required, covered


def lsh_coverage(q_hash, k_hash, chunk, exclude_self=True):
    """Fraction of same-bucket causal pairs reachable under two-chunk windows.

    q_hash/k_hash: (B, T, H) boundary-layout bucket ids. Purely
    combinatorial; aggregates pair counts over every (b, h).
    """
    if isinstance(chunk, int):
        chunk = ChunkSpec(chunk)
    qh = to_heads(np.asarray(q_hash))
    kh = to_heads(np.asarray(k_hash))
    B, H, _ = qh.shape
    c = chunk.c

    def window(slots):
        base = slots // c
        return np.maximum(0, (base - 1) * c), (base + 1) * c

    required = 0
    covered = 0
    for b in range(B):
        for h in range(H):
            r, cov = _coverage_one_head(qh[b, h], kh[b, h], window, exclude_self)
            required += r
            covered += cov
    return CoverageReport(required_pairs=required, covered_pairs=covered)


def hash_schedule_coverage(q_hash, k_hash, blocks=BlockSpec(), exclude_self=True):
    """Same metric evaluated against the banded tile schedule's key ranges."""
    qh = to_heads(np.asarray(q_hash))
    kh = to_heads(np.asarray(k_hash))
    B, H, _ = qh.shape
    required = 0
    covered = 0
    for b in range(B):
        for h in range(H):
            q_idx = np.argsort(qh[b, h], kind="stable")
            k_idx = np.argsort(kh[b, h], kind="stable")
            j_start, j_stop = hash_tile_ranges(
                qh[b, h][q_idx], q_idx, kh[b, h][k_idx], k_idx, blocks
            )

            def window(slots):
                blk = slots // blocks.B_m
                return j_start[blk] * blocks.B_n, j_stop[blk] * blocks.B_n

            r, cov = _coverage_one_head(qh[b, h], kh[b, h], window, exclude_self)
            required += r
            covered += cov
    return CoverageReport(required_pairs=required, covered_pairs=covered)


def chunked_forward_sorted(sb, chunk, scale=None, exclude_self=True, workers=None):
    """Two-chunk windowed attention over an already bucket-sorted batch.

    The query chunk at sorted rows [ci*c, (ci+1)*c) sees key rows of chunks
    ci-1 and ci, masked by bucket equality and causality; each window gets
    one exact softmax (stranded rows zero). Returns sorted-space outputs.
    """
    if isinstance(chunk, int):
        chunk = ChunkSpec(chunk)
    B, H, T, D = sb.q.shape
    if sb.k.shape[2] != T:
        raise ShapeError("chunked attention requires T_Q == T_KV")
    if scale is None:
        scale = default_scale(D)
    c = chunk.c
    out = np.empty_like(sb.q)

    def run(b, h):
        for lo in range(0, T, c):
            hi = min(lo + c, T)
            wlo = max(0, lo - c)
            s = scale * (sb.q[b, h, lo:hi] @ sb.k[b, h, wlo:hi].T)
            if exclude_self:
                allowed = sb.q_idx[b, h, lo:hi, None] > sb.k_idx[b, h, None, wlo:hi]
            else:
                allowed = sb.q_idx[b, h, lo:hi, None] >= sb.k_idx[b, h, None, wlo:hi]
            allowed &= sb.q_hash[b, h, lo:hi, None] == sb.k_hash[b, h, None, wlo:hi]
            s = np.where(allowed, s, -np.inf)
            m = s.max(axis=1, keepdims=True)
            p = np.exp(s - np.where(np.isneginf(m), 0.0, m))
            denom = p.sum(axis=1, keepdims=True)
            p /= np.where(denom == 0.0, 1.0, denom)
            out[b, h, lo:hi] = p @ sb.v[b, h, wlo:hi]

    map_heads(run, B, H, workers)
    return out


def reformer_attention(
    q, k, v, q_hash, k_hash, chunk,
    scale=None, exclude_self=True, workers=None,
):
    """Chunked bucketed attention in boundary layout (B, T, H, D).

    Exact softmax under the composite mask (two-chunk window AND same bucket
    AND causal); stranded rows yield zeros. Requires T_Q == T_KV (shared-QK
    setting); a ragged final chunk is allowed.
    """
    qh = to_heads(np.asarray(q_hash))
    kh = to_heads(np.asarray(k_hash))
    sb = sort_by_bucket(to_heads(q), to_heads(k), to_heads(v), qh, kh)
    out = chunked_forward_sorted(
        sb, chunk, scale=scale, exclude_self=exclude_self, workers=workers
    )
    return from_heads(hash_scatter(out, sb.q_idx))
