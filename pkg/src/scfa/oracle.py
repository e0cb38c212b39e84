"""Naive masked attention and finite-difference gradients.

This is the ground truth the tiled kernels are verified against. It is
deliberately direct (materializes the full score matrix) and makes no
performance effort.
"""

import numpy as np

from .errors import NumericError, ShapeError
from .tensors import default_scale


def build_mask(q_idx, k_idx, q_hash=None, k_hash=None, exclude_self=False):
    """Visibility mask from original-position indices and optional buckets.

    q_idx, k_idx: (B, H, T_Q) / (B, H, T_KV) integer positions.
    Allowed(i, j) = q_idx[i] >= k_idx[j] (strict > when exclude_self), and
    additionally q_hash[i] == k_hash[j] when hashes are given.
    Returns a boolean (B, H, T_Q, T_KV) array.
    """
    q_idx = np.asarray(q_idx)
    k_idx = np.asarray(k_idx)
    if q_idx.ndim != 3 or k_idx.ndim != 3 or q_idx.shape[:2] != k_idx.shape[:2]:
        raise ShapeError(
            f"index tensors must share (B, H): {q_idx.shape} vs {k_idx.shape}"
        )
    if exclude_self:
        mask = q_idx[:, :, :, None] > k_idx[:, :, None, :]
    else:
        mask = q_idx[:, :, :, None] >= k_idx[:, :, None, :]
    if (q_hash is None) != (k_hash is None):
        raise ShapeError("q_hash and k_hash must be supplied together")
    if q_hash is not None:
        q_hash = np.asarray(q_hash)
        k_hash = np.asarray(k_hash)
        if q_hash.shape != q_idx.shape or k_hash.shape != k_idx.shape:
            raise ShapeError("hash tensors must match the index tensors' shapes")
        mask &= q_hash[:, :, :, None] == k_hash[:, :, None, :]
    return mask


def causal_mask(B, H, T, exclude_self=False):
    """Plain causal (lower-triangular) mask for equal-length Q and K."""
    idx = np.broadcast_to(np.arange(T), (B, H, T))
    return build_mask(idx, idx, exclude_self=exclude_self)


def naive_attention(q, k, v, mask, scale=None):
    """softmax(scale * Q K^T) V with masked scores at -inf.

    Rows whose mask admits no key ("stranded" queries) return the all-zero
    vector rather than NaN, matching the tiled kernels.
    """
    if q.shape[:2] != k.shape[:2] or k.shape != v.shape or q.shape[3] != k.shape[3]:
        raise ShapeError(f"operand shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if mask.shape != (q.shape[0], q.shape[1], q.shape[2], k.shape[2]):
        raise ShapeError(f"mask shape {mask.shape} does not match operands")
    if scale is None:
        scale = default_scale(q.shape[3])
    s = scale * np.einsum("bhtd,bhsd->bhts", q, k)
    s = np.where(mask, s, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    m_hat = np.where(np.isneginf(m), 0.0, m)
    p = np.exp(s - m_hat)
    denom = p.sum(axis=-1, keepdims=True)
    p = p / np.where(denom == 0.0, 1.0, denom)
    return np.einsum("bhts,bhsd->bhtd", p, v).astype(q.dtype)


def attention_weights(q, k, mask, scale=None):
    """Normalized attention matrix of naive_attention (stranded rows zero)."""
    if scale is None:
        scale = default_scale(q.shape[3])
    s = scale * np.einsum("bhtd,bhsd->bhts", q, k)
    s = np.where(mask, s, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    m_hat = np.where(np.isneginf(m), 0.0, m)
    p = np.exp(s - m_hat)
    denom = p.sum(axis=-1, keepdims=True)
    return p / np.where(denom == 0.0, 1.0, denom)


def finite_diff_gradient(q, k, v, mask, d_out, eps=1e-4, scale=None):
    """Central-difference gradients of <attention(Q, K, V), dO>.

    Requires 64-bit operands and eps in [1e-6, 1e-3]; returns (dQ, dK, dV).
    """
    if any(t.dtype != np.float64 for t in (q, k, v, d_out)):
        raise NumericError("finite differences require float64 operands")
    if not 1e-6 <= eps <= 1e-3:
        raise NumericError(f"eps {eps} outside [1e-6, 1e-3]")

    def loss(qq, kk, vv):
        out = naive_attention(qq, kk, vv, mask, scale)
        val = float(np.sum(out * d_out))
        if not np.isfinite(val):
            raise NumericError("non-finite loss in finite differences")
        return val

    grads = []
    for which in range(3):
        operands = [q.copy(), k.copy(), v.copy()]
        grad = np.zeros_like(operands[which])
        flat = operands[which].reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss(*operands)
            flat[i] = orig - eps
            minus = loss(*operands)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * eps)
        grads.append(grad)
    return tuple(grads)


def max_rel_err(actual, expected):
    """max |a - e| normalized by the magnitude of the expected tensor.

    Uses a global (inf-norm) normalizer so exact zeros and cancellation do
    not inflate the metric; identical tensors score 0.
    """
    diff = float(np.max(np.abs(np.asarray(actual) - np.asarray(expected))))
    denom = float(np.max(np.abs(expected)))
    if denom == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return diff / denom
