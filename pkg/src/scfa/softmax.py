"""Streaming softmax statistics over key blocks.

The accumulator keeps, per query row, the running max m, the running
denominator l, and the running *normalized* output o. Two substitutions
keep every field NaN-free when rows are fully masked: a -inf running max
is treated as 0 when exponentiating, and an infinite reciprocal of the
denominator is treated as 1. Rows that never see an unmasked key therefore
finish with o exactly zero.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class SoftmaxState:
    m: np.ndarray  # (B_m,) running max, starts at -inf
    l: np.ndarray  # (B_m,) running denominator, starts at 0
    o: np.ndarray  # (B_m, D) running normalized output, starts at 0


def init_state(B_m, D, dtype=np.float64):
    if B_m < 1 or D < 1:
        raise ShapeError(f"state extents must be >= 1, got ({B_m}, {D})")
    return SoftmaxState(
        m=np.full(B_m, -np.inf, dtype=dtype),
        l=np.zeros(B_m, dtype=dtype),
        o=np.zeros((B_m, D), dtype=dtype),
    )


def update_stats(state, qk, v):
    """Fold one masked logit tile (B_m, B_n) and value block (B_n, D) into state.

    Masked entries must be exactly -inf; everything else finite (caller's
    precondition, not re-validated per tile). The state is updated in place
    and returned. The old denominator is first rebased to the new max
    (e^(m - m_hat) * l, with e^(-inf - 0) = 0), then the running output is
    rescaled by old/new denominator before the new block's contribution is
    added. Non-finite accumulators (overflow, or a precondition violation
    that produced NaN) raise NumericError.
    """
    m_new = np.maximum(qk.max(axis=1), state.m)
    m_hat = np.where(np.isneginf(m_new), 0.0, m_new)
    p = qk - m_hat[:, None]
    np.exp(p, out=p)
    l2 = p.sum(axis=1)
    l_old = np.exp(state.m - m_hat)
    l_old *= state.l
    l_new = l_old + l2
    with np.errstate(divide="ignore"):
        z = 1.0 / l_new
    z[np.isinf(z)] = 1.0
    l_old *= z
    state.o *= l_old[:, None]
    p *= z[:, None]
    state.o += p @ v
    state.m = m_new
    state.l = l_new
    if not np.isfinite(state.o).all():
        raise NumericError("softmax accumulator overflowed")
    return state
