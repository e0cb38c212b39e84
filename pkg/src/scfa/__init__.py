"""Exact CPU tiled causal attention with dynamic sparsity.

Three kernels share one tile loop: a dense causal baseline, a QK-sparse
kernel over compacted operands, and a hash-sparse kernel over bucket-sorted
operands. A naive masked-attention oracle, finite-difference gradients, a
chunked bucketed baseline, and a coverage metric support verification; the
`scfa` CLI drives benchmarks and checks.
"""

from ._kernel import FlashOutputs, hash_tile_ranges
from .dense import dense_tile_count, flash_backward, flash_forward
from .errors import (
    ContractError,
    FormatError,
    NumericError,
    ParameterError,
    ScfaError,
    ShapeError,
)
from .hash_sparse import (
    SortedBatch,
    hash_backward_kernel,
    hash_forward_kernel,
    hash_scatter,
    hash_sparse_attention,
    lsh_buckets,
    normalize_keys,
    random_buckets,
    sort_by_bucket,
)
from .oracle import (
    attention_weights,
    build_mask,
    causal_mask,
    finite_diff_gradient,
    max_rel_err,
    naive_attention,
)
from .qk_sparse import (
    CompactResult,
    compact,
    pad_index,
    qk_backward_kernel,
    qk_forward_kernel,
    qk_postprocess,
    qk_preprocess,
    qk_sparse_attention,
    qk_tile_schedule,
    random_keep,
)
from .reformer import (
    ChunkSpec,
    CoverageReport,
    chunked_forward_sorted,
    equalized_buckets,
    hash_schedule_coverage,
    lsh_coverage,
    reformer_attention,
)
from .softmax import SoftmaxState, init_state, update_stats
from .tensors import (
    KEY_PAD,
    QUERY_PAD,
    BlockSpec,
    default_scale,
    dtype_for,
    from_heads,
    load_tensor,
    random_tensor,
    save_tensor,
    to_heads,
    worker_count,
)


def dynamic_sparse_attention(q, k, v, q_idx, k_idx, sm_scale=None, sparsity_mode="hash"):
    """Single entry point routing to the hash- or QK-sparse implementation.

    q: (B, T_Q, H, D); k, v: (B, T_KV, H, D). q_idx / k_idx carry, per
    (batch, position, head), either the bucket id (sparsity_mode == "hash")
    or the keep indicator (sparsity_mode == "qk"). sm_scale defaults to
    1/sqrt(D).
    """
    if sparsity_mode == "hash":
        return hash_sparse_attention(q, k, v, q_hash=q_idx, k_hash=k_idx, scale=sm_scale)
    if sparsity_mode == "qk":
        return qk_sparse_attention(q, k, v, q_keep=q_idx, k_keep=k_idx, scale=sm_scale)
    raise ParameterError(
        f"unknown sparsity_mode: {sparsity_mode!r}, should be in ['hash', 'qk']"
    )
