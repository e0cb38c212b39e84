"""Benchmark and verification command line.

    scfa verify   --method qk --seq-len 256 --keep-prob 0.5 --precision 64
    scfa bench    --method hash --seq-len 1024,4096 --nbuckets 16 --out out.csv
    scfa coverage --method reformer --seq-len 4096 --chunk 64 --reps 20 --out cov.csv

Exit codes: 0 all checks passed, 1 a check failed, 2 usage error.
Timing rows exclude tensor generation but include the pre/post-processing
reshapes; the first repetition warms caches and is discarded. SCFA_WORKERS
sets the worker count for the (b, h)-parallel loops.
"""

import argparse
import csv
import statistics
import sys
import time
from typing import NamedTuple

import numpy as np

from . import dense, hash_sparse, qk_sparse, reformer
from .errors import ParameterError, ScfaError
from .oracle import (
    attention_weights,
    build_mask,
    causal_mask,
    finite_diff_gradient,
    max_rel_err,
    naive_attention,
)
from .qk_sparse import qk_tile_schedule
from .softmax import init_state, update_stats
from .tensors import (
    BlockSpec,
    dtype_for,
    from_heads,
    random_tensor,
    to_heads,
    worker_count,
)

CSV_HEADER = [
    "method", "B", "H", "T", "D", "block_m", "block_n", "nb", "keep_prob",
    "chunk", "seed", "precision", "pre_ms", "fwd_ms", "bwd_ms", "post_ms",
    "tiles", "max_rel_err", "coverage",
]

METHODS = ("dense", "naive", "qk", "hash", "reformer")
MAX_SEQ_LEN = 16384
FWD_TOL = {32: 1e-5, 64: 1e-12}
GRAD_TOL = 1e-6


class Check(NamedTuple):
    name: str
    passed: bool
    measured: str
    tol: str


def _build_parser():
    parser = argparse.ArgumentParser(prog="scfa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command in ("verify", "bench", "coverage"):
        sp = sub.add_parser(command)
        sp.add_argument("--method", required=True, choices=METHODS)
        sp.add_argument("--batch", type=int, default=4)
        sp.add_argument("--heads", type=int, default=48)
        sp.add_argument("--seq-len", default="1024",
                        help="sequence length, or comma-separated list")
        sp.add_argument("--dim", type=int, default=64)
        sp.add_argument("--block-m", type=int, default=64)
        sp.add_argument("--block-n", type=int, default=64)
        sp.add_argument("--nbuckets", type=int, default=None)
        sp.add_argument("--keep-prob", type=float, default=0.5,
                        help="probability of dropping each (position, head)")
        sp.add_argument("--chunk", type=int, default=64)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--precision", type=int, choices=(32, 64), default=None,
                        help="default 64 for verify, 32 for bench")
        sp.add_argument("--reps", type=int, default=3)
        sp.add_argument("--exclude-self", choices=("on", "off"), default="on")
        sp.add_argument("--out", default="-")
    return parser


class Config(NamedTuple):
    command: str
    method: str
    B: int
    H: int
    seq_lens: tuple
    D: int
    blocks: BlockSpec
    nb: int
    keep_prob: float
    chunk: int
    seed: int
    precision: int
    reps: int
    exclude_self: bool
    out: str


def _validate(args):
    seq_lens = tuple(int(t) for t in str(args.seq_len).split(","))
    for t in seq_lens:
        if not 1 <= t <= MAX_SEQ_LEN:
            raise ParameterError(f"--seq-len entries must be in [1, {MAX_SEQ_LEN}], got {t}")
    for name in ("batch", "heads", "dim", "block_m", "block_n", "chunk"):
        if getattr(args, name) < 1:
            raise ParameterError(f"--{name.replace('_', '-')} must be >= 1")
    if args.reps < 1:
        raise ParameterError("--reps must be >= 1")
    if not 0.0 <= args.keep_prob <= 1.0:
        raise ParameterError("--keep-prob must be in [0, 1]")
    nb = args.nbuckets
    if args.method == "hash":
        if nb is None:
            nb = 16
        if nb % 2 != 0 or nb < 2:
            raise ParameterError(
                "--nbuckets must be even and >= 2 for hash: the paired-projection "
                "code [xR, -xR] assigns buckets in +/- pairs"
            )
    if args.method == "reformer" and nb is not None and nb < 1:
        raise ParameterError("--nbuckets must be >= 1")
    if args.command == "coverage" and args.method not in ("hash", "reformer"):
        raise ParameterError("coverage requires --method hash or reformer")
    precision = args.precision
    if precision is None:
        precision = 64 if args.command == "verify" else 32
    return Config(
        command=args.command, method=args.method, B=args.batch, H=args.heads,
        seq_lens=seq_lens, D=args.dim,
        blocks=BlockSpec(args.block_m, args.block_n),
        nb=nb, keep_prob=args.keep_prob, chunk=args.chunk, seed=args.seed,
        precision=precision, reps=args.reps,
        exclude_self=args.exclude_self == "on", out=args.out,
    )


def _timed(fn):
    t0 = time.perf_counter()
    result = fn()
    return (time.perf_counter() - t0) * 1e3, result


def _finite(*arrays):
    return all(np.isfinite(a).all() for a in arrays)


# ---------------------------------------------------------------- verify


def _grad_check(make_instance):
    """Analytic kernel backward vs central differences on a small instance."""
    (q, k, v, mask, run_fwd_bwd) = make_instance()
    d_out = random_tensor(q.shape, seed=104729)
    dq, dk, dv = run_fwd_bwd(d_out)
    fq, fk, fv = finite_diff_gradient(q, k, v, mask, d_out)
    return max(max_rel_err(dq, fq), max_rel_err(dk, fk), max_rel_err(dv, fv))


def _verify_dense(cfg, T):
    checks = []
    dtype = dtype_for(cfg.precision)
    shape = (cfg.B, cfg.H, T, cfg.D)
    q = random_tensor(shape, cfg.seed, dtype=dtype)
    k = random_tensor(shape, cfg.seed + 1, dtype=dtype)
    v = random_tensor(shape, cfg.seed + 2, dtype=dtype)
    out = dense.flash_forward(q, k, v, cfg.blocks)
    ref = naive_attention(q, k, v, causal_mask(cfg.B, cfg.H, T))
    err = max_rel_err(out.O, ref)
    tol = FWD_TOL[cfg.precision]
    checks.append(Check("oracle-equivalence", err < tol, f"{err:.3e}", f"{tol:.0e}"))

    d_out = random_tensor(shape, cfg.seed + 3, dtype=dtype)
    grads = dense.flash_backward(q, k, v, out, d_out, cfg.blocks)
    ok = _finite(out.O, out.L, *grads) and not np.isnan(out.M).any()
    checks.append(Check("nan-safety", ok, "finite" if ok else "non-finite", "finite"))

    tiles_ok = out.tiles_computed == cfg.B * cfg.H * dense.dense_tile_count(T, cfg.blocks)
    checks.append(Check("schedule-consistency", tiles_ok, str(out.tiles_computed), "exact"))

    def instance():
        Tg, Dg = min(T, 24), min(cfg.D, 8)
        qg = random_tensor((1, 2, Tg, Dg), cfg.seed + 10)
        kg = random_tensor((1, 2, Tg, Dg), cfg.seed + 11)
        vg = random_tensor((1, 2, Tg, Dg), cfg.seed + 12)
        blocks = BlockSpec(8, 8)
        fwd = dense.flash_forward(qg, kg, vg, blocks)

        def run(d_out):
            return dense.flash_backward(qg, kg, vg, fwd, d_out, blocks)

        return qg, kg, vg, causal_mask(1, 2, Tg), run

    gerr = _grad_check(instance)
    checks.append(Check("gradient-fd", gerr < GRAD_TOL, f"{gerr:.3e}", f"{GRAD_TOL:.0e}"))
    return checks


def _verify_naive(cfg, T):
    checks = []
    dtype = dtype_for(cfg.precision)
    shape = (cfg.B, cfg.H, T, cfg.D)
    q = random_tensor(shape, cfg.seed, dtype=dtype)
    k = random_tensor(shape, cfg.seed + 1, dtype=dtype)
    v = random_tensor(shape, cfg.seed + 2, dtype=dtype)
    mask = causal_mask(cfg.B, cfg.H, T)
    mask[:, :, 0, :] = False  # force one stranded row per head
    w = attention_weights(q, k, mask, scale=None)
    sums = w.sum(axis=-1)
    non_stranded = mask.any(axis=-1)
    tol = 1e-12 if cfg.precision == 64 else 1e-5
    err = float(np.abs(sums[non_stranded] - 1.0).max())
    checks.append(Check("row-normalization", err < tol, f"{err:.3e}", f"{tol:.0e}"))

    out = naive_attention(q, k, v, mask)
    stranded_zero = np.all(out[~non_stranded] == 0.0) and _finite(out)
    checks.append(Check("stranded-zeros", stranded_zero, "zero rows", "exact"))

    s = random_tensor((1, 1, 6, 11), cfg.seed + 4)[0, 0]
    vv = random_tensor((1, 1, 11, 3), cfg.seed + 5)[0, 0]
    a = update_stats(init_state(6, 3), s, vv).o
    b = update_stats(init_state(6, 3), s + 7.5, vv).o
    serr = max_rel_err(a, b)
    checks.append(Check("shift-invariance", serr < 1e-12, f"{serr:.3e}", "1e-12"))
    return checks


def _verify_qk(cfg, T):
    checks = []
    dtype = dtype_for(cfg.precision)
    shape = (cfg.B, cfg.H, T, cfg.D)
    q = random_tensor(shape, cfg.seed, dtype=dtype)
    k = random_tensor(shape, cfg.seed + 1, dtype=dtype)
    v = random_tensor(shape, cfg.seed + 2, dtype=dtype)
    qb, kb, vb = from_heads(q), from_heads(k), from_heads(v)
    keep_q = qk_sparse.random_keep(cfg.B, T, cfg.H, cfg.keep_prob, cfg.seed + 6)
    keep_k = qk_sparse.random_keep(cfg.B, T, cfg.H, cfg.keep_prob, cfg.seed + 7)
    keep_q[:, :, 0] = 0.0  # one fully dropped head exercises stranded paths

    o = qk_sparse.qk_sparse_attention(qb, kb, vb, keep_q, keep_k, blocks=cfg.blocks)
    mask = causal_mask(cfg.B, cfg.H, T)
    mask &= to_heads(keep_q.astype(bool))[:, :, :, None]
    mask &= to_heads(keep_k.astype(bool))[:, :, None, :]
    ref = naive_attention(q, k, v, mask)
    err = max_rel_err(to_heads(o), ref)
    tol = FWD_TOL[cfg.precision]
    checks.append(Check("oracle-equivalence", err < tol, f"{err:.3e}", f"{tol:.0e}"))

    dropped_zero = np.all(o[keep_q == 0.0] == 0.0)
    checks.append(Check("stranded-zeros", dropped_zero, "zero rows", "exact"))

    prep = qk_sparse.qk_preprocess(qb, kb, vb, keep_q, keep_k)
    outs = qk_sparse.qk_forward_kernel(
        prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx, blocks=cfg.blocks
    )
    d_out = random_tensor(prep.q_c.shape, cfg.seed + 3, dtype=dtype) if prep.q_c.size \
        else np.zeros_like(prep.q_c)
    grads = qk_sparse.qk_backward_kernel(
        prep.q_c, prep.k_c, prep.v_c, outs, d_out, prep.q_idx, prep.k_idx,
        blocks=cfg.blocks,
    )
    ok = _finite(o, outs.O, outs.L, *grads) and not np.isnan(outs.M).any()
    checks.append(Check("nan-safety", ok, "finite" if ok else "non-finite", "finite"))

    expected = sum(
        int(qk_tile_schedule(prep.q_idx[b, h], prep.k_idx[b, h], cfg.blocks).sum())
        for b in range(cfg.B) for h in range(cfg.H)
    )
    checks.append(Check("schedule-consistency", outs.tiles_computed == expected,
                        str(outs.tiles_computed), str(expected)))

    def instance():
        Tg, Dg = min(T, 24), min(cfg.D, 8)
        qg = random_tensor((1, 2, Tg, Dg), cfg.seed + 10)
        kg = random_tensor((1, 2, Tg, Dg), cfg.seed + 11)
        vg = random_tensor((1, 2, Tg, Dg), cfg.seed + 12)
        kq = qk_sparse.random_keep(1, Tg, 2, 0.3, cfg.seed + 13)
        kk = qk_sparse.random_keep(1, Tg, 2, 0.3, cfg.seed + 14)
        blocks = BlockSpec(8, 8)
        p = qk_sparse.qk_preprocess(from_heads(qg), from_heads(kg), from_heads(vg), kq, kk)
        fwd = qk_sparse.qk_forward_kernel(p.q_c, p.k_c, p.v_c, p.q_idx, p.k_idx, blocks=blocks)

        def run(d_out):
            return qk_sparse.qk_backward_kernel(
                p.q_c, p.k_c, p.v_c, fwd, d_out, p.q_idx, p.k_idx, blocks=blocks
            )

        return p.q_c, p.k_c, p.v_c, build_mask(p.q_idx, p.k_idx), run

    gerr = _grad_check(instance)
    checks.append(Check("gradient-fd", gerr < GRAD_TOL, f"{gerr:.3e}", f"{GRAD_TOL:.0e}"))
    return checks


def _verify_hash(cfg, T):
    checks = []
    dtype = dtype_for(cfg.precision)
    shape = (cfg.B, cfg.H, T, cfg.D)
    q = random_tensor(shape, cfg.seed, dtype=dtype)
    k = hash_sparse.normalize_keys(q)  # shared-QK convention
    v = random_tensor(shape, cfg.seed + 2, dtype=dtype)
    qb, kb, vb = from_heads(q), from_heads(k), from_heads(v)
    buckets = hash_sparse.lsh_buckets(kb, cfg.nb, cfg.seed + 5)

    o = hash_sparse.hash_sparse_attention(
        qb, kb, vb, buckets, buckets, blocks=cfg.blocks, exclude_self=cfg.exclude_self
    )
    idx = np.broadcast_to(np.arange(T), (cfg.B, cfg.H, T))
    bh = to_heads(buckets)
    mask = build_mask(idx, idx, bh, bh, exclude_self=cfg.exclude_self)
    ref = naive_attention(q, k, v, mask)
    err = max_rel_err(to_heads(o), ref)
    tol = FWD_TOL[cfg.precision]
    checks.append(Check("oracle-equivalence", err < tol, f"{err:.3e}", f"{tol:.0e}"))

    sb = hash_sparse.sort_by_bucket(q, k, v, bh, bh)
    outs = hash_sparse.hash_forward_kernel(sb, blocks=cfg.blocks, exclude_self=cfg.exclude_self)
    d_out = random_tensor(shape, cfg.seed + 3, dtype=dtype)
    grads = hash_sparse.hash_backward_kernel(
        sb, outs, d_out, blocks=cfg.blocks, exclude_self=cfg.exclude_self
    )
    ok = _finite(o, outs.O, outs.L, *grads) and not np.isnan(outs.M).any()
    checks.append(Check("nan-safety", ok, "finite" if ok else "non-finite", "finite"))

    cov = reformer.hash_schedule_coverage(
        buckets, buckets, cfg.blocks, exclude_self=cfg.exclude_self
    )
    checks.append(Check("collision-coverage", cov.coverage == 1.0,
                        f"{cov.coverage:.6f}", "1.0"))

    def instance():
        Tg, Dg = min(T, 24), min(cfg.D, 8)
        qg = random_tensor((1, 2, Tg, Dg), cfg.seed + 10)
        kg = random_tensor((1, 2, Tg, Dg), cfg.seed + 11)
        vg = random_tensor((1, 2, Tg, Dg), cfg.seed + 12)
        bg = hash_sparse.random_buckets(1, Tg, 2, 4, cfg.seed + 13)
        blocks = BlockSpec(8, 8)
        s = hash_sparse.sort_by_bucket(qg, kg, vg, to_heads(bg), to_heads(bg))
        fwd = hash_sparse.hash_forward_kernel(s, blocks=blocks, exclude_self=cfg.exclude_self)

        def run(d_out):
            return hash_sparse.hash_backward_kernel(
                s, fwd, d_out, blocks=blocks, exclude_self=cfg.exclude_self
            )

        m = build_mask(s.q_idx, s.k_idx, s.q_hash, s.k_hash, exclude_self=cfg.exclude_self)
        return s.q, s.k, s.v, m, run

    gerr = _grad_check(instance)
    checks.append(Check("gradient-fd", gerr < GRAD_TOL, f"{gerr:.3e}", f"{GRAD_TOL:.0e}"))
    return checks


def _verify_reformer(cfg, T):
    checks = []
    dtype = dtype_for(cfg.precision)
    nb = cfg.nb if cfg.nb is not None else reformer.equalized_buckets(T, cfg.chunk)
    shape = (cfg.B, cfg.H, T, cfg.D)
    q = random_tensor(shape, cfg.seed, dtype=dtype)
    k = random_tensor(shape, cfg.seed + 1, dtype=dtype)
    v = random_tensor(shape, cfg.seed + 2, dtype=dtype)
    qb, kb, vb = from_heads(q), from_heads(k), from_heads(v)
    buckets = hash_sparse.random_buckets(cfg.B, T, cfg.H, nb, cfg.seed + 5)

    o = reformer.reformer_attention(
        qb, kb, vb, buckets, buckets, cfg.chunk, exclude_self=cfg.exclude_self
    )
    bh = to_heads(buckets)
    sb = hash_sparse.sort_by_bucket(q, k, v, bh, bh)
    slots = np.arange(T)
    base = slots // cfg.chunk
    window = (slots[None, :] // cfg.chunk >= base[:, None] - 1) & (
        slots[None, :] // cfg.chunk <= base[:, None]
    )
    mask = build_mask(sb.q_idx, sb.k_idx, sb.q_hash, sb.k_hash,
                      exclude_self=cfg.exclude_self)
    mask &= window[None, None]
    ref_sorted = naive_attention(sb.q, sb.k, sb.v, mask)
    ref = from_heads(hash_sparse.hash_scatter(ref_sorted, sb.q_idx))
    err = max_rel_err(o, ref)
    tol = FWD_TOL[cfg.precision]
    checks.append(Check("oracle-equivalence", err < tol, f"{err:.3e}", f"{tol:.0e}"))

    checks.append(Check("nan-safety", _finite(o), "finite", "finite"))

    cov = reformer.lsh_coverage(buckets, buckets, cfg.chunk, exclude_self=cfg.exclude_self)
    in_range = 0.0 <= cov.coverage <= 1.0 and cov.covered_pairs <= cov.required_pairs
    checks.append(Check("coverage-range", in_range, f"{cov.coverage:.6f}", "[0, 1]"))

    full = reformer.lsh_coverage(buckets, buckets, T, exclude_self=cfg.exclude_self)
    checks.append(Check("coverage-full-chunk", full.coverage == 1.0,
                        f"{full.coverage:.6f}", "1.0"))
    return checks


def run_verify(cfg):
    suites = {
        "dense": _verify_dense,
        "naive": _verify_naive,
        "qk": _verify_qk,
        "hash": _verify_hash,
        "reformer": _verify_reformer,
    }
    print(f"scfa verify: method={cfg.method} B={cfg.B} H={cfg.H} D={cfg.D} "
          f"precision={cfg.precision} seed={cfg.seed} workers={worker_count()}")
    if cfg.method == "hash":
        print(f"hashing: paired-projection argmax[xR,-xR], one projection per "
              f"(batch, head) stream, nb={cfg.nb}, shared-QK normalized keys")
    failed = 0
    for T in cfg.seq_lens:
        for check in suites[cfg.method](cfg, T):
            status = "PASS" if check.passed else "FAIL"
            failed += not check.passed
            print(f"{status}  T={T:<6d} {check.name:<22s} measured={check.measured}  "
                  f"tol={check.tol}")
    if failed:
        print(f"FAILED: {failed} check(s) failed")
        return 1
    print("OK: all checks passed")
    return 0


# ----------------------------------------------------------------- bench


def _bench_stages(cfg, T):
    """Return a callable running one timed repetition of the staged pipeline."""
    dtype = dtype_for(cfg.precision)
    shape = (cfg.B, cfg.H, T, cfg.D)
    qb = from_heads(random_tensor(shape, cfg.seed, dtype=dtype))
    kb = from_heads(random_tensor(shape, cfg.seed + 1, dtype=dtype))
    vb = from_heads(random_tensor(shape, cfg.seed + 2, dtype=dtype))
    blocks = cfg.blocks

    if cfg.method == "dense":
        d_out = random_tensor(shape, cfg.seed + 3, dtype=dtype)

        def rep():
            pre, (q, k, v) = _timed(lambda: (to_heads(qb), to_heads(kb), to_heads(vb)))
            fwd, outs = _timed(lambda: dense.flash_forward(q, k, v, blocks))
            bwd, _ = _timed(lambda: dense.flash_backward(q, k, v, outs, d_out, blocks))
            post, _ = _timed(lambda: from_heads(outs.O))
            return pre, fwd, bwd, post, outs.tiles_computed

    elif cfg.method == "naive":

        def rep():
            pre, (q, k, v, mask) = _timed(
                lambda: (to_heads(qb), to_heads(kb), to_heads(vb),
                         causal_mask(cfg.B, cfg.H, T))
            )
            fwd, out = _timed(lambda: naive_attention(q, k, v, mask))
            post, _ = _timed(lambda: from_heads(out))
            return pre, fwd, None, post, None

    elif cfg.method == "qk":
        keep_q = qk_sparse.random_keep(cfg.B, T, cfg.H, cfg.keep_prob, cfg.seed + 6)
        keep_k = qk_sparse.random_keep(cfg.B, T, cfg.H, cfg.keep_prob, cfg.seed + 7)
        probe = qk_sparse.qk_preprocess(qb, kb, vb, keep_q, keep_k)
        d_out = (random_tensor(probe.q_c.shape, cfg.seed + 3, dtype=dtype)
                 if probe.q_c.size else np.zeros_like(probe.q_c))

        def rep():
            pre, prep = _timed(lambda: qk_sparse.qk_preprocess(qb, kb, vb, keep_q, keep_k))
            fwd, outs = _timed(lambda: qk_sparse.qk_forward_kernel(
                prep.q_c, prep.k_c, prep.v_c, prep.q_idx, prep.k_idx, blocks=blocks))
            bwd, _ = _timed(lambda: qk_sparse.qk_backward_kernel(
                prep.q_c, prep.k_c, prep.v_c, outs, d_out, prep.q_idx, prep.k_idx,
                blocks=blocks))
            post, _ = _timed(lambda: qk_sparse.qk_postprocess(
                outs.O, prep.scatter_index, prep.T_Q))
            return pre, fwd, bwd, post, outs.tiles_computed

    elif cfg.method == "hash":
        buckets = hash_sparse.random_buckets(cfg.B, T, cfg.H, cfg.nb, cfg.seed + 5)
        d_out = random_tensor(shape, cfg.seed + 3, dtype=dtype)

        def rep():
            pre, sb = _timed(lambda: hash_sparse.sort_by_bucket(
                to_heads(qb), to_heads(kb), to_heads(vb),
                to_heads(buckets), to_heads(buckets)))
            fwd, outs = _timed(lambda: hash_sparse.hash_forward_kernel(
                sb, blocks=blocks, exclude_self=cfg.exclude_self))
            bwd, _ = _timed(lambda: hash_sparse.hash_backward_kernel(
                sb, outs, d_out, blocks=blocks, exclude_self=cfg.exclude_self))
            post, _ = _timed(lambda: from_heads(hash_sparse.hash_scatter(outs.O, sb.q_idx)))
            return pre, fwd, bwd, post, outs.tiles_computed

    else:  # reformer
        nb = cfg.nb if cfg.nb is not None else reformer.equalized_buckets(T, cfg.chunk)
        buckets = hash_sparse.random_buckets(cfg.B, T, cfg.H, nb, cfg.seed + 5)

        def rep():
            pre, sb = _timed(lambda: hash_sparse.sort_by_bucket(
                to_heads(qb), to_heads(kb), to_heads(vb),
                to_heads(buckets), to_heads(buckets)))
            fwd, out = _timed(lambda: reformer.chunked_forward_sorted(
                sb, cfg.chunk, exclude_self=cfg.exclude_self))
            post, _ = _timed(lambda: from_heads(hash_sparse.hash_scatter(out, sb.q_idx)))
            return pre, fwd, None, post, None

    return rep


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def run_bench(cfg, writer):
    for T in cfg.seq_lens:
        if cfg.method == "hash":
            nb = cfg.nb
        elif cfg.method == "reformer":
            nb = cfg.nb if cfg.nb is not None else reformer.equalized_buckets(T, cfg.chunk)
        else:
            nb = None
        rep = _bench_stages(cfg, T)
        rep()  # warm-up repetition, discarded
        samples = [rep() for _ in range(cfg.reps)]
        med = [
            statistics.median(s[i] for s in samples) if samples[0][i] is not None else None
            for i in range(4)
        ]
        tiles = samples[0][4]
        writer.writerow([
            cfg.method, cfg.B, cfg.H, T, cfg.D, cfg.blocks.B_m, cfg.blocks.B_n,
            _fmt(nb),
            _fmt(cfg.keep_prob if cfg.method == "qk" else None),
            _fmt(cfg.chunk if cfg.method == "reformer" else None),
            cfg.seed, cfg.precision,
            _fmt(med[0]), _fmt(med[1]), _fmt(med[2]), _fmt(med[3]),
            _fmt(tiles), "", "",
        ])
    return 0


# -------------------------------------------------------------- coverage


def run_coverage(cfg, writer):
    for T in cfg.seq_lens:
        for r in range(cfg.reps):
            seed = cfg.seed + r
            if cfg.method == "hash":
                nb = cfg.nb
                buckets = hash_sparse.random_buckets(cfg.B, T, cfg.H, nb, seed)
                report = reformer.hash_schedule_coverage(
                    buckets, buckets, cfg.blocks, exclude_self=cfg.exclude_self
                )
                chunk = None
            else:
                nb = cfg.nb if cfg.nb is not None else reformer.equalized_buckets(T, cfg.chunk)
                buckets = hash_sparse.random_buckets(cfg.B, T, cfg.H, nb, seed)
                report = reformer.lsh_coverage(
                    buckets, buckets, cfg.chunk, exclude_self=cfg.exclude_self
                )
                chunk = cfg.chunk
            writer.writerow([
                cfg.method, cfg.B, cfg.H, T, cfg.D, cfg.blocks.B_m, cfg.blocks.B_n,
                nb, "", _fmt(chunk), seed, "", "", "", "", "", "",
                "", f"{report.coverage:.6f}",
            ])
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _validate(args)
    except ScfaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if cfg.command == "verify":
            return run_verify(cfg)
        if cfg.out == "-":
            writer = csv.writer(sys.stdout)
            writer.writerow(CSV_HEADER)
            runner = run_bench if cfg.command == "bench" else run_coverage
            return runner(cfg, writer)
        try:
            handle = open(cfg.out, "w", newline="")
        except OSError as exc:
            print(f"error: cannot write {cfg.out}: {exc}", file=sys.stderr)
            return 2
        with handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_HEADER)
            runner = run_bench if cfg.command == "bench" else run_coverage
            return runner(cfg, writer)
    except ScfaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
