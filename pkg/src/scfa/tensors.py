"""Dense 4-D tensor helpers: shapes, deterministic RNG streams, file I/O.

Tensors are plain C-contiguous numpy arrays of shape (B, H, T, D) in the
engine ("head-major") layout, so index (b, h, t, d) lives at buffer offset
((b*H + h)*T + t)*D + d. End-to-end attention entry points accept the
(B, T, H, D) boundary layout and transpose internally; that transposition
counts as pre-processing in benchmarks.
"""

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

MAGIC = b"SCFA"
VERSION = 1

# Padded key slots carry this sentinel; real key indices must stay below it.
KEY_PAD = 10**9
QUERY_PAD = -1

_MASK64 = (1 << 64) - 1

# Stream domains keep the per-purpose Philox keys disjoint.
DOMAIN_VALUES = 0
DOMAIN_PROJECTIONS = 1
DOMAIN_KEEP = 2
DOMAIN_BUCKETS = 3


def dtype_for(precision):
    """Map a precision in bits (32 or 64) to the numpy dtype."""
    if precision == 32:
        return np.float32
    if precision == 64:
        return np.float64
    raise ParameterError(f"precision must be 32 or 64, got {precision}")


def check_extents(shape):
    if len(shape) != 4:
        raise ShapeError(f"expected 4 extents (B, H, T, D), got {shape}")
    if any(int(e) < 1 for e in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return tuple(int(e) for e in shape)


def check_tensor4(x, name="tensor"):
    """Validate the engine-layout contract: 4-D, float, finite, C-contiguous."""
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (B, H, T, D), got ndim={x.ndim}")
    if x.dtype not in (np.float32, np.float64):
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    if not np.isfinite(x).all():
        raise ShapeError(f"{name} contains non-finite values")
    return np.ascontiguousarray(x)


@dataclass(frozen=True)
class BlockSpec:
    """Tile geometry: B_m query rows by B_n key columns."""

    B_m: int = 64
    B_n: int = 64

    def __post_init__(self):
        if self.B_m < 1 or self.B_n < 1:
            raise ShapeError(f"block sizes must be >= 1, got {self.B_m}, {self.B_n}")

    def query_blocks(self, T_Q):
        return -(-T_Q // self.B_m)

    def key_blocks(self, T_KV):
        return -(-T_KV // self.B_n)


def default_scale(D):
    """Softmax scaling constant, 1/sqrt(D) unless the caller overrides it."""
    return 1.0 / np.sqrt(D)


def stream(seed, domain, index=0):
    """Counter-based generator for one (seed, domain, index) triple.

    Streams are independent of each other and of creation order, so
    per-(b, h) generation parallelizes without changing results.
    """
    key = ((seed & _MASK64) << 64) | ((domain & 0xFF) << 56) | (index & ((1 << 56) - 1))
    return np.random.Generator(np.random.Philox(key=key))


def random_tensor(shape, seed, mean=0.0, std=1.0, dtype=np.float64):
    """Draw a (B, H, T, D) normal tensor, one Philox stream per (b, h) slice."""
    B, H, T, D = check_extents(shape)
    out = np.empty((B, H, T, D), dtype=dtype)
    for b in range(B):
        for h in range(H):
            g = stream(seed, DOMAIN_VALUES, b * H + h)
            out[b, h] = g.standard_normal((T, D), dtype=dtype)
    if mean != 0.0 or std != 1.0:
        out *= std
        out += mean
    return out


def save_tensor(path, x):
    """Write a tensor in the binary container format (see module docstring).

    Layout: magic "SCFA", u32 version, u8 bytes-per-element (4 or 8),
    four u64 extents (B, H, T, D), then raw little-endian IEEE-754 values
    in (B, H, T, D) row-major order.
    """
    x = check_tensor4(x)
    B, H, T, D = x.shape
    itemsize = x.dtype.itemsize
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<B", itemsize))
        f.write(struct.pack("<4Q", B, H, T, D))
        f.write(np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes())


def load_tensor(path):
    """Read a tensor written by save_tensor; raises FormatError on any defect."""
    with open(path, "rb") as f:
        raw = f.read()
    header = struct.calcsize("<4sIB4Q")
    if len(raw) < header:
        raise FormatError("file truncated inside header", len(raw))
    magic, version, itemsize, B, H, T, D = struct.unpack_from("<4sIB4Q", raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if itemsize not in (4, 8):
        raise FormatError(f"bad precision byte {itemsize}", 8)
    for i, e in enumerate((B, H, T, D)):
        if e < 1:
            raise FormatError(f"extent {i} is {e}", 9 + 8 * i)
    count = B * H * T * D
    expected = header + count * itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload has {len(raw) - header} bytes, expected {count * itemsize}",
            min(len(raw), expected),
        )
    dtype = np.dtype("<f4" if itemsize == 4 else "<f8")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header)
    return data.reshape(B, H, T, D).astype(dtype.newbyteorder("="))


def to_heads(x):
    """Boundary layout (B, T, H, ...) -> engine layout (B, H, T, ...)."""
    return np.ascontiguousarray(np.swapaxes(x, 1, 2))


def from_heads(x):
    """Engine layout (B, H, T, ...) -> boundary layout (B, T, H, ...)."""
    return np.ascontiguousarray(np.swapaxes(x, 1, 2))


def worker_count():
    """Worker count for (b, h)-parallel loops; SCFA_WORKERS overrides."""
    env = os.getenv("SCFA_WORKERS")
    if env:
        n = int(env)
        if n < 1:
            raise ParameterError(f"SCFA_WORKERS must be >= 1, got {n}")
        return n
    return 1


def map_heads(fn, B, H, workers=None):
    """Run fn(b, h) for every head. Each call must own its output region,
    so results are identical at any worker count."""
    if workers is None:
        workers = worker_count()
    pairs = [(b, h) for b in range(B) for h in range(H)]
    if workers <= 1 or len(pairs) <= 1:
        for b, h in pairs:
            fn(b, h)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda p: fn(*p), pairs))
