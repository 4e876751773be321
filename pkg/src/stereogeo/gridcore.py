"""Dense tensor primitives shared by the whole pipeline.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major, channel
first.  Every operation here is a pure function: the same inputs always give
bit-identical outputs.  Accumulation orders are fixed (see ``conv2d`` and
``avg_pool2``) so that straight-line reference implementations can reproduce
results exactly.

Fixture weights come from a 64-bit linear congruential generator::

    state[k+1] = (6364136223846793005 * state[k] + 1442695040888963407) mod 2**64
    state[0]   = seed
    u[k]       = (state[k+1] >> 11) / 2**53          # in [0, 1)
    weight[k]  = 0.2 * u[k] - 0.1                    # in [-0.1, 0.1)

Weights are emitted in row-major order of ``[out, in, kh, kw]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DimensionError",
    "FormatError",
    "ConvKernel",
    "as_tensor",
    "conv2d",
    "avg_pool2",
    "concat_channels",
    "split_channels",
    "reshape_to_volume",
    "flatten_volume",
    "lcg_uniform",
    "seeded_kernel",
    "identity_kernel",
    "dump_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]

LCG_MULT = np.uint64(6364136223846793005)
LCG_INC = np.uint64(1442695040888963407)

ESGT_MAGIC = b"ESGT"


class DimensionError(ValueError):
    """Raised when tensor extents do not line up."""


class FormatError(ValueError):
    """Raised on malformed binary input."""


def as_tensor(x, *, allow_empty=False) -> np.ndarray:
    """Validate ``x`` as a tensor and return it as a float64 array.

    Enforces 1 to 5 dimensions, positive extents (the leading extent may be
    zero with ``allow_empty``) and finite values.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not 1 <= arr.ndim <= 5:
        raise DimensionError(f"tensor must have 1..5 dims, got {arr.ndim}")
    extents = arr.shape[1:] if allow_empty else arr.shape
    if any(e < 1 for e in extents):
        raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ConvKernel:
    weights: np.ndarray  # [out, in, kh, kw]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4:
            raise DimensionError(f"kernel weights must be 4-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kh(self) -> int:
        return self.weights.shape[2]

    @property
    def kw(self) -> int:
        return self.weights.shape[3]


def conv2d(x: np.ndarray, k: ConvKernel, padding_mode: str = "zeros") -> np.ndarray:
    """'Same'-size 2-D cross-correlation of ``x[C_in, H, W]`` with ``k``.

    ``output[o, h, w] = bias[o] + sum_{c, i, j} k[o, c, i, j] * x[c, h + i - kh//2, w + j - kw//2]``

    The sum is accumulated starting from the bias, in ``c``, then ``i``, then
    ``j`` order.  Out-of-bounds reads are zero (``padding_mode="zeros"``) or
    the nearest edge value (``"edge"``).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects [C, H, W], got shape {x.shape}")
    c_in, h, w = x.shape
    if c_in != k.in_channels:
        raise DimensionError(f"conv2d channel mismatch: input has {c_in}, kernel expects {k.in_channels}")
    ph, pw = k.kh // 2, k.kw // 2
    bottom, right = k.kh - 1 - ph, k.kw - 1 - pw
    if padding_mode == "zeros":
        xp = np.pad(x, ((0, 0), (ph, bottom), (pw, right)))
    elif padding_mode == "edge":
        xp = np.pad(x, ((0, 0), (ph, bottom), (pw, right)), mode="edge")
    else:
        raise ValueError(f"unknown padding mode {padding_mode!r}")

    out = np.empty((k.out_channels, h, w))
    out[...] = k.bias[:, None, None]
    wts = k.weights
    for c in range(c_in):
        for i in range(k.kh):
            for j in range(k.kw):
                out += wts[:, c, i, j, None, None] * xp[c, i : i + h, j : j + w]
    return out


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2 over the last two axes.

    Output extent is ``ceil(n / 2)`` along each pooled axis; windows that hang
    off the bottom or right edge average only the cells that exist.  Window
    cells are summed top-left, top-right, bottom-left, bottom-right.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise DimensionError("avg_pool2 needs at least two axes")
    h, w = x.shape[-2:]
    ho, wo = (h + 1) // 2, (w + 1) // 2
    lead = x.shape[:-2]

    def cells(dy, dx):
        # zero-filled view of one window corner plus its presence mask
        vals = np.zeros(lead + (ho, wo))
        present = np.zeros((ho, wo))
        sub = x[..., dy::2, dx::2]
        vals[..., : sub.shape[-2], : sub.shape[-1]] = sub
        present[: sub.shape[-2], : sub.shape[-1]] = 1.0
        return vals, present

    tl, ntl = cells(0, 0)
    tr, ntr = cells(0, 1)
    bl, nbl = cells(1, 0)
    br, nbr = cells(1, 1)
    total = tl + tr + bl + br
    count = ntl + ntr + nbl + nbr
    return total / count


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``a`` and ``b`` along the leading (channel) axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"cannot concatenate {a.shape} with {b.shape}: trailing dims differ")
    return np.concatenate([a, b], axis=0)


def split_channels(x: np.ndarray, at: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    if not 0 <= at <= x.shape[0]:
        raise DimensionError(f"split point {at} outside [0, {x.shape[0]}]")
    return x[:at].copy(), x[at:].copy()


def reshape_to_volume(x: np.ndarray, c: int, d: int) -> np.ndarray:
    """Relabel ``[C*D, H, W]`` as ``[C, D, H, W]`` with ``out[c, d] = x[c*D + d]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected [C*D, H, W], got {x.shape}")
    if c < 1 or d < 1 or x.shape[0] != c * d:
        raise DimensionError(f"leading extent {x.shape[0]} is not {c}*{d}")
    return x.reshape(c, d, *x.shape[1:]).copy()


def flatten_volume(x: np.ndarray) -> np.ndarray:
    """Inverse of ``reshape_to_volume``: merge the two leading axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise DimensionError("need at least two axes to flatten")
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:]).copy()


def lcg_uniform(seed: int, n: int) -> np.ndarray:
    """First ``n`` uniforms in [0, 1) from the documented 64-bit LCG."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros(0)
    s0 = np.uint64(seed % 2**64)
    with np.errstate(over="ignore"):
        # a^k and sum_{j<k} a^j for k = 1..n, all mod 2^64 (uint64 arithmetic wraps)
        powers = np.cumprod(np.full(n, LCG_MULT, dtype=np.uint64), dtype=np.uint64)
        geo = np.empty(n, dtype=np.uint64)
        geo[0] = 1
        if n > 1:
            geo[1:] = 1 + np.cumsum(powers[:-1], dtype=np.uint64)
        states = powers * s0 + LCG_INC * geo
    return (states >> np.uint64(11)).astype(np.float64) / 2.0**53


def seeded_kernel(seed: int, out_ch: int, in_ch: int, kh: int = 3, kw: int = 3) -> ConvKernel:
    """Deterministic fixture kernel with weights in [-0.1, 0.1) and zero bias."""
    if min(out_ch, in_ch, kh, kw) < 1:
        raise DimensionError("kernel extents must be >= 1")
    u = lcg_uniform(seed, out_ch * in_ch * kh * kw)
    weights = (0.2 * u - 0.1).reshape(out_ch, in_ch, kh, kw)
    return ConvKernel(weights, np.zeros(out_ch))


def identity_kernel(channels: int, kh: int = 1, kw: int = 1) -> ConvKernel:
    w = np.zeros((channels, channels, kh, kw))
    for c in range(channels):
        w[c, c, kh // 2, kw // 2] = 1.0
    return ConvKernel(w, np.zeros(channels))


# ---------------------------------------------------------------------------
# ESGT tensor dumps: b"ESGT", u32 ndim, ndim x u32 extents, f32 payload (LE)
# ---------------------------------------------------------------------------


def dump_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    header = ESGT_MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def load_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != ESGT_MAGIC:
        raise FormatError("missing ESGT magic")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise FormatError("truncated ESGT header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise FormatError(f"ESGT payload is {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).copy()


def write_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(dump_tensor(x))


def read_tensor(path) -> np.ndarray:
    return load_tensor(Path(path).read_bytes())
