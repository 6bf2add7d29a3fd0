"""Real-valued tensor container, file formats and a portable seeded generator.

Binary layout (little-endian)::

    b"POTT" | u8 version=1 | u8 ndim | ndim x u32 dims | prod(dims) x f32

Text layout: a ``shape: d1 d2 ...`` line followed by whitespace separated
decimal values in row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TENSOR_MAGIC = b"POTT"
TENSOR_VERSION = 1

_MASK64 = (1 << 64) - 1


class TensorFormatError(ValueError):
    """Raised when a tensor file or payload is malformed."""


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable float32 array with an explicit shape.

    ``data`` is always stored flat in row-major order; ``array`` gives the
    shaped read-only view.
    """

    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d <= 0 for d in shape):
            raise TensorFormatError(f"invalid shape {shape}")
        data = np.array(self.data, dtype=np.float32).reshape(-1)
        if data.size != math.prod(shape):
            raise TensorFormatError(
                f"shape {shape} needs {math.prod(shape)} values, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise TensorFormatError("non-finite value in tensor data")
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> Tensor:
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(arr.shape, arr.reshape(-1))

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        # bitwise comparison so that -0.0 and 0.0 are distinguished
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data.tolist()!r})"


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def tensor_to_bytes(t: Tensor) -> bytes:
    if len(t.shape) > 255:
        raise TensorFormatError("too many dimensions")
    head = struct.pack("<4sBB", TENSOR_MAGIC, TENSOR_VERSION, len(t.shape))
    dims = struct.pack(f"<{len(t.shape)}I", *t.shape)
    return head + dims + t.data.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 6:
        raise TensorFormatError("truncated header")
    magic, version, ndim = struct.unpack_from("<4sBB", buf, 0)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if ndim == 0:
        raise TensorFormatError("ndim must be positive")
    pos = 6
    if len(buf) < pos + 4 * ndim:
        raise TensorFormatError("truncated dimension list")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = math.prod(shape)
    payload = buf[pos:]
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"shape {shape} needs {4 * count} payload bytes, found {len(payload)}"
        )
    return Tensor(shape, np.frombuffer(payload, dtype="<f4").astype(np.float32))


def _format_value(v: np.float32) -> str:
    if v == 0:
        return "0"
    return np.format_float_positional(v, unique=True, trim="-") if 1e-4 <= abs(v) < 1e7 \
        else np.format_float_scientific(v, unique=True, trim="-")


def tensor_to_text(t: Tensor) -> str:
    lines = ["shape: " + " ".join(str(d) for d in t.shape)]
    row = t.shape[-1]
    vals = [_format_value(v) for v in t.data]
    for i in range(0, len(vals), row):
        lines.append(" ".join(vals[i:i + row]))
    return "\n".join(lines) + "\n"


def tensor_from_text(text: str) -> Tensor:
    lines = text.strip().splitlines()
    if not lines or not lines[0].startswith("shape:"):
        raise TensorFormatError("text tensor must start with a 'shape:' line")
    try:
        shape = tuple(int(tok) for tok in lines[0][len("shape:"):].split())
        values = [float(tok) for line in lines[1:] for tok in line.split()]
    except ValueError as exc:
        raise TensorFormatError(str(exc)) from None
    if not shape:
        raise TensorFormatError("empty shape")
    if len(values) != math.prod(shape):
        raise TensorFormatError(
            f"shape {shape} needs {math.prod(shape)} values, found {len(values)}"
        )
    return Tensor(shape, np.array(values, dtype=np.float64).astype(np.float32))


def save_tensor(t: Tensor, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        path.write_bytes(tensor_to_bytes(t))
    elif format == "text":
        path.write_text(tensor_to_text(t))
    else:
        raise ValueError(f"unknown tensor format {format!r}")


def load_tensor(path, format: str | None = None) -> Tensor:
    """Load a tensor file; ``format=None`` sniffs the binary magic."""
    path = Path(path)
    raw = path.read_bytes()
    if format is None:
        format = "binary" if raw[:4] == TENSOR_MAGIC else "text"
    if format == "binary":
        return tensor_from_bytes(raw)
    if format == "text":
        try:
            return tensor_from_text(raw.decode("ascii"))
        except UnicodeDecodeError:
            raise TensorFormatError("text tensor is not ASCII") from None
    raise ValueError(f"unknown tensor format {format!r}")


# ---------------------------------------------------------------------------
# portable pseudo-random generation
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    The state is seeded with ``splitmix64(seed)`` so that any 64-bit seed,
    including 0, yields a nonzero state. Doubles are drawn from the top 53
    bits of each output. Everything is pure integer arithmetic, hence the
    sequence is identical on every platform.
    """

    MULT = 0x2545F4914F6CDD1D

    def __init__(self, seed: int) -> None:
        if not 0 <= seed <= _MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.state = splitmix64(seed) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & _MASK64

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Integer in the closed range [lo, hi] (modulo draw, bias < 2^-40 for small spans)."""
        span = hi - lo + 1
        return lo + self.next_u64() % span

    def normals(self, n: int, sigma: float = 1.0) -> list[float]:
        """Box-Muller pairs; u1 is taken from (0, 1] so the log is finite."""
        out: list[float] = []
        while len(out) < n:
            u1 = 1.0 - self.random()
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out.append(sigma * r * math.cos(2.0 * math.pi * u2))
            out.append(sigma * r * math.sin(2.0 * math.pi * u2))
        return out[:n]


def random_tensor(shape: Sequence[int], seed: int, dist: str = "normal") -> Tensor:
    """Seeded test tensor.

    ``dist`` is ``"uniform"`` for U(-1, 1) or ``"normal"`` for N(0, sigma=0.25).
    """
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ValueError("shape must be nonempty")
    if any(d <= 0 for d in shape):
        raise ValueError(f"zero-sized dimension in {shape}")
    n = math.prod(shape)
    rng = XorShift64Star(seed)
    if dist == "uniform":
        vals: Iterable[float] = (rng.uniform(-1.0, 1.0) for _ in range(n))
    elif dist == "normal":
        vals = rng.normals(n, 0.25)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return Tensor(shape, np.fromiter(vals, dtype=np.float64, count=n).astype(np.float32))
