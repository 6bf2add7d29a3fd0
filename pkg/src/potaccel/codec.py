"""Sign + shift codewords and the packed layer file format.

Codeword layout for bitwidth ``b``: the top bit is the sign (1 = negative),
the remaining ``b - 1`` bits hold the shift. The all-ones magnitude
(``S_max + 1``) is the zero weight, under either sign bit; encoding always
emits sign 0 for it. The shift direction (always right) is implied.

Packed file (little-endian)::

    b"POTQ" | u8 version=1 | u8 bitwidth | u8 flags | u8 ndim
    | ndim x u32 dims | f32 scale | f32 offset | payload

Flag bit 0 marks an offset (pruned) layer. For bitwidth <= 4 the payload
holds two codewords per byte, low nibble first, with a trailing pad nibble
set to the canonical zero code. Wider codewords take one byte each.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quantizer import QuantizedLayer, QuantLevel, max_shift

PACKED_MAGIC = b"POTQ"
PACKED_VERSION = 1
FLAG_OFFSET = 0x01

_HEAD = struct.Struct("<4sBBBB")


class PackedFormatError(ValueError):
    """Raised for malformed, truncated or unsupported packed layers."""


def zero_magnitude(bitwidth: int) -> int:
    return max_shift(bitwidth) + 1


def canonical_zero(bitwidth: int) -> int:
    return zero_magnitude(bitwidth)


def encode_level(level: QuantLevel, bitwidth: int = 4) -> int:
    if level.is_zero:
        return canonical_zero(bitwidth)
    if level.shift > max_shift(bitwidth):
        raise ValueError(f"shift {level.shift} exceeds {max_shift(bitwidth)} for {bitwidth} bits")
    sign_bit = 1 if level.sign < 0 else 0
    return (sign_bit << (bitwidth - 1)) | level.shift


def decode_codeword(code: int, bitwidth: int = 4) -> QuantLevel:
    if not 0 <= code < (1 << bitwidth):
        raise ValueError(f"codeword {code} does not fit in {bitwidth} bits")
    mag = code & ((1 << (bitwidth - 1)) - 1)
    if mag == zero_magnitude(bitwidth):
        return QuantLevel.zero()
    return QuantLevel.pot(-1 if code >> (bitwidth - 1) else 1, mag)


def encode_array(sign: np.ndarray, shift: np.ndarray, bitwidth: int) -> np.ndarray:
    """Vectorised :func:`encode_level` over a layer's level arrays."""
    sign = np.asarray(sign)
    codes = np.where(sign < 0, 1 << (bitwidth - 1), 0) | np.asarray(shift, dtype=np.int64)
    return np.where(sign == 0, canonical_zero(bitwidth), codes).astype(np.uint8)


def decode_array(codes: np.ndarray, bitwidth: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`decode_codeword`; returns (sign, shift)."""
    codes = np.asarray(codes, dtype=np.int64)
    if np.any(codes < 0) or np.any(codes >= (1 << bitwidth)):
        raise ValueError("codeword out of range")
    mag = codes & ((1 << (bitwidth - 1)) - 1)
    is_zero = mag == zero_magnitude(bitwidth)
    sign = np.where(is_zero, 0, np.where(codes >> (bitwidth - 1), -1, 1)).astype(np.int8)
    return sign, np.where(is_zero, 0, mag).astype(np.int16)


def _nibble_packed(bitwidth: int) -> bool:
    return bitwidth <= 4


def payload_size(count: int, bitwidth: int) -> int:
    return (count + 1) // 2 if _nibble_packed(bitwidth) else count


@dataclass(frozen=True, eq=False)
class PackedLayer:
    shape: tuple[int, ...]
    bitwidth: int
    scale: float
    offset: float
    payload: bytes

    @property
    def count(self) -> int:
        return math.prod(self.shape)

    @property
    def flags(self) -> int:
        return FLAG_OFFSET if self.offset != 0 else 0

    def codes(self) -> np.ndarray:
        """Raw codewords, one per element (padding dropped)."""
        raw = np.frombuffer(self.payload, dtype=np.uint8)
        if _nibble_packed(self.bitwidth):
            raw = np.stack([raw & 0x0F, raw >> 4], axis=1).reshape(-1)
        return raw[: self.count].copy()

    def to_bytes(self) -> bytes:
        head = _HEAD.pack(PACKED_MAGIC, PACKED_VERSION, self.bitwidth, self.flags, len(self.shape))
        dims = struct.pack(f"<{len(self.shape)}I", *self.shape)
        return head + dims + struct.pack("<ff", self.scale, self.offset) + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> PackedLayer:
        if len(buf) < _HEAD.size:
            raise PackedFormatError("truncated header")
        magic, version, bitwidth, flags, ndim = _HEAD.unpack_from(buf, 0)
        if magic != PACKED_MAGIC:
            raise PackedFormatError(f"bad magic {magic!r}")
        if version != PACKED_VERSION:
            raise PackedFormatError(f"unknown version {version}")
        if not 3 <= bitwidth <= 8:
            raise PackedFormatError(f"unsupported bitwidth {bitwidth}")
        if ndim == 0:
            raise PackedFormatError("ndim must be positive")
        pos = _HEAD.size
        if len(buf) < pos + 4 * ndim + 8:
            raise PackedFormatError("truncated header")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        if any(d == 0 for d in shape):
            raise PackedFormatError("zero-sized dimension")
        pos += 4 * ndim
        scale, offset = struct.unpack_from("<ff", buf, pos)
        pos += 8
        payload = bytes(buf[pos:])
        need = payload_size(math.prod(shape), bitwidth)
        if len(payload) < need:
            raise PackedFormatError(f"truncated payload: need {need} bytes, found {len(payload)}")
        if len(payload) > need:
            raise PackedFormatError(f"trailing bytes after payload ({len(payload) - need})")
        if bool(flags & FLAG_OFFSET) != (offset != 0):
            raise PackedFormatError("offset flag disagrees with stored offset")
        return cls(tuple(shape), bitwidth, scale, offset, payload)


def pack_layer(q: QuantizedLayer, bitwidth: int | None = None) -> PackedLayer:
    if q.family != "pot":
        raise ValueError("only PoT layers can be packed")
    bitwidth = q.bitwidth if bitwidth is None else bitwidth
    if bitwidth != q.bitwidth:
        raise ValueError(f"layer was quantised at {q.bitwidth} bits, not {bitwidth}")
    codes = encode_array(q.sign, q.magnitude, bitwidth)
    if _nibble_packed(bitwidth):
        if codes.size % 2:
            codes = np.append(codes, np.uint8(canonical_zero(bitwidth)))
        pairs = codes.reshape(-1, 2)
        payload = (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()
    else:
        payload = codes.tobytes()
    return PackedLayer(q.shape, bitwidth, q.scale, q.offset, payload)


def unpack_layer(p: PackedLayer) -> QuantizedLayer:
    if len(p.payload) != payload_size(p.count, p.bitwidth):
        raise PackedFormatError("payload length does not match element count")
    sign, shift = decode_array(p.codes(), p.bitwidth)
    return QuantizedLayer(p.shape, sign, shift, p.scale, bitwidth=p.bitwidth, offset=p.offset)


def save_packed(p: PackedLayer, path) -> None:
    Path(path).write_bytes(p.to_bytes())


def load_packed(path) -> PackedLayer:
    return PackedLayer.from_bytes(Path(path).read_bytes())
