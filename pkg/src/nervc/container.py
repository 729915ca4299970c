"""Weight storage: linear b-bit quantisation, canonical Huffman coding and the
NRVP container file.

NRVP layout (little-endian)::

    "NRVP" | version u16 | bits u8 | reserved u8
    pe_dim u16 | pe_base f32 | block_count u8 | (upscale u8, kernel u8) * blocks
    width u16 | out_channels u8 | frame_count u16
    tensor_count u16
    per tensor: id u16 | ndim u8 | dims u32 * ndim | mu_min f32 | scale f32
                table_symbols u16 | code lengths u8 * table_symbols
                payload_bits u32 | payload bytes (MSB-first, zero padded)

Tensor ``2l`` is the kernel of block ``l`` and ``2l + 1`` its bias. A
``table_symbols`` of 0 stands for a full 65536-entry table (16-bit symbols).
"""

from __future__ import annotations

import heapq
import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptionError, DataError, FormatError, ParameterError
from .nerv import NervConfig, NervWeights, shapes_of

MAGIC = b"NRVP"
VERSION = 1


# -- quantisation ---------------------------------------------------------


@dataclass
class QuantizedTensor:
    shape: tuple[int, ...]
    bits: int
    mu_min: float
    scale: float
    symbols: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.bits == other.bits
            and np.float32(self.mu_min).tobytes() == np.float32(other.mu_min).tobytes()
            and np.float32(self.scale).tobytes() == np.float32(other.scale).tobytes()
            and np.array_equal(self.symbols, other.symbols)
        )


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(t, bits: int) -> QuantizedTensor:
    """Map every element to Round((mu - mu_min) / scale) with scale = range / (2^b - 1).

    ``mu_min`` and ``scale`` are rounded to float32 first, since that is how
    the container stores them.
    """
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 16:
        raise ParameterError(f"bit width must be an integer in [1, 16], got {bits}")
    data = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DataError("cannot quantise a tensor with non-finite values")
    levels = (1 << bits) - 1
    if data.size == 0:
        return QuantizedTensor(tuple(data.shape), bits, 0.0, 0.0, np.zeros(data.shape, np.uint32))
    lo = float(np.float32(data.min()))
    hi = float(data.max())
    # constancy is decided on the raw values: float32 rounding of mu_min must not invent a range
    scale = float(np.float32((hi - lo) / levels)) if hi > data.min() else 0.0
    if scale == 0.0:
        symbols = np.zeros(data.shape, dtype=np.uint32)
    else:
        raw = _round_half_away((data - lo) / scale)
        symbols = np.clip(raw, 0, levels).astype(np.uint32)
    return QuantizedTensor(tuple(data.shape), int(bits), lo, scale, symbols)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    """symbol * scale + mu_min, element-wise."""
    symbols = np.asarray(q.symbols)
    if symbols.size and int(symbols.max()) >= (1 << q.bits):
        raise CorruptionError(f"symbol {int(symbols.max())} does not fit in {q.bits} bits")
    values = symbols.astype(np.float64) * q.scale + q.mu_min
    return values.reshape(q.shape).astype(dtype)


# -- canonical Huffman ----------------------------------------------------


@dataclass
class HuffmanTable:
    """Code lengths indexed by symbol; a length of 0 marks an absent symbol."""

    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.uint8)
        self._codes: np.ndarray | None = None

    @property
    def codes(self) -> np.ndarray:
        """Canonical codes: shorter first, ties broken by symbol value."""
        if self._codes is None:
            codes = np.zeros(self.lengths.size, dtype=np.uint64)
            code = 0
            prev_len = 0
            for sym in sorted(np.flatnonzero(self.lengths).tolist(), key=lambda s: (self.lengths[s], s)):
                length = int(self.lengths[sym])
                code <<= length - prev_len
                codes[sym] = code
                code += 1
                prev_len = length
            self._codes = codes
        return self._codes

    def kraft_sum(self) -> float:
        present = self.lengths[self.lengths > 0].astype(np.float64)
        return float(np.sum(2.0 ** -present))

    def codebook(self) -> dict[int, str]:
        return {
            int(s): format(int(self.codes[s]), f"0{int(self.lengths[s])}b")
            for s in np.flatnonzero(self.lengths)
        }


def histogram(symbols: np.ndarray) -> np.ndarray:
    symbols = np.asarray(symbols).reshape(-1)
    if symbols.size == 0:
        return np.zeros(1, dtype=np.int64)
    return np.bincount(symbols.astype(np.int64))


def huffman_build(hist) -> HuffmanTable:
    """Code lengths from a symbol histogram (array indexed by symbol, or dict)."""
    if isinstance(hist, dict):
        size = max(hist) + 1 if hist else 1
        counts = np.zeros(size, dtype=np.int64)
        for s, c in hist.items():
            counts[s] = c
    else:
        counts = np.asarray(hist, dtype=np.int64)
    if counts.size > (1 << 16):
        raise ParameterError(f"alphabet of {counts.size} symbols exceeds 2^16")
    lengths = np.zeros(max(counts.size, 1), dtype=np.int64)
    present = np.flatnonzero(counts > 0)
    if present.size == 1:
        lengths[present[0]] = 1
    elif present.size > 1:
        # heap items: (weight, tie-break, symbols under this node)
        heap = [(int(counts[s]), int(s), [int(s)]) for s in present]
        heapq.heapify(heap)
        tie = int(counts.size)
        while len(heap) > 1:
            w1, _, s1 = heapq.heappop(heap)
            w2, _, s2 = heapq.heappop(heap)
            for s in s1:
                lengths[s] += 1
            for s in s2:
                lengths[s] += 1
            heapq.heappush(heap, (w1 + w2, tie, s1 + s2))
            tie += 1
    if lengths.max(initial=0) > 255:
        raise ParameterError("Huffman code longer than 255 bits")
    return HuffmanTable(lengths.astype(np.uint8))


def huffman_encode(symbols: np.ndarray, table: HuffmanTable) -> tuple[bytes, int]:
    """Pack the code of every symbol MSB-first; returns (payload, bit count)."""
    symbols = np.asarray(symbols).reshape(-1).astype(np.int64)
    if symbols.size == 0:
        return b"", 0
    if symbols.max() >= table.lengths.size or np.any(table.lengths[symbols] == 0):
        raise ParameterError("stream contains a symbol absent from the code table")
    lens = table.lengths[symbols].astype(np.int64)
    codes = table.codes[symbols]
    total = int(lens.sum())
    starts = np.concatenate(([0], np.cumsum(lens)[:-1]))
    bits = np.zeros(total, dtype=np.uint8)
    for k in range(int(lens.max())):
        active = lens > k
        shift = (lens[active] - 1 - k).astype(np.uint64)
        bits[starts[active] + k] = ((codes[active] >> shift) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits, bitorder="big").tobytes(), total


def huffman_decode(payload: bytes, table: HuffmanTable, count: int, bit_length: int | None = None) -> np.ndarray:
    """Decode ``count`` symbols; running off the payload or onto an unused code is corruption."""
    if bit_length is None:
        bit_length = len(payload) * 8
    if bit_length > len(payload) * 8:
        raise CorruptionError(f"payload holds {len(payload) * 8} bits, header claims {bit_length}")
    lengths = table.lengths.astype(np.int64)
    max_len = int(lengths.max(initial=0))
    out = np.zeros(count, dtype=np.uint32)
    if count == 0:
        return out
    if max_len == 0:
        raise CorruptionError("empty code table cannot decode symbols")
    # canonical decoding tables: first code, count and symbol offset per length
    order = sorted(np.flatnonzero(lengths).tolist(), key=lambda s: (lengths[s], s))
    per_len = np.bincount(lengths[order], minlength=max_len + 1)
    first = [0] * (max_len + 2)
    offset = [0] * (max_len + 2)
    code = 0
    idx = 0
    for length in range(1, max_len + 1):
        code = (code + (per_len[length - 1] if length > 1 else 0)) << 1 if length > 1 else 0
        first[length] = code
        offset[length] = idx
        idx += int(per_len[length])
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="big")[:bit_length].tolist()
    pos = 0
    for n in range(count):
        code = 0
        for length in range(1, max_len + 1):
            if pos >= bit_length:
                raise CorruptionError(f"payload ended while decoding symbol {n} of {count}")
            code = (code << 1) | bits[pos]
            pos += 1
            delta = code - first[length]
            if 0 <= delta < per_len[length]:
                out[n] = order[offset[length] + delta]
                break
        else:
            raise CorruptionError(f"bit pattern at symbol {n} matches no code")
    return out


def entropy_bits(symbols: np.ndarray) -> float:
    """Empirical Shannon entropy of the stream in bits per symbol."""
    counts = histogram(symbols)
    counts = counts[counts > 0].astype(np.float64)
    if counts.size <= 1:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


# -- NRVP container -------------------------------------------------------


@dataclass
class EncodedTensor:
    tensor_id: int
    quantized: QuantizedTensor
    table: HuffmanTable
    payload: bytes
    payload_bits: int


def encode_tensor(tensor_id: int, q: QuantizedTensor) -> EncodedTensor:
    table = huffman_build(histogram(q.symbols))
    payload, nbits = huffman_encode(q.symbols, table)
    return EncodedTensor(tensor_id, q, table, payload, nbits)


def _write_config(buf: io.BytesIO, config: NervConfig) -> None:
    buf.write(struct.pack("<HfB", config.pe_dim, config.pe_base, config.block_count))
    for s, k in zip(config.upscales, config.kernels):
        buf.write(struct.pack("<BB", s, k))
    buf.write(struct.pack("<HBH", config.width, config.out_channels, config.frame_count))


def pack_nrvp(config: NervConfig, tensors: Sequence[tuple[int, QuantizedTensor]], bits: int) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB", VERSION, bits, 0))
    _write_config(buf, config)
    buf.write(struct.pack("<H", len(tensors)))
    for tensor_id, q in tensors:
        enc = encode_tensor(tensor_id, q)
        buf.write(struct.pack("<HB", tensor_id, len(q.shape)))
        buf.write(struct.pack(f"<{len(q.shape)}I", *q.shape))
        buf.write(struct.pack("<ff", q.mu_min, q.scale))
        lengths = enc.table.lengths
        if lengths.size > 0xFFFF:
            buf.write(struct.pack("<H", 0))
        else:
            buf.write(struct.pack("<H", lengths.size))
        buf.write(lengths.astype(np.uint8).tobytes())
        buf.write(struct.pack("<I", enc.payload_bits))
        buf.write(enc.payload)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"file truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def unpack_nrvp(data: bytes) -> tuple[NervConfig, int, list[tuple[int, QuantizedTensor]]]:
    """Parse container bytes into (config, bits, [(tensor id, QuantizedTensor)])."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not an NRVP file (bad magic)")
    r = _Reader(data)
    r.take(4)
    version, bits, _ = r.unpack("HBB")
    if version != VERSION:
        raise FormatError(f"unsupported NRVP version {version}")
    if not 1 <= bits <= 16:
        raise FormatError(f"invalid bit width {bits}")
    pe_dim, pe_base, blocks = r.unpack("HfB")
    upscales, kernels = [], []
    for _ in range(blocks):
        s, k = r.unpack("BB")
        upscales.append(s)
        kernels.append(k)
    width, out_channels, frame_count = r.unpack("HBH")
    try:
        config = NervConfig(pe_dim=pe_dim, pe_base=float(pe_base), upscales=tuple(upscales),
                            kernels=tuple(kernels), width=width, out_channels=out_channels,
                            frame_count=frame_count)
    except ValueError as exc:
        raise FormatError(f"invalid decoder config in header: {exc}") from exc
    (count,) = r.unpack("H")
    tensors = []
    for _ in range(count):
        tensor_id, ndim = r.unpack("HB")
        shape = tuple(r.unpack(f"{ndim}I")) if ndim else ()
        mu_min, scale = r.unpack("ff")
        (table_symbols,) = r.unpack("H")
        if table_symbols == 0:
            table_symbols = 1 << 16
        lengths = np.frombuffer(r.take(table_symbols), dtype=np.uint8)
        (payload_bits,) = r.unpack("I")
        payload = r.take((payload_bits + 7) // 8)
        size = int(np.prod(shape)) if shape else 1
        symbols = huffman_decode(payload, HuffmanTable(lengths.copy()), size, payload_bits)
        if symbols.size and int(symbols.max()) >= (1 << bits):
            raise CorruptionError(f"tensor {tensor_id}: symbol exceeds {bits} bits")
        q = QuantizedTensor(shape, bits, float(mu_min), float(scale), symbols.reshape(shape))
        tensors.append((tensor_id, q))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return config, bits, tensors


def quantize_weights(weights: NervWeights, bits: int) -> list[tuple[int, QuantizedTensor]]:
    out = []
    for layer, (k, b) in enumerate(zip(weights.kernels, weights.biases)):
        out.append((2 * layer, quantize(k.data, bits)))
        out.append((2 * layer + 1, quantize(b.data, bits)))
    return out


def weights_from_quantized(config: NervConfig, tensors: Sequence[tuple[int, QuantizedTensor]]) -> NervWeights:
    shapes = shapes_of(config)
    by_id = dict(tensors)
    if len(by_id) != 2 * len(shapes) or set(by_id) != set(range(2 * len(shapes))):
        raise FormatError(f"expected tensor ids 0..{2 * len(shapes) - 1}, got {sorted(by_id)}")
    kernels, biases = [], []
    for layer, (kshape, bshape) in enumerate(shapes):
        k, b = by_id[2 * layer], by_id[2 * layer + 1]
        if tuple(k.shape) != kshape or tuple(b.shape) != bshape:
            raise FormatError(
                f"block {layer}: header config wants {kshape}/{bshape}, file has {tuple(k.shape)}/{tuple(b.shape)}"
            )
        kernels.append(dequantize(k))
        biases.append(dequantize(b))
    return NervWeights.from_arrays(kernels, biases)


def roundtrip_weights(weights: NervWeights, config: NervConfig, bits: int) -> NervWeights:
    """dequantize(quantize(w)) for every tensor, without touching disk."""
    return weights_from_quantized(config, quantize_weights(weights, bits))


def write_nrvp(path, config: NervConfig, weights: NervWeights, bits: int = 6) -> int:
    """Quantise, entropy-code and write; returns the on-disk byte count."""
    weights.check(config)
    data = pack_nrvp(config, quantize_weights(weights, bits), bits)
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path.stat().st_size


def read_nrvp(path) -> tuple[NervConfig, NervWeights]:
    config, _, tensors = unpack_nrvp(Path(path).read_bytes())
    return config, weights_from_quantized(config, tensors)
