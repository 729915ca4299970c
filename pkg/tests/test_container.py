import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nervc.container import (
    HuffmanTable,
    QuantizedTensor,
    dequantize,
    entropy_bits,
    histogram,
    huffman_build,
    huffman_decode,
    huffman_encode,
    pack_nrvp,
    quantize,
    quantize_weights,
    read_nrvp,
    roundtrip_weights,
    unpack_nrvp,
    write_nrvp,
)
from nervc.errors import CorruptionError, DataError, FormatError, ParameterError
from nervc.nerv import NervConfig, decode_video, init_weights

# -- quantisation -------------------------------------------------------------


def test_quantize_endpoints():
    q = quantize(np.array([0.0, 1.0]), 1)
    assert q.scale == 1.0 and q.symbols.tolist() == [0, 1]


def test_quantize_two_bit_example():
    q = quantize(np.array([0.0, 0.4, 1.0]), 2)
    assert q.scale == pytest.approx(1 / 3, rel=1e-7)
    assert q.symbols.tolist() == [0, 1, 3]
    back = dequantize(q, np.float64)
    np.testing.assert_allclose(back, [0, 1 / 3, 1], rtol=1e-7)
    assert abs(back[1] - 0.4) <= q.scale / 2


def test_quantize_constant():
    q = quantize(np.array([0.7, 0.7]), 4)
    assert q.scale == 0.0 and q.symbols.tolist() == [0, 0]
    np.testing.assert_allclose(dequantize(q), [0.7, 0.7])


def test_round_half_away_from_zero():
    # (mu - 0) / 0.5 hits exact .5 ties at 0.25 and 0.75
    q = quantize(np.array([0.0, 0.25, 0.75, 1.5]), 2)
    assert q.symbols.tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("bits", [0, 17, 2.5])
def test_quantize_bad_bits(bits):
    with pytest.raises(ParameterError):
        quantize(np.zeros(3), bits)


def test_quantize_non_finite():
    with pytest.raises(DataError):
        quantize(np.array([0.0, np.nan]), 8)


def test_dequantize_rejects_wide_symbols():
    q = QuantizedTensor((2,), 2, 0.0, 1.0, np.array([0, 4], dtype=np.uint32))
    with pytest.raises(CorruptionError):
        dequantize(q)


@pytest.mark.parametrize("bits", range(1, 17))
def test_quantize_error_bound(bits):
    x = np.random.default_rng(bits).uniform(-1, 1, size=500)
    q = quantize(x, bits)
    assert q.symbols.max() <= (1 << bits) - 1
    err = np.abs(dequantize(q, np.float64) - x).max()
    assert err <= q.scale / 2 + 1e-6


def test_sixteen_bit_error_is_tiny():
    x = np.random.default_rng(0).uniform(-1, 1, size=4000)
    q = quantize(x, 16)
    assert np.abs(dequantize(q, np.float64) - x).max() <= 1.6e-5


# -- Huffman --------------------------------------------------------------------


def test_single_symbol_convention():
    table = huffman_build(histogram(np.array([5, 5, 5])))
    assert table.lengths[5] == 1 and table.lengths.sum() == 1
    payload, nbits = huffman_encode(np.array([5, 5, 5]), table)
    assert nbits == 3 and payload == b"\x00"
    assert huffman_decode(payload, table, 3, nbits).tolist() == [5, 5, 5]


def test_two_symbol_tree():
    syms = np.array([0, 0, 0, 1])
    table = huffman_build(histogram(syms))
    assert table.lengths.tolist() == [1, 1]
    payload, nbits = huffman_encode(syms, table)
    assert nbits == 4 and payload == bytes([0b00010000])


def test_canonical_codes_frozen():
    # lengths 2, 1, 3, 3 -> B=0, A=10, C=110, D=111
    table = HuffmanTable(np.array([2, 1, 3, 3]))
    assert table.codebook() == {0: "10", 1: "0", 2: "110", 3: "111"}
    payload, nbits = huffman_encode(np.array([0, 1, 2, 3]), table)
    assert nbits == 9 and payload == bytes([0b10011011, 0b10000000])


def test_lengths_match_brute_force_optimum():
    # Huffman is optimal: compare total bits with an exhaustive search over
    # all prefix-code length assignments satisfying Kraft for 4 symbols.
    counts = np.array([10, 6, 3, 1])
    table = huffman_build(counts)
    best = min(
        int((np.array(l) * counts).sum())
        for l in np.ndindex(5, 5, 5, 5)
        if min(l) > 0 and sum(2.0 ** -np.array(l)) <= 1
    )
    assert int((table.lengths.astype(int) * counts).sum()) == best


def test_zipf_stream_round_trip():
    rng = np.random.default_rng(0)
    syms = np.minimum(rng.zipf(1.5, size=10_000) - 1, 255)
    table = huffman_build(histogram(syms))
    payload, nbits = huffman_encode(syms, table)
    assert nbits == int((table.lengths[syms].astype(np.int64)).sum())
    assert nbits <= 8 * syms.size
    np.testing.assert_array_equal(huffman_decode(payload, table, syms.size, nbits), syms)
    assert table.kraft_sum() <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=300))
def test_round_trip_and_entropy_bounds(values):
    syms = np.array(values)
    table = huffman_build(histogram(syms))
    payload, nbits = huffman_encode(syms, table)
    np.testing.assert_array_equal(huffman_decode(payload, table, syms.size, nbits), syms)
    h = entropy_bits(syms)
    per_symbol = nbits / syms.size
    assert h - 1e-9 <= per_symbol <= h + 1 + 1e-9
    assert table.kraft_sum() <= 1.0


def test_decode_past_end():
    table = HuffmanTable(np.array([1, 1]))
    payload, nbits = huffman_encode(np.array([0, 1, 1]), table)
    with pytest.raises(CorruptionError):
        huffman_decode(payload, table, 4, nbits)
    with pytest.raises(CorruptionError):
        huffman_decode(payload, table, 1, 64)


def test_decode_unused_code():
    table = HuffmanTable(np.array([1, 2]))  # codes 0 and 10; 11 is unused
    with pytest.raises(CorruptionError):
        huffman_decode(bytes([0b11000000]), table, 1, 2)


# -- NRVP container -----------------------------------------------------------------

TINY = NervConfig(pe_dim=2, pe_base=1.25, upscales=(1,), kernels=(1,), width=1, out_channels=1, frame_count=1)


def test_nrvp_bytes_frozen():
    kernel = QuantizedTensor((1, 2, 1, 1), 1, 0.0, 1.0, np.array([0, 1], np.uint32).reshape(1, 2, 1, 1))
    bias = QuantizedTensor((1,), 1, 0.5, 0.0, np.array([0], np.uint32))
    blob = pack_nrvp(TINY, [(0, kernel), (1, bias)], 1)
    expected = (
        b"NRVP" + struct.pack("<HBB", 1, 1, 0)
        + struct.pack("<HfB", 2, 1.25, 1) + bytes([1, 1]) + struct.pack("<HBH", 1, 1, 1)
        + struct.pack("<H", 2)
        # kernel: symbols 0,1 -> codes "0","1" -> one byte 0b01000000
        + struct.pack("<HB4I", 0, 4, 1, 2, 1, 1) + struct.pack("<ff", 0.0, 1.0)
        + struct.pack("<H", 2) + bytes([1, 1]) + struct.pack("<I", 2) + bytes([0b01000000])
        # bias: single symbol 0 -> one 1-bit code
        + struct.pack("<HB1I", 1, 1, 1) + struct.pack("<ff", 0.5, 0.0)
        + struct.pack("<H", 1) + bytes([1]) + struct.pack("<I", 1) + bytes([0])
    )
    assert blob == expected
    config, bits, tensors = unpack_nrvp(blob)
    assert config == TINY and bits == 1
    assert tensors == [(0, kernel), (1, bias)]


def test_nrvp_full_table_marker():
    # a 16-bit tensor using symbol 65535 needs a 65536-entry length table, stored as count 0
    symbols = np.array([0, 65535, 3], np.uint32)
    q = QuantizedTensor((3,), 16, -1.0, 0.5, symbols)
    cfg = NervConfig(pe_dim=2, upscales=(1,), kernels=(1,), width=1, out_channels=3, frame_count=1)
    blob = pack_nrvp(cfg, [(1, q)], 16)
    _, _, tensors = unpack_nrvp(blob)
    assert tensors[0][1] == q


def test_nrvp_random_round_trips():
    rng = np.random.default_rng(7)
    for _ in range(50):
        bits = int(rng.integers(1, 17))
        cfg = NervConfig(pe_dim=2 * int(rng.integers(1, 5)), width=int(rng.integers(1, 4)),
                         upscales=tuple(int(s) for s in rng.integers(1, 3, size=2)), kernels=(1, 3),
                         frame_count=int(rng.integers(1, 9)), pe_base=float(rng.uniform(1, 2)))
        w = init_weights(cfg, rng)
        tensors = quantize_weights(w, bits)
        got_cfg, got_bits, got = unpack_nrvp(pack_nrvp(cfg, tensors, bits))
        assert got_bits == bits and got == tensors
        assert got_cfg.upscales == cfg.upscales and got_cfg.width == cfg.width


def test_write_read_adds_no_loss(tmp_path):
    cfg = NervConfig.desk()
    w = init_weights(cfg, np.random.default_rng(1))
    size = write_nrvp(tmp_path / "a.nrvp", cfg, w, 8)
    assert size == (tmp_path / "a.nrvp").stat().st_size
    got_cfg, got = read_nrvp(tmp_path / "a.nrvp")
    assert got_cfg == cfg
    expected = roundtrip_weights(w, cfg, 8)
    np.testing.assert_array_equal(decode_video(cfg, got), decode_video(cfg, expected))
    assert not list(tmp_path.glob("*.part"))


def test_bad_magic(tmp_path):
    path = tmp_path / "x.nrvp"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError):
        read_nrvp(path)


def test_bad_version():
    blob = bytearray(pack_nrvp(TINY, [], 4))
    blob[4] = 9
    with pytest.raises(FormatError):
        unpack_nrvp(bytes(blob))


def test_truncation_and_trailing_bytes():
    cfg = NervConfig.desk()
    blob = pack_nrvp(cfg, quantize_weights(init_weights(cfg, np.random.default_rng(2)), 6), 6)
    for cut in (10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptionError):
            unpack_nrvp(blob[:cut])
    with pytest.raises(FormatError, match="trailing"):
        unpack_nrvp(blob + b"\x00")


def test_shape_mismatch_with_header(tmp_path):
    cfg = NervConfig.desk()
    other = NervConfig(pe_dim=8, width=4, upscales=(2, 2, 2, 4), kernels=(1, 3, 3, 3), frame_count=4)
    blob = pack_nrvp(cfg, quantize_weights(init_weights(other, np.random.default_rng(3)), 6), 6)
    path = tmp_path / "m.nrvp"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        read_nrvp(path)
