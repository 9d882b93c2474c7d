import numpy as np
import pytest

from utils.compressors import compress, quant_compress, topk_compress
from utils.errors import ParameterError
from utils.messages import (CompressorSpec, decode_message, dense_bytes, encode_message,
                            message_bytes, pack_codes, payload_bytes, unpack_codes)
from utils.tensor_core import Tensor, random_tensor


class TestCompressorSpec:
    def test_topk_requires_k(self):
        with pytest.raises(ParameterError):
            CompressorSpec(kind="topk")

    def test_randk_requires_seed(self):
        with pytest.raises(ParameterError):
            CompressorSpec(kind="randk", k=4)

    def test_rejects_foreign_field(self):
        with pytest.raises(ParameterError):
            CompressorSpec(kind="topk", k=4, bits=8)

    def test_rejects_bits(self):
        with pytest.raises(ParameterError):
            CompressorSpec(kind="quant", bits=3)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ParameterError):
            CompressorSpec(kind="powersgd")

    def test_check_hidden(self):
        with pytest.raises(ParameterError):
            CompressorSpec(kind="ae", code_dim=65).check_hidden(64)
        with pytest.raises(ParameterError):
            CompressorSpec(kind="quant", bits=4, group_len=5).check_hidden(64)
        CompressorSpec(kind="topk", k=64).check_hidden(64)

    def test_total_k_is_per_token(self):
        assert CompressorSpec(kind="topk", k=3).total_k(numel=2 * 5 * 8, hidden=8) == 30


class TestByteCounts:
    spec = CompressorSpec(kind="topk", k=2)

    def test_sparse(self):
        msg = topk_compress(random_tensor((4, 8), seed=1), 5)
        assert message_bytes(msg, "forward", self.spec) == 5 * (2 + 4)
        assert message_bytes(msg, "backward", self.spec) == 5 * 2

    def test_dense(self):
        spec = CompressorSpec(kind="identity")
        msg = compress(random_tensor((3, 8), seed=2), spec)
        assert message_bytes(msg, "forward", spec) == 48 == dense_bytes(24, spec)
        assert message_bytes(msg, "backward", spec) == 48

    def test_quantized(self):
        spec = CompressorSpec(kind="quant", bits=4, group_len=4)
        msg = compress(random_tensor((2, 6, 8), seed=3), spec)
        numel, groups = 96, 24
        assert message_bytes(msg, "forward", spec) == numel * 4 // 8 + groups * 8
        assert message_bytes(msg, "backward", spec) == numel * 2

    def test_quantized_odd_count_rounds_up(self):
        msg = quant_compress(Tensor.from_values([0.0, 1.0, 2.0], (1, 3)), bits=2)
        spec = CompressorSpec(kind="quant", bits=2)
        assert message_bytes(msg, "forward", spec) == 1 + 8

    def test_wide_values(self):
        spec = CompressorSpec(kind="identity", value_bytes=4)
        msg = compress(random_tensor((2, 8), seed=4), spec)
        assert message_bytes(msg, "forward", spec) == 64

    def test_unknown_direction(self):
        msg = topk_compress(random_tensor((2, 2), seed=5), 1)
        with pytest.raises(ParameterError):
            message_bytes(msg, "sideways", self.spec)

    @pytest.mark.parametrize("spec", [
        CompressorSpec(kind="identity"),
        CompressorSpec(kind="topk", k=3),
        CompressorSpec(kind="randk", k=3, seed=9),
        CompressorSpec(kind="quant", bits=2),
        CompressorSpec(kind="quant", bits=8, group_len=4),
    ])
    def test_serialised_payload_matches_count(self, spec):
        msg = compress(random_tensor((3, 8), seed=6), spec)
        assert len(payload_bytes(msg, spec)) == message_bytes(msg, "forward", spec)


class TestWireFormat:
    def test_code_packing_layout(self):
        packed = pack_codes(np.array([1, 2, 3, 0, 3], dtype=np.uint8), bits=2)
        assert packed == bytes([0b00111001, 0b00000011])
        assert unpack_codes(packed, 5, bits=2).tolist() == [1, 2, 3, 0, 3]

    def test_nibbles(self):
        packed = pack_codes(np.array([0xA, 0x5, 0xF], dtype=np.uint8), bits=4)
        assert packed == bytes([0x5A, 0x0F])

    def test_header(self):
        spec = CompressorSpec(kind="topk", k=1)
        msg = topk_compress(random_tensor((2, 4), seed=7), 2)
        raw = encode_message(msg, spec)
        assert raw[0] == 1 and raw[1] == 2
        assert len(raw) == 2 + 16 + 8 + 1 + message_bytes(msg, "forward", spec)

    def test_quantized_message_survives_wire(self):
        spec = CompressorSpec(kind="quant", bits=4)
        msg = compress(random_tensor((4, 8), seed=8), spec)
        back = decode_message(encode_message(msg, spec), spec)
        assert back.kind == "quantized"
        assert np.array_equal(back.payload.codes, msg.payload.codes)
        assert np.allclose(back.payload.scales, msg.payload.scales, rtol=1e-6)

    def test_sparse_message_survives_wire(self):
        spec = CompressorSpec(kind="topk", k=2, value_bytes=4)
        x = Tensor.from_values([0.5, -3.0, 1.25, 8.0], (1, 4))
        msg = compress(x, spec)
        assert decode_message(encode_message(msg, spec), spec).same_as(msg)

    def test_unknown_tag(self):
        with pytest.raises(ParameterError):
            decode_message(bytes([7, 1]) + bytes(17), CompressorSpec(kind="identity"))

    def test_half_precision_overflow_is_rejected(self):
        spec = CompressorSpec(kind="identity")
        msg = compress(Tensor.from_values([1e5, 1.0], (1, 2)), spec)
        with pytest.raises(ParameterError):
            encode_message(msg, spec)

    def test_half_precision_maximum_is_kept(self):
        spec = CompressorSpec(kind="identity")
        msg = compress(Tensor.from_values([65504.0, -65504.0], (1, 2)), spec)
        back = decode_message(encode_message(msg, spec), spec)
        assert back.payload.values.tolist() == [[65504.0, -65504.0]]

    def test_wide_values_carry_large_magnitudes(self):
        spec = CompressorSpec(kind="identity", value_bytes=4)
        msg = compress(Tensor.from_values([1e5, 1.0], (1, 2)), spec)
        back = decode_message(encode_message(msg, spec), spec)
        assert back.payload.values.tolist() == [[1e5, 1.0]]
