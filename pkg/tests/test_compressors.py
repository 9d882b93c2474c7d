import numpy as np
import pytest

from utils.autoencoder import AeParams
from utils.compressors import (ErrorFeedbackState, compress, decompress, dequantize,
                               error_feedback_step, matched_k, quant_compress,
                               randk_compress, topk_compress)
from utils.errors import ParameterError, StateError
from utils.messages import CompressorSpec
from utils.tensor_core import Tensor, random_tensor


class TestTopK:
    def test_keeps_largest_magnitudes(self):
        x = Tensor.from_values([0.1, -5.0, 2.0, 0.3, -2.5], (5,))
        msg = topk_compress(x, 2)
        assert msg.payload.indices.tolist() == [1, 4]
        assert decompress(msg).data.tolist() == pytest.approx([0.0, -5.0, 0.0, 0.0, -2.5])

    def test_ties_prefer_lower_index(self):
        x = Tensor.from_values([1.0, -1.0, 1.0], (3,))
        assert topk_compress(x, 1).payload.indices.tolist() == [0]
        assert topk_compress(x, 2).payload.indices.tolist() == [0, 1]

    def test_full_k_is_lossless(self):
        x = random_tensor((3, 4), seed=1)
        assert decompress(topk_compress(x, 12)).equals(x)

    @pytest.mark.parametrize("k", [0, 13])
    def test_k_out_of_range(self, k):
        with pytest.raises(ParameterError):
            topk_compress(random_tensor((3, 4), seed=1), k)

    def test_k_is_per_token_through_facade(self):
        msg = compress(random_tensor((2, 3, 8), seed=2), CompressorSpec(kind="topk", k=2))
        assert msg.payload.indices.size == 12


    def test_recompressing_the_reconstruction_is_stable(self):
        spec = CompressorSpec(kind="topk", k=3)
        msg = compress(random_tensor((4, 16), seed=20), spec)
        assert compress(decompress(msg), spec).same_as(msg)


class TestRandK:
    def test_same_seed_same_sample(self):
        x = random_tensor((4, 16), seed=3)
        a, b = randk_compress(x, 10, seed=77), randk_compress(x, 10, seed=77)
        assert a.same_as(b)

    def test_indices_sorted_and_distinct(self):
        msg = randk_compress(random_tensor((64,), seed=4), 20, seed=5)
        indices = msg.payload.indices
        assert np.all(np.diff(indices) > 0)

    def test_seed_changes_sample(self):
        x = random_tensor((64,), seed=4)
        assert not randk_compress(x, 8, seed=1).same_as(randk_compress(x, 8, seed=2))

    def test_single_draw_frequencies_within_three_sigma(self):
        x = random_tensor((10,), seed=6)
        draws = 10_000
        counts = np.zeros(10)
        for seed in range(draws):
            counts[randk_compress(x, 1, seed).payload.indices] += 1
        sigma = np.sqrt(draws * 0.1 * 0.9)
        assert counts.sum() == draws
        assert np.all(np.abs(counts - draws / 10) <= 3 * sigma)

    def test_facade_seed_override(self):
        x = random_tensor((2, 8), seed=7)
        spec = CompressorSpec(kind="randk", k=2, seed=1)
        assert compress(x, spec, seed=99).same_as(randk_compress(x, 4, 99))


class TestQuantization:
    def test_exact_grid(self):
        x = Tensor.from_values([0.0, 1.0, 2.0, 3.0], (1, 4), "float64")
        msg = quant_compress(x, bits=2)
        assert msg.payload.codes.tolist() == [0, 1, 2, 3]
        assert dequantize(msg).equals(x)

    def test_constant_group(self):
        x = Tensor(np.full((2, 4), 1.5))
        msg = quant_compress(x, bits=4)
        assert np.all(msg.payload.scales == 0.0)
        assert dequantize(msg).equals(x)

    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_error_within_half_step(self, bits):
        x = random_tensor((6, 16), seed=8, precision="float64")
        msg = quant_compress(x, bits=bits, group_len=8)
        restored = decompress(msg).data.reshape(-1, 8)
        step = msg.payload.scales[:, None]
        assert np.all(np.abs(restored - x.data.reshape(-1, 8)) <= step / 2 + 1e-12)

    def test_group_len_must_divide(self):
        with pytest.raises(ParameterError):
            quant_compress(random_tensor((2, 6), seed=9), bits=8, group_len=4)

    def test_bad_bits(self):
        with pytest.raises(ParameterError):
            quant_compress(random_tensor((2, 6), seed=9), bits=16)

    def test_one_group_per_row_by_default(self):
        msg = quant_compress(random_tensor((3, 5, 8), seed=10), bits=8)
        assert msg.payload.scales.size == 15

    @pytest.mark.parametrize("bits,group_len", [(2, None), (4, 8), (8, None)])
    def test_recompressing_the_reconstruction_is_stable(self, bits, group_len):
        spec = CompressorSpec(kind="quant", bits=bits, group_len=group_len)
        msg = compress(random_tensor((4, 16), seed=21), spec)
        again = compress(decompress(msg), spec)
        assert np.array_equal(again.payload.codes, msg.payload.codes)
        assert np.allclose(again.payload.scales, msg.payload.scales, rtol=1e-6, atol=0.0)
        assert np.allclose(again.payload.zeros, msg.payload.zeros, rtol=1e-6, atol=1e-7)


class TestAutoencoderCodec:
    def test_round_trip_shapes(self):
        params = AeParams.xavier(16, 4, seed=11)
        spec = CompressorSpec(kind="ae", code_dim=4)
        msg = compress(random_tensor((2, 3, 16), seed=12), spec, ae_params=params)
        assert msg.payload.values.shape == (2, 3, 4)
        assert decompress(msg, params).shape == (2, 3, 16)

    def test_needs_params(self):
        with pytest.raises(ParameterError):
            compress(random_tensor((2, 16), seed=12), CompressorSpec(kind="ae", code_dim=4))

    def test_code_dim_mismatch(self):
        with pytest.raises(ParameterError):
            compress(random_tensor((2, 16), seed=12), CompressorSpec(kind="ae", code_dim=4),
                     ae_params=AeParams.xavier(16, 8, seed=1))


class TestErrorFeedback:
    spec = CompressorSpec(kind="topk", k=1)

    def test_every_coordinate_is_eventually_sent(self):
        x = Tensor.from_values([1.0, 0.99, 0.98, 0.97], (1, 4), "float64")
        state = ErrorFeedbackState.zeros((1, 4), "float64")
        sent, total = [], np.zeros(4)
        for _ in range(4):
            msg, state = error_feedback_step(state, x, self.spec)
            sent.extend(msg.payload.indices.tolist())
            total += decompress(msg).data[0]
        assert sorted(sent) == [0, 1, 2, 3]
        assert np.allclose(total + state.residual.data[0], 4 * x.data[0])

    def test_residual_accounts_for_dropped_mass(self):
        x = random_tensor((3, 8), seed=13, precision="float64")
        state = ErrorFeedbackState.zeros((3, 8), "float64")
        msg, new_state = error_feedback_step(state, x, self.spec)
        assert np.allclose(decompress(msg).data + new_state.residual.data, x.data)
        assert np.all(state.residual.data == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(StateError):
            error_feedback_step(ErrorFeedbackState.zeros((2, 8)), random_tensor((3, 8), seed=1), self.spec)

    def test_identity_leaves_no_residual(self):
        x = random_tensor((2, 4), seed=14)
        _, state = error_feedback_step(ErrorFeedbackState.zeros((2, 4)), x, CompressorSpec(kind="identity"))
        assert np.all(state.residual.data == 0.0)


class TestMatchedK:
    def test_same_cost_counts_index_bytes(self):
        assert matched_k("same_cost", 1024, 50) == 16
        assert matched_k("same_cost", 1024, 100) == 33

    def test_same_ratio(self):
        assert matched_k("same_ratio", 1024, 50) == 50

    def test_too_small(self):
        with pytest.raises(ParameterError):
            matched_k("same_cost", 64, 2)

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            matched_k("same_vibes", 64, 8)

    def test_code_dim_above_hidden(self):
        with pytest.raises(ParameterError):
            matched_k("same_ratio", 64, 65)
