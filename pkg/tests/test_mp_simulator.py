import numpy as np
import pytest

from utils.autoencoder import AeParams
from utils.errors import DimensionError, ParameterError, PlanError
from utils.messages import CompressorSpec
from utils.mp_simulator import (CompressionPlacement, ModelConfig, ParallelPlan, SiteCodec,
                                calibrate_ae_bank, capture_activations, deviation,
                                make_layer_weights, make_micro_batches, model_forward,
                                perturbation_report, pp_forward_sim, tp_forward_sim)
from utils.tensor_core import random_tensor
from utils.transformer import LayerWeights

TOPK = CompressorSpec(kind="topk", k=4)


class TestPlacement:
    def test_last_half(self, small_model):
        placement = CompressionPlacement.last_half(small_model, TOPK)
        assert placement.layer_range == (2, 3)
        assert placement.applies(2, "tp_collective") and not placement.applies(1, "pp_boundary")

    def test_single_layer_model_compresses_nothing(self):
        model = ModelConfig(layers=1, hidden=8, heads=2, seq_len=2, batch=1)
        assert not CompressionPlacement.last_half(model, TOPK).active

    def test_identity_is_inactive(self):
        assert not CompressionPlacement(layer_range=(0, 3)).applies(0, "tp_collective")

    def test_site_filter(self):
        placement = CompressionPlacement(layer_range=(0, 3), sites={"pp_boundary"}, spec=TOPK)
        assert placement.applies(1, "pp_boundary") and not placement.applies(1, "tp_collective")

    def test_unknown_site(self):
        with pytest.raises(ParameterError):
            CompressionPlacement(sites={"embedding"})

    def test_range_outside_model(self, small_model):
        with pytest.raises(PlanError):
            CompressionPlacement(layer_range=(2, 4), spec=TOPK).validate_for(small_model)


class TestPlan:
    def test_stage_layers(self, small_model):
        plan = ParallelPlan(pp=2)
        assert list(plan.stage_layers(small_model, 1)) == [2, 3]

    def test_pp_must_divide_layers(self, small_model):
        with pytest.raises(PlanError):
            ParallelPlan(pp=3).validate_for(small_model)

    def test_tp_must_divide_heads(self, small_model):
        with pytest.raises(PlanError):
            ParallelPlan(tp=3).validate_for(small_model)

    def test_degrees_positive(self):
        with pytest.raises(PlanError):
            ParallelPlan(tp=0)


def test_deviation():
    exact = np.array([3.0, 4.0])
    assert deviation(exact, exact) == (0.0, 0.0)
    max_abs, rel = deviation(np.array([3.0, 4.5]), exact)
    assert max_abs == pytest.approx(0.5) and rel == pytest.approx(0.1)


class TestTensorParallelLayer:
    def test_identity_placement_logs_dense_all_reduce(self, small_model, small_weights):
        x = make_micro_batches(small_model, 1, seed=1)[0]
        out, records = tp_forward_sim(x, small_weights[0], 4, 2, CompressionPlacement.none())
        assert [r.site for r in records] == ["attn_collective", "mlp_collective"]
        assert all(r.collective == "all_reduce" and not r.compressed for r in records)
        assert all(r.forward_bytes == r.baseline_forward_bytes == 2 * 8 * 64 * 2 for r in records)
        assert out.shape == x.shape

    def test_sparse_collective_is_all_gather(self, small_model, small_weights):
        x = make_micro_batches(small_model, 1, seed=1)[0]
        placement = CompressionPlacement(layer_range=(0, 0), spec=TOPK)
        _, records = tp_forward_sim(x, small_weights[0], 4, 2, placement)
        tokens = 2 * 8
        for record in records:
            assert record.collective == "all_gather" and record.compressed
            assert record.forward_bytes == tokens * 4 * (2 + 4)
            assert record.backward_bytes == tokens * 4 * 2
            assert record.workers == 2
            assert record.rel_dev > 0.0

    def test_ae_codes_are_summed_before_decoding(self, small_model, small_weights):
        x = make_micro_batches(small_model, 1, seed=2)[0]
        spec = CompressorSpec(kind="ae", code_dim=16)
        bank = {0: AeParams.xavier(64, 16, seed=3)}
        placement = CompressionPlacement(layer_range=(0, 0), spec=spec)
        out, records = tp_forward_sim(x, small_weights[0], 4, 2, placement, ae_bank=bank)
        assert all(r.collective == "all_reduce" for r in records)
        assert all(r.forward_bytes == 2 * 8 * 16 * 2 for r in records)
        assert np.all(np.isfinite(out.data))

    def test_ae_needs_parameters_for_the_layer(self, small_model, small_weights):
        x = make_micro_batches(small_model, 1, seed=2)[0]
        placement = CompressionPlacement(layer_range=(0, 0), spec=CompressorSpec(kind="ae", code_dim=16))
        with pytest.raises(ParameterError):
            tp_forward_sim(x, small_weights[0], 4, 2, placement, ae_bank={})

    def test_error_feedback_state_is_per_site_and_worker(self, small_model, small_weights):
        x = make_micro_batches(small_model, 1, seed=4)[0]
        placement = CompressionPlacement(layer_range=(0, 0), spec=TOPK, error_feedback=True)
        codec = SiteCodec(placement)
        tp_forward_sim(x, small_weights[0], 4, 2, placement, codec=codec)
        assert sorted(codec.states) == [("tp", 0, "attn", 0), ("tp", 0, "attn", 1),
                                        ("tp", 0, "mlp", 0), ("tp", 0, "mlp", 1)]


class TestPipeline:
    def test_uncompressed_pipeline_equals_monolithic_forward(self, small_model, small_weights, small_inputs):
        run = pp_forward_sim(small_model, ParallelPlan(pp=2), CompressionPlacement.none(),
                             small_weights, small_inputs)
        for out, x in zip(run.outputs, small_inputs):
            assert out.equals(model_forward(x, small_weights, small_model.heads))

    def test_boundary_rule(self, small_model, small_weights, small_inputs):
        placement = CompressionPlacement(layer_range=(2, 3), sites={"pp_boundary"}, spec=TOPK)
        run = pp_forward_sim(small_model, ParallelPlan(pp=4), placement, small_weights, small_inputs)
        first_mb = [r for r in run.boundary_records if r.micro_batch == 0]
        assert [(r.layer, r.compressed) for r in first_mb] == [(1, False), (2, True), (3, True)]
        assert not any(r.compressed for r in run.tp_records)

    def test_record_counts_and_totals(self, small_model, small_weights, small_inputs):
        placement = CompressionPlacement.last_half(small_model, TOPK)
        run = pp_forward_sim(small_model, ParallelPlan(tp=2, pp=2, micro_batches=2), placement,
                             small_weights, small_inputs)
        assert len(run.tp_records) == 2 * 4 * 2
        assert len(run.boundary_records) == 2
        totals = run.totals()
        assert totals["tp_forward_bytes"] < totals["tp_baseline_forward_bytes"]
        assert totals["pp_forward_bytes"] == sum(r.forward_bytes for r in run.boundary_records)
        assert len(run.bytes_frame()) == len(run.records)

    def test_randk_draws_differ_between_micro_batches(self, small_model, small_weights):
        x = make_micro_batches(small_model, 1, seed=8)[0]
        spec = CompressorSpec(kind="randk", k=4, seed=11)
        placement = CompressionPlacement(layer_range=(0, 3), sites={"pp_boundary"}, spec=spec)
        run = pp_forward_sim(small_model, ParallelPlan(pp=2), placement, small_weights, [x, x])
        assert not run.outputs[0].equals(run.outputs[1])

    def test_runs_are_deterministic(self, small_model, small_weights, small_inputs):
        spec = CompressorSpec(kind="randk", k=4, seed=11)
        placement = CompressionPlacement.last_half(small_model, spec, error_feedback=True)
        plan = ParallelPlan(tp=2, pp=2, micro_batches=2)
        first = pp_forward_sim(small_model, plan, placement, small_weights, small_inputs)
        second = pp_forward_sim(small_model, plan, placement, small_weights, small_inputs)
        assert all(a.equals(b) for a, b in zip(first.outputs, second.outputs))
        assert first.totals() == second.totals()

    def test_input_shape_checked(self, small_model, small_weights):
        with pytest.raises(DimensionError):
            pp_forward_sim(small_model, ParallelPlan(), CompressionPlacement.none(), small_weights,
                           [random_tensor((1, 8, 64), seed=1)])

    def test_weight_count_checked(self, small_model, small_weights, small_inputs):
        with pytest.raises(DimensionError):
            pp_forward_sim(small_model, ParallelPlan(), CompressionPlacement.none(), small_weights[:3],
                           small_inputs)


def test_capture_activations(small_model, small_weights, small_inputs):
    captured = capture_activations(small_model, ParallelPlan(tp=2), small_weights, small_inputs)
    assert sorted(captured) == [0, 1, 2, 3]
    assert all(len(items) == 3 * len(small_inputs) for items in captured.values())
    assert captured[0][0].equals(small_inputs[0])


def test_calibrate_ae_bank(small_model, small_weights, small_inputs):
    placement = CompressionPlacement.last_half(small_model, CompressorSpec(kind="ae", code_dim=8))
    bank, fits = calibrate_ae_bank(small_model, ParallelPlan(), placement, small_weights, small_inputs,
                                   {"epochs": 5})
    assert sorted(bank) == sorted(fits) == [2, 3]
    assert all((params.h, params.c) == (64, 8) for params in bank.values())
    assert all(fits[layer].params is bank[layer] for layer in bank)
    assert all(fit.final_mse >= 0.0 and fit.second_moment > 0.0 for fit in fits.values())
    assert calibrate_ae_bank(small_model, ParallelPlan(), CompressionPlacement.last_half(small_model, TOPK),
                             small_weights, small_inputs) == ({}, {})


def test_perturbation_report(small_model, small_weights, small_inputs):
    rows = perturbation_report(small_model, ParallelPlan(pp=2), TOPK, small_weights, small_inputs)
    counts = [row for row in rows if row["sweep"] == "count"]
    locations = [row for row in rows if row["sweep"] == "location"]
    assert [row["compressed_layers"] for row in counts] == [0, 1, 2, 3, 4]
    assert counts[0]["max_abs_dev"] == 0.0 and counts[0]["layer_range"] is None
    assert all(row["rel_dev"] > 0.0 for row in counts[1:])
    assert [row["layer_range"] for row in locations] == [[0, 1], [1, 2], [2, 3]]


@pytest.mark.slow
def test_boundary_bytes_at_scale():
    """24 layers over 4 stages, AE (c=100) on the last 12 layers at h=1024."""
    model = ModelConfig(layers=24, hidden=1024, heads=16, seq_len=4, batch=1)
    shared = LayerWeights.zeros(1024)
    weights = [shared] * model.layers
    spec = CompressorSpec(kind="ae", code_dim=100)
    bank = {layer: AeParams.xavier(1024, 100, seed=layer) for layer in range(12, 24)}
    placement = CompressionPlacement(layer_range=(12, 23), spec=spec)
    inputs = make_micro_batches(model, 1, seed=1)
    run = pp_forward_sim(model, ParallelPlan(pp=4), placement, weights, inputs, bank)

    dense = 4 * 1024 * 2
    assert [r.layer for r in run.boundary_records] == [6, 12, 18]
    assert run.boundary_records[0].forward_bytes == dense
    for record in run.boundary_records[1:]:
        assert record.forward_bytes * 1024 == dense * 100
    compressed_tp = [r for r in run.tp_records if r.compressed]
    assert len(compressed_tp) == 24
    assert all(r.forward_bytes == 4 * 100 * 2 for r in compressed_tp)
