"""
Experiment dispatch: one ExperimentSpec in, one ExperimentReport out.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from utils.autoencoder import AeParams
from utils.compressors import compress, decompress
from utils.config_loader import DEFAULT_COEFFICIENTS, ExperimentSpec, emit_config, expand_preset
from utils.cost_model import (CostCoefficients, batch_seq_grid, dump_coefficients, fit_coefficients,
                              flops_per_layer, hidden_sweep, layer_breakdown, load_coefficients,
                              read_measurements, scaling_frame, t_comm, weak_scaling_table)
from utils.errors import ConfigError, DimensionError, SimulatorError
from utils.fixtures import read_tensor
from utils.messages import message_bytes, payload_bytes
from utils.mp_simulator import (CompressionPlacement, PipelineRun, calibrate_ae_bank, deviation,
                                make_layer_weights, make_micro_batches, model_forward,
                                perturbation_report, pp_forward_sim)
from utils.pipeline_schedule import check_no_overlap, pipeline_makespan_sim, timeline_summary, write_trace
from utils.report_generator import ExperimentReport, ReportGenerator
from utils.tensor_core import MAX_SPECTRUM_DIM, Tensor, derive_seed, random_tensor, singular_spectrum

logger = logging.getLogger(__name__)

SPECTRUM_RANKS = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048)


def resolve_coefficients(spec: ExperimentSpec) -> Tuple[CostCoefficients, str]:
    """Inline coefficients, else the configured file, else the bundled fixture."""
    if spec.coefficients is not None:
        return spec.coefficients, "inline"
    path = spec.coefficients_path or str(DEFAULT_COEFFICIENTS)
    try:
        return load_coefficients(path), str(path)
    except OSError as exc:
        raise ConfigError(f"cannot read coefficient file: {exc.strerror}", "coefficients") from exc


def _new_report(spec: ExperimentSpec, source: Optional[str] = None) -> ExperimentReport:
    return ExperimentReport(spec=yaml.safe_load(emit_config(spec)), mode=spec.mode, seed=spec.seed,
                            coefficients_source=source)


def _stage_timeline(spec: ExperimentSpec, run: PipelineRun, coeffs: CostCoefficients):
    """
    Timeline of the simulated run priced with the cost model.

    Each layer costs alpha * FLOPs plus t_comm of its collective message
    (element-equivalents = bytes / value_bytes), plus gamma * B s h when it
    runs an autoencoder. The slowest stage sets the stage time and the
    largest boundary message sets the hop time.
    """
    model, plan, placement = spec.model, spec.plan, spec.placement
    value_bytes = placement.spec.value_bytes
    comp = coeffs.alpha * flops_per_layer(model.batch, model.seq_len, model.hidden)
    first_mb = [r for r in run.tp_records if r.micro_batch == 0 and r.site == "attn_collective"]
    per_layer = {}
    for record in first_mb:
        overhead = coeffs.gamma * model.batch * model.seq_len * model.hidden \
            if record.compressed and placement.spec.kind == "ae" else 0.0
        per_layer[record.layer] = comp + t_comm(record.forward_bytes / value_bytes, coeffs) + overhead
    stage_time = max(sum(per_layer[layer] for layer in plan.stage_layers(model, stage))
                     for stage in range(plan.pp))
    hops = [r.forward_bytes / value_bytes for r in run.boundary_records if r.micro_batch == 0]
    if hops and coeffs.w <= 0:
        raise ConfigError("bandwidth w must be positive to price pipeline hops", "coefficients.w")
    hop_time = max(hops) / coeffs.w if hops else 0.0
    makespan, events = pipeline_makespan_sim(plan.pp, plan.micro_batches, stage_time, hop_time)
    check_no_overlap(events)
    return makespan, events, {"stage_time": stage_time, "hop_time": hop_time}


def run_simulate(spec: ExperimentSpec) -> ExperimentReport:
    model, plan, placement = spec.model, spec.plan, spec.placement
    coeffs, source = resolve_coefficients(spec)
    report = _new_report(spec, source)

    weights = make_layer_weights(model, spec.seed)
    inputs = make_micro_batches(model, plan.micro_batches, spec.seed)
    ae_bank, ae_fits = None, {}
    if placement.spec.kind == "ae":
        calibration = make_micro_batches(model, spec.ae_training.calibration_batches, derive_seed(spec.seed, 7))
        layers = range(model.layers) if spec.perturbation else None
        ae_bank, ae_fits = calibrate_ae_bank(model, plan, placement, weights, calibration,
                                             spec.ae_training.hyper(), layers=layers)

    baseline = pp_forward_sim(model, plan, CompressionPlacement.none(), weights, inputs)
    run = pp_forward_sim(model, plan, placement, weights, inputs, ae_bank)

    outputs = []
    for micro_batch, (out, ref) in enumerate(zip(run.outputs, baseline.outputs)):
        max_abs, rel = deviation(out.data, ref.data)
        outputs.append({"micro_batch": micro_batch, "max_abs_dev": max_abs, "rel_dev": rel})
    records = [asdict(r) for r in run.records]
    report.fidelity = {"sites": [r for r in records if r["compressed"]], "outputs": outputs}
    if ae_fits:
        report.fidelity["ae_training"] = [
            {"layer": layer, "final_mse": fit.final_mse, "second_moment": fit.second_moment,
             "epochs_run": fit.epochs_run}
            for layer, fit in sorted(ae_fits.items())
        ]
    report.bytes = {"records": records, "totals": run.totals()}

    makespan, events, times = _stage_timeline(spec, run, coeffs)
    report.timeline = {**timeline_summary(events, makespan), **times, "events": len(events)}
    if spec.trace:
        write_trace(spec.trace, events)

    if spec.perturbation:
        report.perturbation = perturbation_report(model, plan, placement.spec, weights, inputs,
                                                  ae_bank, sites=placement.sites)
    logger.info("Simulated %s: worst output deviation %.3g", spec.preset or placement.spec.kind,
                max((o["rel_dev"] for o in outputs), default=0.0))
    return report


def run_predict(spec: ExperimentSpec) -> ExperimentReport:
    coeffs, source = resolve_coefficients(spec)
    report = _new_report(spec, source)
    cfg = spec.predict
    scaling = weak_scaling_table(cfg.rows, coeffs, cfg.micro_batch_size, cfg.seq_len)
    report.predictions = {
        "model": layer_breakdown(spec.model.batch, spec.model.seq_len, spec.model.hidden, coeffs),
        "single_node": hidden_sweep(cfg.hiddens, cfg.batch, cfg.seq_len, coeffs).to_dict("records"),
        "grid": batch_seq_grid(cfg.grid_batches, cfg.grid_seq_lens, cfg.grid_hidden, coeffs).to_dict("records"),
        "scaling": scaling_frame(scaling).to_dict("records"),
        "units": "model time units",
    }
    report.coefficients = coeffs.to_dict()
    return report


def bench_compressors(spec: ExperimentSpec) -> List[Dict]:
    """
    Host wall time of encode and decode for each configured preset.

    Every preset runs ``bench.repetitions`` times on one seeded B x s x h
    tensor; the raw samples and their medians are returned.
    """
    model = spec.model
    x = random_tensor((model.batch, model.seq_len, model.hidden), spec.seed, "gaussian", model.precision)
    rows = []
    for preset in spec.bench.presets:
        codec = expand_preset(preset, model.hidden, spec.seed)
        params = AeParams.xavier(model.hidden, codec.code_dim, spec.seed, model.precision) \
            if codec.kind == "ae" else None
        encode_samples, decode_samples = [], []
        msg = None
        for _ in range(spec.bench.repetitions):
            start = time.perf_counter()
            msg = compress(x, codec, ae_params=params)
            encode_samples.append(time.perf_counter() - start)
            start = time.perf_counter()
            decompress(msg, params)
            decode_samples.append(time.perf_counter() - start)
        rows.append({
            "preset": preset,
            "kind": codec.kind,
            "size": x.numel,
            "repetitions": spec.bench.repetitions,
            "encode_median": float(np.median(encode_samples)),
            "decode_median": float(np.median(decode_samples)),
            "encode_samples": encode_samples,
            "decode_samples": decode_samples,
            "forward_bytes": len(payload_bytes(msg, codec)),
            "backward_bytes": message_bytes(msg, "backward", codec),
        })
        logger.debug("Bench %s: encode %.3g s, decode %.3g s", preset,
                     rows[-1]["encode_median"], rows[-1]["decode_median"])
    return rows


def run_bench(spec: ExperimentSpec) -> ExperimentReport:
    report = _new_report(spec)
    report.timings = bench_compressors(spec)
    return report


def run_fit(spec: ExperimentSpec) -> ExperimentReport:
    base, source = resolve_coefficients(spec)
    report = _new_report(spec, source)
    frames = []
    if spec.fit.measurements:
        frames.append(read_measurements(spec.fit.measurements))
    if spec.fit.include_bench:
        timings = bench_compressors(spec)
        report.timings = timings
        frames.append(pd.DataFrame([{"kind": "overhead", "size": row["size"],
                                     "time": row["encode_median"] + row["decode_median"]}
                                    for row in timings if row["kind"] == "ae"]))
    if not frames:
        raise ConfigError("fit mode needs 'measurements' or 'include_bench: true'", "fit")
    fitted = fit_coefficients(pd.concat(frames, ignore_index=True), base,
                              source=spec.fit.measurements or "bench")
    report.coefficients = fitted.to_dict()
    if spec.output:
        target = Path(spec.output).with_suffix(".coefficients.txt")
        target.write_text(dump_coefficients(fitted))
        logger.info("Wrote fitted coefficients to %s", target)
    return report


def _spectrum_matrix(spec: ExperimentSpec) -> Tuple[Tensor, str]:
    cfg = spec.spectrum
    if cfg.source == "gaussian":
        return random_tensor((cfg.rows, cfg.cols), spec.seed, "gaussian", "float64"), "gaussian"
    if cfg.source == "fixture":
        tensor = read_tensor(cfg.path)
        return tensor.reshape((-1, tensor.shape[-1])) if len(tensor.shape) != 2 else tensor, cfg.path
    model = spec.model
    weights = make_layer_weights(model, spec.seed)
    x = make_micro_batches(model, 1, spec.seed)[0]
    depth = model.layers // 2
    activation = model_forward(x, weights[:depth], model.heads) if depth else x
    return activation.reshape((-1, model.hidden)), f"activation after layer {depth - 1}"


def run_spectrum(spec: ExperimentSpec) -> ExperimentReport:
    report = _new_report(spec)
    matrix, source = _spectrum_matrix(spec)
    if min(matrix.shape) > MAX_SPECTRUM_DIM:
        raise DimensionError(f"Matrix {matrix.shape} exceeds the spectrum limit {MAX_SPECTRUM_DIM}")
    curve = singular_spectrum(matrix)
    ranks = [r for r in SPECTRUM_RANKS if r <= len(curve.singular_values)]
    report.spectrum = {
        **curve.to_dict(),
        "source": source,
        "shape": list(matrix.shape),
        "mass_at": {str(r): curve.mass_at(r) for r in ranks},
    }
    return report


RUNNERS = {
    "simulate": run_simulate,
    "predict": run_predict,
    "fit": run_fit,
    "bench": run_bench,
    "spectrum": run_spectrum,
}


def run(spec: ExperimentSpec) -> ExperimentReport:
    """
    Execute one experiment and write its report when ``spec.output`` is set.

    Deterministic under a fixed seed except for the bench timings.
    """
    logger.info("Running %s (seed %d)", spec.mode, spec.seed)
    try:
        report = RUNNERS[spec.mode](spec)
    except SimulatorError:
        logger.debug("%s run failed", spec.mode)
        raise
    if spec.output:
        ReportGenerator().write(report, spec.output)
    return report


def run_batch(specs: Sequence[ExperimentSpec], max_workers: int = 4) -> List[ExperimentReport]:
    """Run independent specs on a thread pool; each must write to its own report path."""
    outputs = [spec.output for spec in specs if spec.output]
    if len(outputs) != len(set(outputs)):
        raise ConfigError("batch specs must not share an output path", "output")
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run, specs))
