"""
Functional simulation of tensor- and pipeline-parallel transformer execution
with activation compression at the collective and pipeline-boundary sites.

Collectives are exact sums (all-reduce) or gather-then-sum (all-gather) over
simulated workers; every communicated message is serialised so that the
logged byte counts are the real payload lengths.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.autoencoder import AeFit, AeParams, ae_decompress, ae_fit
from utils.compressors import ErrorFeedbackState, compress, decompress, error_feedback_step
from utils.errors import DimensionError, ParameterError, PlanError
from utils.messages import (CodePayload, CompressedMessage, CompressorSpec, DensePayload,
                            dense_bytes, message_bytes, payload_bytes)
from utils.tensor_core import PRECISIONS, Tensor, derive_seed, random_tensor
from utils.transformer import LayerWeights, check_split, split_layer_forward, sum_partials

logger = logging.getLogger(__name__)

SITES = ("tp_collective", "pp_boundary")
TP_SITE_NAMES = {"attn": "attn_collective", "mlp": "mlp_collective"}
IDENTITY = CompressorSpec(kind="identity")

AeBank = Dict[int, AeParams]


@dataclass(frozen=True)
class ModelConfig:
    """Transformer dimensions; ``batch`` is the micro-batch size fed to the pipeline."""

    layers: int
    hidden: int
    heads: int
    seq_len: int
    batch: int
    vocab: int = 30522
    precision: str = "float32"

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "seq_len", "batch", "vocab"):
            if getattr(self, name) < 1:
                raise ParameterError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.heads != 0:
            raise ParameterError(f"heads={self.heads} must divide hidden={self.hidden}")
        if self.precision not in PRECISIONS:
            raise ParameterError(f"Unknown precision '{self.precision}'")


@dataclass(frozen=True)
class ParallelPlan:
    tp: int = 1
    pp: int = 1
    micro_batches: int = 1

    def __post_init__(self):
        if self.tp < 1 or self.pp < 1 or self.micro_batches < 1:
            raise PlanError("tp, pp and micro_batches must all be >= 1")

    def validate_for(self, model: ModelConfig) -> None:
        if model.layers % self.pp != 0:
            raise PlanError(f"pp={self.pp} does not divide layer count {model.layers}")
        check_split(model.hidden, model.heads, self.tp)

    def stage_layers(self, model: ModelConfig, stage: int) -> range:
        per_stage = model.layers // self.pp
        return range(stage * per_stage, (stage + 1) * per_stage)


@dataclass(frozen=True)
class CompressionPlacement:
    """
    Where compression applies.

    ``layer_range`` is inclusive; ``None`` compresses nothing. A pipeline
    boundary counts as inside the range when the first layer of the stage
    receiving the activation is.
    """

    layer_range: Optional[Tuple[int, int]] = None
    sites: FrozenSet[str] = frozenset(SITES)
    spec: CompressorSpec = IDENTITY
    error_feedback: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sites", frozenset(self.sites))
        unknown = self.sites - set(SITES)
        if unknown:
            raise ParameterError(f"Unknown compression sites: {sorted(unknown)}")
        if self.layer_range is not None:
            object.__setattr__(self, "layer_range", tuple(int(v) for v in self.layer_range))

    @classmethod
    def none(cls) -> "CompressionPlacement":
        return cls()

    @classmethod
    def last_half(cls, model: ModelConfig, spec: CompressorSpec,
                  error_feedback: bool = False) -> "CompressionPlacement":
        """Compress the last L/2 layers at both sites."""
        lo = model.layers - model.layers // 2
        layer_range = (lo, model.layers - 1) if lo <= model.layers - 1 else None
        return cls(layer_range=layer_range, spec=spec, error_feedback=error_feedback)

    def validate_for(self, model: ModelConfig) -> None:
        if self.layer_range is not None:
            lo, hi = self.layer_range
            if not 0 <= lo <= hi < model.layers:
                raise PlanError(f"layer_range {self.layer_range} outside 0..{model.layers - 1}")
        self.spec.check_hidden(model.hidden)

    @property
    def active(self) -> bool:
        return self.layer_range is not None and self.spec.kind != "identity"

    def applies(self, layer: int, site: str) -> bool:
        if not self.active or site not in self.sites:
            return False
        lo, hi = self.layer_range
        return lo <= layer <= hi


@dataclass
class SiteRecord:
    """Byte and fidelity log of one communication site for one micro-batch."""

    layer: int
    site: str
    collective: str
    micro_batch: int
    compressed: bool
    forward_bytes: int
    backward_bytes: int
    baseline_forward_bytes: int
    baseline_backward_bytes: int
    max_abs_dev: float
    rel_dev: float
    workers: int = 1


def deviation(approx: np.ndarray, exact: np.ndarray) -> Tuple[float, float]:
    """Max absolute and relative (Frobenius) deviation of ``approx`` from ``exact``."""
    diff = approx.astype(np.float64) - exact.astype(np.float64)
    max_abs = float(np.max(np.abs(diff))) if diff.size else 0.0
    norm = float(np.linalg.norm(exact.astype(np.float64)))
    rel = float(np.linalg.norm(diff)) / norm if norm > 0.0 else max_abs
    return max_abs, rel


class SiteCodec:
    """
    Compresses and restores messages for one simulation run.

    Owns the error-feedback residuals (one per site and worker, carried across
    micro-batches) and the per-layer autoencoders.
    """

    def __init__(self, placement: CompressionPlacement, ae_bank: Optional[AeBank] = None):
        self.placement = placement
        self.ae_bank = ae_bank or {}
        self.states: Dict[Tuple, ErrorFeedbackState] = {}

    def ae_params(self, layer: int) -> Optional[AeParams]:
        if self.placement.spec.kind != "ae":
            return None
        if layer not in self.ae_bank:
            raise ParameterError(f"No autoencoder parameters for layer {layer}")
        return self.ae_bank[layer]

    def encode(self, key: Tuple, x: np.ndarray, layer: int, seed_keys: Sequence[int]) -> CompressedMessage:
        spec = self.placement.spec
        tensor = Tensor(x)
        params = self.ae_params(layer)
        seed = derive_seed(spec.seed, *seed_keys) if spec.kind == "randk" else None
        if not self.placement.error_feedback:
            return compress(tensor, spec, ae_params=params, seed=seed)
        state = self.states.get(key) or ErrorFeedbackState.zeros(tensor.shape, tensor.precision)
        msg, self.states[key] = error_feedback_step(state, tensor, spec, ae_params=params, seed=seed)
        return msg

    def restore(self, msg: CompressedMessage, layer: int) -> np.ndarray:
        return decompress(msg, self.ae_params(layer)).data

    def wire_sizes(self, msg: CompressedMessage) -> Tuple[int, int]:
        spec = self.placement.spec
        forward = len(payload_bytes(msg, spec))
        return forward, message_bytes(msg, "backward", spec)


def _dense_message(x: np.ndarray) -> CompressedMessage:
    precision = "float32" if x.dtype == np.float32 else "float64"
    return CompressedMessage(payload=DensePayload(values=x), original_shape=tuple(x.shape),
                             precision=precision)


def _tp_reducer(codec: SiteCodec, layer: int, micro_batch: int, records: List[SiteRecord]):
    placement = codec.placement
    spec = placement.spec

    def reduce(site: str, partials: List[np.ndarray]) -> np.ndarray:
        exact = sum_partials(partials)
        numel = int(exact.size)
        base_fwd, base_bwd = dense_bytes(numel, spec), dense_bytes(numel, spec)
        name = TP_SITE_NAMES[site]
        workers = len(partials)

        if not placement.applies(layer, "tp_collective"):
            dense = _dense_message(exact)
            size = len(payload_bytes(dense, spec))
            records.append(SiteRecord(layer, name, "all_reduce", micro_batch, False, size,
                                      message_bytes(dense, "backward", spec), base_fwd, base_bwd,
                                      0.0, 0.0, workers))
            return exact

        site_index = 0 if site == "attn" else 1
        msgs = [codec.encode(("tp", layer, site, w), partial, layer, (layer, site_index, w, micro_batch))
                for w, partial in enumerate(partials)]
        if spec.kind == "ae":
            # codes are summed by the all-reduce, then decoded once
            code_sum = sum_partials([m.payload.values for m in msgs])
            summed = CompressedMessage(payload=CodePayload(values=code_sum, code_dim=spec.code_dim),
                                       original_shape=msgs[0].original_shape, precision=msgs[0].precision)
            out = ae_decompress(summed, codec.ae_params(layer)).data
            collective = "all_reduce"
        else:
            out = sum_partials([codec.restore(m, layer) for m in msgs])
            collective = "all_gather"

        forward, backward = codec.wire_sizes(msgs[0])
        max_abs, rel = deviation(out, exact)
        records.append(SiteRecord(layer, name, collective, micro_batch, True, forward, backward,
                                  base_fwd, base_bwd, max_abs, rel, workers))
        return out.astype(exact.dtype, copy=False)

    return reduce


def tp_forward_sim(x: Tensor, weights: LayerWeights, heads: int, tp: int,
                   placement: CompressionPlacement, layer: int = 0, micro_batch: int = 0,
                   ae_bank: Optional[AeBank] = None,
                   codec: Optional[SiteCodec] = None) -> Tuple[Tensor, List[SiteRecord]]:
    """
    Run one layer split over ``tp`` simulated workers.

    Args:
        x: Layer input, B x s x h.
        weights: Layer weights.
        heads: Attention head count.
        tp: Tensor-parallel degree (must divide heads).
        placement: Compression placement; the layer index decides whether it applies.
        layer: Global index of this layer.
        micro_batch: Micro-batch id used for logging and Random-K seeds.
        ae_bank: Per-layer autoencoders when the placement uses ``ae``.
        codec: Shared codec carrying error-feedback state across calls.

    Returns:
        Tuple of (layer output, two SiteRecords: attention then MLP collective).
    """
    codec = codec or SiteCodec(placement, ae_bank)
    records: List[SiteRecord] = []
    out = split_layer_forward(x.data, weights, heads, tp, _tp_reducer(codec, layer, micro_batch, records))
    return Tensor(out.astype(x.data.dtype, copy=False)), records


def model_forward(x: Tensor, weights: Sequence[LayerWeights], heads: int) -> Tensor:
    """Monolithic forward through all layers."""
    data = x.data
    for layer_weights in weights:
        data = split_layer_forward(data, layer_weights, heads, 1, lambda site, parts: sum_partials(parts))
    return Tensor(data.astype(x.data.dtype, copy=False))


@dataclass
class PipelineRun:
    outputs: List[Tensor]
    tp_records: List[SiteRecord] = field(default_factory=list)
    boundary_records: List[SiteRecord] = field(default_factory=list)

    @property
    def records(self) -> List[SiteRecord]:
        return self.tp_records + self.boundary_records

    def bytes_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records])

    def totals(self) -> Dict[str, int]:
        """Forward/backward bytes split into tensor-collective and pipeline-boundary traffic."""
        totals = {}
        for label, records in (("tp", self.tp_records), ("pp", self.boundary_records)):
            totals[f"{label}_forward_bytes"] = sum(r.forward_bytes for r in records)
            totals[f"{label}_backward_bytes"] = sum(r.backward_bytes for r in records)
            totals[f"{label}_baseline_forward_bytes"] = sum(r.baseline_forward_bytes for r in records)
            totals[f"{label}_baseline_backward_bytes"] = sum(r.baseline_backward_bytes for r in records)
        return totals


def pp_forward_sim(model: ModelConfig, plan: ParallelPlan, placement: CompressionPlacement,
                   weights: Sequence[LayerWeights], inputs: Sequence[Tensor],
                   ae_bank: Optional[AeBank] = None) -> PipelineRun:
    """
    Push every micro-batch through the pipeline stages in order.

    Each layer runs through :func:`tp_forward_sim` with ``plan.tp`` workers. At
    each of the pp - 1 stage boundaries the activation is compressed when
    ``pp_boundary`` is a site and the receiving stage's first layer is in range.

    Args:
        model: Dimensions.
        plan: TP degree, stage count, micro-batch count.
        placement: Compression placement.
        weights: One LayerWeights per layer.
        inputs: One B x s x h tensor per micro-batch.
        ae_bank: Per-layer autoencoders for ``ae`` placements.

    Returns:
        PipelineRun with final outputs and byte/fidelity logs.
    """
    plan.validate_for(model)
    placement.validate_for(model)
    if len(weights) != model.layers:
        raise DimensionError(f"Expected {model.layers} layer weights, got {len(weights)}")
    expected = (model.batch, model.seq_len, model.hidden)
    for tensor in inputs:
        if tensor.shape != expected:
            raise DimensionError(f"Micro-batch shape {tensor.shape} != {expected}")

    codec = SiteCodec(placement, ae_bank)
    spec = placement.spec
    run = PipelineRun(outputs=[])
    for micro_batch, x in enumerate(inputs):
        for stage in range(plan.pp):
            for layer in plan.stage_layers(model, stage):
                x, records = tp_forward_sim(x, weights[layer], model.heads, plan.tp, placement,
                                            layer=layer, micro_batch=micro_batch, codec=codec)
                run.tp_records.extend(records)
            if stage == plan.pp - 1:
                continue
            receiver = plan.stage_layers(model, stage + 1)[0]
            base = dense_bytes(x.numel, spec)
            if placement.applies(receiver, "pp_boundary"):
                msg = codec.encode(("pp", stage), x.data, receiver, (receiver, 2, 0, micro_batch))
                restored = codec.restore(msg, receiver).astype(x.data.dtype, copy=False)
                forward, backward = codec.wire_sizes(msg)
                max_abs, rel = deviation(restored, x.data)
                run.boundary_records.append(SiteRecord(receiver, "pp_boundary", "p2p", micro_batch, True,
                                                       forward, backward, base, base, max_abs, rel))
                x = Tensor(restored)
            else:
                dense = _dense_message(x.data)
                run.boundary_records.append(SiteRecord(receiver, "pp_boundary", "p2p", micro_batch, False,
                                                       len(payload_bytes(dense, spec)),
                                                       message_bytes(dense, "backward", spec),
                                                       base, base, 0.0, 0.0))
        run.outputs.append(x)
    logger.info("Pipeline run: %d micro-batches, %d collective and %d boundary messages",
                len(inputs), len(run.tp_records), len(run.boundary_records))
    return run


def make_layer_weights(model: ModelConfig, seed: int) -> List[LayerWeights]:
    return [LayerWeights.random(model.hidden, derive_seed(seed, 1, layer), model.precision)
            for layer in range(model.layers)]


def make_micro_batches(model: ModelConfig, count: int, seed: int) -> List[Tensor]:
    """Seeded Gaussian micro-batches of shape B x s x h."""
    shape = (model.batch, model.seq_len, model.hidden)
    return [random_tensor(shape, derive_seed(seed, 2, mb), "gaussian", model.precision)
            for mb in range(count)]


def capture_activations(model: ModelConfig, plan: ParallelPlan, weights: Sequence[LayerWeights],
                        inputs: Sequence[Tensor]) -> Dict[int, List[Tensor]]:
    """Uncompressed run recording, per layer, its input and both collective outputs."""
    captured: Dict[int, List[Tensor]] = {layer: [] for layer in range(model.layers)}
    for x in inputs:
        data = x.data
        for layer in range(model.layers):
            captured[layer].append(Tensor(data))

            def record(site, partials, layer=layer):
                total = sum_partials(partials)
                captured[layer].append(Tensor(total))
                return total

            data = split_layer_forward(data, weights[layer], model.heads, plan.tp, record)
    return captured


def calibrate_ae_bank(model: ModelConfig, plan: ParallelPlan, placement: CompressionPlacement,
                      weights: Sequence[LayerWeights], calibration: Sequence[Tensor],
                      hyper: Optional[Dict] = None,
                      layers: Optional[Sequence[int]] = None) -> Tuple[AeBank, Dict[int, AeFit]]:
    """
    Fit one autoencoder per compressed layer on activations captured offline.

    ``layers`` defaults to the placement's layer range. Returns the bank
    together with each layer's fit result.
    """
    if placement.spec.kind != "ae":
        return {}, {}
    if layers is None:
        if placement.layer_range is None:
            return {}, {}
        lo, hi = placement.layer_range
        layers = range(lo, hi + 1)
    captured = capture_activations(model, plan, weights, calibration)
    fits = {}
    for layer in layers:
        fits[layer] = ae_fit(captured[layer], placement.spec.code_dim, hyper)
        logger.debug("Calibrated autoencoder for layer %d: MSE %.4g", layer, fits[layer].final_mse)
    return {layer: fit.params for layer, fit in fits.items()}, fits


def perturbation_report(model: ModelConfig, plan: ParallelPlan, spec: CompressorSpec,
                        weights: Sequence[LayerWeights], inputs: Sequence[Tensor],
                        ae_bank: Optional[AeBank] = None, counts: Optional[Sequence[int]] = None,
                        window: Optional[int] = None, sites: FrozenSet[str] = frozenset(SITES)) -> List[Dict]:
    """
    Output deviation against the uncompressed forward for two placement sweeps.

    ``count`` compresses the last n layers for each n in ``counts`` (default
    0..L); ``location`` slides a window of ``window`` layers (default L/2)
    from the first to the last layer. Values are reported, not judged.
    """
    baseline = pp_forward_sim(model, plan, CompressionPlacement.none(), weights, inputs).outputs
    counts = range(model.layers + 1) if counts is None else counts
    window = window or max(1, model.layers // 2)

    sweeps = []
    for n in counts:
        layer_range = (model.layers - n, model.layers - 1) if n > 0 else None
        sweeps.append(("count", layer_range))
    for start in range(model.layers - window + 1):
        sweeps.append(("location", (start, start + window - 1)))

    rows = []
    for sweep, layer_range in sweeps:
        placement = CompressionPlacement(layer_range=layer_range, sites=sites, spec=spec)
        outputs = pp_forward_sim(model, plan, placement, weights, inputs, ae_bank).outputs
        devs = [deviation(out.data, ref.data) for out, ref in zip(outputs, baseline)]
        rows.append({
            "sweep": sweep,
            "layer_range": list(layer_range) if layer_range else None,
            "compressed_layers": 0 if layer_range is None else layer_range[1] - layer_range[0] + 1,
            "max_abs_dev": max(d[0] for d in devs),
            "rel_dev": max(d[1] for d in devs),
        })
    return rows
