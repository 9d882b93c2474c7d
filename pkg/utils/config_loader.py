"""
Experiment configuration: YAML text, JSON-schema validation, preset expansion
and emission back to YAML.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from jsonschema import Draft7Validator

from utils.compressors import matched_k
from utils.cost_model import COEFFICIENT_KEYS, WEAK_SCALING_ROWS, CostCoefficients
from utils.errors import ConfigError, SimulatorError
from utils.messages import KINDS, CompressorSpec
from utils.mp_simulator import SITES, CompressionPlacement, ModelConfig, ParallelPlan

logger = logging.getLogger(__name__)

MODES = ("simulate", "predict", "fit", "bench", "spectrum")
SPECTRUM_SOURCES = ("gaussian", "fixture", "activation")
DEFAULT_COEFFICIENTS = Path(__file__).resolve().parent.parent / "data" / "coefficients_v100.txt"

# preset -> (kind, matching rule or bits, code size)
PRESETS: Dict[str, Tuple[str, Optional[str], Optional[int]]] = {
    "w/o": ("identity", None, None),
    "A1": ("ae", None, 50),
    "A2": ("ae", None, 100),
    "T1": ("topk", "same_cost", 50),
    "T2": ("topk", "same_cost", 100),
    "T3": ("topk", "same_ratio", 50),
    "T4": ("topk", "same_ratio", 100),
    "R1": ("randk", "same_cost", 50),
    "R2": ("randk", "same_cost", 100),
    "R3": ("randk", "same_ratio", 50),
    "R4": ("randk", "same_ratio", 100),
    "Q1": ("quant", None, 2),
    "Q2": ("quant", None, 4),
    "Q3": ("quant", None, 8),
}

_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "preset": {"enum": list(PRESETS)},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": _POS_INT, "hidden": _POS_INT, "heads": _POS_INT,
                "seq_len": _POS_INT, "batch": _POS_INT, "vocab": _POS_INT,
                "precision": {"enum": ["float32", "float64"]},
            },
        },
        "parallel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tp": _POS_INT, "pp": _POS_INT, "micro_batches": _POS_INT},
        },
        "placement": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": {"oneOf": [
                    {"type": "null"},
                    {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
                ]},
                "sites": {"type": "array", "items": {"enum": list(SITES)}, "uniqueItems": True},
                "error_feedback": {"type": "boolean"},
                "compressor": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": list(KINDS)},
                        "k": _POS_INT,
                        "bits": {"enum": [2, 4, 8]},
                        "group_len": _POS_INT,
                        "code_dim": _POS_INT,
                        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
                        "value_bytes": {"enum": [2, 4]},
                        "index_bytes": {"enum": [4]},
                    },
                },
            },
        },
        "coefficients": {"oneOf": [
            {"type": "string"},
            {
                "type": "object",
                "additionalProperties": False,
                "required": list(COEFFICIENT_KEYS),
                "properties": {**{key: {"type": "number", "minimum": 0} for key in COEFFICIENT_KEYS},
                               "provenance": {"type": "array", "items": {"type": "string"}}},
            },
        ]},
        "ae_training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "calibration_batches": _POS_INT,
            },
        },
        "predict": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hiddens": {"type": "array", "items": _POS_INT, "minItems": 1},
                "batch": _POS_INT,
                "seq_len": _POS_INT,
                "micro_batch_size": _POS_INT,
                "rows": {"type": "array", "items": {"type": "array", "items": _POS_INT,
                                                    "minItems": 4, "maxItems": 4}},
                "grid_batches": {"type": "array", "items": _POS_INT},
                "grid_seq_lens": {"type": "array", "items": _POS_INT},
                "grid_hidden": _POS_INT,
            },
        },
        "bench": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "repetitions": _POS_INT,
                "presets": {"type": "array", "items": {"enum": list(PRESETS)}, "minItems": 1},
            },
        },
        "fit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "measurements": {"type": ["string", "null"]},
                "include_bench": {"type": "boolean"},
            },
        },
        "spectrum": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": list(SPECTRUM_SOURCES)},
                "path": {"type": ["string", "null"]},
                "rows": _POS_INT,
                "cols": _POS_INT,
            },
        },
        "perturbation": {"type": "boolean"},
        "output": {"type": ["string", "null"]},
        "trace": {"type": ["string", "null"]},
    },
}


@dataclass(frozen=True)
class AeTrainingConfig:
    lr: float = 1e-2
    epochs: int = 200
    seed: int = 0
    calibration_batches: int = 2

    def hyper(self) -> Dict[str, Any]:
        return {"lr": self.lr, "epochs": self.epochs, "seed": self.seed}


@dataclass(frozen=True)
class PredictConfig:
    hiddens: Tuple[int, ...] = (2048, 4096, 8192, 16384, 32768, 65536)
    batch: int = 16
    seq_len: int = 128
    micro_batch_size: int = 16
    rows: Tuple[Tuple[int, int, int, int], ...] = WEAK_SCALING_ROWS
    grid_batches: Tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    grid_seq_lens: Tuple[int, ...] = (16, 32, 64, 128, 512)
    grid_hidden: int = 4096


@dataclass(frozen=True)
class BenchConfig:
    repetitions: int = 5
    presets: Tuple[str, ...] = ("w/o", "A1", "T1", "R1", "Q1", "Q2")


@dataclass(frozen=True)
class FitConfig:
    measurements: Optional[str] = None
    include_bench: bool = False


@dataclass(frozen=True)
class SpectrumConfig:
    source: str = "gaussian"
    path: Optional[str] = None
    rows: int = 64
    cols: int = 64


@dataclass(frozen=True)
class ExperimentSpec:
    """One validated experiment; a preset, when set, fixed ``placement.spec``."""

    mode: str
    seed: int = 0
    model: ModelConfig = ModelConfig(layers=4, hidden=64, heads=4, seq_len=8, batch=2)
    plan: ParallelPlan = ParallelPlan()
    placement: CompressionPlacement = CompressionPlacement()
    preset: Optional[str] = None
    coefficients_path: Optional[str] = None
    coefficients: Optional[CostCoefficients] = None
    ae_training: AeTrainingConfig = AeTrainingConfig()
    predict: PredictConfig = PredictConfig()
    bench: BenchConfig = BenchConfig()
    fit: FitConfig = FitConfig()
    spectrum: SpectrumConfig = SpectrumConfig()
    perturbation: bool = False
    output: Optional[str] = None
    trace: Optional[str] = None


def expand_preset(name: str, hidden: int, seed: int = 0) -> CompressorSpec:
    """
    CompressorSpec for a preset at hidden size ``hidden``.

    Sparsifier presets get their per-token k from :func:`matched_k`; Random-K
    presets draw with the experiment seed.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'", "preset")
    kind, rule, size = PRESETS[name]
    try:
        if kind == "identity":
            return CompressorSpec(kind="identity")
        if kind == "ae":
            spec = CompressorSpec(kind="ae", code_dim=size)
            spec.check_hidden(hidden)
            return spec
        if kind == "quant":
            return CompressorSpec(kind="quant", bits=size)
        k = matched_k(rule, hidden, size)
        if kind == "topk":
            return CompressorSpec(kind="topk", k=k)
        return CompressorSpec(kind="randk", k=k, seed=seed)
    except SimulatorError as exc:
        raise ConfigError(f"preset {name} at h={hidden}: {exc}", "preset") from exc


def _error_path(error) -> str:
    path = [str(part) for part in error.absolute_path]
    if error.validator == "additionalProperties" and isinstance(error.instance, dict):
        allowed = set(error.schema.get("properties", {}))
        extras = sorted(key for key in error.instance if key not in allowed)
        if extras:
            path.append(extras[0])
    return ".".join(path) or "<root>"


def validate_config(raw: Any) -> Tuple[bool, List[str]]:
    """
    Check a loaded config document against the schema.

    Args:
        raw: Result of ``yaml.safe_load``.

    Returns:
        Tuple of (is_valid, error_messages); each message starts with the field path.
    """
    errors = []
    validator = Draft7Validator(CONFIG_SCHEMA)
    for error in sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path]):
        errors.append(f"{_error_path(error)}: {error.message}")

    if not errors and isinstance(raw, dict):
        compressor = raw.get("placement", {}).get("compressor")
        if "preset" in raw and compressor is not None:
            errors.append("placement.compressor: cannot be combined with 'preset'")
        layers = raw.get("placement", {}).get("layers")
        if layers and layers[0] > layers[1]:
            errors.append(f"placement.layers: lo={layers[0]} exceeds hi={layers[1]}")

    return len(errors) == 0, errors


def _build(section: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except SimulatorError as exc:
        raise ConfigError(exc.message, section) from exc


def build_spec(raw: Dict[str, Any]) -> ExperimentSpec:
    """Turn a schema-valid document into an ExperimentSpec."""
    defaults = ExperimentSpec(mode=raw["mode"])
    seed = int(raw.get("seed", 0))
    model = _build("model", ModelConfig, **{**defaults.model.__dict__, **raw.get("model", {})})
    plan = _build("parallel", ParallelPlan, **{**defaults.plan.__dict__, **raw.get("parallel", {})})

    placement_raw = raw.get("placement", {})
    preset = raw.get("preset")
    if preset is not None:
        compressor = expand_preset(preset, model.hidden, seed)
    elif "compressor" in placement_raw:
        compressor = _build("placement.compressor", CompressorSpec, **placement_raw["compressor"])
    else:
        compressor = CompressorSpec(kind="identity")

    error_feedback = bool(placement_raw.get("error_feedback", False))
    if "layers" in placement_raw:
        layers = placement_raw["layers"]
        placement = _build("placement", CompressionPlacement,
                           layer_range=tuple(layers) if layers is not None else None,
                           sites=frozenset(placement_raw.get("sites", SITES)),
                           spec=compressor, error_feedback=error_feedback)
    else:
        default = CompressionPlacement.last_half(model, compressor, error_feedback)
        placement = replace(default, sites=frozenset(placement_raw.get("sites", SITES)))

    for section, check in (("parallel", plan.validate_for), ("placement", placement.validate_for)):
        try:
            check(model)
        except SimulatorError as exc:
            raise ConfigError(exc.message, section) from exc

    coefficients_path, coefficients = None, None
    coeff_raw = raw.get("coefficients")
    if isinstance(coeff_raw, str):
        coefficients_path = coeff_raw
    elif isinstance(coeff_raw, dict):
        values = {key: coeff_raw[key] for key in COEFFICIENT_KEYS}
        values["e"] = int(values["e"])
        coefficients = _build("coefficients", CostCoefficients, **values,
                              provenance=tuple(coeff_raw.get("provenance", ())))

    predict_raw = dict(raw.get("predict", {}))
    for key in ("hiddens", "grid_batches", "grid_seq_lens"):
        if key in predict_raw:
            predict_raw[key] = tuple(predict_raw[key])
    if "rows" in predict_raw:
        predict_raw["rows"] = tuple(tuple(row) for row in predict_raw["rows"])
    bench_raw = dict(raw.get("bench", {}))
    if "presets" in bench_raw:
        bench_raw["presets"] = tuple(bench_raw["presets"])

    spectrum = SpectrumConfig(**raw.get("spectrum", {}))
    if spectrum.source == "fixture" and not spectrum.path:
        raise ConfigError("a fixture spectrum needs 'path'", "spectrum.path")

    return ExperimentSpec(
        mode=raw["mode"], seed=seed, model=model, plan=plan, placement=placement, preset=preset,
        coefficients_path=coefficients_path, coefficients=coefficients,
        ae_training=AeTrainingConfig(**raw.get("ae_training", {})),
        predict=PredictConfig(**predict_raw),
        bench=BenchConfig(**bench_raw),
        fit=FitConfig(**raw.get("fit", {})),
        spectrum=spectrum,
        perturbation=bool(raw.get("perturbation", False)),
        output=raw.get("output"), trace=raw.get("trace"),
    )


def parse_config(text: str) -> ExperimentSpec:
    """
    Parse and validate experiment YAML.

    Raises:
        ConfigError: With the path of the first offending field.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", "<root>") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping with at least 'mode'", "<root>")
    is_valid, errors = validate_config(raw)
    if not is_valid:
        for message in errors[1:]:
            logger.info("Further config error: %s", message)
        path, _, message = errors[0].partition(": ")
        raise ConfigError(message, path)
    return build_spec(raw)


def load_config(path: str) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    return parse_config(text)


def emit_config(spec: ExperimentSpec) -> str:
    """Render a spec as YAML that :func:`parse_config` maps back to an equal spec."""
    placement: Dict[str, Any] = {
        "layers": list(spec.placement.layer_range) if spec.placement.layer_range is not None else None,
        "sites": sorted(spec.placement.sites),
        "error_feedback": spec.placement.error_feedback,
    }
    if spec.preset is None:
        placement["compressor"] = {key: value for key, value in spec.placement.spec.__dict__.items()
                                   if value is not None}

    doc: Dict[str, Any] = {"mode": spec.mode, "seed": spec.seed}
    if spec.preset is not None:
        doc["preset"] = spec.preset
    doc["model"] = dict(spec.model.__dict__)
    doc["parallel"] = dict(spec.plan.__dict__)
    doc["placement"] = placement
    if spec.coefficients_path is not None:
        doc["coefficients"] = spec.coefficients_path
    elif spec.coefficients is not None:
        doc["coefficients"] = spec.coefficients.to_dict()
    doc["ae_training"] = dict(spec.ae_training.__dict__)
    doc["predict"] = {
        **spec.predict.__dict__,
        "hiddens": list(spec.predict.hiddens),
        "rows": [list(row) for row in spec.predict.rows],
        "grid_batches": list(spec.predict.grid_batches),
        "grid_seq_lens": list(spec.predict.grid_seq_lens),
    }
    doc["bench"] = {"repetitions": spec.bench.repetitions, "presets": list(spec.bench.presets)}
    doc["fit"] = dict(spec.fit.__dict__)
    doc["spectrum"] = dict(spec.spectrum.__dict__)
    doc["perturbation"] = spec.perturbation
    doc["output"] = spec.output
    doc["trace"] = spec.trace
    return yaml.safe_dump(doc, sort_keys=False)


def apply_overrides(spec: ExperimentSpec, mode: Optional[str] = None, seed: Optional[int] = None,
                    coefficients_path: Optional[str] = None, output: Optional[str] = None,
                    trace: Optional[str] = None) -> ExperimentSpec:
    """Command-line flags win over config entries."""
    changes: Dict[str, Any] = {}
    if mode is not None:
        changes["mode"] = mode
    if seed is not None:
        changes["seed"] = seed
        if spec.preset is not None:
            changes["placement"] = replace(spec.placement,
                                           spec=expand_preset(spec.preset, spec.model.hidden, seed))
    if coefficients_path is not None:
        changes["coefficients_path"] = coefficients_path
        changes["coefficients"] = None
    if output is not None:
        changes["output"] = output
    if trace is not None:
        changes["trace"] = trace
    return replace(spec, **changes)
