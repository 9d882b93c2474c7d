import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from jsonschema import Draft7Validator

from utils import __version__
from utils.errors import ReportError
from utils.messages import KINDS

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1"

_SITE_RECORD = {
    "type": "object",
    "additionalProperties": False,
    "required": ["layer", "site", "collective", "micro_batch", "compressed", "forward_bytes",
                 "backward_bytes", "baseline_forward_bytes", "baseline_backward_bytes",
                 "max_abs_dev", "rel_dev", "workers"],
    "properties": {
        "layer": {"type": "integer", "minimum": 0},
        "site": {"enum": ["attn_collective", "mlp_collective", "pp_boundary"]},
        "collective": {"enum": ["all_reduce", "all_gather", "p2p"]},
        "micro_batch": {"type": "integer", "minimum": 0},
        "compressed": {"type": "boolean"},
        "forward_bytes": {"type": "integer", "minimum": 0},
        "backward_bytes": {"type": "integer", "minimum": 0},
        "baseline_forward_bytes": {"type": "integer", "minimum": 0},
        "baseline_backward_bytes": {"type": "integer", "minimum": 0},
        "max_abs_dev": {"type": "number", "minimum": 0},
        "rel_dev": {"type": "number", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
    },
}

_NUMBER = {"type": "number"}

_BREAKDOWN_FIELDS = {
    "T_comp": _NUMBER, "T_comm": _NUMBER, "T_comm_ae": _NUMBER, "T_overhead": _NUMBER,
    "T": _NUMBER, "T_ae": _NUMBER, "speedup": _NUMBER,
}


def _rows(properties: Dict[str, Any], required: Optional[List[str]] = None) -> Dict[str, Any]:
    """Array of closed objects with the given properties."""
    return {"type": "array", "items": {
        "type": "object",
        "additionalProperties": False,
        "required": sorted(properties) if required is None else required,
        "properties": properties,
    }}


_PREDICTIONS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": sorted(_BREAKDOWN_FIELDS),
            "properties": _BREAKDOWN_FIELDS,
        },
        "single_node": _rows({"h": {"type": "integer"}, **_BREAKDOWN_FIELDS}),
        "grid": _rows({"B": {"type": "integer"}, "s": {"type": "integer"}, "h": {"type": "integer"},
                       "speedup": _NUMBER}),
        "scaling": _rows({"h": {"type": "integer"}, "L": {"type": "integer"}, "n": {"type": "integer"},
                          "B": {"type": "integer"}, "m": {"type": "integer"}, "s": {"type": "integer"},
                          "speedup": _NUMBER}),
        "units": {"type": "string"},
    },
}

_SAMPLES = {"type": "array", "items": _NUMBER}

_TIMINGS = _rows({
    "preset": {"type": "string"},
    "kind": {"enum": list(KINDS)},
    "size": {"type": "integer", "minimum": 0},
    "repetitions": {"type": "integer", "minimum": 1},
    "encode_median": _NUMBER,
    "decode_median": _NUMBER,
    "encode_samples": _SAMPLES,
    "decode_samples": _SAMPLES,
    "forward_bytes": {"type": "integer", "minimum": 0},
    "backward_bytes": {"type": "integer", "minimum": 0},
}, required=["preset", "kind", "encode_median", "decode_median"])

_AE_TRAINING = _rows({
    "layer": {"type": "integer", "minimum": 0},
    "final_mse": {"type": "number", "minimum": 0},
    "second_moment": {"type": "number", "minimum": 0},
    "epochs_run": {"type": "integer", "minimum": 0},
})

_PERTURBATION = _rows({
    "sweep": {"enum": ["count", "location"]},
    "layer_range": {"type": ["array", "null"], "items": {"type": "integer"}},
    "compressed_layers": {"type": "integer", "minimum": 0},
    "max_abs_dev": {"type": "number", "minimum": 0},
    "rel_dev": {"type": "number", "minimum": 0},
})

REPORT_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "spec", "fidelity", "bytes", "predictions", "timings",
                 "spectrum", "timeline", "perturbation", "coefficients", "provenance"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "spec": {"type": "object"},
        "fidelity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sites": {"type": "array", "items": _SITE_RECORD},
                "outputs": {"type": "array", "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["micro_batch", "max_abs_dev", "rel_dev"],
                    "properties": {
                        "micro_batch": {"type": "integer"},
                        "max_abs_dev": {"type": "number"},
                        "rel_dev": {"type": "number"},
                    },
                }},
                "ae_training": _AE_TRAINING,
            },
        },
        "bytes": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "records": {"type": "array", "items": _SITE_RECORD},
                "totals": {"type": "object", "additionalProperties": {"type": "integer"}},
            },
        },
        "predictions": _PREDICTIONS,
        "timings": _TIMINGS,
        "spectrum": {"type": ["object", "null"]},
        "timeline": {"type": ["object", "null"]},
        "perturbation": _PERTURBATION,
        "coefficients": {"type": ["object", "null"]},
        "provenance": {
            "type": "object",
            "additionalProperties": False,
            "required": ["version", "mode", "seed", "coefficients_source"],
            "properties": {
                "version": {"type": "string"},
                "mode": {"type": "string"},
                "seed": {"type": "integer"},
                "coefficients_source": {"type": ["string", "null"]},
            },
        },
    },
}


def _plain(value: Any) -> Any:
    """Convert numpy scalars, arrays and tuples to JSON-ready Python values."""
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_plain(item) for item in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass
class ExperimentReport:
    """Everything one run produced, block by block."""

    spec: Dict[str, Any]
    mode: str
    seed: int
    coefficients_source: Optional[str] = None
    fidelity: Dict[str, Any] = field(default_factory=dict)
    bytes: Dict[str, Any] = field(default_factory=dict)
    predictions: Dict[str, Any] = field(default_factory=dict)
    timings: List[Dict[str, Any]] = field(default_factory=list)
    spectrum: Optional[Dict[str, Any]] = None
    timeline: Optional[Dict[str, Any]] = None
    perturbation: List[Dict[str, Any]] = field(default_factory=list)
    coefficients: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return _plain({
            "schema_version": REPORT_SCHEMA_VERSION,
            "spec": self.spec,
            "fidelity": self.fidelity,
            "bytes": self.bytes,
            "predictions": self.predictions,
            "timings": self.timings,
            "spectrum": self.spectrum,
            "timeline": self.timeline,
            "perturbation": self.perturbation,
            "coefficients": self.coefficients,
            "provenance": {
                "version": __version__,
                "mode": self.mode,
                "seed": self.seed,
                "coefficients_source": self.coefficients_source,
            },
        })

    def to_json(self) -> str:
        """Deterministic JSON: sorted keys, fixed indentation."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def validate_report(data: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """
    Check a report document against the report schema.

    Returns:
        Tuple of (is_valid, error_messages)
    """
    errors = []
    for error in Draft7Validator(REPORT_SCHEMA).iter_errors(data):
        path = ".".join(str(part) for part in error.absolute_path) or "<root>"
        errors.append(f"{path}: {error.message}")
    return len(errors) == 0, sorted(errors)


def load_report(text: str) -> Dict[str, Any]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(f"Report is not valid JSON: {exc}") from exc
    is_valid, errors = validate_report(data)
    if not is_valid:
        raise ReportError(f"Report fails its schema: {errors[0]}")
    return data


class ReportGenerator:
    """Write reports and derive text summaries and tables from them."""

    def __init__(self):
        self.table_builders = {
            "bytes": lambda data: data["bytes"].get("records", []),
            "fidelity": lambda data: data["fidelity"].get("sites", []),
            "outputs": lambda data: data["fidelity"].get("outputs", []),
            "ae_training": lambda data: data["fidelity"].get("ae_training", []),
            "single_node": lambda data: data["predictions"].get("single_node", []),
            "grid": lambda data: data["predictions"].get("grid", []),
            "scaling": lambda data: data["predictions"].get("scaling", []),
            "timings": lambda data: [{k: v for k, v in row.items() if not isinstance(v, list)}
                                     for row in data["timings"]],
            "perturbation": lambda data: [{**row, "layer_range": str(row["layer_range"])}
                                          for row in data["perturbation"]],
        }

    def write(self, report: ExperimentReport, path: Union[str, Path]) -> str:
        """Validate and write the report; returns the JSON text."""
        text = report.to_json()
        is_valid, errors = validate_report(json.loads(text))
        if not is_valid:
            raise ReportError(f"Refusing to write invalid report: {errors[0]}")
        Path(path).write_text(text)
        logger.info("Wrote %s report to %s", report.mode, path)
        return text

    def export_table(self, report: Union[ExperimentReport, Dict], block: str, format_type: str = "csv") -> str:
        """Export one tabular block of a report in the specified format."""
        data = report.to_dict() if isinstance(report, ExperimentReport) else report
        if block not in self.table_builders:
            raise ReportError(f"Unknown table '{block}'; choose from {sorted(self.table_builders)}")
        frame = pd.DataFrame(self.table_builders[block](data))
        if format_type.lower() == "csv":
            buffer = io.StringIO()
            frame.to_csv(buffer, index=False)
            return buffer.getvalue()
        raise ReportError(f"Unsupported export format: {format_type}")

    def summary_markdown(self, report: Union[ExperimentReport, Dict]) -> str:
        """Short human-readable summary of a report."""
        data = report.to_dict() if isinstance(report, ExperimentReport) else report
        provenance = data["provenance"]
        lines = [
            f"# {provenance['mode'].upper()} REPORT",
            "",
            f"- **Seed**: {provenance['seed']}",
            f"- **Version**: {provenance['version']}",
            f"- **Coefficients**: {provenance['coefficients_source'] or 'n/a'}",
        ]

        totals = data["bytes"].get("totals")
        if totals:
            lines += ["", "## Communication", ""]
            for label, name in (("tp", "Tensor collectives"), ("pp", "Pipeline boundaries")):
                base = totals.get(f"{label}_baseline_forward_bytes", 0)
                sent = totals.get(f"{label}_forward_bytes", 0)
                ratio = f"{base / sent:.2f}x" if sent else "n/a"
                lines.append(f"- **{name}**: {sent:,} B forward vs {base:,} B baseline ({ratio}); "
                             f"{totals.get(f'{label}_backward_bytes', 0):,} B backward")

        outputs = data["fidelity"].get("outputs")
        if outputs:
            worst = max(row["rel_dev"] for row in outputs)
            status = "🟢 exact" if worst == 0.0 else "🟡 perturbed"
            lines += ["", "## Fidelity", "", f"- **Worst output deviation**: {worst:.3e} relative ({status})"]

        scaling = data["predictions"].get("scaling")
        if scaling:
            lines += ["", "## Weak scaling", "", "| h | L | n | B | m | speedup |", "|---|---|---|---|---|---|"]
            for row in scaling:
                lines.append(f"| {row['h']} | {row['L']} | {row['n']} | {row['B']} | {row['m']} | "
                             f"{row['speedup']:.3f}x |")

        timeline = data.get("timeline")
        if timeline:
            lines += ["", "## Pipeline timeline", "",
                      f"- **Makespan**: {timeline['makespan']:.4g}",
                      f"- **Idle**: {timeline['idle_time']:.4g}",
                      f"- **Pipeline comm**: {timeline['pipeline_comm_time']:.4g}"]

        if data["timings"]:
            lines += ["", "## Codec timings (median, seconds)", ""]
            for row in data["timings"]:
                lines.append(f"- {row['preset']}: encode {row['encode_median']:.3e}, "
                             f"decode {row['decode_median']:.3e}")

        spectrum = data.get("spectrum")
        if spectrum:
            lines += ["", "## Singular spectrum", ""]
            for rank, mass in spectrum["mass_at"].items():
                lines.append(f"- top {rank}: {mass:.4f} of total mass")

        return "\n".join(lines) + "\n"
