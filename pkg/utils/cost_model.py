"""
Analytical performance model for compressed model-parallel training.

Per-layer time is compute plus one communication term:

    T    = alpha * (96 B s h^2 + 16 B s^2 h) + t_comm(B s h)
    T_AE = alpha * (96 B s h^2 + 16 B s^2 h) + t_comm(B s e) + gamma * B s h

with t_comm(x) = c below the threshold d and beta * x at or above it.
Across n pipeline nodes with m micro-batches the run time is the fill-drain
makespan (m + n - 1) * (L T / n) + (n - 1) * B s h / w, B being the
micro-batch size. All times are in whatever unit the coefficients were fitted
in ("model time units").
"""

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from utils.errors import FitError, FitWarning, ParameterError

logger = logging.getLogger(__name__)

COEFFICIENT_KEYS = ("alpha", "beta", "c", "d", "gamma", "w", "e")
MEASUREMENT_KINDS = ("comp", "comm", "overhead")
DEFAULT_SEQ_LEN = 128

# (h, L, n, global batch) of the weak-scaling study
WEAK_SCALING_ROWS = (
    (6144, 40, 1, 1024),
    (8192, 48, 2, 1536),
    (10240, 60, 4, 1792),
    (12288, 80, 8, 2304),
    (16384, 96, 16, 2176),
    (20480, 105, 35, 2528),
    (25600, 128, 64, 3072),
)


@dataclass(frozen=True)
class CostCoefficients:
    """Fitted constants of the model; ``provenance`` holds free-text source notes."""

    alpha: float
    beta: float
    c: float
    d: float
    gamma: float
    w: float
    e: int
    provenance: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for key in COEFFICIENT_KEYS:
            if getattr(self, key) < 0:
                raise ParameterError(f"Coefficient {key} must be non-negative, got {getattr(self, key)}")
        if self.d < 1:
            raise ParameterError(f"Threshold d must be >= 1, got {self.d}")
        if self.c > 0 and self.beta * self.d < self.c:
            logger.warning("t_comm is not monotone: beta*d=%g < c=%g", self.beta * self.d, self.c)

    def to_dict(self) -> Dict:
        data = {key: getattr(self, key) for key in COEFFICIENT_KEYS}
        data["provenance"] = list(self.provenance)
        return data


def parse_coefficients(text: str, source: str = "<inline>") -> CostCoefficients:
    """
    Parse ``key = value`` lines; ``#`` lines are kept as provenance.

    Args:
        text: File contents.
        source: Name used in error messages.

    Returns:
        Parsed coefficients.
    """
    values: Dict[str, float] = {}
    provenance: List[str] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            provenance.append(line.lstrip("#").strip())
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in COEFFICIENT_KEYS:
            raise ParameterError(f"{source}:{number}: expected '<coefficient> = <value>', got '{line}'")
        try:
            values[key] = float(value.strip())
        except ValueError as exc:
            raise ParameterError(f"{source}:{number}: '{value.strip()}' is not a number") from exc
    missing = [key for key in COEFFICIENT_KEYS if key not in values]
    if missing:
        raise ParameterError(f"{source}: missing coefficients {missing}")
    values["e"] = int(values["e"])
    return CostCoefficients(**values, provenance=tuple(provenance))


def load_coefficients(path: Union[str, Path]) -> CostCoefficients:
    return parse_coefficients(Path(path).read_text(), source=str(path))


def dump_coefficients(coeffs: CostCoefficients) -> str:
    lines = [f"# {note}" for note in coeffs.provenance]
    lines += [f"{key} = {getattr(coeffs, key)!r}" for key in COEFFICIENT_KEYS]
    return "\n".join(lines) + "\n"


def flops_per_layer(batch: int, seq_len: int, hidden: int) -> int:
    """Training FLOPs of one layer: 96 B s h^2 + 16 B s^2 h."""
    return 96 * batch * seq_len * hidden * hidden + 16 * batch * seq_len * seq_len * hidden


def t_comm(msg_elems: float, coeffs: CostCoefficients) -> float:
    return coeffs.c if msg_elems < coeffs.d else coeffs.beta * msg_elems


def layer_time(batch: int, seq_len: int, hidden: int, coeffs: CostCoefficients) -> float:
    return coeffs.alpha * flops_per_layer(batch, seq_len, hidden) + t_comm(batch * seq_len * hidden, coeffs)


def layer_time_ae(batch: int, seq_len: int, hidden: int, coeffs: CostCoefficients) -> float:
    return (coeffs.alpha * flops_per_layer(batch, seq_len, hidden)
            + t_comm(batch * seq_len * coeffs.e, coeffs)
            + coeffs.gamma * batch * seq_len * hidden)


def speedup_single_node(batch: int, seq_len: int, hidden: int, coeffs: CostCoefficients) -> float:
    """T / T_AE for one layer; the layer count cancels."""
    return layer_time(batch, seq_len, hidden, coeffs) / layer_time_ae(batch, seq_len, hidden, coeffs)


def layer_breakdown(batch: int, seq_len: int, hidden: int, coeffs: CostCoefficients) -> Dict[str, float]:
    comp = coeffs.alpha * flops_per_layer(batch, seq_len, hidden)
    comm = t_comm(batch * seq_len * hidden, coeffs)
    comm_ae = t_comm(batch * seq_len * coeffs.e, coeffs)
    overhead = coeffs.gamma * batch * seq_len * hidden
    return {
        "T_comp": comp, "T_comm": comm, "T_comm_ae": comm_ae, "T_overhead": overhead,
        "T": comp + comm, "T_ae": comp + comm_ae + overhead,
        "speedup": (comp + comm) / (comp + comm_ae + overhead),
    }


def pipeline_time(stages: int, micro_batches: int, stage_time: float, hop_time: float) -> float:
    """Fill-drain makespan (m + n - 1) * t + (n - 1) * p."""
    return (micro_batches + stages - 1) * stage_time + (stages - 1) * hop_time


@dataclass(frozen=True)
class ScalingRow:
    h: int
    L: int
    n: int
    B: int
    m: int
    s: int = DEFAULT_SEQ_LEN
    speedup: Optional[float] = None

    def __post_init__(self):
        for name in ("h", "L", "n", "B", "m", "s"):
            if getattr(self, name) < 1:
                raise ParameterError(f"ScalingRow.{name} must be positive")
        if self.B % self.m != 0:
            raise ParameterError(f"Batch {self.B} is not divisible into {self.m} micro-batches")

    @property
    def micro_batch(self) -> int:
        return self.B // self.m


def cluster_time(row: ScalingRow, coeffs: CostCoefficients, compressed: bool) -> float:
    """Pipeline run time of one mini-batch over ``row.n`` nodes."""
    b, s, h = row.micro_batch, row.s, row.h
    per_layer = layer_time_ae(b, s, h, coeffs) if compressed else layer_time(b, s, h, coeffs)
    if row.n == 1:
        return pipeline_time(1, row.m, row.L * per_layer, 0.0)
    if coeffs.w <= 0:
        raise ParameterError("Bandwidth w must be positive for multi-node predictions")
    width = coeffs.e if compressed else h
    return pipeline_time(row.n, row.m, row.L * per_layer / row.n, b * s * width / coeffs.w)


def cluster_speedup(row: ScalingRow, coeffs: CostCoefficients) -> float:
    """
    Weak-scaling speedup of AE compression on ``row.n`` pipeline nodes.

    With a single node the pipeline terms cancel and the result is the
    single-node speedup of one micro-batch.
    """
    if row.n == 1:
        return speedup_single_node(row.micro_batch, row.s, row.h, coeffs)
    return cluster_time(row, coeffs, compressed=False) / cluster_time(row, coeffs, compressed=True)


def weak_scaling_table(rows: Sequence[Tuple[int, int, int, int]], coeffs: CostCoefficients,
                       micro_batch_size: int, seq_len: int = DEFAULT_SEQ_LEN) -> List[ScalingRow]:
    """
    Predicted speedup for each (h, L, n, B) row.

    Args:
        rows: Model and cluster geometries; B is the global batch.
        coeffs: Cost coefficients.
        micro_batch_size: Micro-batch size; must divide every B.
        seq_len: Sequence length.

    Returns:
        One ScalingRow per input row with ``speedup`` filled in.
    """
    table = []
    for h, layers, nodes, batch in rows:
        if micro_batch_size < 1 or batch % micro_batch_size != 0:
            raise ParameterError(f"Micro-batch size {micro_batch_size} does not divide batch {batch}")
        row = ScalingRow(h=h, L=layers, n=nodes, B=batch, m=batch // micro_batch_size, s=seq_len)
        table.append(replace(row, speedup=cluster_speedup(row, coeffs)))
    return table


def scaling_frame(rows: Sequence[ScalingRow]) -> pd.DataFrame:
    return pd.DataFrame([{"h": r.h, "L": r.L, "n": r.n, "B": r.B, "m": r.m, "s": r.s,
                          "speedup": r.speedup} for r in rows])


def hidden_sweep(hiddens: Sequence[int], batch: int, seq_len: int, coeffs: CostCoefficients) -> pd.DataFrame:
    """Per-hidden-size breakdown of the single-node model."""
    return pd.DataFrame([{"h": h, **layer_breakdown(batch, seq_len, h, coeffs)} for h in hiddens])


def batch_seq_grid(batches: Sequence[int], seq_lens: Sequence[int], hidden: int,
                   coeffs: CostCoefficients) -> pd.DataFrame:
    """Single-node speedup over a batch x sequence-length grid at one hidden size."""
    return pd.DataFrame([{"B": b, "s": s, "h": hidden, "speedup": speedup_single_node(b, s, hidden, coeffs)}
                         for b in batches for s in seq_lens])


def fit_alpha(measurements: Sequence[Tuple[float, float]]) -> float:
    """
    Time per FLOP from the measurement with the most FLOPs.

    Smaller workloads run below peak throughput, so only the largest point is
    used; the per-point ratios of the others are logged for comparison.
    """
    points = [(float(flops), float(time)) for flops, time in measurements]
    if not points:
        raise FitError("fit_alpha needs at least one (FLOPs, time) measurement")
    if any(flops <= 0 for flops, _ in points):
        raise FitError("FLOP counts must be positive")
    flops, time = max(points, key=lambda p: p[0])
    alpha = time / flops
    for other_flops, other_time in points:
        logger.info("alpha diagnostic: %.4g FLOPs -> %.4g per FLOP (%.2fx chosen)",
                    other_flops, other_time / other_flops, (other_time / other_flops) / alpha if alpha else 0.0)
    return alpha


@dataclass(frozen=True)
class CommFit:
    """Piecewise communication fit; ``beta``/``d`` are None when only the constant regime was seen."""

    beta: Optional[float]
    c: Optional[float]
    d: Optional[float]
    sse: float
    single_regime: bool


def _slope_through_origin(x: np.ndarray, y: np.ndarray) -> float:
    model = LinearRegression(fit_intercept=False)
    model.fit(x.reshape(-1, 1), y)
    return float(model.coef_[0])


def _regime_sse(sizes: np.ndarray, times: np.ndarray, split: int) -> Tuple[float, Optional[float], Optional[float]]:
    left_t = times[:split]
    right_x, right_t = sizes[split:], times[split:]
    c = float(np.mean(left_t)) if left_t.size else None
    beta = _slope_through_origin(right_x, right_t) if right_t.size else None
    sse = 0.0
    if c is not None:
        sse += float(np.sum((left_t - c) ** 2))
    if beta is not None:
        sse += float(np.sum((right_t - beta * right_x) ** 2))
    return sse, c, beta


def fit_comm_piecewise(sizes: Sequence[float], times: Sequence[float]) -> CommFit:
    """
    Fit t = c (size < d), t = beta * size (size >= d).

    Candidate thresholds are the measured sizes. The all-constant model is
    tried first and a candidate replaces the best only with strictly smaller
    squared error. A one-regime winner issues a FitWarning.

    Args:
        sizes: Message sizes in elements.
        times: Measured times.

    Returns:
        CommFit with the chosen (beta, c, d).
    """
    x = np.asarray(sizes, dtype=np.float64)
    y = np.asarray(times, dtype=np.float64)
    if x.shape != y.shape:
        raise FitError("sizes and times must have the same length")
    if x.size < 4:
        raise FitError(f"Piecewise fit needs at least 4 points, got {x.size}")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]

    best_sse, best_c, best_beta = _regime_sse(x, y, x.size)
    best_d: Optional[float] = None
    for threshold in np.unique(x):
        split = int(np.searchsorted(x, threshold, side="left"))
        sse, c, beta = _regime_sse(x, y, split)
        if sse < best_sse:
            best_sse, best_c, best_beta, best_d = sse, c, beta, float(threshold)

    single = best_d is None or best_c is None
    if single:
        regime = "constant" if best_d is None else "linear"
        message = f"All communication measurements fall in the {regime} regime; single-regime fit"
        warnings.warn(message, FitWarning)
        logger.warning(message)
        if best_d is None:
            best_beta = None
    elif best_beta is not None and best_beta * best_d < best_c:
        logger.warning("Fitted t_comm is not monotone: beta*d=%g < c=%g", best_beta * best_d, best_c)
    return CommFit(beta=best_beta, c=best_c, d=best_d, sse=best_sse, single_regime=single)


def fit_gamma(sizes: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope through the origin of overhead time against B*s*h."""
    x = np.asarray(sizes, dtype=np.float64)
    y = np.asarray(times, dtype=np.float64)
    if x.size < 2 or x.shape != y.shape:
        raise FitError("fit_gamma needs at least 2 (size, time) points of equal length")
    return _slope_through_origin(x, y)


def read_measurements(path: Union[str, Path]) -> pd.DataFrame:
    """Load a measurement CSV with columns kind, size, time."""
    try:
        frame = pd.read_csv(path, comment="#")
    except (OSError, pd.errors.ParserError) as exc:
        raise FitError(f"Cannot read measurements from {path}: {exc}") from exc
    return validate_measurements(frame)


def validate_measurements(frame: pd.DataFrame) -> pd.DataFrame:
    missing = {"kind", "size", "time"} - set(frame.columns)
    if missing:
        raise FitError(f"Measurement table lacks columns {sorted(missing)}")
    frame = frame.copy()
    frame["kind"] = frame["kind"].astype(str).str.strip()
    unknown = set(frame["kind"]) - set(MEASUREMENT_KINDS)
    if unknown:
        raise FitError(f"Unknown measurement kinds {sorted(unknown)}")
    frame["size"] = pd.to_numeric(frame["size"], errors="coerce")
    frame["time"] = pd.to_numeric(frame["time"], errors="coerce")
    if frame[["size", "time"]].isna().any().any():
        raise FitError("Measurement sizes and times must be numeric")
    return frame


def fit_coefficients(frame: pd.DataFrame, base: CostCoefficients,
                     source: str = "measurements") -> CostCoefficients:
    """
    Refit alpha, beta/c/d and gamma from a measurement table.

    Kinds with no rows keep the value from ``base``; so does beta after a
    constant-only communication fit.
    """
    frame = validate_measurements(frame)
    updates: Dict[str, float] = {}
    notes = list(base.provenance)

    comp = frame[frame["kind"] == "comp"]
    if len(comp):
        updates["alpha"] = fit_alpha(list(zip(comp["size"], comp["time"])))
        notes.append(f"alpha fitted from {len(comp)} comp rows of {source} (largest-FLOPs rule)")

    comm = frame[frame["kind"] == "comm"]
    if len(comm):
        fit = fit_comm_piecewise(comm["size"].to_numpy(), comm["time"].to_numpy())
        if fit.c is not None:
            updates["c"] = fit.c
        if fit.beta is not None:
            updates["beta"] = fit.beta
        if fit.d is not None:
            updates["d"] = fit.d
        notes.append(f"beta/c/d fitted from {len(comm)} comm rows of {source}"
                     + (" (single regime)" if fit.single_regime else ""))

    overhead = frame[frame["kind"] == "overhead"]
    if len(overhead):
        updates["gamma"] = fit_gamma(overhead["size"].to_numpy(), overhead["time"].to_numpy())
        notes.append(f"gamma fitted from {len(overhead)} overhead rows of {source}")

    logger.info("Refitted coefficients: %s", sorted(updates))
    return replace(base, **updates, provenance=tuple(notes))
