"""
Dense tensors, deterministic arithmetic and the singular-spectrum analysis.

Everything here is pure: tensors are immutable once built and every function
returns new objects, so calls can be shared freely between threads.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from utils.errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}
MAX_SPECTRUM_DIM = 2048

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 30

_MASK64 = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB


def _precision_name(dtype: np.dtype) -> str:
    for name, kind in PRECISIONS.items():
        if np.dtype(kind) == np.dtype(dtype):
            return name
    raise ParameterError(f"Unsupported scalar precision: {dtype}")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense row-major real array (32- or 64-bit)."""

    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, copy=True)
        if array.dtype not in (np.float32, np.float64):
            raise ParameterError(f"Tensor precision must be float32 or float64, got {array.dtype}")
        if array.ndim == 0 or any(extent <= 0 for extent in array.shape):
            raise DimensionError(f"Tensor extents must be positive, got {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ParameterError("Tensor values must be finite")
        array = np.ascontiguousarray(array)
        array.flags.writeable = False
        object.__setattr__(self, "data", array)

    @classmethod
    def from_values(cls, values: Iterable[float], shape: Sequence[int],
                    precision: str = "float32") -> "Tensor":
        """Build a tensor from flat row-major values and an explicit shape."""
        flat = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                          dtype=PRECISIONS[precision]).reshape(-1)
        shape = tuple(int(extent) for extent in shape)
        if int(np.prod(shape)) != flat.size:
            raise DimensionError(f"{flat.size} values do not fill shape {shape}")
        return cls(flat.reshape(shape))

    @classmethod
    def zeros(cls, shape: Sequence[int], precision: str = "float32") -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=PRECISIONS[precision]))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def precision(self) -> str:
        return _precision_name(self.data.dtype)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self.data.reshape(tuple(shape)))

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data.astype(PRECISIONS[precision]))

    def equals(self, other: "Tensor") -> bool:
        """Exact (bitwise value) equality, including shape and precision."""
        return (self.shape == other.shape and self.precision == other.precision
                and bool(np.array_equal(self.data, other.data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision})"


@dataclass(frozen=True, eq=False)
class SpectrumCurve:
    """Sorted singular values and their cumulative mass fraction per rank."""

    singular_values: np.ndarray
    cumulative_mass: np.ndarray

    def mass_at(self, rank: int) -> float:
        """Fraction of the total singular-value mass held by the top ``rank`` values."""
        if rank < 1 or rank > len(self.singular_values):
            raise ParameterError(f"rank {rank} outside 1..{len(self.singular_values)}")
        return float(self.cumulative_mass[rank - 1])

    def to_dict(self) -> dict:
        return {
            "singular_values": [float(v) for v in self.singular_values],
            "cumulative_mass": [float(v) for v in self.cumulative_mass],
        }


class SplitMix64:
    """
    Counter-based SplitMix64 generator.

    The i-th output (i = 1, 2, ...) is ``mix(seed + i * 0x9E3779B97F4A7C15 mod 2**64)``
    with the standard SplitMix64 finaliser:

        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        z = z ^ (z >> 31)

    Uniform doubles are ``(z >> 11) * 2**-53`` in [0, 1). Gaussians use
    Box-Muller on consecutive pairs (u1 from ``((z >> 11) + 1) * 2**-53`` so it is
    never zero), emitting ``r*cos`` then ``r*sin``. The sequence only depends on
    integer arithmetic, so it is identical on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_uint64(self, count: int) -> np.ndarray:
        steps = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        z = steps * np.uint64(SPLITMIX_GAMMA) + np.uint64(self.seed)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_MUL2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, count: int) -> np.ndarray:
        bits = self.next_uint64(count) >> np.uint64(11)
        return bits.astype(np.float64) * (2.0 ** -53)

    def normal(self, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        bits = self.next_uint64(2 * pairs) >> np.uint64(11)
        u1 = (bits[0::2].astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = bits[1::2].astype(np.float64) * (2.0 ** -53)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:count]


def derive_seed(base: int, *keys: int) -> int:
    """Mix extra integer keys into a seed (one SplitMix64 finaliser round per key)."""
    z = int(base) & _MASK64
    for key in keys:
        z = (z + SPLITMIX_GAMMA + (int(key) & _MASK64)) & _MASK64
        z = ((z ^ (z >> 30)) * SPLITMIX_MUL1) & _MASK64
        z = ((z ^ (z >> 27)) * SPLITMIX_MUL2) & _MASK64
        z = z ^ (z >> 31)
    return z


def random_tensor(shape: Sequence[int], seed: int, dist: str = "gaussian",
                  precision: str = "float32") -> Tensor:
    """
    Seeded random tensor.

    Args:
        shape: Positive extents.
        seed: 64-bit seed for :class:`SplitMix64`.
        dist: ``uniform`` on [0, 1) or standard ``gaussian``.
        precision: ``float32`` or ``float64``.

    Returns:
        Tensor filled in row-major order from a fresh generator.
    """
    shape = tuple(int(extent) for extent in shape)
    if not shape or any(extent <= 0 for extent in shape):
        raise DimensionError(f"Invalid shape {shape}")
    count = int(np.prod(shape))
    generator = SplitMix64(seed)
    if dist == "uniform":
        values = generator.uniform(count)
    elif dist == "gaussian":
        values = generator.normal(count)
    else:
        raise ParameterError(f"Unknown distribution: {dist}")
    return Tensor(values.astype(PRECISIONS[precision]).reshape(shape))


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Deterministic 2-D matrix product on raw arrays.

    The reduction index is the outermost loop and every output element is
    accumulated as ``((0 + a0*b0) + a1*b1) + ...``, i.e. the same order as a
    k-innermost triple loop, so results are bit-reproducible.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"gemm expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"Inner dimensions differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for p in range(a.shape[1]):
        out += a[:, p:p + 1].astype(dtype, copy=False) * b[p:p + 1, :].astype(dtype, copy=False)
    return out


def batched_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``gemm`` over the last two axes, broadcasting the leading (batch) axes."""
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"Inner dimensions differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.zeros(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1]),
                   dtype=dtype)
    for p in range(a.shape[-1]):
        out += a[..., :, p:p + 1].astype(dtype, copy=False) * b[..., p:p + 1, :].astype(dtype, copy=False)
    return out


def linear(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Apply ``gemm`` over the last axis of an array with arbitrary leading axes."""
    rows = x.reshape(-1, x.shape[-1])
    return gemm(rows, weight).reshape(x.shape[:-1] + (weight.shape[1],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of two 2-D tensors.

    Args:
        a: Tensor of shape m x k.
        b: Tensor of shape k x n.

    Returns:
        Tensor of shape m x n (64-bit if either operand is 64-bit).
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise DimensionError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    return Tensor(gemm(a.data, b.data))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=-1, keepdims=True)


def rowwise_softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of an m x n tensor."""
    if len(x.shape) != 2:
        raise DimensionError(f"rowwise_softmax expects a 2-D tensor, got {x.shape}")
    return Tensor(softmax_rows(x.data))


def _round_robin_pairs(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n padded to even) of disjoint column pairs."""
    players = list(range(n + (n % 2)))
    rounds = []
    for _ in range(len(players) - 1):
        half = len(players) // 2
        left, right = [], []
        for i in range(half):
            p, q = players[i], players[-1 - i]
            if p < n and q < n:
                left.append(min(p, q))
                right.append(max(p, q))
        rounds.append((np.array(left, dtype=np.int64), np.array(right, dtype=np.int64)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _one_sided_jacobi(columns: np.ndarray) -> np.ndarray:
    """Hestenes one-sided Jacobi; returns the column norms of the orthogonalised matrix."""
    work = columns.astype(np.float64, copy=True)
    n = work.shape[1]
    total = float(np.sum(work * work))
    if n == 1 or total == 0.0:
        return np.sqrt(np.sum(work * work, axis=0))

    schedule = _round_robin_pairs(n)
    for sweep in range(JACOBI_MAX_SWEEPS):
        off_mass = 0.0
        for left, right in schedule:
            if left.size == 0:
                continue
            a_p = work[:, left]
            a_q = work[:, right]
            alpha = np.sum(a_p * a_p, axis=0)
            beta = np.sum(a_q * a_q, axis=0)
            gamma = np.sum(a_p * a_q, axis=0)
            off_mass += 2.0 * float(np.sum(gamma * gamma))

            active = gamma != 0.0
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)

            work[:, left] = c * a_p - s * a_q
            work[:, right] = s * a_p + c * a_q

        if math.sqrt(off_mass) < JACOBI_TOLERANCE * total:
            logger.debug("Jacobi converged after %d sweeps", sweep + 1)
            break
    else:
        logger.warning("Jacobi stopped after %d sweeps without reaching tolerance", JACOBI_MAX_SWEEPS)

    return np.sqrt(np.sum(work * work, axis=0))


def singular_spectrum(x: Tensor) -> SpectrumCurve:
    """
    Singular values of a matrix and their cumulative mass curve.

    The one-sided Jacobi iteration runs on the orientation with fewer columns,
    i.e. it implicitly diagonalises the smaller Gram matrix. A zero matrix
    yields all-zero singular values and, by convention, a cumulative mass of
    all ones.

    Args:
        x: m x n tensor with m, n <= 2048.

    Returns:
        SpectrumCurve with non-increasing singular values.
    """
    if len(x.shape) != 2:
        raise DimensionError(f"singular_spectrum expects a 2-D tensor, got {x.shape}")
    m, n = x.shape
    if m > MAX_SPECTRUM_DIM or n > MAX_SPECTRUM_DIM:
        raise DimensionError(f"Matrix {x.shape} exceeds desk-scale limit {MAX_SPECTRUM_DIM}")

    columns = x.data if n <= m else x.data.T
    sigma = np.sort(_one_sided_jacobi(columns))[::-1]

    total = float(np.sum(sigma))
    if total == 0.0:
        cumulative = np.ones_like(sigma)
    else:
        cumulative = np.minimum(np.maximum.accumulate(np.cumsum(sigma) / total), 1.0)
        cumulative[-1] = 1.0
    return SpectrumCurve(singular_values=sigma, cumulative_mass=cumulative)
