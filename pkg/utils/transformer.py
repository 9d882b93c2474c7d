"""
Pre-norm transformer encoder layer, written so its two GEMM blocks can be
split across tensor-parallel workers.

Attention is split by head (the Q/K/V columns of a worker's heads, then the
matching rows of the output projection); the MLP is split column-wise in the
first GEMM and row-wise in the second. Each worker produces a full-size
partial output and a reduction callback combines them.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from utils.errors import DimensionError, PlanError
from utils.tensor_core import (PRECISIONS, SplitMix64, Tensor, batched_gemm, derive_seed,
                               linear, softmax_rows)

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02

# (site, partial outputs, one per worker) -> combined output
Reducer = Callable[[str, List[np.ndarray]], np.ndarray]


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """Weights of one encoder layer; linear maps carry no bias."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    qkv: Tensor
    attn_out: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_in: Tensor
    mlp_out: Tensor

    def __post_init__(self):
        h = self.hidden
        expected = {
            "ln1_gain": (h,), "ln1_bias": (h,), "qkv": (h, 3 * h), "attn_out": (h, h),
            "ln2_gain": (h,), "ln2_bias": (h,), "mlp_in": (h, 4 * h), "mlp_out": (4 * h, h),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def hidden(self) -> int:
        return self.ln1_gain.shape[0]

    @classmethod
    def random(cls, hidden: int, seed: int, precision: str = "float32") -> "LayerWeights":
        """Gaussian(0, 0.02) matrices, unit layer-norm gains, zero biases."""
        dtype = PRECISIONS[precision]

        def draw(index: int, rows: int, cols: int) -> Tensor:
            values = SplitMix64(derive_seed(seed, index)).normal(rows * cols) * INIT_STD
            return Tensor(values.reshape(rows, cols).astype(dtype))

        ones = Tensor(np.ones(hidden, dtype=dtype))
        zeros = Tensor(np.zeros(hidden, dtype=dtype))
        return cls(
            ln1_gain=ones, ln1_bias=zeros,
            qkv=draw(0, hidden, 3 * hidden), attn_out=draw(1, hidden, hidden),
            ln2_gain=ones, ln2_bias=zeros,
            mlp_in=draw(2, hidden, 4 * hidden), mlp_out=draw(3, 4 * hidden, hidden),
        )

    @classmethod
    def zeros(cls, hidden: int, precision: str = "float32") -> "LayerWeights":
        """All-zero weights including layer-norm gains: the layer reduces to its residual path."""
        dtype = PRECISIONS[precision]

        def zero(*shape) -> Tensor:
            return Tensor(np.zeros(shape, dtype=dtype))

        return cls(
            ln1_gain=zero(hidden), ln1_bias=zero(hidden),
            qkv=zero(hidden, 3 * hidden), attn_out=zero(hidden, hidden),
            ln2_gain=zero(hidden), ln2_bias=zero(hidden),
            mlp_in=zero(hidden, 4 * hidden), mlp_out=zero(4 * hidden, hidden),
        )


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + LAYER_NORM_EPS) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


def check_split(hidden: int, heads: int, tp: int) -> None:
    if heads < 1 or hidden % heads != 0:
        raise DimensionError(f"heads={heads} must divide hidden size {hidden}")
    if tp < 1 or heads % tp != 0 or hidden % tp != 0:
        raise PlanError(f"tp={tp} must divide heads={heads}, h={hidden}, 3h and 4h")


def attention_partial(xn: np.ndarray, weights: LayerWeights, heads: int,
                      worker: int, tp: int) -> np.ndarray:
    """
    One worker's contribution to the attention block output.

    Args:
        xn: Normalised input, B x s x h.
        weights: Layer weights.
        heads: Total head count.
        worker: Worker rank in 0..tp-1.
        tp: Tensor-parallel degree.

    Returns:
        B x s x h partial; the sum over workers is the attention output.
    """
    h = weights.hidden
    head_dim = h // heads
    local = heads // tp
    lo, hi = worker * local * head_dim, (worker + 1) * local * head_dim
    qkv = weights.qkv.data
    q = linear(xn, qkv[:, lo:hi])
    k = linear(xn, qkv[:, h + lo:h + hi])
    v = linear(xn, qkv[:, 2 * h + lo:2 * h + hi])

    batch, seq = xn.shape[0], xn.shape[1]

    def split_heads(t: np.ndarray) -> np.ndarray:
        return t.reshape(batch, seq, local, head_dim).transpose(0, 2, 1, 3)

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = batched_gemm(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    probs = softmax_rows(scores).astype(xn.dtype, copy=False)
    context = batched_gemm(probs, v).transpose(0, 2, 1, 3).reshape(batch, seq, hi - lo)
    return linear(context, weights.attn_out.data[lo:hi, :])


def mlp_partial(xn: np.ndarray, weights: LayerWeights, worker: int, tp: int) -> np.ndarray:
    """Column-split first GEMM, GELU, row-split second GEMM for one worker."""
    width = 4 * weights.hidden // tp
    lo, hi = worker * width, (worker + 1) * width
    inner = gelu(linear(xn, weights.mlp_in.data[:, lo:hi]))
    return linear(inner, weights.mlp_out.data[lo:hi, :])


def sum_partials(partials: List[np.ndarray]) -> np.ndarray:
    """All-reduce semantics: ordered sum over workers."""
    total = partials[0]
    for partial in partials[1:]:
        total = total + partial
    return total


def split_layer_forward(x: np.ndarray, weights: LayerWeights, heads: int, tp: int,
                        reduce: Reducer) -> np.ndarray:
    """
    Layer forward with both GEMM blocks split across ``tp`` workers.

    ``reduce`` is called once with site ``attn`` and once with site ``mlp``.
    """
    if x.ndim != 3 or x.shape[-1] != weights.hidden:
        raise DimensionError(f"Expected B x s x {weights.hidden} input, got {x.shape}")
    check_split(weights.hidden, heads, tp)

    xn = layer_norm(x, weights.ln1_gain.data, weights.ln1_bias.data)
    attn = reduce("attn", [attention_partial(xn, weights, heads, w, tp) for w in range(tp)])
    x = x + attn

    xn = layer_norm(x, weights.ln2_gain.data, weights.ln2_bias.data)
    mlp = reduce("mlp", [mlp_partial(xn, weights, w, tp) for w in range(tp)])
    return x + mlp


def transformer_layer_forward(x: Tensor, weights: LayerWeights, heads: int) -> Tensor:
    """Monolithic pre-norm layer: x + Attn(LN(x)), then + MLP(LN(.))."""
    out = split_layer_forward(x.data, weights, heads, 1, lambda site, partials: sum_partials(partials))
    return Tensor(out.astype(x.data.dtype, copy=False))
