"""
Activation compressors: Top-K, Random-K, min-max quantization, the linear
autoencoder codec, error feedback, and the k-matching rules used to compare
sparsifiers against an autoencoder.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from utils.autoencoder import AeParams, ae_compress, ae_decompress
from utils.errors import ParameterError, StateError
from utils.messages import (QUANT_BITS, CodePayload, CompressedMessage, CompressorSpec,
                            DensePayload, QuantizedPayload, SparsePayload)
from utils.tensor_core import PRECISIONS, SplitMix64, Tensor

logger = logging.getLogger(__name__)

MATCH_MODES = ("same_cost", "same_ratio")


def _check_k(k: int, numel: int) -> None:
    if not 1 <= k <= numel:
        raise ParameterError(f"k must be in 1..{numel}, got {k}")


def _sparse(x: Tensor, indices: np.ndarray) -> CompressedMessage:
    indices = np.sort(indices).astype(np.int64)
    return CompressedMessage(
        payload=SparsePayload(values=x.flat()[indices].copy(), indices=indices),
        original_shape=x.shape,
        precision=x.precision,
    )


def topk_compress(x: Tensor, k: int) -> CompressedMessage:
    """
    Keep the k entries of largest magnitude.

    Ties are broken towards the lower flat index; transmitted indices are
    sorted ascending.
    """
    _check_k(k, x.numel)
    order = np.argsort(-np.abs(x.flat()), kind="stable")
    return _sparse(x, order[:k])


def randk_compress(x: Tensor, k: int, seed: int) -> CompressedMessage:
    """
    Keep k entries drawn uniformly without replacement.

    Every flat position gets a SplitMix64 uniform key from ``seed``; the k
    smallest keys (stable order) are the sample.
    """
    _check_k(k, x.numel)
    keys = SplitMix64(seed).uniform(x.numel)
    order = np.argsort(keys, kind="stable")
    return _sparse(x, order[:k])


def quant_compress(x: Tensor, bits: int, group_len: Optional[int] = None) -> CompressedMessage:
    """
    Per-group uniform min-max quantization.

    Args:
        x: Activation; groups are contiguous runs of ``group_len`` along the
            flattened array, and ``group_len`` must divide the last extent.
        bits: 2, 4 or 8.
        group_len: Defaults to the last extent (one group per row).

    Returns:
        Quantized message with one (scale, zero) pair per group.
    """
    if bits not in QUANT_BITS:
        raise ParameterError(f"bits must be one of {QUANT_BITS}, got {bits}")
    group_len = group_len or x.shape[-1]
    if group_len < 1 or x.shape[-1] % group_len != 0:
        raise ParameterError(f"group_len {group_len} does not divide last extent {x.shape[-1]}")

    levels = (1 << bits) - 1
    groups = x.flat().astype(np.float64).reshape(-1, group_len)
    low = groups.min(axis=1)
    high = groups.max(axis=1)
    scales = (high - low) / levels

    safe = np.where(scales > 0.0, scales, 1.0)
    # values are non-negative here, so floor(v + 0.5) rounds half away from zero
    codes = np.floor((groups - low[:, None]) / safe[:, None] + 0.5)
    codes = np.where(scales[:, None] > 0.0, codes, 0.0)
    codes = np.clip(codes, 0, levels).astype(np.uint8)

    return CompressedMessage(
        payload=QuantizedPayload(codes=codes.reshape(-1), scales=scales, zeros=low,
                                 bits=bits, group_len=group_len),
        original_shape=x.shape,
        precision=x.precision,
    )


def dequantize(msg: CompressedMessage) -> Tensor:
    payload = msg.payload
    groups = payload.codes.astype(np.float64).reshape(-1, payload.group_len)
    values = payload.zeros[:, None] + groups * payload.scales[:, None]
    return Tensor(values.reshape(msg.original_shape).astype(PRECISIONS[msg.precision]))


def sparse_decompress(msg: CompressedMessage) -> Tensor:
    payload = msg.payload
    flat = np.zeros(msg.numel, dtype=PRECISIONS[msg.precision])
    flat[payload.indices] = payload.values
    return Tensor(flat.reshape(msg.original_shape))


def compress(x: Tensor, spec: CompressorSpec, ae_params: Optional[AeParams] = None,
             seed: Optional[int] = None) -> CompressedMessage:
    """
    Compress an activation according to a spec.

    Args:
        x: Activation of shape ... x h.
        spec: Compressor description (``k`` is per token).
        ae_params: Required for ``ae``.
        seed: Overrides ``spec.seed`` for Random-K.

    Returns:
        The compressed message.
    """
    if spec.kind == "identity":
        return CompressedMessage(payload=DensePayload(values=x.data.copy()),
                                 original_shape=x.shape, precision=x.precision)
    if spec.kind == "topk":
        return topk_compress(x, spec.total_k(x.numel, x.shape[-1]))
    if spec.kind == "randk":
        return randk_compress(x, spec.total_k(x.numel, x.shape[-1]),
                              spec.seed if seed is None else seed)
    if spec.kind == "quant":
        return quant_compress(x, spec.bits, spec.group_len)
    if ae_params is None:
        raise ParameterError("ae compression needs trained AeParams")
    if ae_params.c != spec.code_dim:
        raise ParameterError(f"AeParams code dim {ae_params.c} != spec code_dim {spec.code_dim}")
    return ae_compress(x, ae_params)


def decompress(msg: CompressedMessage, ae_params: Optional[AeParams] = None) -> Tensor:
    """Rebuild the activation from any message kind."""
    payload = msg.payload
    if isinstance(payload, SparsePayload):
        return sparse_decompress(msg)
    if isinstance(payload, QuantizedPayload):
        return dequantize(msg)
    if isinstance(payload, CodePayload):
        if ae_params is None:
            raise ParameterError("Decoding a code message needs AeParams")
        return ae_decompress(msg, ae_params)
    return Tensor(payload.values.reshape(msg.original_shape))


@dataclass(frozen=True, eq=False)
class ErrorFeedbackState:
    """Residual carried between consecutive compressions at one site."""

    residual: Tensor

    @classmethod
    def zeros(cls, shape, precision: str = "float32") -> "ErrorFeedbackState":
        return cls(Tensor.zeros(shape, precision))


def error_feedback_step(state: ErrorFeedbackState, x: Tensor, inner: CompressorSpec,
                        ae_params: Optional[AeParams] = None,
                        seed: Optional[int] = None) -> Tuple[CompressedMessage, ErrorFeedbackState]:
    """
    Compress ``x`` plus the carried residual and return the new residual.

    Returns:
        Tuple of (message, new state); the input state is left untouched.
    """
    if state.residual.shape != x.shape:
        raise StateError(f"Error-feedback state {state.residual.shape} does not match activation {x.shape}")
    corrected = Tensor((x.data + state.residual.data).astype(x.data.dtype, copy=False))
    msg = compress(corrected, inner, ae_params=ae_params, seed=seed)
    restored = decompress(msg, ae_params)
    residual = (corrected.data - restored.data).astype(x.data.dtype, copy=False)
    return msg, ErrorFeedbackState(Tensor(residual))


def matched_k(mode: str, hidden: int, code_dim: int, value_bytes: int = 2, index_bytes: int = 4) -> int:
    """
    Per-token k that makes a sparsifier comparable to an AE of code size c.

    ``same_cost``: largest k with k*(value_bytes+index_bytes) <= c*value_bytes
    (index bytes counted). ``same_ratio``: k = c, the same share of kept elements.
    """
    if mode not in MATCH_MODES:
        raise ParameterError(f"mode must be one of {MATCH_MODES}")
    if code_dim > hidden:
        raise ParameterError(f"code_dim {code_dim} exceeds hidden size {hidden}")
    if mode == "same_cost":
        k = (code_dim * value_bytes) // (value_bytes + index_bytes)
    else:
        k = code_dim
    if k < 1:
        raise ParameterError(f"Matched k is {k} for mode={mode}, c={code_dim}")
    logger.debug("matched_k(%s, h=%d, c=%d) = %d", mode, hidden, code_dim, k)
    return k
