import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import DimensionError, ParameterError, TrainingError
from utils.messages import CodePayload, CompressedMessage
from utils.tensor_core import PRECISIONS, SplitMix64, Tensor, gemm, linear

logger = logging.getLogger(__name__)

DEFAULT_HYPER = {"lr": 1e-2, "epochs": 200, "seed": 0}
MIN_LEARNING_RATE = 1e-12


@dataclass(frozen=True, eq=False)
class AeParams:
    """Linear encoder W_e (h x c) and decoder W_d (c x h) for one layer."""

    encoder: Tensor
    decoder: Tensor

    def __post_init__(self):
        if len(self.encoder.shape) != 2 or len(self.decoder.shape) != 2:
            raise DimensionError("Encoder and decoder must be matrices")
        h, c = self.encoder.shape
        if self.decoder.shape != (c, h):
            raise DimensionError(f"Decoder shape {self.decoder.shape} does not mirror encoder {self.encoder.shape}")
        if c > h:
            raise ParameterError(f"Code dimension {c} exceeds hidden size {h}")

    @property
    def h(self) -> int:
        return self.encoder.shape[0]

    @property
    def c(self) -> int:
        return self.encoder.shape[1]

    @classmethod
    def xavier(cls, h: int, c: int, seed: int, precision: str = "float32") -> "AeParams":
        """Xavier-uniform initialisation, encoder drawn before decoder from one stream."""
        limit = math.sqrt(6.0 / (h + c))
        generator = SplitMix64(seed)
        encoder = (2.0 * generator.uniform(h * c) - 1.0) * limit
        decoder = (2.0 * generator.uniform(c * h) - 1.0) * limit
        dtype = PRECISIONS[precision]
        return cls(Tensor(encoder.reshape(h, c).astype(dtype)),
                   Tensor(decoder.reshape(c, h).astype(dtype)))


def ae_compress(x: Tensor, params: AeParams) -> CompressedMessage:
    """Encode an activation (... x h) to its code (... x c)."""
    if x.shape[-1] != params.h:
        raise DimensionError(f"Activation last dim {x.shape[-1]} != encoder input {params.h}")
    code = linear(x.data, params.encoder.data).astype(x.data.dtype, copy=False)
    return CompressedMessage(payload=CodePayload(values=code, code_dim=params.c),
                             original_shape=x.shape, precision=x.precision)


def ae_decompress(msg: CompressedMessage, params: AeParams) -> Tensor:
    """Decode a code message back to ... x h."""
    payload = msg.payload
    if not isinstance(payload, CodePayload):
        raise ParameterError(f"Expected a code message, got {msg.kind}")
    if payload.code_dim != params.c or msg.original_shape[-1] != params.h:
        raise DimensionError(
            f"Code dim {payload.code_dim} / hidden {msg.original_shape[-1]} do not match params ({params.c}, {params.h})"
        )
    decoded = linear(payload.values, params.decoder.data)
    return Tensor(decoded.astype(PRECISIONS[msg.precision]).reshape(msg.original_shape))


def ae_loss_and_grad(tokens: np.ndarray, encoder: np.ndarray,
                     decoder: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Reconstruction loss and its closed-form gradients.

    loss = (1/N) * ||X - X W_e W_d||_F^2 over N token rows, so

        dL/dW_d = -(2/N) (X W_e)^T R
        dL/dW_e = -(2/N) X^T (R W_d^T)

    Args:
        tokens: N x h sample matrix.
        encoder: h x c matrix.
        decoder: c x h matrix.

    Returns:
        Tuple of (loss, gradient wrt encoder, gradient wrt decoder).
    """
    n = tokens.shape[0]
    code = gemm(tokens, encoder)
    residual = tokens - gemm(code, decoder)
    loss = float(np.sum(residual * residual)) / n
    grad_decoder = -(2.0 / n) * gemm(code.T, residual)
    grad_encoder = -(2.0 / n) * gemm(tokens.T, gemm(residual, decoder.T))
    return loss, grad_encoder, grad_decoder


class AutoencoderTrainer:
    """Fits linear autoencoders by full-batch gradient descent."""

    def __init__(self, lr: float = 1e-2, epochs: int = 200, seed: int = 0):
        if lr <= 0 or epochs < 0:
            raise ParameterError("Learning rate must be positive and epochs non-negative")
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.loss_history: List[float] = []
        self.final_mse: Optional[float] = None
        self.second_moment: Optional[float] = None

    def fit(self, samples: Sequence[Tensor], code_dim: int) -> AeParams:
        """
        Train encoder/decoder on captured activations.

        Steps that would increase the loss are rejected and the learning rate
        halved, so ``loss_history`` never increases.

        Args:
            samples: Activations of shape ... x h (all with the same h).
            code_dim: Code dimension c <= h.

        Returns:
            Trained AeParams at the samples' precision.
        """
        if not samples:
            raise ParameterError("ae_fit needs at least one sample")
        hidden = samples[0].shape[-1]
        if any(sample.shape[-1] != hidden for sample in samples):
            raise DimensionError("All samples must share the same hidden size")
        if code_dim < 1 or code_dim > hidden:
            raise ParameterError(f"code_dim must be in 1..{hidden}, got {code_dim}")

        precision = samples[0].precision
        tokens = np.concatenate([s.data.reshape(-1, hidden).astype(np.float64) for s in samples])
        self.second_moment = float(np.mean(tokens * tokens))

        init = AeParams.xavier(hidden, code_dim, self.seed, precision="float64")
        encoder, decoder = init.encoder.data.copy(), init.decoder.data.copy()

        lr = self.lr
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad_e, grad_d = ae_loss_and_grad(tokens, encoder, decoder)
            self.loss_history = [loss]
            for epoch in range(1, self.epochs + 1):
                if loss == 0.0 or lr < MIN_LEARNING_RATE:
                    break
                cand_e = encoder - lr * grad_e
                cand_d = decoder - lr * grad_d
                cand_loss, cand_grad_e, cand_grad_d = ae_loss_and_grad(tokens, cand_e, cand_d)
                if not math.isfinite(cand_loss):
                    raise TrainingError("Autoencoder training diverged: loss is not finite", epoch)
                if cand_loss > loss:
                    lr *= 0.5
                    logger.debug("Epoch %d: loss rose to %.6g, halving lr to %.3g", epoch, cand_loss, lr)
                else:
                    encoder, decoder = cand_e, cand_d
                    loss, grad_e, grad_d = cand_loss, cand_grad_e, cand_grad_d
                self.loss_history.append(loss)

        self.final_mse = loss / hidden
        logger.info("Autoencoder h=%d c=%d: final MSE %.6g (second moment %.6g)",
                    hidden, code_dim, self.final_mse, self.second_moment)
        dtype = PRECISIONS[precision]
        return AeParams(Tensor(encoder.astype(dtype)), Tensor(decoder.astype(dtype)))


@dataclass(frozen=True, eq=False)
class AeFit:
    """Trained parameters with the per-element MSE they reached."""

    params: AeParams
    final_mse: float
    second_moment: float
    epochs_run: int


def ae_fit(samples: Sequence[Tensor], code_dim: int, hyper: Optional[Dict] = None) -> AeFit:
    """Functional wrapper around :class:`AutoencoderTrainer`."""
    settings = {**DEFAULT_HYPER, **(hyper or {})}
    trainer = AutoencoderTrainer(lr=settings["lr"], epochs=settings["epochs"], seed=settings["seed"])
    params = trainer.fit(samples, code_dim)
    return AeFit(params, trainer.final_mse, trainer.second_moment, len(trainer.loss_history) - 1)
