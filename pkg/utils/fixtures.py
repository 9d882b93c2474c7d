"""
Binary tensor fixtures.

Tensor record (little-endian)::

    rank        u64
    extents     u64 x rank
    values      f32 x product(extents), row-major

Autoencoder parameter file::

    version u64 (= 1) | h u64 | c u64 | tensor record W_e (h x c) | tensor record W_d (c x h)

Values are always stored as 32-bit reals; 64-bit tensors are narrowed on write.
"""

import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from utils.autoencoder import AeParams
from utils.errors import FixtureError
from utils.tensor_core import Tensor

logger = logging.getLogger(__name__)

AE_FILE_VERSION = 1
PathLike = Union[str, Path]


def tensor_to_bytes(tensor: Tensor) -> bytes:
    header = np.array([len(tensor.shape), *tensor.shape], dtype="<u8").tobytes()
    return header + tensor.data.astype("<f4").tobytes()


def tensor_from_bytes(buffer: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """
    Decode one tensor record.

    Args:
        buffer: Raw bytes.
        offset: Position of the record's rank field.

    Returns:
        Tuple of (tensor, offset just past the record).
    """
    try:
        rank = int(np.frombuffer(buffer, dtype="<u8", count=1, offset=offset)[0])
        if rank == 0 or rank > 8:
            raise FixtureError(f"Implausible tensor rank {rank} at offset {offset}")
        offset += 8
        shape = tuple(int(v) for v in np.frombuffer(buffer, dtype="<u8", count=rank, offset=offset))
        offset += 8 * rank
        count = int(np.prod(shape))
        values = np.frombuffer(buffer, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
    except ValueError as exc:
        if isinstance(exc, FixtureError):
            raise
        raise FixtureError(f"Truncated tensor record: {exc}") from exc
    return Tensor(values.astype(np.float32).reshape(shape)), offset


def write_tensor(path: PathLike, tensor: Tensor) -> None:
    Path(path).write_bytes(tensor_to_bytes(tensor))
    logger.info("Wrote tensor %s to %s", tensor.shape, path)


def read_tensor(path: PathLike) -> Tensor:
    buffer = Path(path).read_bytes()
    tensor, end = tensor_from_bytes(buffer)
    if end != len(buffer):
        raise FixtureError(f"{path}: {len(buffer) - end} trailing bytes after tensor record")
    return tensor


def save_ae_params(path: PathLike, params: AeParams) -> None:
    header = np.array([AE_FILE_VERSION, params.h, params.c], dtype="<u8").tobytes()
    Path(path).write_bytes(header + tensor_to_bytes(params.encoder) + tensor_to_bytes(params.decoder))
    logger.info("Saved autoencoder (h=%d, c=%d) to %s", params.h, params.c, path)


def load_ae_params(path: PathLike) -> AeParams:
    buffer = Path(path).read_bytes()
    if len(buffer) < 24:
        raise FixtureError(f"{path}: file too short for an autoencoder header")
    version, h, c = (int(v) for v in np.frombuffer(buffer, dtype="<u8", count=3))
    if version != AE_FILE_VERSION:
        raise FixtureError(f"{path}: unsupported autoencoder file version {version}")
    encoder, offset = tensor_from_bytes(buffer, 24)
    decoder, offset = tensor_from_bytes(buffer, offset)
    if offset != len(buffer):
        raise FixtureError(f"{path}: trailing bytes after autoencoder parameters")
    params = AeParams(encoder=encoder, decoder=decoder)
    if (params.h, params.c) != (h, c):
        raise FixtureError(f"{path}: header says h={h}, c={c} but tensors are {encoder.shape}")
    return params
