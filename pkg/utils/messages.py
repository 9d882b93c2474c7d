"""
Compressor descriptions, compressed message payloads and their byte accounting.

Wire format of one message (little-endian)::

    tag        u8      0 dense, 1 sparse, 2 quantized, 3 code
    rank       u8
    extents    u64 x rank   (original activation shape)
    aux        u64     k (sparse), c (code), group_len (quantized), 0 (dense)
    bits       u8      quantization bits, 0 otherwise
    payload    see payload_bytes()

The payload alone is what a collective moves, and its length is exactly
``message_bytes(msg, "forward", spec)``. In memory a message keeps values at
the activation's precision; ``value_bytes`` only sets the wire precision.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from utils.errors import DimensionError, ParameterError

KINDS = ("identity", "topk", "randk", "quant", "ae")
QUANT_BITS = (2, 4, 8)
VALUE_BYTES = (2, 4)
INDEX_BYTES = (4,)
DIRECTIONS = ("forward", "backward")

TAGS = {"dense": 0, "sparse": 1, "quantized": 2, "code": 3}
_WIRE_FLOAT = {2: "<f2", 4: "<f4"}


@dataclass(frozen=True)
class CompressorSpec:
    """
    What a compression site does.

    ``k`` counts kept elements per token (per last-axis row); a site holding T
    tokens keeps ``k * T`` elements with one global selection.
    """

    kind: str
    k: Optional[int] = None
    bits: Optional[int] = None
    group_len: Optional[int] = None
    code_dim: Optional[int] = None
    seed: Optional[int] = None
    value_bytes: int = 2
    index_bytes: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"Unknown compressor kind '{self.kind}'")
        required = {
            "identity": set(),
            "topk": {"k"},
            "randk": {"k", "seed"},
            "quant": {"bits"},
            "ae": {"code_dim"},
        }[self.kind]
        optional = {"group_len"} if self.kind == "quant" else set()
        for name in ("k", "bits", "group_len", "code_dim", "seed"):
            present = getattr(self, name) is not None
            if name in required and not present:
                raise ParameterError(f"{self.kind} compressor requires '{name}'")
            if present and name not in required | optional:
                raise ParameterError(f"'{name}' is not a {self.kind} compressor field")
        if self.k is not None and self.k < 1:
            raise ParameterError(f"k must be positive, got {self.k}")
        if self.bits is not None and self.bits not in QUANT_BITS:
            raise ParameterError(f"bits must be one of {QUANT_BITS}, got {self.bits}")
        if self.group_len is not None and self.group_len < 1:
            raise ParameterError(f"group_len must be positive, got {self.group_len}")
        if self.code_dim is not None and self.code_dim < 1:
            raise ParameterError(f"code_dim must be positive, got {self.code_dim}")
        if self.seed is not None and not 0 <= self.seed < 2 ** 64:
            raise ParameterError("seed must be an unsigned 64-bit integer")
        if self.value_bytes not in VALUE_BYTES:
            raise ParameterError(f"value_bytes must be one of {VALUE_BYTES}")
        if self.index_bytes not in INDEX_BYTES:
            raise ParameterError(f"index_bytes must be one of {INDEX_BYTES}")

    def check_hidden(self, hidden: int) -> None:
        """Validate the size-dependent fields against a hidden size."""
        if self.code_dim is not None and self.code_dim > hidden:
            raise ParameterError(f"code_dim {self.code_dim} exceeds hidden size {hidden}")
        if self.k is not None and self.k > hidden:
            raise ParameterError(f"k={self.k} per token exceeds hidden size {hidden}")
        if self.group_len is not None and hidden % self.group_len != 0:
            raise ParameterError(f"group_len {self.group_len} does not divide {hidden}")

    def total_k(self, numel: int, hidden: int) -> int:
        return self.k * (numel // hidden)


@dataclass(frozen=True, eq=False)
class DensePayload:
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class SparsePayload:
    values: np.ndarray
    indices: np.ndarray


@dataclass(frozen=True, eq=False)
class QuantizedPayload:
    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    bits: int
    group_len: int


@dataclass(frozen=True, eq=False)
class CodePayload:
    values: np.ndarray
    code_dim: int


Payload = Union[DensePayload, SparsePayload, QuantizedPayload, CodePayload]


@dataclass(frozen=True, eq=False)
class CompressedMessage:
    """A tagged payload plus the shape and precision of the activation it encodes."""

    payload: Payload
    original_shape: Tuple[int, ...]
    precision: str

    @property
    def kind(self) -> str:
        return {
            DensePayload: "dense",
            SparsePayload: "sparse",
            QuantizedPayload: "quantized",
            CodePayload: "code",
        }[type(self.payload)]

    @property
    def numel(self) -> int:
        return int(np.prod(self.original_shape))

    def same_as(self, other: "CompressedMessage") -> bool:
        """Field-by-field exact equality."""
        if self.kind != other.kind or self.original_shape != other.original_shape:
            return False
        mine, theirs = self.payload, other.payload
        if isinstance(mine, QuantizedPayload):
            return (mine.bits == theirs.bits and mine.group_len == theirs.group_len
                    and np.array_equal(mine.codes, theirs.codes)
                    and np.array_equal(mine.scales, theirs.scales)
                    and np.array_equal(mine.zeros, theirs.zeros))
        if isinstance(mine, SparsePayload):
            return (np.array_equal(mine.indices, theirs.indices)
                    and np.array_equal(mine.values, theirs.values))
        return bool(np.array_equal(mine.values, theirs.values))


def message_bytes(msg: CompressedMessage, direction: str, spec: CompressorSpec) -> int:
    """
    Exact byte count of a message on the wire.

    Backward messages carry the gradient of the decompressed activation.
    Sparse gradients reuse the forward indices; quantized activations get
    full-size floating-point gradients.

    Args:
        msg: Message produced by a compressor.
        direction: ``forward`` or ``backward``.
        spec: Supplies ``value_bytes`` and ``index_bytes``.

    Returns:
        Payload size in bytes.
    """
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {DIRECTIONS}")
    payload = msg.payload
    vb, ib = spec.value_bytes, spec.index_bytes

    if isinstance(payload, SparsePayload):
        k = int(payload.values.size)
        return k * (vb + ib) if direction == "forward" else k * vb
    if isinstance(payload, QuantizedPayload):
        if direction == "backward":
            return msg.numel * vb
        groups = int(payload.scales.size)
        return math.ceil(msg.numel * payload.bits / 8) + groups * 2 * 4
    if isinstance(payload, CodePayload):
        return int(payload.values.size) * vb
    return msg.numel * vb


def dense_bytes(numel: int, spec: CompressorSpec) -> int:
    """Size of the uncompressed message for ``numel`` elements."""
    return numel * spec.value_bytes


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack unsigned codes little-endian: element i sits at bit (i*bits) % 8 of byte i*bits//8."""
    flat = codes.reshape(-1).astype(np.uint8)
    if bits == 8:
        return flat.tobytes()
    per_byte = 8 // bits
    padded = np.zeros(math.ceil(flat.size / per_byte) * per_byte, dtype=np.uint8)
    padded[:flat.size] = flat
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    packed = np.bitwise_or.reduce(padded.reshape(-1, per_byte) << shifts, axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(buffer: bytes, count: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(buffer, dtype=np.uint8)
    if bits == 8:
        return raw[:count].copy()
    per_byte = 8 // bits
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    mask = np.uint8((1 << bits) - 1)
    return ((raw[:, None] >> shifts) & mask).reshape(-1)[:count]


def _to_wire(values: np.ndarray, wire: str) -> bytes:
    """Cast to the wire float type; values it cannot represent are an error."""
    limit = np.finfo(wire).max
    if values.size and float(np.max(np.abs(values))) > limit:
        raise ParameterError(f"Value magnitude {float(np.max(np.abs(values))):.6g} exceeds the "
                             f"{np.dtype(wire).itemsize}-byte wire limit {float(limit):.6g}")
    return values.astype(wire).tobytes()


def payload_bytes(msg: CompressedMessage, spec: CompressorSpec) -> bytes:
    """
    Serialise the forward payload (no header).

    Raises ParameterError when a value overflows the wire precision.
    """
    wire = _WIRE_FLOAT[spec.value_bytes]
    payload = msg.payload
    if isinstance(payload, SparsePayload):
        return _to_wire(payload.values, wire) + payload.indices.astype("<u4").tobytes()
    if isinstance(payload, QuantizedPayload):
        return (pack_codes(payload.codes, payload.bits)
                + _to_wire(payload.scales, "<f4")
                + _to_wire(payload.zeros, "<f4"))
    return _to_wire(payload.values, wire)


def header_bytes(msg: CompressedMessage) -> bytes:
    payload = msg.payload
    if isinstance(payload, SparsePayload):
        aux, bits = int(payload.values.size), 0
    elif isinstance(payload, CodePayload):
        aux, bits = payload.code_dim, 0
    elif isinstance(payload, QuantizedPayload):
        aux, bits = payload.group_len, payload.bits
    else:
        aux, bits = 0, 0
    return (bytes([TAGS[msg.kind], len(msg.original_shape)])
            + np.array(msg.original_shape, dtype="<u8").tobytes()
            + np.array([aux], dtype="<u8").tobytes()
            + bytes([bits]))


def encode_message(msg: CompressedMessage, spec: CompressorSpec) -> bytes:
    return header_bytes(msg) + payload_bytes(msg, spec)


def decode_message(buffer: bytes, spec: CompressorSpec, precision: str = "float32") -> CompressedMessage:
    """
    Inverse of :func:`encode_message` (values come back at wire precision).

    Args:
        buffer: Bytes produced by ``encode_message``.
        spec: Same ``value_bytes`` / ``index_bytes`` used for encoding.
        precision: In-memory precision of the rebuilt message.

    Returns:
        The decoded message.
    """
    if len(buffer) < 2:
        raise DimensionError("Message buffer too short")
    tag, rank = buffer[0], buffer[1]
    kinds = {value: key for key, value in TAGS.items()}
    if tag not in kinds:
        raise ParameterError(f"Unknown message tag {tag}")
    offset = 2
    shape = tuple(int(v) for v in np.frombuffer(buffer, dtype="<u8", count=rank, offset=offset))
    offset += 8 * rank
    aux = int(np.frombuffer(buffer, dtype="<u8", count=1, offset=offset)[0])
    offset += 8
    bits = buffer[offset]
    offset += 1

    numel = int(np.prod(shape))
    wire = _WIRE_FLOAT[spec.value_bytes]
    dtype = np.float32 if precision == "float32" else np.float64
    kind = kinds[tag]
    if kind == "sparse":
        values = np.frombuffer(buffer, dtype=wire, count=aux, offset=offset).astype(dtype)
        offset += aux * spec.value_bytes
        indices = np.frombuffer(buffer, dtype="<u4", count=aux, offset=offset).astype(np.int64)
        payload = SparsePayload(values=values, indices=indices)
    elif kind == "quantized":
        code_len = math.ceil(numel * bits / 8)
        codes = unpack_codes(buffer[offset:offset + code_len], numel, bits)
        offset += code_len
        groups = numel // aux
        scales = np.frombuffer(buffer, dtype="<f4", count=groups, offset=offset).astype(np.float64)
        offset += 4 * groups
        zeros = np.frombuffer(buffer, dtype="<f4", count=groups, offset=offset).astype(np.float64)
        payload = QuantizedPayload(codes=codes, scales=scales, zeros=zeros, bits=bits, group_len=aux)
    elif kind == "code":
        code_shape = shape[:-1] + (aux,)
        values = np.frombuffer(buffer, dtype=wire, count=int(np.prod(code_shape)), offset=offset)
        payload = CodePayload(values=values.astype(dtype).reshape(code_shape), code_dim=aux)
    else:
        values = np.frombuffer(buffer, dtype=wire, count=numel, offset=offset)
        payload = DensePayload(values=values.astype(dtype).reshape(shape))
    return CompressedMessage(payload=payload, original_shape=shape, precision=precision)
