"""
Tensors, the `.tns` wire codec and deterministic data synthesis.

Tensors are numpy arrays. Logical dtypes are f32, i32 and i8; interpreters
hold float tensors as float64 internally and round to float32 at outputs.

Weights and inputs are regenerated from a model's ``weights_seed`` alone:
every array is drawn from an independent SplitMix64 stream keyed by the seed
and a label such as ``('input', 0)`` or ``('weight', 3, 'filter')``.
"""

import hashlib
import struct
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from model_ir import ModelSpec, Node
from utils.logger import setup_logger
from utils.validators import ValidationError

logger = setup_logger(__name__)

TNS_MAGIC = b'GFTZ'
TNS_VERSION = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class TensorFormatError(ValidationError):
    """A `.tns` payload is truncated or has a bad header."""
    pass


class DType(IntEnum):
    F32 = 0
    I32 = 1
    I8 = 2


DTYPE_BY_NAME = {'f32': DType.F32, 'i32': DType.I32, 'i8': DType.I8}

_WIRE = {
    DType.F32: np.dtype('<f4'),
    DType.I32: np.dtype('<i4'),
    DType.I8: np.dtype('i1'),
}

INT_LIMITS = {
    DType.I32: (-2 ** 31, 2 ** 31 - 1),
    DType.I8: (-128, 127),
}


def dtype_of(array: np.ndarray) -> DType:
    if array.dtype.kind == 'f':
        return DType.F32
    if array.dtype == np.int8:
        return DType.I8
    if array.dtype.kind in 'iu':
        return DType.I32
    raise ValidationError(f"Unsupported array dtype {array.dtype}")


def to_output(array: np.ndarray) -> np.ndarray:
    """Round an internal tensor to its logical wire dtype."""
    return np.ascontiguousarray(array, dtype=_WIRE[dtype_of(array)].newbyteorder('='))


# =============================================================================
# .tns CODEC
# =============================================================================

def encode_tensor(array: np.ndarray) -> bytes:
    dtype = dtype_of(array)
    data = np.ascontiguousarray(array, dtype=_WIRE[dtype])
    header = TNS_MAGIC + struct.pack('<BBB', TNS_VERSION, int(dtype), data.ndim)
    dims = struct.pack(f'<{data.ndim}I', *data.shape)
    return header + dims + data.tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
    if len(payload) < 7 or payload[:4] != TNS_MAGIC:
        raise TensorFormatError("Missing GFTZ magic")
    version, dtype_code, rank = struct.unpack_from('<BBB', payload, 4)
    if version != TNS_VERSION:
        raise TensorFormatError(f"Unsupported tensor version {version}")
    try:
        dtype = DType(dtype_code)
    except ValueError:
        raise TensorFormatError(f"Unknown dtype code {dtype_code}") from None
    offset = 7 + 4 * rank
    if len(payload) < offset:
        raise TensorFormatError("Truncated tensor dims")
    dims = struct.unpack_from(f'<{rank}I', payload, 7)
    wire = _WIRE[dtype]
    expected = int(np.prod(dims, dtype=np.int64)) * wire.itemsize
    if len(payload) - offset != expected:
        raise TensorFormatError(f"Tensor data has {len(payload) - offset} bytes, expected {expected}")
    array = np.frombuffer(payload, dtype=wire, offset=offset).reshape(dims)
    return array.astype(wire.newbyteorder('='))


def write_tensor(path: Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# =============================================================================
# DATA SYNTHESIS
# =============================================================================

def stream_key(seed: int, *labels: Any) -> int:
    """64-bit stream key for one labelled array of a model."""
    text = f"{seed}:" + ':'.join(str(label) for label in labels)
    return int.from_bytes(hashlib.blake2b(text.encode('utf-8'), digest_size=8).digest(), 'little')


def splitmix64(key: int, count: int) -> np.ndarray:
    """First ``count`` outputs of the SplitMix64 generator seeded with ``key``."""
    with np.errstate(over='ignore'):
        z = np.uint64(key) + (np.arange(1, count + 1, dtype=np.uint64) * _GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def uniform(seed: int, labels: Sequence[Any], shape: Sequence[int],
            low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Float32-representable samples from U[low, high), returned as float64."""
    count = int(np.prod(shape, dtype=np.int64))
    bits = splitmix64(stream_key(seed, *labels), count)
    unit = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    values = (low + (high - low) * unit).astype(np.float32)
    return values.astype(np.float64).reshape(tuple(shape))


def synthesize_inputs(m: ModelSpec) -> List[np.ndarray]:
    """Graph inputs in Placeholder index order, as float32 arrays."""
    return [uniform(m.weights_seed, ('input', i), shape).astype(np.float32)
            for i, shape in enumerate(m.input_shapes)]


WeightOverrides = Optional[Mapping[Tuple[int, str], np.ndarray]]


def node_weight(m: ModelSpec, node: Node, name: str, shape: Sequence[int],
                overrides: WeightOverrides = None) -> np.ndarray:
    """
    Weight tensor ``name`` of ``node`` as float64.

    Shapes: Conv2d filter is [kh, kw, C, filters], DepthwiseConv2d filter is
    [kh, kw, C, multiplier], BiasAdd bias is [C], Const value is its shape.
    """
    if overrides and (node.id, name) in overrides:
        value = np.asarray(overrides[(node.id, name)], dtype=np.float64)
        if value.shape != tuple(shape):
            raise ValidationError(f"Weight override {name} of node {node.id} has shape "
                                  f"{value.shape}, expected {tuple(shape)}")
        return value
    return uniform(m.weights_seed, ('weight', node.id, name), shape)


def prepare_inputs(m: ModelSpec, inputs: Optional[Sequence[np.ndarray]]) -> Dict[int, np.ndarray]:
    """Map Placeholder node ids to their input arrays (synthesized when omitted)."""
    arrays = list(inputs) if inputs is not None else synthesize_inputs(m)
    if len(arrays) != len(m.input_shapes):
        raise ValidationError(f"Model declares {len(m.input_shapes)} inputs, got {len(arrays)}")
    bound = {}
    for node in m.placeholders():
        index = node.param_dict.get('index', 0)
        array = np.asarray(arrays[index])
        if tuple(array.shape) != tuple(m.input_shapes[index]):
            raise ValidationError(f"Input {index} has shape {array.shape}, "
                                  f"expected {tuple(m.input_shapes[index])}")
        bound[node.id] = array
    return bound
