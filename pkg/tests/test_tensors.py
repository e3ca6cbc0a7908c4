"""
Tests for the .tns codec and deterministic data synthesis
"""

import struct
import numpy as np
import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from model_ir import PLACEHOLDER, Edge, Graph, ModelSpec, Node
from tensors import (
    TNS_MAGIC,
    DType,
    TensorFormatError,
    decode_tensor,
    encode_tensor,
    prepare_inputs,
    read_tensor,
    splitmix64,
    stream_key,
    synthesize_inputs,
    uniform,
    write_tensor,
)
from utils.validators import ValidationError


def header(version=1, dtype=0, rank=0):
    return TNS_MAGIC + struct.pack('<BBB', version, dtype, rank)


class TestCodec:
    """Test suite for encode_tensor / decode_tensor."""

    @pytest.mark.parametrize('array', [
        np.array(1.5, dtype=np.float32),
        np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4) - 7.25,
        np.array(-3, dtype=np.int8),
        np.array([[[[-128, 0, 127]]]], dtype=np.int8),
        np.array(2 ** 31 - 1, dtype=np.int32),
        np.arange(-6, 6, dtype=np.int32).reshape(2, 1, 3, 2),
    ])
    def test_round_trip(self, array):
        """Rank 0 and rank 4 tensors of every dtype come back unchanged."""
        decoded = decode_tensor(encode_tensor(array))
        assert decoded.dtype == array.dtype
        assert decoded.shape == array.shape
        np.testing.assert_array_equal(decoded, array)

    def test_byte_layout(self):
        """Header, little-endian u32 dims, then little-endian elements."""
        payload = encode_tensor(np.array([[1, -2]], dtype=np.int32))
        assert payload == (b'GFTZ' + bytes([1, int(DType.I32), 2])
                           + struct.pack('<II', 1, 2) + struct.pack('<ii', 1, -2))

    def test_float64_is_written_as_f32(self):
        """Internal float64 tensors go on the wire as f32."""
        payload = encode_tensor(np.array([0.5, 0.25]))
        assert payload[5] == int(DType.F32)
        assert len(payload) == 7 + 4 + 2 * 4
        assert decode_tensor(payload).dtype == np.float32

    def test_file_round_trip(self, tmp_path):
        """write_tensor and read_tensor agree on disk."""
        array = np.arange(6, dtype=np.int8).reshape(2, 3)
        path = tmp_path / 'input_0.tns'
        write_tensor(path, array)
        np.testing.assert_array_equal(read_tensor(path), array)


class TestCodecRejections:
    """Test suite for malformed payloads."""

    def test_missing_magic(self):
        with pytest.raises(TensorFormatError, match='magic'):
            decode_tensor(b'GFTX' + bytes([1, 0, 0]) + struct.pack('<f', 1.0))

    def test_short_payload(self):
        with pytest.raises(TensorFormatError, match='magic'):
            decode_tensor(b'GFT')

    def test_wrong_version(self):
        with pytest.raises(TensorFormatError, match='version 2'):
            decode_tensor(header(version=2) + struct.pack('<f', 1.0))

    def test_unknown_dtype(self):
        with pytest.raises(TensorFormatError, match='dtype code 9'):
            decode_tensor(header(dtype=9) + struct.pack('<f', 1.0))

    def test_truncated_dims(self):
        """A rank-4 header followed by only two dims."""
        with pytest.raises(TensorFormatError, match='dims'):
            decode_tensor(header(rank=4) + struct.pack('<II', 1, 2))

    def test_short_data(self):
        payload = encode_tensor(np.zeros((1, 2, 2, 1), dtype=np.float32))
        with pytest.raises(TensorFormatError, match='expected 16'):
            decode_tensor(payload[:-1])

    def test_trailing_data(self):
        payload = encode_tensor(np.zeros(3, dtype=np.int8))
        with pytest.raises(TensorFormatError, match='expected 3'):
            decode_tensor(payload + b'\x00')

    def test_format_error_is_a_validation_error(self):
        assert issubclass(TensorFormatError, ValidationError)


class TestSynthesis:
    """Test suite for SplitMix64 streams and uniform sampling."""

    def test_splitmix64_reference_outputs(self):
        """Seed 0 yields the published SplitMix64 sequence."""
        values = [int(v) for v in splitmix64(0, 3)]
        assert values == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

    def test_splitmix64_prefix_stable(self):
        """A longer draw extends a shorter one."""
        key = stream_key(7, 'weight', 3, 'filter')
        np.testing.assert_array_equal(splitmix64(key, 10)[:4], splitmix64(key, 4))

    def test_stream_keys_differ_by_label(self):
        assert stream_key(1, 'input', 0) == stream_key(1, 'input', 0)
        assert stream_key(1, 'input', 0) != stream_key(1, 'input', 1)
        assert stream_key(1, 'input', 0) != stream_key(2, 'input', 0)

    def test_uniform_is_deterministic(self):
        a = uniform(11, ('weight', 4, 'bias'), (2, 3))
        b = uniform(11, ('weight', 4, 'bias'), (2, 3))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, uniform(12, ('weight', 4, 'bias'), (2, 3)))

    def test_uniform_range_and_precision(self):
        """Samples stay in [low, high) and are exactly float32-representable."""
        values = uniform(5, ('input', 0), (1000,), low=-2.0, high=3.0)
        assert values.dtype == np.float64
        assert values.min() >= -2.0
        assert values.max() <= 3.0
        np.testing.assert_array_equal(values.astype(np.float32).astype(np.float64), values)

    def test_uniform_scalar_shape(self):
        assert uniform(0, ('input', 0), ()).shape == ()


class TestInputBinding:
    """Test suite for synthesize_inputs / prepare_inputs."""

    def model(self):
        nodes = (Node(0, op=PLACEHOLDER, params=(('index', 1),)),
                 Node(1, op=PLACEHOLDER, params=(('index', 0),)),
                 Node(2, op='Add'))
        graph = Graph(nodes, (Edge(0, 0, 2, 0), Edge(1, 0, 2, 1)))
        return ModelSpec(graph, ((1, 2, 2, 3), (1, 2, 2, 3)), weights_seed=9)

    def test_inputs_follow_placeholder_index(self):
        m = self.model()
        inputs = synthesize_inputs(m)
        bound = prepare_inputs(m, None)
        np.testing.assert_array_equal(bound[1], inputs[0])
        np.testing.assert_array_equal(bound[0], inputs[1])
        assert inputs[0].dtype == np.float32

    def test_wrong_input_count(self):
        with pytest.raises(ValidationError, match='declares 2 inputs'):
            prepare_inputs(self.model(), [np.zeros((1, 2, 2, 3))])

    def test_wrong_input_shape(self):
        with pytest.raises(ValidationError, match='Input 0 has shape'):
            prepare_inputs(self.model(), [np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 2, 3))])
