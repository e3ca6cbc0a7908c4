"""
Tests for the external-engine wire protocol
"""

import json
import numpy as np
import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from engine_adapter import (
    STATUS_FILE,
    ProtocolError,
    engine_command,
    read_status,
    run_external,
    serve_request,
    write_request,
)
from model_ir import Graph, Node
from optimized_backend import ConversionError
from reference_backend import InferenceFault, run_reference
from tensors import read_tensor, synthesize_inputs
from triage import DCF, DCP, BackendSpec, run_trial
from utils.errors import InfrastructureError

from tests.test_backends import witness

GFUZZ = Path(__file__).parent.parent / 'gfuzz.py'


def double(engine_doubles, name):
    return f"{sys.executable} {engine_doubles / name}"


class TestServeRequest:
    """The built-in engine server answers request directories."""

    def test_writes_outputs(self, tmp_path):
        """Exit 0 with one output file per sink, in sink order."""
        m = witness('muladd-fanout')
        inputs = synthesize_inputs(m)
        write_request(tmp_path, m, inputs)
        assert serve_request(tmp_path) == 0
        ref = run_reference(m, inputs)
        for i, sink in enumerate(m.outputs()):
            assert np.array_equal(read_tensor(tmp_path / f'output_{i}.tns'), ref.outputs[sink])
        assert not (tmp_path / STATUS_FILE).exists()

    def test_convert_failure_status(self, tmp_path):
        """A conversion failure leaves a convert-stage status."""
        m = witness('transpose-convert')
        write_request(tmp_path, m, synthesize_inputs(m))
        assert serve_request(tmp_path, 'optimized', ['transpose-convert']) == 1
        status = read_status(tmp_path)
        assert status['stage'] == 'convert'
        assert status['code'] == 108
        assert status['op'] == 'Transpose'

    def test_inference_failure_status(self, tmp_path):
        """A run-stage fault leaves an infer-stage status."""
        m = witness('add-fanout-abort')
        write_request(tmp_path, m, synthesize_inputs(m))
        assert serve_request(tmp_path, 'optimized', ['add-fanout-abort']) == 1
        assert read_status(tmp_path)['stage'] == 'infer'

    def test_malformed_status(self, tmp_path):
        """A status without a known stage is a protocol error."""
        (tmp_path / STATUS_FILE).write_text(json.dumps({'stage': 'link', 'code': 1}), encoding='utf-8')
        with pytest.raises(ProtocolError):
            read_status(tmp_path)

    def test_engine_command_quotes(self):
        """Built commands survive shell splitting."""
        cmd = engine_command('/usr/bin/python3', Path('/opt/my tools/gfuzz.py'), 'optimized',
                             ['cast-sat', 'concat-drop'])
        assert "'/opt/my tools/gfuzz.py'" in cmd
        assert cmd.endswith('--bug-mask cast-sat,concat-drop')


class TestRunExternal:
    """Subprocess engines, real and doubled."""

    def test_loopback_reference(self):
        """The loopback engine reproduces the reference."""
        m = witness('concat-drop')
        inputs = synthesize_inputs(m)
        result = run_external(m, inputs, engine_command(sys.executable, GFUZZ))
        ref = run_reference(m, inputs)
        assert sorted(result.outputs) == sorted(ref.outputs)
        for v in ref.outputs:
            assert np.array_equal(result.outputs[v], ref.outputs[v])
        assert result.taps == {}

    def test_loopback_trial(self):
        """A buggy loopback engine yields a DCF keyed on the worst output."""
        m = witness('concat-drop')
        cmd = engine_command(sys.executable, GFUZZ, 'optimized', ['concat-drop'])
        outcome = run_trial(m, BackendSpec(kind='external', engine_cmd=cmd))
        assert outcome.status == DCF
        concat = Graph((Node(0, op='Concat'),)).structure_hash()
        assert json.loads(outcome.dedup_key) == [DCF, concat, 'n', 'Concat']
        assert outcome.detail['node_re'] is None

    def test_clean_loopback_trial(self):
        """A clean loopback engine passes."""
        cmd = engine_command(sys.executable, GFUZZ, 'optimized')
        assert run_trial(witness('cast-sat'), BackendSpec(kind='external', engine_cmd=cmd)).status == DCP

    def test_convert_failure(self, engine_doubles):
        """A convert-stage status becomes a ConversionError."""
        m = witness('transpose-convert')
        with pytest.raises(ConversionError) as info:
            run_external(m, None, double(engine_doubles, 'convert_fail.py'))
        assert info.value.code == 108
        assert info.value.op == 'Transpose'

    def test_timeout(self, engine_doubles):
        """An engine that never answers is an IF timeout."""
        with pytest.raises(InferenceFault) as info:
            run_external(witness('cast-sat'), None, double(engine_doubles, 'hang.py'), timeout=1.0)
        assert info.value.kind == 'timeout'

    def test_crash_without_status(self, engine_doubles):
        """A nonzero exit without a status is an IF crash with the stderr tail."""
        with pytest.raises(InferenceFault) as info:
            run_external(witness('cast-sat'), None, double(engine_doubles, 'crash.py'))
        assert info.value.kind == 'crash'
        assert 'Segmentation fault' in str(info.value)

    def test_garbage_output(self, engine_doubles):
        """Unreadable outputs are an infrastructure problem, not an engine exception."""
        with pytest.raises(ProtocolError):
            run_external(witness('cast-sat'), None, double(engine_doubles, 'garbage.py'))

    def test_missing_engine(self, tmp_path):
        """A command that cannot be started is an infrastructure error."""
        with pytest.raises(InfrastructureError, match="Cannot start engine"):
            run_external(witness('cast-sat'), None, str(tmp_path / 'no-such-engine'))
