"""
External inference engines over the file-based wire protocol.

A request directory holds ``model.json`` (the model codec's JSON) and one
``input_<i>.tns`` per graph input. The engine is started as
``<engine_cmd> --dir <request_dir>`` and, on exit 0, leaves one
``output_<i>.tns`` per graph output (sink nodes in id order). On a nonzero
exit it should leave ``status.json``:

    {"stage": "convert" | "infer", "code": int, "message": str, "op": str}

``op`` is optional. A convert-stage failure becomes an MCF; anything else
that stops the engine (crash, signal, timeout) becomes an IF. A reply the
adapter cannot read is a protocol error: a fault of the harness setup, never
an engine exception.
"""

import json
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np

from model_ir import ModelSpec, deserialize_model, serialize_model
from optimized_backend import ConversionError, run_optimized
from reference_backend import ExecutionResult, InferenceFault, run_reference
from tensors import TensorFormatError, read_tensor, synthesize_inputs, write_tensor
from utils.errors import InfrastructureError
from utils.logger import setup_logger
from utils.retry import retry_with_backoff

logger = setup_logger(__name__)

MODEL_FILE = 'model.json'
STATUS_FILE = 'status.json'
STAGES = ('convert', 'infer')
SERVE_BACKENDS = ('reference', 'optimized')

# stderr kept in fault messages
STDERR_TAIL = 400


class ProtocolError(InfrastructureError):
    """The engine's reply does not follow the wire protocol."""
    pass


def input_file(i: int) -> str:
    return f'input_{i}.tns'


def output_file(i: int) -> str:
    return f'output_{i}.tns'


def write_request(directory: Path, m: ModelSpec, inputs: Sequence[np.ndarray]) -> None:
    directory = Path(directory)
    (directory / MODEL_FILE).write_bytes(serialize_model(m))
    for i, array in enumerate(inputs):
        write_tensor(directory / input_file(i), array)


def read_status(directory: Path) -> Optional[Dict[str, Any]]:
    path = Path(directory) / STATUS_FILE
    if not path.exists():
        return None
    try:
        status = json.loads(path.read_text(encoding='utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"Unreadable {STATUS_FILE}: {e}") from e
    if (not isinstance(status, dict) or status.get('stage') not in STAGES
            or not isinstance(status.get('code'), int)):
        raise ProtocolError(f"Malformed {STATUS_FILE}: {status!r}")
    return status


def read_outputs(directory: Path, m: ModelSpec) -> Dict[int, np.ndarray]:
    """Sink id -> tensor from ``output_<i>.tns`` files."""
    outputs = {}
    for i, sink in enumerate(m.outputs()):
        path = Path(directory) / output_file(i)
        if not path.exists():
            raise ProtocolError(f"Engine exited 0 without {path.name}")
        try:
            outputs[sink] = read_tensor(path)
        except TensorFormatError as e:
            raise ProtocolError(f"Bad tensor file {path.name}: {e}") from e
    return outputs


@retry_with_backoff(max_retries=3, base_delay=0.5, max_delay=5.0, exceptions=(BlockingIOError,))
def _spawn(argv: Sequence[str], timeout: float) -> subprocess.CompletedProcess:
    return subprocess.run(list(argv), capture_output=True, timeout=timeout)


def _tail(stream: bytes) -> str:
    return stream.decode('utf-8', errors='replace')[-STDERR_TAIL:].strip()


def run_external(m: ModelSpec, inputs: Optional[Sequence[np.ndarray]], engine_cmd: str,
                 timeout: float = 30.0) -> ExecutionResult:
    """
    Run ``m`` on an external engine.

    Raises ConversionError or InferenceFault for engine exceptions, and
    ProtocolError / InfrastructureError when the engine cannot be used at all.
    """
    arrays = list(inputs) if inputs is not None else synthesize_inputs(m)
    with tempfile.TemporaryDirectory(prefix='gfuzz-req-') as tmp:
        request = Path(tmp)
        write_request(request, m, arrays)
        argv = shlex.split(engine_cmd) + ['--dir', str(request)]
        try:
            proc = _spawn(argv, timeout)
        except subprocess.TimeoutExpired:
            raise InferenceFault('timeout', None, None, f"engine exceeded {timeout:g}s")
        except (FileNotFoundError, PermissionError) as e:
            raise InfrastructureError(f"Cannot start engine {engine_cmd!r}: {e}") from e

        if proc.returncode == 0:
            return ExecutionResult(read_outputs(request, m))

        status = read_status(request)
        if status is not None and status['stage'] == 'convert':
            raise ConversionError(status['code'], status.get('op'), status.get('message', ''),
                                  status.get('node'))
        if status is not None:
            raise InferenceFault('crash', status.get('node'), status.get('op'),
                                 f"code {status['code']}: {status.get('message', '')}")
        if proc.returncode < 0:
            raise InferenceFault('crash', None, None, f"killed by signal {-proc.returncode}")
        raise InferenceFault('crash', None, None,
                             f"exit {proc.returncode}: {_tail(proc.stderr)}")


# =============================================================================
# ENGINE SERVER MODE
# =============================================================================

def _write_status(directory: Path, stage: str, code: int, message: str,
                  op: Optional[str], node: Optional[int]) -> None:
    status = {'stage': stage, 'code': code, 'message': message, 'op': op, 'node': node}
    (directory / STATUS_FILE).write_text(json.dumps(status, sort_keys=True), encoding='utf-8')


def serve_request(directory: Path, backend: str = 'reference', bug_mask: Iterable[str] = ()) -> int:
    """
    Answer one request directory with a built-in interpreter.

    Returns the process exit code: 0 with outputs written, 1 with a
    status.json describing the failure.
    """
    directory = Path(directory)
    m = deserialize_model((directory / MODEL_FILE).read_bytes())
    inputs = [read_tensor(directory / input_file(i)) for i in range(len(m.input_shapes))]
    try:
        if backend == 'optimized':
            result = run_optimized(m, inputs, tuple(bug_mask))
        else:
            result = run_reference(m, inputs, taps=False)
    except ConversionError as e:
        _write_status(directory, 'convert', e.code, str(e), e.op, e.node)
        return 1
    except InferenceFault as e:
        _write_status(directory, 'infer', 1, str(e), e.op, e.node)
        return 1
    for i, sink in enumerate(m.outputs()):
        write_tensor(directory / output_file(i), result.outputs[sink])
    logger.debug("Served %s with %d outputs", directory, len(result.outputs))
    return 0


def engine_command(python: str, script: Path, backend: str = 'reference',
                   bug_mask: Iterable[str] = ()) -> str:
    """Engine command line that serves requests with a built-in interpreter."""
    parts = [python, str(script), 'engine', '--backend', backend]
    mask = ','.join(bug_mask)
    if mask:
        parts += ['--bug-mask', mask]
    return ' '.join(shlex.quote(p) for p in parts)

