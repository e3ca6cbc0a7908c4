"""
Reference interpreter.

Evaluates a model node by node in topological order, in NHWC layout, with
the plainest operator semantics available. Float tensors are carried as
float64 and rounded to float32 only when they leave the interpreter.

Accumulations (convolution taps, pooling windows, softmax sums) run in a
fixed order: kernel row, kernel column, then input channel. Any backend
that keeps this order reproduces the reference bit for bit.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from model_ir import CONST, PLACEHOLDER, ModelSpec, Node
from shapecalc import PERMUTATIONS, window_output_size
from tensors import (
    DTYPE_BY_NAME,
    INT_LIMITS,
    DType,
    WeightOverrides,
    node_weight,
    prepare_inputs,
    to_output,
)
from utils.errors import GFuzzError
from utils.logger import setup_logger

logger = setup_logger(__name__)


class InferenceFault(GFuzzError):
    """A run-stage failure: the interpreter could not produce outputs."""

    def __init__(self, kind: str, node: Optional[int], op: Optional[str], message: str):
        self.kind = kind
        self.node = node
        self.op = op
        super().__init__(f"{kind} at node {node} ({op}): {message}")


@dataclass
class ExecutionResult:
    """Graph outputs (sink node id -> tensor) and per-node taps."""

    outputs: Dict[int, np.ndarray]
    taps: Dict[int, np.ndarray] = field(default_factory=dict)
    # Tapped node id -> label of the fused region it closes ("Conv2d+BiasAdd+Relu")
    regions: Dict[int, str] = field(default_factory=dict)
    # Tapped node id -> every node of that region, in data-flow order
    kernels: Dict[int, Tuple[int, ...]] = field(default_factory=dict)


# =============================================================================
# KERNELS (NHWC)
# =============================================================================

def _window(x: np.ndarray, i: int, j: int, params: Mapping[str, Any], oh: int, ow: int) -> np.ndarray:
    dh, dw = params.get('dilation_h', 1), params.get('dilation_w', 1)
    sh, sw = params['stride_h'], params['stride_w']
    top, left = i * dh, j * dw
    return x[:, top:top + sh * (oh - 1) + 1:sh, left:left + sw * (ow - 1) + 1:sw, :]


def _out_hw(x: np.ndarray, params: Mapping[str, Any]):
    _, h, w, _ = x.shape
    oh = window_output_size(h, params['kernel_h'], params.get('pad_h', 0), params['stride_h'],
                            params.get('dilation_h', 1))
    ow = window_output_size(w, params['kernel_w'], params.get('pad_w', 0), params['stride_w'],
                            params.get('dilation_w', 1))
    return oh, ow


def _padded(x: np.ndarray, params: Mapping[str, Any], value: float = 0.0) -> np.ndarray:
    ph, pw = params.get('pad_h', 0), params.get('pad_w', 0)
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=value)


def conv2d(x: np.ndarray, w: np.ndarray, params: Mapping[str, Any]) -> np.ndarray:
    oh, ow = _out_hw(x, params)
    xp = _padded(x, params)
    kh, kw, channels, filters = w.shape
    out = np.zeros((x.shape[0], oh, ow, filters))
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, params, oh, ow)
            for c in range(channels):
                out += patch[..., c:c + 1] * w[i, j, c, :]
    return out


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, params: Mapping[str, Any]) -> np.ndarray:
    oh, ow = _out_hw(x, params)
    xp = _padded(x, params)
    kh, kw, channels, multiplier = w.shape
    out = np.zeros((x.shape[0], oh, ow, channels, multiplier))
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, params, oh, ow)
            out += patch[..., None] * w[i, j]
    return out.reshape(x.shape[0], oh, ow, channels * multiplier)


def max_pool(x: np.ndarray, params: Mapping[str, Any]) -> np.ndarray:
    oh, ow = _out_hw(x, params)
    xp = _padded(x, params, -np.inf)
    out = np.full((x.shape[0], oh, ow, x.shape[3]), -np.inf)
    for i in range(params['kernel_h']):
        for j in range(params['kernel_w']):
            out = np.maximum(out, _window(xp, i, j, params, oh, ow))
    return out


def avg_pool(x: np.ndarray, params: Mapping[str, Any]) -> np.ndarray:
    """Average over the real (unpadded) elements of each window."""
    oh, ow = _out_hw(x, params)
    xp = _padded(x, params)
    mask = _padded(np.ones((1,) + x.shape[1:3] + (1,)), params)
    total = np.zeros((x.shape[0], oh, ow, x.shape[3]))
    count = np.zeros((1, oh, ow, 1))
    for i in range(params['kernel_h']):
        for j in range(params['kernel_w']):
            total += _window(xp, i, j, params, oh, ow)
            count += _window(mask, i, j, params, oh, ow)
    return total / count


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = np.exp(np.ascontiguousarray(x - x.max(axis=axis, keepdims=True)))
    total = np.take(shifted, [0], axis=axis)
    for k in range(1, x.shape[axis]):
        total = total + np.take(shifted, [k], axis=axis)
    return shifted / total


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.ascontiguousarray(-x)))


def cast(x: np.ndarray, to: str) -> np.ndarray:
    """Cast with NaN -> 0, saturation at the integer range, truncation toward zero."""
    dtype = DTYPE_BY_NAME[to]
    if dtype is DType.F32:
        return x.astype(np.float32).astype(np.float64)
    low, high = INT_LIMITS[dtype]
    target = np.int8 if dtype is DType.I8 else np.int32
    if x.dtype.kind == 'f':
        x = np.trunc(np.clip(np.where(np.isnan(x), 0.0, x), low, high))
    else:
        x = np.clip(x.astype(np.int64), low, high)
    return x.astype(target)


def slice_tensor(x: np.ndarray, begin: Sequence[int], size: Sequence[int], node: Node) -> np.ndarray:
    for b, s, dim in zip(begin, size, x.shape):
        if b < 0 or s < 1 or b + s > dim:
            raise InferenceFault('slice-bounds', node.id, node.op,
                                 f"begin={list(begin)} size={list(size)} on shape {list(x.shape)}")
    return x[tuple(slice(b, b + s) for b, s in zip(begin, size))]


def concat(operands: Sequence[np.ndarray], axis: int, node: Node) -> np.ndarray:
    try:
        return np.concatenate(operands, axis=axis)
    except ValueError as e:
        raise InferenceFault('concat-mismatch', node.id, node.op, str(e)) from e


def _reshape(x: np.ndarray, mode: str) -> np.ndarray:
    n, h, w, c = x.shape
    if mode == 'hw_to_h':
        return x.reshape(n, h * w, 1, c)
    return x.reshape(n, 1, h * w, c)


# =============================================================================
# INTERPRETER
# =============================================================================

_UNARY: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    'Relu': lambda x: np.maximum(x, 0.0),
    'Relu6': lambda x: np.minimum(np.maximum(x, 0.0), 6.0),
    'Sigmoid': sigmoid,
    'Tanh': lambda x: np.tanh(np.ascontiguousarray(x)),
}

_BINARY: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    'Add': np.add,
    'Mul': np.multiply,
    'Sub': np.subtract,
    'RealDiv': np.divide,
}


def evaluate_node(m: ModelSpec, node: Node, operands: Sequence[np.ndarray],
                  bound_inputs: Mapping[int, np.ndarray], weights: WeightOverrides = None) -> np.ndarray:
    op = node.op
    p = node.param_dict
    if op == PLACEHOLDER:
        x = bound_inputs[node.id]
        return x.astype(np.float64) if x.dtype.kind == 'f' else x
    if op == CONST:
        return node_weight(m, node, 'value', p['shape'], weights)
    if op in _UNARY:
        return _UNARY[op](operands[0])
    if op in _BINARY:
        return _BINARY[op](operands[0], operands[1])
    if op == 'Conv2d':
        x = operands[0]
        w = node_weight(m, node, 'filter', (p['kernel_h'], p['kernel_w'], x.shape[3], p['filters']), weights)
        return conv2d(x, w, p)
    if op == 'DepthwiseConv2d':
        x = operands[0]
        w = node_weight(m, node, 'filter',
                        (p['kernel_h'], p['kernel_w'], x.shape[3], p['depth_multiplier']), weights)
        return depthwise_conv2d(x, w, p)
    if op == 'BiasAdd':
        x = operands[0]
        return x + node_weight(m, node, 'bias', (x.shape[3],), weights)
    if op == 'Softmax':
        return softmax(operands[0], p.get('axis', 3))
    if op == 'MaxPool':
        return max_pool(operands[0], p)
    if op == 'AvgPool':
        return avg_pool(operands[0], p)
    if op == 'Concat':
        return concat(operands, p.get('axis', 3), node)
    if op == 'Reshape':
        return _reshape(operands[0], p.get('mode', 'hw_to_w'))
    if op == 'Transpose':
        return operands[0].transpose(PERMUTATIONS[p['perm']])
    if op == 'Slice':
        return slice_tensor(operands[0], p['begin'], p['size'], node)
    if op == 'Pad':
        return np.pad(operands[0], ((0, 0), (p['pad_top'], p['pad_bottom']),
                                    (p['pad_left'], p['pad_right']), (0, 0)))
    if op == 'Cast':
        return cast(operands[0], p['to'])
    raise InferenceFault('unsupported-op', node.id, op, "operator has no reference kernel")


def run_reference(m: ModelSpec, inputs: Optional[Sequence[np.ndarray]] = None,
                  weights: WeightOverrides = None, taps: bool = True) -> ExecutionResult:
    """
    Execute ``m`` and return its sink outputs (and every node's value as a tap).

    Division by zero and overflow follow IEEE arithmetic; inf and nan are
    results, not faults.
    """
    bound = prepare_inputs(m, inputs)
    values: Dict[int, np.ndarray] = {}
    with np.errstate(all='ignore'):
        for v in m.graph.topological_order():
            node = m.graph.node(v)
            operands = [values[e.src] for e in m.graph.in_edges(v)]
            values[v] = evaluate_node(m, node, operands, bound, weights)
    outputs = {v: to_output(values[v]) for v in m.outputs()}
    tapped = {v: to_output(x) for v, x in values.items()} if taps else {}
    return ExecutionResult(outputs, tapped, {v: m.graph.node(v).op for v in tapped})
