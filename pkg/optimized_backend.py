"""
Optimized interpreter: the built-in system under test.

Coded independently of the reference interpreter. Models are converted first
(operator support check, graph planning, fusion), then run in NCHW layout:
inputs and constants are transposed in, outputs transposed back to NHWC.

Fused regions:
  Conv2d + BiasAdd [+ Relu]   when each member feeds only the next
  Mul + Add                   when the Mul feeds only the Add

Only region outputs are observable as taps; values inside a region are never
materialized.

A catalog of seeded defects can be switched on per run through ``bug_mask``.
Each defect fires only for a specific structural pattern.
"""

from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from model_ir import BUILTIN_OPERATORS, CONST, PLACEHOLDER, ModelSpec, Node
from reference_backend import ExecutionResult, InferenceFault
from shapecalc import PERMUTATIONS, ShapeInferenceError, infer_shapes, window_output_size
from tensors import DTYPE_BY_NAME, INT_LIMITS, DType, WeightOverrides, node_weight, prepare_inputs, to_output
from utils.errors import GFuzzError
from utils.logger import setup_logger
from utils.validators import ValidationError

logger = setup_logger(__name__)

TO_NCHW = (0, 3, 1, 2)
TO_NHWC = (0, 2, 3, 1)
# NHWC axis -> NCHW axis
AXIS_NCHW = {0: 0, 1: 2, 2: 3, 3: 1}

# Conversion error codes
CODE_UNSUPPORTED = 100
CODE_SHAPE = 101
CODE_WRITE_CHECK = 108


class ConversionError(GFuzzError):
    """A convert-stage failure (the engine rejected the model)."""

    stage = 'convert'

    def __init__(self, code: int, op: Optional[str], message: str, node: Optional[int] = None):
        self.code = code
        self.op = op
        self.node = node
        super().__init__(f"convert failed with code {code} at {op}: {message}")


@dataclass(frozen=True)
class SeededBug:
    name: str
    kind: str  # numeric | abort | convert
    description: str


BUG_CATALOG: Dict[str, SeededBug] = {bug.name: bug for bug in (
    SeededBug('pool-pad-corner', 'numeric',
              "AvgPool divides corner windows by the full kernel area when padded on both axes"),
    SeededBug('concat-drop', 'numeric',
              "Concat with more than two inputs zero-fills every input after the second"),
    SeededBug('cast-sat', 'numeric',
              "Cast to i8 rounds to nearest instead of truncating"),
    SeededBug('fused-relu-skip', 'numeric',
              "the fused Conv2d+BiasAdd+Relu kernel omits the activation"),
    SeededBug('dilated-conv-tail', 'numeric',
              "the standalone Conv2d kernel drops the last kernel row when vertical dilation is above 1"),
    SeededBug('sigmoid-nan', 'numeric',
              "Sigmoid maps NaN inputs to 1"),
    SeededBug('realdiv-zero', 'numeric',
              "RealDiv by zero yields NaN instead of a signed infinity"),
    SeededBug('maxpool-pad-zero', 'numeric',
              "MaxPool pads with 0 instead of negative infinity"),
    SeededBug('muladd-fanout', 'numeric',
              "Mul+Add is fused even when the Mul has other consumers, which then read the Add result"),
    SeededBug('add-fanout-abort', 'abort',
              "inference aborts when an Add output feeds three or more consumers"),
    SeededBug('depthwise-order', 'numeric',
              "DepthwiseConv2d with multiplier above 1 emits channels multiplier-major"),
    SeededBug('transpose-convert', 'convert',
              "the model writer rejects Transpose with permutation 0312"),
)}

STANDARD_DEFECTS: Tuple[str, ...] = tuple(BUG_CATALOG)[:10]


def validate_bug_mask(mask: Iterable[str]) -> FrozenSet[str]:
    names = frozenset(mask)
    unknown = sorted(names - set(BUG_CATALOG))
    if unknown:
        raise ValidationError(f"Unknown seeded bug(s): {', '.join(unknown)}. "
                              f"Known: {', '.join(BUG_CATALOG)}")
    return names


# =============================================================================
# CONVERSION
# =============================================================================

@dataclass(frozen=True)
class Region:
    """Nodes executed as one kernel; ``members`` in data-flow order."""

    members: Tuple[int, ...]
    pattern: str

    @property
    def output(self) -> int:
        return self.members[-1]


@dataclass
class ExecutionPlan:
    # In execution order. Every member of a region holds the region output, so
    # a Mul fused despite other consumers hands them the Add result.
    regions: List[Region]


def _sole_successor(m: ModelSpec, v: int) -> Optional[Node]:
    edges = m.graph.out_edges(v)
    if len(edges) != 1:
        return None
    return m.graph.node(edges[0].dst)


def _fusion_candidates(m: ModelSpec, bugs: FrozenSet[str]) -> List[Tuple[int, ...]]:
    graph = m.graph
    found = []
    for v in graph.topological_order():
        node = graph.node(v)
        if node.op == 'Conv2d':
            bias = _sole_successor(m, v)
            if bias is None or bias.op != 'BiasAdd':
                continue
            members = [v, bias.id]
            relu = _sole_successor(m, bias.id)
            if relu is not None and relu.op == 'Relu':
                members.append(relu.id)
            found.append(tuple(members))
        elif node.op == 'Mul':
            add = _sole_successor(m, v)
            if add is not None and add.op == 'Add':
                found.append((v, add.id))
            elif 'muladd-fanout' in bugs:
                adds = [e.dst for e in graph.out_edges(v) if graph.node(e.dst).op == 'Add']
                if adds and sum(1 for e in graph.in_edges(adds[0]) if e.src == v) == 1:
                    found.append((v, adds[0]))
    return found


def _contracted(m: ModelSpec, owner: Mapping[int, int]) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(owner.get(n.id, n.id) for n in m.graph.nodes)
    for e in m.graph.edges:
        a, b = owner.get(e.src, e.src), owner.get(e.dst, e.dst)
        if a != b:
            g.add_edge(a, b)
    return g


def plan_execution(m: ModelSpec, fusion: bool = True, bugs: FrozenSet[str] = frozenset()) -> ExecutionPlan:
    """Group nodes into kernels and order them so every operand is ready."""
    owner: Dict[int, int] = {}
    fused: Dict[int, Tuple[Tuple[int, ...], str]] = {}
    if fusion:
        for members in _fusion_candidates(m, bugs):
            if any(v in owner for v in members):
                continue
            trial = dict(owner)
            trial.update({v: members[-1] for v in members})
            if not nx.is_directed_acyclic_graph(_contracted(m, trial)):
                continue
            owner = trial
            pattern = '+'.join(m.graph.node(v).op for v in members)
            fused[members[-1]] = (members, pattern)
    order = list(nx.lexicographical_topological_sort(_contracted(m, owner)))
    regions = []
    for v in order:
        if v in fused:
            members, pattern = fused[v]
            regions.append(Region(members, pattern))
        else:
            regions.append(Region((v,), m.graph.node(v).op))
    return ExecutionPlan(regions)


def convert(m: ModelSpec, bugs: FrozenSet[str] = frozenset(), fusion: bool = True) -> ExecutionPlan:
    """Convert stage: reject unsupported models, then plan execution."""
    for v in m.graph.topological_order():
        node = m.graph.node(v)
        if node.op not in BUILTIN_OPERATORS:
            raise ConversionError(CODE_UNSUPPORTED, node.op, "operator not supported", node.id)
        if ('transpose-convert' in bugs and node.op == 'Transpose'
                and node.param_dict.get('perm') == '0312'):
            raise ConversionError(CODE_WRITE_CHECK, node.op, "writeFb check failed", node.id)
    try:
        infer_shapes(m)
    except ShapeInferenceError as e:
        raise ConversionError(CODE_SHAPE, e.op, str(e), e.node) from e
    return plan_execution(m, fusion, bugs)


# =============================================================================
# KERNELS (NCHW)
# =============================================================================

def _geometry(x: np.ndarray, p: Mapping[str, Any]) -> Tuple[int, int, int, int, int, int, int, int]:
    sh, sw = p['stride_h'], p['stride_w']
    dh, dw = p.get('dilation_h', 1), p.get('dilation_w', 1)
    oh = window_output_size(x.shape[2], p['kernel_h'], p.get('pad_h', 0), sh, dh)
    ow = window_output_size(x.shape[3], p['kernel_w'], p.get('pad_w', 0), sw, dw)
    return oh, ow, sh, sw, dh, dw, p.get('pad_h', 0), p.get('pad_w', 0)


def _tap(xp: np.ndarray, i: int, j: int, geo) -> np.ndarray:
    oh, ow, sh, sw, dh, dw, _, _ = geo
    return xp[:, :, i * dh:i * dh + sh * (oh - 1) + 1:sh, j * dw:j * dw + sw * (ow - 1) + 1:sw]


def _pad_hw(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv2d_nchw(x: np.ndarray, w: np.ndarray, p: Mapping[str, Any], bugs: FrozenSet[str],
                fused: bool = False) -> np.ndarray:
    geo = _geometry(x, p)
    oh, ow = geo[0], geo[1]
    xp = _pad_hw(x, geo[6], geo[7])
    kh, kw, channels, filters = w.shape
    rows = kh
    if 'dilated-conv-tail' in bugs and not fused and geo[4] > 1 and kh > 1:
        rows = kh - 1
    out = np.zeros((x.shape[0], filters, oh, ow))
    for i in range(rows):
        for j in range(kw):
            window = _tap(xp, i, j, geo)
            for c in range(channels):
                out += window[:, c:c + 1] * w[i, j, c, :][None, :, None, None]
    return out


def depthwise_nchw(x: np.ndarray, w: np.ndarray, p: Mapping[str, Any], bugs: FrozenSet[str]) -> np.ndarray:
    geo = _geometry(x, p)
    oh, ow = geo[0], geo[1]
    xp = _pad_hw(x, geo[6], geo[7])
    kh, kw, channels, multiplier = w.shape
    out = np.zeros((x.shape[0], channels, multiplier, oh, ow))
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, geo)[:, :, None] * w[i, j][None, :, :, None, None]
    if 'depthwise-order' in bugs:
        out = out.transpose(0, 2, 1, 3, 4)
    return out.reshape(x.shape[0], channels * multiplier, oh, ow)


def maxpool_nchw(x: np.ndarray, p: Mapping[str, Any], bugs: FrozenSet[str]) -> np.ndarray:
    geo = _geometry(x, p)
    fill = 0.0 if 'maxpool-pad-zero' in bugs else -np.inf
    xp = _pad_hw(x, geo[6], geo[7], fill)
    out = np.full(x.shape[:2] + (geo[0], geo[1]), -np.inf)
    for i in range(p['kernel_h']):
        for j in range(p['kernel_w']):
            out = np.maximum(out, _tap(xp, i, j, geo))
    return out


def avgpool_nchw(x: np.ndarray, p: Mapping[str, Any], bugs: FrozenSet[str]) -> np.ndarray:
    geo = _geometry(x, p)
    oh, ow, ph, pw = geo[0], geo[1], geo[6], geo[7]
    xp = _pad_hw(x, ph, pw)
    valid = _pad_hw(np.ones((1, 1) + x.shape[2:]), ph, pw)
    total = np.zeros(x.shape[:2] + (oh, ow))
    count = np.zeros((1, 1, oh, ow))
    for i in range(p['kernel_h']):
        for j in range(p['kernel_w']):
            total += _tap(xp, i, j, geo)
            count += _tap(valid, i, j, geo)
    if 'pool-pad-corner' in bugs and ph > 0 and pw > 0:
        area = p['kernel_h'] * p['kernel_w']
        for r in (0, oh - 1):
            for c in (0, ow - 1):
                count[..., r, c] = area
    return total / count


def softmax_nchw(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(np.ascontiguousarray(x - np.max(x, axis=axis, keepdims=True)))
    acc = np.take(e, [0], axis=axis)
    for k in range(1, e.shape[axis]):
        acc = acc + np.take(e, [k], axis=axis)
    return e / acc


def sigmoid_nchw(x: np.ndarray, bugs: FrozenSet[str]) -> np.ndarray:
    y = 1.0 / (1.0 + np.exp(np.ascontiguousarray(-x)))
    if 'sigmoid-nan' in bugs:
        y = np.where(np.isnan(x), 1.0, y)
    return y


def realdiv(a: np.ndarray, b: np.ndarray, bugs: FrozenSet[str]) -> np.ndarray:
    y = np.divide(a, b)
    if 'realdiv-zero' in bugs:
        y = np.where(np.broadcast_to(b, y.shape) == 0, np.nan, y)
    return y


def cast_values(x: np.ndarray, to: str, bugs: FrozenSet[str]) -> np.ndarray:
    dtype = DTYPE_BY_NAME[to]
    if dtype is DType.F32:
        return x.astype(np.float32).astype(np.float64)
    low, high = INT_LIMITS[dtype]
    if x.dtype.kind != 'f':
        y = np.clip(x.astype(np.int64), low, high)
    else:
        y = np.clip(np.nan_to_num(x, nan=0.0, posinf=high, neginf=low), low, high)
        y = np.rint(y) if (dtype is DType.I8 and 'cast-sat' in bugs) else np.fix(y)
    return y.astype(np.int8 if dtype is DType.I8 else np.int32)


def transpose_nchw(x: np.ndarray, perm: str) -> np.ndarray:
    logical = PERMUTATIONS[perm]
    composite = tuple(TO_NHWC[logical[TO_NCHW[i]]] for i in range(4))
    return x.transpose(composite)


def reshape_nchw(x: np.ndarray, mode: str) -> np.ndarray:
    n, c, h, w = x.shape
    if mode == 'hw_to_h':
        return x.reshape(n, c, h * w, 1)
    return x.reshape(n, c, 1, h * w)


def slice_nchw(x: np.ndarray, begin: Sequence[int], size: Sequence[int], node: Node) -> np.ndarray:
    b = [begin[a] for a in TO_NCHW]
    s = [size[a] for a in TO_NCHW]
    if any(lo < 0 or n < 1 or lo + n > dim for lo, n, dim in zip(b, s, x.shape)):
        raise InferenceFault('slice-bounds', node.id, node.op, f"begin={list(begin)} size={list(size)}")
    return x[tuple(slice(lo, lo + n) for lo, n in zip(b, s))]


# =============================================================================
# RUN STAGE
# =============================================================================

class _Runner:
    def __init__(self, m: ModelSpec, bound: Mapping[int, np.ndarray], bugs: FrozenSet[str],
                 weights: WeightOverrides):
        self.m = m
        self.bound = bound
        self.bugs = bugs
        self.weights = weights
        self.values: Dict[int, np.ndarray] = {}

    def operands(self, v: int) -> List[np.ndarray]:
        return [self.values[e.src] for e in self.m.graph.in_edges(v)]

    def weight(self, node: Node, name: str, shape: Sequence[int]) -> np.ndarray:
        return node_weight(self.m, node, name, shape, self.weights)

    def run_region(self, region: Region) -> np.ndarray:
        graph = self.m.graph
        if region.pattern.startswith('Conv2d+BiasAdd'):
            conv, bias = graph.node(region.members[0]), graph.node(region.members[1])
            y = self.conv(conv, self.operands(conv.id), fused=True)
            y = y + self.weight(bias, 'bias', (y.shape[1],))[None, :, None, None]
            if len(region.members) == 3 and 'fused-relu-skip' not in self.bugs:
                y = np.maximum(y, 0.0)
            return y
        if region.pattern == 'Mul+Add':
            mul, add = region.members
            product = np.multiply(*self.operands(mul))
            terms = [product if e.src == mul else self.values[e.src] for e in graph.in_edges(add)]
            return np.add(terms[0], terms[1])
        return self.kernel(graph.node(region.output), self.operands(region.output))

    def conv(self, node: Node, xs: List[np.ndarray], fused: bool = False) -> np.ndarray:
        p = node.param_dict
        w = self.weight(node, 'filter', (p['kernel_h'], p['kernel_w'], xs[0].shape[1], p['filters']))
        return conv2d_nchw(xs[0], w, p, self.bugs, fused)

    def kernel(self, node: Node, xs: List[np.ndarray]) -> np.ndarray:
        op, p, bugs = node.op, node.param_dict, self.bugs
        if op == PLACEHOLDER:
            x = self.bound[node.id]
            return (x.astype(np.float64) if x.dtype.kind == 'f' else x).transpose(TO_NCHW)
        if op == CONST:
            return self.weight(node, 'value', p['shape']).transpose(TO_NCHW)
        if op == 'Conv2d':
            return self.conv(node, xs)
        if op == 'DepthwiseConv2d':
            w = self.weight(node, 'filter',
                            (p['kernel_h'], p['kernel_w'], xs[0].shape[1], p['depth_multiplier']))
            return depthwise_nchw(xs[0], w, p, bugs)
        if op == 'BiasAdd':
            return xs[0] + self.weight(node, 'bias', (xs[0].shape[1],))[None, :, None, None]
        if op == 'Add':
            if 'add-fanout-abort' in bugs and self.m.graph.out_degree(node.id) >= 3:
                raise InferenceFault('abort', node.id, op, "output buffer reused by too many consumers")
            return np.add(xs[0], xs[1])
        if op == 'Mul':
            return np.multiply(xs[0], xs[1])
        if op == 'Sub':
            return np.subtract(xs[0], xs[1])
        if op == 'RealDiv':
            return realdiv(xs[0], xs[1], bugs)
        if op == 'Relu':
            return np.maximum(xs[0], 0.0)
        if op == 'Relu6':
            return np.clip(xs[0], 0.0, 6.0)
        if op == 'Sigmoid':
            return sigmoid_nchw(xs[0], bugs)
        if op == 'Tanh':
            return np.tanh(np.ascontiguousarray(xs[0]))
        if op == 'Softmax':
            return softmax_nchw(xs[0], AXIS_NCHW[p.get('axis', 3)])
        if op == 'MaxPool':
            return maxpool_nchw(xs[0], p, bugs)
        if op == 'AvgPool':
            return avgpool_nchw(xs[0], p, bugs)
        if op == 'Concat':
            if 'concat-drop' in bugs and len(xs) > 2:
                xs = xs[:2] + [np.zeros_like(x) for x in xs[2:]]
            try:
                return np.concatenate(xs, axis=AXIS_NCHW[p.get('axis', 3)])
            except ValueError as e:
                raise InferenceFault('concat-mismatch', node.id, op, str(e)) from e
        if op == 'Reshape':
            return reshape_nchw(xs[0], p.get('mode', 'hw_to_w'))
        if op == 'Transpose':
            return transpose_nchw(xs[0], p['perm'])
        if op == 'Slice':
            return slice_nchw(xs[0], p['begin'], p['size'], node)
        if op == 'Pad':
            return np.pad(xs[0], ((0, 0), (0, 0), (p['pad_top'], p['pad_bottom']),
                                  (p['pad_left'], p['pad_right'])))
        if op == 'Cast':
            return cast_values(xs[0], p['to'], bugs)
        raise InferenceFault('unsupported-op', node.id, op, "no kernel")


def run_optimized(m: ModelSpec, inputs: Optional[Sequence[np.ndarray]] = None,
                  bug_mask: Iterable[str] = (), fusion: bool = True,
                  weights: WeightOverrides = None) -> ExecutionResult:
    """
    Convert and run ``m``. Raises ConversionError at the convert stage and
    InferenceFault at the run stage.
    """
    bugs = validate_bug_mask(bug_mask)
    plan = convert(m, bugs, fusion)
    runner = _Runner(m, prepare_inputs(m, inputs), bugs, weights)
    taps: Dict[int, np.ndarray] = {}
    regions: Dict[int, str] = {}
    kernels: Dict[int, Tuple[int, ...]] = {}
    with np.errstate(all='ignore'):
        for region in plan.regions:
            value = runner.run_region(region)
            for v in region.members:
                runner.values[v] = value
            taps[region.output] = value
            regions[region.output] = region.pattern
            kernels[region.output] = region.members
    nhwc = {v: to_output(x.transpose(TO_NHWC)) for v, x in taps.items()}
    outputs = {v: nhwc[v] for v in m.outputs()}
    return ExecutionResult(outputs, nhwc, regions, kernels)
