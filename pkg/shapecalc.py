"""
Shape and parameter resolution.

Turns an operator-level graph into an executable model: samples shape-free
parameters from their schemas, solves SAME-preserving padding for
convolutions and pools, inserts Cast/Slice/Pad adapters in front of
aggregations whose operands disagree, and folds symmetric Pad nodes into the
convolution that consumes them.

All tensors are rank 4 in NHWC layout. Output sizes of padded operators use
the conventional floor formula; the SAME solver only returns parameters for
which that formula and ``(i + 2p - d(f - 1)) / s`` agree and equal the input
size.
"""

import random
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from model_ir import (
    CONST,
    PADDED_OPERATORS,
    PLACEHOLDER,
    BlockCorpus,
    Edge,
    Graph,
    ModelSpec,
    Node,
    OperatorKind,
    BUILTIN_OPERATORS,
    freeze_params,
)
from utils.errors import GFuzzError
from utils.logger import setup_logger
from utils.validators import validate_positive_int

logger = setup_logger(__name__)

Shape = Tuple[int, ...]
TensorInfo = Tuple[Shape, str]

FLOAT = 'f32'
POOLS = frozenset({'MaxPool', 'AvgPool'})
CONVOLUTIONS = frozenset({'Conv2d', 'DepthwiseConv2d'})
ELEMENTWISE_BINARY = frozenset({'Add', 'Mul', 'Sub', 'RealDiv'})
UNARY_SAME = frozenset({'BiasAdd', 'Relu', 'Relu6', 'Sigmoid', 'Tanh', 'Softmax'})

PERMUTATIONS = {
    '0213': (0, 2, 1, 3),
    '0132': (0, 1, 3, 2),
    '0312': (0, 3, 1, 2),
    '0231': (0, 2, 3, 1),
}

# Largest per-side padding a Pad adapter may use (the Pad schema's range)
MAX_ADAPTER_PAD = 2
DEFAULT_CONST_SHAPE = (1, 8, 8, 3)


class ShapeInferenceError(GFuzzError):
    """A node's operands do not admit an output shape."""

    def __init__(self, node: int, op: str, operand_shapes: Sequence[Any], reason: str):
        self.node = node
        self.op = op
        self.operand_shapes = list(operand_shapes)
        self.reason = reason
        super().__init__(f"node {node} ({op}): {reason}; operands {self.operand_shapes}")


class AdapterSynthesisError(GFuzzError):
    """The model cannot be made executable; the generator draws another one."""
    pass


@dataclass(frozen=True)
class ShapeCaps:
    max_stride: int = 2
    max_dilation: int = 3
    max_tensor_elements: int = 262144

    def __post_init__(self):
        validate_positive_int(self.max_stride, 'max_stride')
        validate_positive_int(self.max_dilation, 'max_dilation')
        validate_positive_int(self.max_tensor_elements, 'max_tensor_elements')


# =============================================================================
# OUTPUT-SIZE ARITHMETIC
# =============================================================================

def window_output_size(i: int, f: int, p: int, s: int, d: int = 1) -> int:
    """Conventional output size of a padded window: floor((i + 2p - d(f-1) - 1) / s) + 1."""
    return (i + 2 * p - d * (f - 1) - 1) // s + 1


def same_output_size(i: int, f: int, p: int, s: int, d: int = 1) -> Optional[int]:
    """(i + 2p - d(f - 1)) / s when it is a whole number, else None."""
    numerator = i + 2 * p - d * (f - 1)
    if numerator % s:
        return None
    return numerator // s


def same_shape_solutions(i: int, f: int, strides: Sequence[int], dilations: Sequence[int],
                         max_pad: int) -> List[Tuple[int, int, int]]:
    """All (pad, stride, dilation) keeping one spatial dim of size i unchanged."""
    found = []
    for s in strides:
        for d in dilations:
            for p in range(0, max_pad + 1):
                if same_output_size(i, f, p, s, d) == i and window_output_size(i, f, p, s, d) == i:
                    found.append((p, s, d))
    return found


def _span(kind: OperatorKind, name: str, cap: int) -> List[int]:
    domain = kind.domain(name)
    if domain is None:
        return [1]
    if domain.values:
        return sorted(v for v in domain.values if 1 <= v <= cap)
    return list(range(max(1, domain.low), min(domain.high, cap) + 1))


def _solve_axis(i: int, kind: OperatorKind, axis: str, rng: random.Random, caps: ShapeCaps,
                preset: Mapping[str, Any]) -> Tuple[int, int, int, int]:
    pool = kind.name in POOLS
    kernels = _span(kind, f'kernel_{axis}', 1 << 16)
    strides = _span(kind, f'stride_{axis}', caps.max_stride)
    dilations = [1] if pool else _span(kind, f'dilation_{axis}', caps.max_dilation)

    order = kernels[:]
    rng.shuffle(order)
    wanted_f = preset.get(f'kernel_{axis}')
    if wanted_f in order:
        order.remove(wanted_f)
        order.insert(0, wanted_f)

    wanted_s = preset.get(f'stride_{axis}')
    wanted_d = preset.get(f'dilation_{axis}')
    for f in order:
        # A pool window that is entirely padding has no defined value
        solutions = same_shape_solutions(i, f, strides, dilations, f - 1 if pool else f)
        if not solutions:
            continue
        preferred = [sol for sol in solutions
                     if (wanted_s is None or sol[1] == wanted_s) and (wanted_d is None or sol[2] == wanted_d)]
        p, s, d = rng.choice(preferred or solutions)
        return f, p, s, d
    raise AdapterSynthesisError(f"No SAME-preserving {kind.name} parameters for size {i}")


def solve_same_shape_params(in_shape: Sequence[int], op_kind: Any, rng: random.Random,
                            caps: ShapeCaps = ShapeCaps(),
                            preset: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """
    Parameters of a Conv2d, DepthwiseConv2d, MaxPool or AvgPool whose output
    has the same H and W as ``in_shape``.

    Kernel, stride and dilation values in ``preset`` are honored whenever a
    solution with them exists. Kernel size 1 with no padding always works.
    """
    kind = BUILTIN_OPERATORS[op_kind] if isinstance(op_kind, str) else op_kind
    if kind.name not in PADDED_OPERATORS:
        raise ValueError(f"{kind.name} has no padding to solve")
    preset = dict(preset or {})
    _, height, width, _ = in_shape

    params: Dict[str, Any] = {}
    for axis, size in (('h', height), ('w', width)):
        f, p, s, d = _solve_axis(size, kind, axis, rng, caps, preset)
        params[f'kernel_{axis}'] = f
        params[f'pad_{axis}'] = p
        params[f'stride_{axis}'] = s
        if kind.name in CONVOLUTIONS:
            params[f'dilation_{axis}'] = d

    for extra in ('filters', 'depth_multiplier'):
        domain = kind.domain(extra)
        if domain is not None:
            value = preset.get(extra)
            params[extra] = value if domain.contains(value) else domain.sample(rng)
    return params


# =============================================================================
# SHAPE INFERENCE
# =============================================================================

def _fail(node: Node, operands: Sequence[TensorInfo], reason: str):
    raise ShapeInferenceError(node.id, node.op, [list(s) for s, _ in operands], reason)


def infer_node(node: Node, operands: Sequence[TensorInfo], kind: OperatorKind,
               input_shapes: Sequence[Shape] = ()) -> TensorInfo:
    """Output shape and dtype of one node given its operands."""
    op = node.op
    params = node.param_dict

    for shape, _ in operands:
        if len(shape) != 4:
            _fail(node, operands, "operands must be rank 4")
    if not kind.builtin:
        # Operators outside the catalog are assumed to preserve their first operand
        return operands[0] if operands else (DEFAULT_CONST_SHAPE, FLOAT)
    if kind.is_variadic:
        if len(operands) < kind.arity:
            _fail(node, operands, f"needs at least {kind.arity} inputs, has {len(operands)}")
    elif len(operands) != kind.arity:
        _fail(node, operands, f"needs {kind.arity} inputs, has {len(operands)}")
    if kind.float_only and any(dtype != FLOAT for _, dtype in operands):
        _fail(node, operands, "requires f32 operands")

    if op == PLACEHOLDER:
        index = params.get('index', 0)
        if not 0 <= index < len(input_shapes):
            _fail(node, operands, f"input index {index} out of range")
        return tuple(input_shapes[index]), FLOAT
    if op == CONST:
        return tuple(params.get('shape', DEFAULT_CONST_SHAPE)), FLOAT

    shape, dtype = operands[0]
    n, h, w, c = shape

    if op in ELEMENTWISE_BINARY:
        if operands[1][0] != shape:
            _fail(node, operands, "operand shapes differ")
        return shape, FLOAT
    if op in UNARY_SAME:
        return shape, FLOAT
    if op in CONVOLUTIONS or op in POOLS:
        dh = params.get('dilation_h', 1)
        dw = params.get('dilation_w', 1)
        oh = window_output_size(h, params['kernel_h'], params.get('pad_h', 0), params['stride_h'], dh)
        ow = window_output_size(w, params['kernel_w'], params.get('pad_w', 0), params['stride_w'], dw)
        if oh < 1 or ow < 1:
            _fail(node, operands, f"window produces empty output {oh}x{ow}")
        if op == 'Conv2d':
            return (n, oh, ow, params['filters']), FLOAT
        if op == 'DepthwiseConv2d':
            return (n, oh, ow, c * params['depth_multiplier']), FLOAT
        return (n, oh, ow, c), FLOAT
    if op == 'Concat':
        axis = params.get('axis', 3)
        for other, other_dtype in operands[1:]:
            if other_dtype != dtype:
                _fail(node, operands, "operand dtypes differ")
            if any(a != b for k, (a, b) in enumerate(zip(shape, other)) if k != axis):
                _fail(node, operands, f"operands differ outside axis {axis}")
        out = list(shape)
        out[axis] = sum(s[axis] for s, _ in operands)
        return tuple(out), dtype
    if op == 'Reshape':
        if params.get('mode') == 'hw_to_h':
            return (n, h * w, 1, c), dtype
        return (n, 1, h * w, c), dtype
    if op == 'Transpose':
        perm = PERMUTATIONS[params['perm']]
        return tuple(shape[k] for k in perm), dtype
    if op == 'Slice':
        begin, size = params.get('begin'), params.get('size')
        if begin is None or size is None or len(begin) != 4 or len(size) != 4:
            _fail(node, operands, "slice needs 4-element begin and size")
        for b, s, dim in zip(begin, size, shape):
            if b < 0 or s < 1 or b + s > dim:
                _fail(node, operands, f"slice begin={list(begin)} size={list(size)} out of bounds")
        return tuple(size), dtype
    if op == 'Pad':
        return (n, h + params['pad_top'] + params['pad_bottom'],
                w + params['pad_left'] + params['pad_right'], c), dtype
    if op == 'Cast':
        return shape, params['to']
    _fail(node, operands, "unsupported operator")


def infer_shapes(m: ModelSpec, corpus: Optional[BlockCorpus] = None) -> Dict[int, TensorInfo]:
    """Per-node (shape, dtype) in topological order, or ShapeInferenceError."""
    lookup = corpus.operator if corpus is not None else _catalog_operator
    infos: Dict[int, TensorInfo] = {}
    for v in m.graph.topological_order():
        node = m.graph.node(v)
        operands = [infos[e.src] for e in m.graph.in_edges(v)]
        infos[v] = infer_node(node, operands, lookup(node.op), m.input_shapes)
    return infos


def _catalog_operator(name: str) -> OperatorKind:
    if name in BUILTIN_OPERATORS:
        return BUILTIN_OPERATORS[name]
    return OperatorKind(name, builtin=False)


# =============================================================================
# MODEL RESOLUTION
# =============================================================================

class _Resolver:
    """Forward pass over a graph that fixes parameters and inserts adapters."""

    def __init__(self, graph: Graph, input_shapes: Sequence[Shape], lookup, rng: random.Random,
                 caps: ShapeCaps, sample: bool):
        self.nodes: Dict[int, Node] = {n.id: n for n in graph.nodes}
        self.inputs: Dict[int, List[Tuple[int, int]]] = {
            n.id: [(e.src, e.src_slot) for e in graph.in_edges(n.id)] for n in graph.nodes
        }
        self.order = graph.topological_order()
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.lookup = lookup
        self.rng = rng
        self.caps = caps
        self.sample = sample
        self.infos: Dict[int, TensorInfo] = {}
        self.next_id = graph.next_id()
        self.inserted = 0

    def run(self) -> Graph:
        for v in self.order:
            self.resolve(v)
        edges = []
        for dst, sources in self.inputs.items():
            for slot, (src, src_slot) in enumerate(sources):
                edges.append(Edge(src, src_slot, dst, slot))
        return Graph(tuple(sorted(self.nodes.values(), key=lambda n: n.id)), tuple(sorted(edges)))

    def adapter(self, op: str, source: int, params: Mapping[str, Any]) -> int:
        node = Node(self.next_id, op=op, params=freeze_params(params))
        self.next_id += 1
        self.nodes[node.id] = node
        self.inputs[node.id] = [(source, 0)]
        self.infos[node.id] = infer_node(node, [self.infos[source]], self.lookup(op), self.input_shapes)
        self.inserted += 1
        return node.id

    def operand_infos(self, v: int) -> List[TensorInfo]:
        return [self.infos[src] for src, _ in self.inputs[v]]

    def resolve(self, v: int) -> None:
        node = self.nodes[v]
        kind = self.lookup(node.op)
        operands = self.operand_infos(v)

        dtypes = {dtype for _, dtype in operands}
        if (kind.float_only and dtypes - {FLOAT}) or (kind.aggregation and len(dtypes) > 1):
            self.cast_operands(v)
        if self.sample:
            node = self.assign_params(node, kind)
            self.nodes[v] = node
        if kind.aggregation and len(self.inputs[v]) > 1 and kind.builtin:
            self.equalize(v, node)

        info = infer_node(node, self.operand_infos(v), kind, self.input_shapes)
        elements = 1
        for dim in info[0]:
            elements *= dim
        if elements > self.caps.max_tensor_elements:
            raise AdapterSynthesisError(f"node {v} ({node.op}) output {list(info[0])} exceeds "
                                        f"{self.caps.max_tensor_elements} elements")
        self.infos[v] = info

    def cast_operands(self, v: int) -> None:
        for slot, (src, src_slot) in enumerate(self.inputs[v]):
            if self.infos[src][1] != FLOAT:
                self.inputs[v][slot] = (self.adapter('Cast', src, {'to': FLOAT}), 0)

    def equalize(self, v: int, node: Node) -> None:
        shapes = [shape for shape, _ in self.operand_infos(v)]
        if len(set(shapes)) == 1:
            return
        free_axis = node.param_dict.get('axis') if node.op == 'Concat' else None
        target = []
        for axis in range(4):
            sizes = [s[axis] for s in shapes]
            if axis == free_axis:
                target.append(None)
            elif axis in (1, 2) and max(sizes) - min(sizes) <= 2 * MAX_ADAPTER_PAD and self.rng.random() < 0.5:
                target.append(max(sizes))
            else:
                target.append(min(sizes))

        for slot, (src, src_slot) in enumerate(self.inputs[v]):
            shape = self.infos[src][0]
            current = src
            if any(t is not None and t < dim for t, dim in zip(target, shape)):
                size = [dim if t is None else min(t, dim) for t, dim in zip(target, shape)]
                current = self.adapter('Slice', current, {'begin': [0, 0, 0, 0], 'size': size})
            grow = [0 if t is None else max(0, t - dim) for t, dim in zip(target, shape)]
            if grow[1] or grow[2]:
                current = self.adapter('Pad', current, {
                    'pad_top': grow[1] // 2, 'pad_bottom': grow[1] - grow[1] // 2,
                    'pad_left': grow[2] // 2, 'pad_right': grow[2] - grow[2] // 2,
                })
            if current != src:
                self.inputs[v][slot] = (current, 0)

        shapes = [shape for shape, _ in self.operand_infos(v)]
        reference = shapes[0]
        for shape in shapes[1:]:
            if any(a != b for k, (a, b) in enumerate(zip(reference, shape)) if k != free_axis):
                raise AdapterSynthesisError(f"Could not equalize operands of node {v}: {shapes}")

    def assign_params(self, node: Node, kind: OperatorKind) -> Node:
        params = dict(node.params)
        operands = self.operand_infos(node.id)

        for domain in kind.param_schema:
            if not domain.resampleable:
                continue
            if domain.name in params and domain.contains(params[domain.name]):
                continue
            if kind.name in PADDED_OPERATORS:
                continue  # solved below
            params[domain.name] = domain.sample(self.rng)

        if kind.name in PADDED_OPERATORS:
            solved = solve_same_shape_params(operands[0][0], kind, self.rng, self.caps, preset=params)
            params.update(solved)
        elif kind.name == 'Slice' and not _valid_slice(params, operands[0][0]):
            params.update(_sample_slice(operands[0][0], self.rng))
        elif kind.name == CONST and 'shape' not in params:
            params['shape'] = list(self.input_shapes[0] if self.input_shapes else DEFAULT_CONST_SHAPE)
        return node.with_params(params)


def _valid_slice(params: Mapping[str, Any], shape: Shape) -> bool:
    begin, size = params.get('begin'), params.get('size')
    if begin is None or size is None:
        return False
    return all(b >= 0 and s >= 1 and b + s <= dim for b, s, dim in zip(begin, size, shape))


def _sample_slice(shape: Shape, rng: random.Random) -> Dict[str, List[int]]:
    begin, size = [0, 0, 0, 0], list(shape)
    for axis in (1, 2):
        size[axis] = rng.randint(1, shape[axis])
        begin[axis] = rng.randint(0, shape[axis] - size[axis])
    return {'begin': begin, 'size': size}


def resolve_model(graph: Graph, input_shapes: Sequence[Sequence[int]], corpus: Optional[BlockCorpus],
                  rng: random.Random, caps: ShapeCaps = ShapeCaps(), weights_seed: int = 0) -> ModelSpec:
    """
    Make an operator-level graph executable.

    Shape-free parameters already on a node are kept when they are inside the
    schema; missing ones are sampled. Padded operators are solved for
    SAME-preserving output, adapters are inserted, then Pads are merged.
    """
    lookup = corpus.operator if corpus is not None else _catalog_operator
    try:
        resolver = _Resolver(graph, [tuple(s) for s in input_shapes], lookup, rng, caps, sample=True)
        resolved = resolver.run()
    except ShapeInferenceError as e:
        raise AdapterSynthesisError(str(e)) from e
    model = merge_pads(ModelSpec(resolved, tuple(tuple(s) for s in input_shapes), weights_seed), corpus)
    logger.debug("Resolved model: %d nodes, %d adapters", model.graph.node_count, resolver.inserted)
    return model


def insert_aggregation_adapters(m: ModelSpec, corpus: Optional[BlockCorpus] = None,
                                rng: Optional[random.Random] = None) -> ModelSpec:
    """Insert Cast/Slice/Pad adapters where aggregation operands disagree."""
    lookup = corpus.operator if corpus is not None else _catalog_operator
    rng = rng if rng is not None else random.Random(0)
    caps = ShapeCaps(max_tensor_elements=1 << 62)
    try:
        graph = _Resolver(m.graph, m.input_shapes, lookup, rng, caps, sample=False).run()
    except ShapeInferenceError as e:
        raise AdapterSynthesisError(str(e)) from e
    return m.with_graph(graph)


# =============================================================================
# PAD MERGING
# =============================================================================

def merge_pads(m: ModelSpec, corpus: Optional[BlockCorpus] = None) -> ModelSpec:
    """
    Fold a symmetric Pad into the Conv2d/DepthwiseConv2d that is its only
    consumer, as long as the merged padding stays within the kernel size.

    Pools are left alone: their padding is not zero-valued.
    """
    graph = m.graph
    merged = 0
    while True:
        candidate = _mergeable_pad(graph)
        if candidate is None:
            break
        pad, conv = candidate
        params = conv.param_dict
        pad_params = pad.param_dict
        params['pad_h'] = params.get('pad_h', 0) + pad_params['pad_top']
        params['pad_w'] = params.get('pad_w', 0) + pad_params['pad_left']
        source = graph.in_edges(pad.id)[0]
        edges = [e for e in graph.edges if e.src != pad.id and e.dst != pad.id]
        edges.append(Edge(source.src, source.src_slot, conv.id, 0))
        nodes = [conv.with_params(params) if n.id == conv.id else n for n in graph.nodes if n.id != pad.id]
        graph = Graph(tuple(nodes), tuple(sorted(edges)))
        merged += 1
    if merged:
        logger.debug("Merged %d Pad node(s) into convolutions", merged)
    return m.with_graph(graph)


def _mergeable_pad(graph: Graph) -> Optional[Tuple[Node, Node]]:
    for node in graph.nodes:
        if node.op != 'Pad' or graph.in_degree(node.id) != 1:
            continue
        outs = graph.out_edges(node.id)
        if len(outs) != 1 or outs[0].dst_slot != 0:
            continue
        consumer = graph.node(outs[0].dst)
        if consumer.op not in CONVOLUTIONS:
            continue
        p = node.param_dict
        if p['pad_top'] != p['pad_bottom'] or p['pad_left'] != p['pad_right']:
            continue
        c = consumer.param_dict
        if (c.get('pad_h', 0) + p['pad_top'] > c['kernel_h']
                or c.get('pad_w', 0) + p['pad_left'] > c['kernel_w']):
            continue
        return node, consumer
    return None
