"""
Computation-graph intermediate representation.

Operators, blocks and the block corpus describe the generation vocabulary;
Graph is a directed acyclic multigraph over operator (or block) nodes with
explicit, ordered input slots; ModelSpec is an executable model: an
operator-level graph plus input shapes and the seed that regenerates its
weights and inputs. All types are immutable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx

from utils.errors import GFuzzError
from utils.logger import setup_logger
from utils.validators import ValidationError, validate_corpus_entry

logger = setup_logger(__name__)

PLACEHOLDER = 'Placeholder'
CONST = 'Const'

MODEL_FORMAT = 'gfuzz-model'
MODEL_VERSION = 1


class CorpusParseError(ValidationError):
    """Corpus file is not valid JSON or lacks the top-level structure."""
    pass


class ModelDecodeError(ValidationError):
    """Serialized model bytes are corrupt or inconsistent."""
    pass


class WiringError(GFuzzError):
    """A subgraph block cannot absorb the realized degree of its node."""
    pass


# =============================================================================
# OPERATORS
# =============================================================================

class ArityClass(str, Enum):
    FIXED = 'fixed'
    VARIADIC = 'variadic'


class DomainKind(str, Enum):
    ENUM = 'enum'
    RANGE = 'range'
    SHAPE = 'shape'


@dataclass(frozen=True)
class ParamDomain:
    """Value domain of one operator parameter."""

    name: str
    kind: DomainKind
    values: tuple = ()
    low: int = 0
    high: int = 0

    def __post_init__(self):
        if self.kind is DomainKind.ENUM and not self.values:
            raise ValidationError(f"Parameter '{self.name}' has an empty enumeration")
        if self.kind is DomainKind.RANGE and self.low > self.high:
            raise ValidationError(f"Parameter '{self.name}' has range low > high ({self.low} > {self.high})")

    @property
    def resampleable(self) -> bool:
        return self.kind is not DomainKind.SHAPE

    def contains(self, value: Any) -> bool:
        if self.kind is DomainKind.ENUM:
            return value in self.values
        if self.kind is DomainKind.RANGE:
            return isinstance(value, int) and not isinstance(value, bool) and self.low <= value <= self.high
        return True

    def sample(self, rng) -> Any:
        if self.kind is DomainKind.ENUM:
            return rng.choice(self.values)
        if self.kind is DomainKind.RANGE:
            return rng.randint(self.low, self.high)
        raise ValueError(f"Parameter '{self.name}' is shape-dependent and cannot be sampled directly")

    def to_json(self) -> Dict[str, Any]:
        if self.kind is DomainKind.ENUM:
            return {'enum': list(self.values)}
        if self.kind is DomainKind.RANGE:
            return {'range': [self.low, self.high]}
        return {'shape': True}

    @classmethod
    def from_json(cls, name: str, raw: Any) -> 'ParamDomain':
        if not isinstance(raw, dict) or len(raw) != 1:
            raise ValidationError(f"Parameter '{name}' must be one of {{enum|range|shape}}, got: {raw!r}")
        (kind, value), = raw.items()
        if kind == 'enum':
            if not isinstance(value, list):
                raise ValidationError(f"Parameter '{name}': enum must be a list")
            return cls(name, DomainKind.ENUM, values=tuple(value))
        if kind == 'range':
            if (not isinstance(value, list) or len(value) != 2
                    or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
                raise ValidationError(f"Parameter '{name}': range must be [low, high] integers")
            return cls(name, DomainKind.RANGE, low=value[0], high=value[1])
        if kind == 'shape':
            return cls(name, DomainKind.SHAPE)
        raise ValidationError(f"Parameter '{name}' has unknown domain kind '{kind}'")


def _enum(name, *values):
    return ParamDomain(name, DomainKind.ENUM, values=tuple(values))


def _range(name, low, high):
    return ParamDomain(name, DomainKind.RANGE, low=low, high=high)


def _shape(name):
    return ParamDomain(name, DomainKind.SHAPE)


@dataclass(frozen=True)
class OperatorKind:
    """An operator type: arity, parameter schema and execution traits."""

    name: str
    arity_class: ArityClass = ArityClass.FIXED
    # Exact input count for fixed operators, minimum for variadic ones
    arity: int = 1
    param_schema: Tuple[ParamDomain, ...] = ()
    aggregation: bool = False
    float_only: bool = True
    builtin: bool = True

    def domain(self, name: str) -> Optional[ParamDomain]:
        for domain in self.param_schema:
            if domain.name == name:
                return domain
        return None

    @property
    def param_names(self) -> Tuple[str, ...]:
        return tuple(d.name for d in self.param_schema)

    @property
    def is_variadic(self) -> bool:
        return self.arity_class is ArityClass.VARIADIC

    def with_overrides(self, overrides: Sequence[ParamDomain]) -> 'OperatorKind':
        schema = {d.name: d for d in self.param_schema}
        for domain in overrides:
            schema[domain.name] = domain
        return replace(self, param_schema=tuple(schema.values()))


_WINDOW = (
    _range('kernel_h', 1, 5), _range('kernel_w', 1, 5),
    _range('stride_h', 1, 2), _range('stride_w', 1, 2),
    _range('dilation_h', 1, 3), _range('dilation_w', 1, 3),
    _shape('pad_h'), _shape('pad_w'),
)

_POOL_WINDOW = (
    _range('kernel_h', 1, 3), _range('kernel_w', 1, 3),
    _range('stride_h', 1, 2), _range('stride_w', 1, 2),
    _shape('pad_h'), _shape('pad_w'),
)

BUILTIN_OPERATORS: Mapping[str, OperatorKind] = MappingProxyType({
    op.name: op for op in (
        OperatorKind(PLACEHOLDER, arity=0, param_schema=(_shape('index'),), float_only=False),
        OperatorKind(CONST, arity=0, param_schema=(_shape('shape'),), float_only=False),
        OperatorKind('Conv2d', param_schema=(_range('filters', 1, 16),) + _WINDOW),
        OperatorKind('DepthwiseConv2d', param_schema=(_range('depth_multiplier', 1, 2),) + _WINDOW),
        OperatorKind('BiasAdd'),
        OperatorKind('Add', arity=2, aggregation=True),
        OperatorKind('Mul', arity=2, aggregation=True),
        OperatorKind('Sub', arity=2, aggregation=True),
        OperatorKind('RealDiv', arity=2, aggregation=True),
        OperatorKind('Relu'),
        OperatorKind('Relu6'),
        OperatorKind('Sigmoid'),
        OperatorKind('Tanh'),
        OperatorKind('Softmax', param_schema=(_enum('axis', 1, 2, 3),)),
        OperatorKind('MaxPool', param_schema=_POOL_WINDOW),
        OperatorKind('AvgPool', param_schema=_POOL_WINDOW),
        OperatorKind('Concat', arity_class=ArityClass.VARIADIC, arity=1,
                     param_schema=(_enum('axis', 1, 2, 3),), aggregation=True, float_only=False),
        OperatorKind('Reshape', param_schema=(_enum('mode', 'hw_to_w', 'hw_to_h'),), float_only=False),
        OperatorKind('Transpose', param_schema=(_enum('perm', '0213', '0132', '0312', '0231'),),
                     float_only=False),
        OperatorKind('Slice', param_schema=(_shape('begin'), _shape('size')), float_only=False),
        OperatorKind('Pad', param_schema=(_range('pad_top', 0, 2), _range('pad_bottom', 0, 2),
                                          _range('pad_left', 0, 2), _range('pad_right', 0, 2)),
                     float_only=False),
        OperatorKind('Cast', param_schema=(_enum('to', 'f32', 'i32', 'i8'),), float_only=False),
    )
})

PADDED_OPERATORS = frozenset({'Conv2d', 'DepthwiseConv2d', 'MaxPool', 'AvgPool'})


# =============================================================================
# BLOCKS AND CORPUS
# =============================================================================

@dataclass(frozen=True)
class Block:
    """A generation unit: one operator or a predefined subgraph."""

    name: str
    members: Tuple[str, ...]
    inner_edges: Tuple[Tuple[int, int], ...] = ()
    in_degree: frozenset = frozenset({1})
    out_degree: frozenset = frozenset({0, 1, 2})

    @property
    def kind(self) -> str:
        return 'subgraph' if len(self.members) > 1 else 'single-operator'

    @property
    def is_subgraph(self) -> bool:
        return len(self.members) > 1

    def accepts_in(self, degree: int) -> bool:
        return degree in self.in_degree

    def accepts_out(self, degree: int) -> bool:
        return degree in self.out_degree

    def member_graph(self) -> nx.MultiDiGraph:
        g = nx.MultiDiGraph()
        g.add_nodes_from(range(len(self.members)))
        g.add_edges_from(self.inner_edges)
        return g

    def exit_member(self) -> int:
        """Member whose output leaves the block: the last member with no inner successor."""
        sources = {src for src, _ in self.inner_edges}
        sinks = [i for i in range(len(self.members)) if i not in sources]
        return sinks[-1]

    def validate(self) -> None:
        if self.is_subgraph and not self.inner_edges:
            raise ValidationError(f"Subgraph block {self.name!r} has no inner edges")
        if not self.is_subgraph and self.inner_edges:
            raise ValidationError(f"Single-operator block {self.name!r} cannot have inner edges")
        for src, dst in self.inner_edges:
            if not (0 <= src < len(self.members) and 0 <= dst < len(self.members)):
                raise ValidationError(f"Block {self.name!r} inner edge ({src}, {dst}) is out of range")
        if not nx.is_directed_acyclic_graph(self.member_graph()):
            raise ValidationError(f"Block {self.name!r} inner edges contain a cycle")

    def to_json(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'members': list(self.members),
            'inner_edges': [list(e) for e in self.inner_edges],
            'in_degree': sorted(self.in_degree),
            'out_degree': sorted(self.out_degree),
        }


# Graph inputs are injected Placeholder sources with at least one consumer.
PLACEHOLDER_BLOCK = Block(PLACEHOLDER, (PLACEHOLDER,), (), frozenset({0}), frozenset(range(1, 17)))


@dataclass(frozen=True)
class BlockCorpus:
    """Catalog of blocks plus the operator kinds their members refer to."""

    blocks: Tuple[Block, ...]
    operators: Mapping[str, OperatorKind] = field(default_factory=dict, compare=False)

    @cached_property
    def _by_name(self) -> Dict[str, Block]:
        return {b.name: b for b in self.blocks}

    @cached_property
    def operator_types(self) -> Tuple[str, ...]:
        """Operator names in corpus declaration order (first appearance)."""
        seen: Dict[str, None] = {}
        for block in self.blocks:
            for member in block.members:
                seen.setdefault(member, None)
        return tuple(seen)

    def block(self, name: str) -> Block:
        if name == PLACEHOLDER and name not in self._by_name:
            return PLACEHOLDER_BLOCK
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"Block {name!r} is not in the corpus") from None

    def has_block(self, name: str) -> bool:
        return name in self._by_name

    def index(self, block: Block) -> int:
        return self.blocks.index(block)

    def operator(self, name: str) -> OperatorKind:
        if name in self.operators:
            return self.operators[name]
        if name in BUILTIN_OPERATORS:
            return BUILTIN_OPERATORS[name]
        return OperatorKind(name, builtin=False)

    def single_block(self, op: str) -> Optional[Block]:
        for block in self.blocks:
            if not block.is_subgraph and block.members[0] == op:
                return block
        return None

    def blocks_containing(self, op: str) -> List[Block]:
        return [b for b in self.blocks if b.is_subgraph and op in b.members]


def _open_slots(block: Block, corpus: BlockCorpus) -> Tuple[List[Tuple[int, int]], Optional[int]]:
    """Member input slots left open by inner edges, and the last variadic member."""
    inner_in = [0] * len(block.members)
    for _, dst in block.inner_edges:
        inner_in[dst] += 1
    slots = []
    variadic = None
    for index, member in enumerate(block.members):
        kind = corpus.operator(member)
        if kind.is_variadic:
            variadic = index
        for slot in range(inner_in[index], max(kind.arity, inner_in[index])):
            slots.append((index, slot))
    return slots, variadic


def parse_corpus(data: Any) -> BlockCorpus:
    """Build a validated BlockCorpus from decoded corpus JSON."""
    if not isinstance(data, dict) or not isinstance(data.get('blocks'), list):
        raise CorpusParseError("Corpus must be an object with a top-level 'blocks' array")

    blocks: List[Block] = []
    schemas: Dict[str, Dict[str, ParamDomain]] = {}
    arities: Dict[str, int] = {}

    for raw in data['blocks']:
        entry = validate_corpus_entry(raw)
        block = Block(
            name=entry['name'],
            members=tuple(entry['members']),
            inner_edges=tuple(entry['inner_edges']),
            in_degree=entry['in_degree'],
            out_degree=entry['out_degree'],
        )
        block.validate()
        blocks.append(block)

        params = entry['params'] or [None] * len(block.members)
        arity = entry['arity'] or [None] * len(block.members)
        if len(params) != len(block.members) or len(arity) != len(block.members):
            raise ValidationError(f"Block {block.name!r}: params/arity must have one entry per member")
        for member, member_params, member_arity in zip(block.members, params, arity):
            if member_arity is not None:
                if member in arities and arities[member] != member_arity:
                    raise ValidationError(f"Operator {member!r} declared with conflicting arity")
                arities[member] = member_arity
            for pname, raw in (member_params or {}).items():
                domain = ParamDomain.from_json(pname, raw)
                known = schemas.setdefault(member, {})
                if pname in known and known[pname] != domain:
                    raise ValidationError(f"Operator {member!r} parameter {pname!r} declared twice differently")
                known[pname] = domain

    names = [b.name for b in blocks]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ValidationError(f"Duplicate block names in corpus: {duplicates}")
    subgraph_names = {b.name for b in blocks if b.is_subgraph}
    for block in blocks:
        nested = [m for m in block.members if m in subgraph_names]
        if block.is_subgraph and nested:
            raise ValidationError(f"Block {block.name!r} nests subgraph blocks {nested}")

    operators: Dict[str, OperatorKind] = {}
    for block in blocks:
        for member in block.members:
            if member in operators:
                continue
            base = BUILTIN_OPERATORS.get(member)
            if base is None:
                base = OperatorKind(member, arity=arities.get(member, 1), builtin=False)
            elif member in arities and arities[member] != base.arity:
                raise ValidationError(f"Operator {member!r} is built in with arity {base.arity}")
            operators[member] = base.with_overrides(list(schemas.get(member, {}).values()))

    corpus = BlockCorpus(tuple(blocks), MappingProxyType(operators))
    logger.debug("Parsed corpus with %d blocks over %d operator types",
                 len(blocks), len(corpus.operator_types))
    return corpus


def load_corpus(path: str) -> BlockCorpus:
    """Load and validate a block corpus JSON file."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"Corpus file {path} is not valid JSON: {e}") from e
    corpus = parse_corpus(data)
    logger.info("Loaded corpus %s: %d blocks, %d operator types", path, len(corpus.blocks),
                len(corpus.operator_types))
    return corpus


# =============================================================================
# GRAPHS
# =============================================================================

def _freeze(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


def freeze_params(params: Mapping[str, Any]) -> Tuple[Tuple[str, Any], ...]:
    return tuple(sorted((k, _freeze(v)) for k, v in params.items()))


@dataclass(frozen=True)
class Node:
    """A graph node: a block instance before expansion, an operator after."""

    id: int
    block: Optional[str] = None
    op: Optional[str] = None
    params: Tuple[Tuple[str, Any], ...] = ()
    # Subgraph instance this operator was expanded from, and its member index
    group: Optional[int] = None
    member: Optional[int] = None

    @property
    def param_dict(self) -> Dict[str, Any]:
        return dict(self.params)

    def with_params(self, params: Mapping[str, Any]) -> 'Node':
        return replace(self, params=freeze_params(params))


@dataclass(frozen=True, order=True)
class Edge:
    """Data flow from ``src``'s output slot into ``dst``'s input slot."""

    src: int
    src_slot: int
    dst: int
    dst_slot: int


@dataclass(frozen=True)
class Graph:
    """Directed acyclic multigraph with ordered input slots."""

    nodes: Tuple[Node, ...]
    edges: Tuple[Edge, ...] = ()

    @cached_property
    def _index(self) -> Dict[int, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _in(self) -> Dict[int, List[Edge]]:
        table: Dict[int, List[Edge]] = {n.id: [] for n in self.nodes}
        for edge in self.edges:
            table[edge.dst].append(edge)
        for edges in table.values():
            edges.sort(key=lambda e: e.dst_slot)
        return table

    @cached_property
    def _out(self) -> Dict[int, List[Edge]]:
        table: Dict[int, List[Edge]] = {n.id: [] for n in self.nodes}
        for edge in self.edges:
            table[edge.src].append(edge)
        return table

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> List[int]:
        return [n.id for n in self.nodes]

    def node(self, node_id: int) -> Node:
        return self._index[node_id]

    def has_node(self, node_id: int) -> bool:
        return node_id in self._index

    def in_edges(self, node_id: int) -> List[Edge]:
        return list(self._in[node_id])

    def out_edges(self, node_id: int) -> List[Edge]:
        return list(self._out[node_id])

    def in_degree(self, node_id: int) -> int:
        return len(self._in[node_id])

    def out_degree(self, node_id: int) -> int:
        return len(self._out[node_id])

    def predecessors(self, node_id: int) -> List[int]:
        return [e.src for e in self._in[node_id]]

    def successors(self, node_id: int) -> List[int]:
        return [e.dst for e in self._out[node_id]]

    def next_id(self) -> int:
        return max(self._index, default=-1) + 1

    def sinks(self) -> List[int]:
        return sorted(n.id for n in self.nodes if not self._out[n.id])

    def to_networkx(self) -> nx.MultiDiGraph:
        g = nx.MultiDiGraph()
        g.add_nodes_from(self._index)
        g.add_edges_from((e.src, e.dst) for e in self.edges)
        return g

    def is_acyclic(self) -> bool:
        if any(e.src == e.dst for e in self.edges):
            return False
        return nx.is_directed_acyclic_graph(self.to_networkx())

    def topological_order(self) -> List[int]:
        """Deterministic topological order (smallest ready id first)."""
        try:
            return list(nx.lexicographical_topological_sort(self.to_networkx()))
        except nx.NetworkXUnfeasible as e:
            raise ValidationError("Graph contains a cycle") from e

    def slots_complete(self) -> bool:
        """Every node's input slots are exactly 0..in_degree-1."""
        return all([e.dst_slot for e in edges] == list(range(len(edges)))
                   for edges in self._in.values())

    def with_edges(self, edges: Iterable[Edge]) -> 'Graph':
        return Graph(self.nodes, tuple(sorted(edges)))

    def with_nodes(self, nodes: Iterable[Node]) -> 'Graph':
        return Graph(tuple(sorted(nodes, key=lambda n: n.id)), self.edges)

    def replace_node(self, node: Node) -> 'Graph':
        return Graph(tuple(node if n.id == node.id else n for n in self.nodes), self.edges)

    def without_nodes(self, node_ids: Iterable[int]) -> 'Graph':
        drop = set(node_ids)
        return Graph(tuple(n for n in self.nodes if n.id not in drop),
                     tuple(e for e in self.edges if e.src not in drop and e.dst not in drop))

    def normalized(self) -> 'Graph':
        """Renumber input slots to 0..k-1 per node, keeping their relative order."""
        by_dst: Dict[int, List[Tuple[int, int, Edge]]] = {}
        for position, edge in enumerate(self.edges):
            by_dst.setdefault(edge.dst, []).append((edge.dst_slot, position, edge))
        edges = []
        for dst, entries in by_dst.items():
            for slot, (_, _, edge) in enumerate(sorted(entries, key=lambda t: (t[0], t[1]))):
                edges.append(replace(edge, dst_slot=slot))
        return Graph(tuple(sorted(self.nodes, key=lambda n: n.id)), tuple(sorted(edges)))

    def relabeled(self) -> 'Graph':
        """Relabel nodes 0..N-1 in topological order; groups follow their nodes."""
        order = self.topological_order()
        mapping = {old: new for new, old in enumerate(order)}
        nodes = []
        for old in order:
            node = self._index[old]
            group = mapping.get(node.group, node.group) if node.group is not None else None
            nodes.append(replace(node, id=mapping[old], group=group))
        edges = [replace(e, src=mapping[e.src], dst=mapping[e.dst]) for e in self.edges]
        return Graph(tuple(nodes), tuple(sorted(edges)))

    def structure_hash(self) -> str:
        """Hash of operators and wiring, ignoring parameters and node ids."""
        g = self.relabeled()
        payload = json.dumps({
            'ops': [n.op or n.block for n in g.nodes],
            'edges': [[e.src, e.src_slot, e.dst, e.dst_slot] for e in g.edges],
        }, separators=(',', ':'))
        return hashlib.sha1(payload.encode('utf-8')).hexdigest()[:16]


# =============================================================================
# MODELS
# =============================================================================

@dataclass(frozen=True)
class ModelSpec:
    """An executable model: operator-level graph, input shapes and data seed."""

    graph: Graph
    input_shapes: Tuple[Tuple[int, ...], ...] = ()
    weights_seed: int = 0

    @property
    def node_params(self) -> Dict[int, Dict[str, Any]]:
        return {n.id: n.param_dict for n in self.graph.nodes}

    def placeholders(self) -> List[Node]:
        nodes = [n for n in self.graph.nodes if n.op == PLACEHOLDER]
        return sorted(nodes, key=lambda n: n.param_dict.get('index', 0))

    def outputs(self) -> List[int]:
        """Graph outputs: sink nodes in id order."""
        return self.graph.sinks()

    def with_graph(self, graph: Graph) -> 'ModelSpec':
        return replace(self, graph=graph)


def model_to_dict(m: ModelSpec) -> Dict[str, Any]:
    nodes = []
    for node in sorted(m.graph.nodes, key=lambda n: n.id):
        entry: Dict[str, Any] = {
            'id': node.id,
            'op': node.op,
            'params': {k: _thaw(v) for k, v in node.params},
            'inputs': [[e.src, e.src_slot] for e in m.graph.in_edges(node.id)],
        }
        if node.block is not None:
            entry['block'] = node.block
        if node.group is not None:
            entry['group'] = node.group
            entry['member'] = node.member
        nodes.append(entry)
    return {
        'format': MODEL_FORMAT,
        'version': MODEL_VERSION,
        'nodes': nodes,
        'inputs': [list(s) for s in m.input_shapes],
        'weights_seed': m.weights_seed,
    }


def model_from_dict(data: Any) -> ModelSpec:
    try:
        if data.get('format') != MODEL_FORMAT or data.get('version') != MODEL_VERSION:
            raise ModelDecodeError("Not a gfuzz model (format/version mismatch)")
        nodes = []
        edges = []
        for entry in data['nodes']:
            node_id = entry['id']
            nodes.append(Node(
                id=node_id,
                block=entry.get('block'),
                op=entry['op'],
                params=freeze_params(entry.get('params', {})),
                group=entry.get('group'),
                member=entry.get('member'),
            ))
            for slot, (src, src_slot) in enumerate(entry['inputs']):
                edges.append(Edge(src, src_slot, node_id, slot))
        seed = data['weights_seed']
        if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ModelDecodeError(f"weights_seed must be an unsigned 64-bit integer, got {seed!r}")
        graph = Graph(tuple(sorted(nodes, key=lambda n: n.id)), tuple(sorted(edges)))
        shapes = tuple(tuple(int(d) for d in s) for s in data['inputs'])
    except ModelDecodeError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ModelDecodeError(f"Malformed model: {e}") from e

    known = {n.id for n in graph.nodes}
    if len(known) != len(graph.nodes):
        raise ModelDecodeError("Duplicate node ids")
    dangling = [e for e in graph.edges if e.src not in known]
    if dangling:
        raise ModelDecodeError(f"Edge from unknown node {dangling[0].src}")
    return ModelSpec(graph, shapes, seed)


def serialize_model(m: ModelSpec) -> bytes:
    """Canonical, deterministic JSON encoding of a model."""
    return json.dumps(model_to_dict(m), sort_keys=True, separators=(',', ':')).encode('utf-8')


def deserialize_model(data: bytes) -> ModelSpec:
    try:
        decoded = json.loads(data.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelDecodeError(f"Model bytes are not valid JSON: {e}") from e
    if not isinstance(decoded, dict):
        raise ModelDecodeError("Model must be a JSON object")
    return model_from_dict(decoded)


# =============================================================================
# BLOCK EXPANSION
# =============================================================================

def expand_blocks(g: Graph, corpus: BlockCorpus) -> Graph:
    """
    Replace every subgraph block node by its member operators.

    External inputs of a subgraph fill the members' open input slots in
    member order. Fewer realized inputs than open slots reuse the realized
    inputs round-robin; extra inputs go to the last variadic member. All
    external consumers read the block's exit member. Nodes that already carry
    an operator (injected Placeholders, expanded members) pass through.
    """
    new_ids: Dict[int, int] = {}        # block-level node -> exit operator id
    entry_slots: Dict[int, List[Tuple[int, int]]] = {}
    nodes: List[Node] = []
    inner: List[Edge] = []
    next_id = 0

    for node in sorted(g.nodes, key=lambda n: n.id):
        if node.op is not None or node.block is None:
            nodes.append(replace(node, id=next_id))
            new_ids[node.id] = next_id
            next_id += 1
            continue
        block = corpus.block(node.block)
        if not block.is_subgraph:
            nodes.append(replace(node, id=next_id, op=block.members[0]))
            new_ids[node.id] = next_id
            next_id += 1
            continue

        base = next_id
        for index, member in enumerate(block.members):
            nodes.append(Node(base + index, block=block.name, op=member, group=node.id, member=index))
        next_id += len(block.members)

        filled = [0] * len(block.members)
        for src, dst in block.inner_edges:
            inner.append(Edge(base + src, 0, base + dst, filled[dst]))
            filled[dst] += 1

        open_slots, variadic = _open_slots(block, corpus)
        realized = g.in_edges(node.id)
        if realized and not open_slots and variadic is None:
            raise WiringError(f"Block {block.name!r} has no open input for {len(realized)} external edges")
        if open_slots and not realized:
            raise WiringError(f"Block {block.name!r} needs inputs but node {node.id} has none")
        if len(realized) > len(open_slots) and variadic is None:
            raise WiringError(f"Block {block.name!r} cannot absorb in-degree {len(realized)} "
                              f"(only {len(open_slots)} open slots)")
        slots = [(base + m, s) for m, s in open_slots]
        extra_slot = filled[variadic] + sum(1 for m, _ in open_slots if m == variadic) if variadic is not None else 0
        for i in range(len(open_slots), len(realized)):
            slots.append((base + variadic, extra_slot))
            extra_slot += 1
        entry_slots[node.id] = slots
        new_ids[node.id] = base + block.exit_member()

    edges = list(inner)
    for node in g.nodes:
        if node.id not in entry_slots:
            continue
        realized = g.in_edges(node.id)
        for i, (dst, slot) in enumerate(entry_slots[node.id]):
            source = realized[i % len(realized)]
            edges.append(Edge(new_ids[source.src], source.src_slot, dst, slot))
    for edge in g.edges:
        if edge.dst in entry_slots:
            continue
        edges.append(Edge(new_ids[edge.src], edge.src_slot, new_ids[edge.dst], edge.dst_slot))

    expanded = Graph(tuple(nodes), tuple(sorted(edges))).normalized()
    if not expanded.is_acyclic():
        raise WiringError("Block expansion produced a cycle")
    return expanded


# =============================================================================
# HAND CONSTRUCTION
# =============================================================================

class GraphBuilder:
    """
    Build operator-level models by hand (fixtures, witness models, replays).

    Usage:
        b = GraphBuilder()
        x = b.input([1, 8, 8, 3])
        y = b.op('Relu', x)
        model = b.build(weights_seed=7)
    """

    def __init__(self):
        self._nodes: List[Node] = []
        self._edges: List[Edge] = []
        self._shapes: List[Tuple[int, ...]] = []

    def _add(self, op: str, inputs: Sequence[int], params: Mapping[str, Any], block: Optional[str]) -> int:
        node_id = len(self._nodes)
        self._nodes.append(Node(node_id, block=block if block is not None else op, op=op,
                                params=freeze_params(params)))
        for slot, src in enumerate(inputs):
            self._edges.append(Edge(src, 0, node_id, slot))
        return node_id

    def input(self, shape: Sequence[int]) -> int:
        index = len(self._shapes)
        self._shapes.append(tuple(shape))
        return self._add(PLACEHOLDER, (), {'index': index}, None)

    def const(self, shape: Sequence[int]) -> int:
        return self._add(CONST, (), {'shape': list(shape)}, None)

    def op(self, op: str, *inputs: int, block: Optional[str] = None, **params: Any) -> int:
        return self._add(op, inputs, params, block)

    def build(self, weights_seed: int = 0) -> ModelSpec:
        graph = Graph(tuple(self._nodes), tuple(sorted(self._edges)))
        return ModelSpec(graph, tuple(self._shapes), weights_seed)
