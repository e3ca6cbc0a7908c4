"""
Model-level and source-level mutations.

Model-level mutations change structure: GEA adds and GER removes edges of the
block-level graph, BNA duplicates and BNR removes a member operator inside
subgraph instances of the expanded graph. Source-level mutations change
values: TSM resamples input tensor dims and PM resamples operator parameters.

Every mutation is deterministic given its input and PRNG state, keeps the
graph acyclic and keeps input slots contiguous. When a graph has fewer
eligible edges than a rate asks for, as many as possible are applied and the
outcome carries a shortfall flag.
"""

import math
import random
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from model_ir import (
    PLACEHOLDER,
    PLACEHOLDER_BLOCK,
    BUILTIN_OPERATORS,
    Block,
    BlockCorpus,
    Edge,
    Graph,
    Node,
    OperatorKind,
    freeze_params,
)
from graphgen import number_placeholders
from utils.logger import setup_logger
from utils.validators import ValidationError, validate_choices, validate_probability

logger = setup_logger(__name__)

GEA, GER, BNA, BNR, TSM, PM = 'GEA', 'GER', 'BNA', 'BNR', 'TSM', 'PM'
MODEL_LEVEL = (GEA, GER, BNA, BNR)
SOURCE_LEVEL = (TSM, PM)
ALL_MUTATIONS = MODEL_LEVEL + SOURCE_LEVEL

SHAPE_AXES = ('N', 'H', 'W', 'C')
DEFAULT_SHAPE_DOMAIN = {
    'N': (1,),
    'H': (4, 8, 16, 32, 64),
    'W': (4, 8, 16, 32, 64),
    'C': (1, 3, 4, 8, 16),
}


@dataclass(frozen=True)
class MutationConfig:
    enabled: Tuple[str, ...] = ALL_MUTATIONS
    r_choices: Tuple[float, ...] = (0.0, 0.1, 0.2)
    pm_node_rate: float = 0.5
    shape_domain: Mapping[str, Tuple[int, ...]] = field(default_factory=lambda: dict(DEFAULT_SHAPE_DOMAIN))
    apply: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.enabled:
            raise ValidationError("At least one mutation must be enabled")
        validate_choices(self.enabled, ALL_MUTATIONS, 'mutation.enabled')
        if not self.r_choices:
            raise ValidationError("mutation.r_choices must not be empty")
        for r in self.r_choices:
            validate_probability(r, 'mutation rate r', allow_zero=True, allow_one=False)
        validate_probability(self.pm_node_rate, 'mutation.pm_node_rate', allow_zero=True)
        for axis in SHAPE_AXES:
            values = self.shape_domain.get(axis)
            if not values or any(not isinstance(v, int) or v < 1 for v in values):
                raise ValidationError(f"shape_domain.{axis} must be a non-empty list of positive ints")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], seed: int = 0) -> 'MutationConfig':
        domain = {axis: tuple(values) for axis, values in data.get('shape_domain', DEFAULT_SHAPE_DOMAIN).items()}
        return cls(
            enabled=tuple(data.get('enabled', ALL_MUTATIONS)),
            r_choices=tuple(float(r) for r in data.get('r_choices', (0.0, 0.1, 0.2))),
            pm_node_rate=float(data.get('pm_node_rate', 0.5)),
            shape_domain=domain,
            apply=bool(data.get('apply', True)),
            seed=seed,
        )


@dataclass(frozen=True)
class AppliedMutation:
    name: str
    params: Tuple[Tuple[str, Any], ...] = ()

    @property
    def param_dict(self) -> Dict[str, Any]:
        return dict(self.params)

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, **self.param_dict}


@dataclass(frozen=True)
class MutationAction:
    """Blocks chosen for a round and the mutations applied to its models."""

    bs: Tuple[str, ...] = ()
    ms: Tuple[AppliedMutation, ...] = ()

    def has(self, name: str) -> bool:
        return any(m.name == name for m in self.ms)

    def param(self, name: str, key: str, default: Any = None) -> Any:
        for m in self.ms:
            if m.name == name:
                return m.param_dict.get(key, default)
        return default

    def to_dict(self) -> Dict[str, Any]:
        return {'blocks': list(self.bs), 'mutations': [m.to_dict() for m in self.ms]}


@dataclass(frozen=True)
class MutationOutcome:
    graph: Graph
    applied: int = 0
    shortfall: bool = False


def edge_budget(node_count: int, r: float, rounding) -> int:
    # round() absorbs float noise such as 30 * 0.1 = 3.0000000000000004
    return int(rounding(round(node_count * r, 9)))


def _block_of(g: Graph, node_id: int, corpus: Optional[BlockCorpus]) -> Optional[Block]:
    node = g.node(node_id)
    if node.op == PLACEHOLDER:
        return PLACEHOLDER_BLOCK
    if corpus is None or node.block is None or not corpus.has_block(node.block):
        return None
    return corpus.block(node.block)


def _accepts(block: Optional[Block], in_degree: Optional[int] = None, out_degree: Optional[int] = None) -> bool:
    if block is None:
        return True
    if in_degree is not None and not block.accepts_in(in_degree):
        return False
    if out_degree is not None and not block.accepts_out(out_degree):
        return False
    return True


# =============================================================================
# MODEL-LEVEL MUTATIONS
# =============================================================================

def gea(g: Graph, r: float, rng: random.Random, corpus: Optional[BlockCorpus] = None) -> MutationOutcome:
    """Add ceil(node_count * r) edges between topologically ordered node pairs."""
    required = edge_budget(g.node_count, r, math.ceil)
    order = g.topological_order()
    edges = list(g.edges)
    added = 0
    while added < required:
        current = Graph(g.nodes, tuple(edges))
        existing = {(e.src, e.dst) for e in edges}
        eligible = []
        for i, u in enumerate(order):
            if not _accepts(_block_of(g, u, corpus), out_degree=current.out_degree(u) + 1):
                continue
            for v in order[i + 1:]:
                if g.node(v).op == PLACEHOLDER or (u, v) in existing:
                    continue
                if _accepts(_block_of(g, v, corpus), in_degree=current.in_degree(v) + 1):
                    eligible.append((u, v))
        if not eligible:
            break
        u, v = rng.choice(eligible)
        edges.append(Edge(u, 0, v, current.in_degree(v)))
        added += 1
    shortfall = added < required
    if shortfall:
        logger.debug("GEA shortfall: added %d of %d edges", added, required)
    return MutationOutcome(Graph(g.nodes, tuple(sorted(edges))), added, shortfall)


def ger(g: Graph, r: float, rng: random.Random, corpus: Optional[BlockCorpus] = None) -> MutationOutcome:
    """Remove floor(node_count * r) edges whose endpoints stay within their degree ranges."""
    required = edge_budget(g.node_count, r, math.floor)
    current = g
    removed = 0
    while removed < required:
        eligible = [
            e for e in current.edges
            if _accepts(_block_of(g, e.dst, corpus), in_degree=current.in_degree(e.dst) - 1)
            and _accepts(_block_of(g, e.src, corpus), out_degree=current.out_degree(e.src) - 1)
            and (current.in_degree(e.dst) > 1 or _block_of(g, e.dst, corpus) is not None)
        ]
        if not eligible:
            break
        victim = rng.choice(eligible)
        remaining = list(current.edges)
        remaining.remove(victim)
        current = Graph(current.nodes, tuple(remaining)).normalized()
        removed += 1
    shortfall = removed < required
    if shortfall:
        logger.debug("GER shortfall: removed %d of %d edges", removed, required)
    return MutationOutcome(current, removed, shortfall)


def subgraph_groups(g: Graph) -> Dict[int, List[int]]:
    """Subgraph instance id -> member node ids in member order."""
    groups: Dict[int, List[Node]] = {}
    for node in g.nodes:
        if node.group is not None:
            groups.setdefault(node.group, []).append(node)
    return {gid: [n.id for n in sorted(members, key=lambda n: (n.member, n.id))]
            for gid, members in sorted(groups.items())}


def bna(g: Graph, r: float, rng: random.Random, corpus: Optional[BlockCorpus] = None) -> MutationOutcome:
    """
    Duplicate one member operator per subgraph instance with probability r.

    The duplicate reads the same inputs as the original. Its output joins a
    variadic consumer inside the same instance (Concat) when there is one,
    otherwise it becomes an extra graph output. Parameters are left unset so
    the resolver draws fresh ones.
    """
    nodes = list(g.nodes)
    edges = list(g.edges)
    next_id = g.next_id()
    applied = 0
    for gid, members in subgraph_groups(g).items():
        if rng.random() >= r:
            continue
        original = g.node(rng.choice(members))
        duplicate = Node(next_id, block=original.block, op=original.op, group=gid,
                         member=max(g.node(m).member or 0 for m in members) + 1)
        next_id += 1
        nodes.append(duplicate)
        for e in g.in_edges(original.id):
            edges.append(Edge(e.src, e.src_slot, duplicate.id, e.dst_slot))
        joins = [e.dst for e in g.out_edges(original.id)
                 if e.dst in members and _is_variadic(g.node(e.dst).op, corpus)]
        if joins:
            target = joins[0]
            slot = sum(1 for e in edges if e.dst == target)
            edges.append(Edge(duplicate.id, 0, target, slot))
        applied += 1
    return MutationOutcome(Graph(tuple(nodes), tuple(sorted(edges))).normalized(), applied, False)


def _is_variadic(op: str, corpus: Optional[BlockCorpus]) -> bool:
    kind = corpus.operator(op) if corpus is not None else BUILTIN_OPERATORS.get(op)
    return kind is not None and kind.is_variadic


def _prune_orphans(g: Graph, candidates: Sequence[int], keep: int) -> Graph:
    """Drop producers left without consumers, walking upstream."""
    pending = [v for v in candidates if v != keep]
    while pending:
        v = pending.pop()
        if not g.has_node(v) or g.out_degree(v) > 0:
            continue
        upstream = g.predecessors(v)
        g = g.without_nodes([v])
        pending.extend(u for u in upstream if u != keep)
    return g


def bnr(g: Graph, r: float, rng: random.Random) -> MutationOutcome:
    """
    Remove one member operator per subgraph instance with probability r.

    Consumers of the removed member read its first input instead, so members
    left without a producer fall back to the instance's external input.
    Producers of its other inputs that are left without any consumer are
    removed as well, upstream until a still-consumed node, so they never
    surface as extra graph outputs. Placeholders are renumbered when one goes.
    Instances with a single remaining member are not touched.
    """
    current = g
    applied = 0
    for gid, members in subgraph_groups(g).items():
        members = [v for v in members if current.has_node(v)]
        if len(members) < 2 or rng.random() >= r:
            continue
        victim = rng.choice(members)
        inputs = current.in_edges(victim)
        if not inputs:
            continue
        bypass = inputs[0]
        edges = []
        for e in current.edges:
            if e.dst == victim:
                continue
            if e.src == victim:
                edges.append(Edge(bypass.src, bypass.src_slot, e.dst, e.dst_slot))
            else:
                edges.append(e)
        current = Graph(tuple(n for n in current.nodes if n.id != victim), tuple(sorted(edges)))
        current = _prune_orphans(current, [e.src for e in inputs[1:]], bypass.src)
        applied += 1
    placeholders = sum(1 for n in current.nodes if n.op == PLACEHOLDER)
    if placeholders < sum(1 for n in g.nodes if n.op == PLACEHOLDER):
        current = number_placeholders(current)
    return MutationOutcome(current.normalized(), applied, False)


# =============================================================================
# SOURCE-LEVEL MUTATIONS
# =============================================================================

def tsm(shape: Sequence[int], rng: random.Random,
        domain: Mapping[str, Sequence[int]] = DEFAULT_SHAPE_DOMAIN) -> Tuple[int, ...]:
    """Resample a random non-empty subset of the dims of a rank-4 NHWC shape."""
    out = list(shape)
    count = rng.randint(1, len(SHAPE_AXES))
    for axis in sorted(rng.sample(range(len(SHAPE_AXES)), count)):
        out[axis] = rng.choice(tuple(domain[SHAPE_AXES[axis]]))
    return tuple(out)


def pm(params: Mapping[str, Any], kind: OperatorKind, rng: random.Random) -> Dict[str, Any]:
    """Resample a random non-empty subset of an operator's enumerated/ranged params."""
    out = dict(params)
    domains = [d for d in kind.param_schema if d.resampleable]
    if not domains:
        return out
    for domain in rng.sample(domains, rng.randint(1, len(domains))):
        out[domain.name] = domain.sample(rng)
    return out


def mutate_params(g: Graph, corpus: BlockCorpus, rng: random.Random, node_rate: float) -> Tuple[Graph, int]:
    """Apply PM to every operator node with probability ``node_rate``."""
    nodes = []
    touched = 0
    for node in g.nodes:
        if node.op is not None and node.op != PLACEHOLDER and rng.random() < node_rate:
            node = node.with_params(pm(node.param_dict, corpus.operator(node.op), rng))
            touched += 1
        nodes.append(node)
    return Graph(tuple(nodes), g.edges), touched


# =============================================================================
# SELECTOR
# =============================================================================

def select_mutations(cfg: MutationConfig, rng: random.Random, blocks: Sequence[str] = ()) -> MutationAction:
    """
    Draw a non-empty subset of the enabled mutations.

    Each enabled mutation is picked with probability 1/2 (one is forced when
    none is). Model-level mutations share one rate drawn from ``r_choices``.
    """
    if not cfg.enabled:
        raise ValidationError("At least one mutation must be enabled")
    chosen = [name for name in ALL_MUTATIONS if name in cfg.enabled and rng.random() < 0.5]
    if not chosen:
        chosen = [rng.choice([name for name in ALL_MUTATIONS if name in cfg.enabled])]
    r = rng.choice(cfg.r_choices)
    applied = []
    for name in chosen:
        if name in MODEL_LEVEL:
            applied.append(AppliedMutation(name, freeze_params({'r': r})))
        elif name == PM:
            applied.append(AppliedMutation(name, freeze_params({'node_rate': cfg.pm_node_rate})))
        else:
            applied.append(AppliedMutation(name))
    return MutationAction(tuple(blocks), tuple(applied))
