"""
Random DAG topologies and block assignment.

Two graph models generate topologies: Watts-Strogatz (small world) and the
residual-network model (a chain plus skip edges bounded by a neighbor count).
All edges run from the lower to the higher node index, so every topology is a
DAG by construction. ``assign_blocks`` then gives every node a corpus block
whose in-degree range accepts the node's realized in-degree.
"""

import random
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx

from model_ir import PLACEHOLDER, PLACEHOLDER_BLOCK, Block, BlockCorpus, Edge, Graph, Node
from utils.errors import GFuzzError
from utils.logger import setup_logger
from utils.validators import ValidationError, validate_positive_int, validate_probability

logger = setup_logger(__name__)

WS_TRIES = 100


class UnsatisfiableCorpusError(GFuzzError):
    """No corpus block accepts in-degree 1."""
    pass


class GraphModel(str, Enum):
    WS = 'WS'
    RN = 'RN'
    BOTH = 'both'


@dataclass(frozen=True)
class GraphGenConfig:
    model: str
    n: int
    k: int
    p: float
    seed: int = 0

    def __post_init__(self):
        if self.model not in (GraphModel.WS.value, GraphModel.RN.value):
            raise ValidationError(f"Graph model must be WS or RN, got {self.model!r}")
        validate_positive_int(self.n, 'n')
        validate_positive_int(self.k, 'k', minimum=2)
        validate_probability(self.p, 'p')


# =============================================================================
# TOPOLOGY
# =============================================================================

def rn_model(n: int, k: int, p: float, rng: random.Random) -> List[Tuple[int, int]]:
    """
    Residual-network random graph.

    Nodes 0..n-1 start as a chain. Then, for every node i whose neighbor count
    is below k, (k - count) attempts are made; each succeeds with probability
    p and adds i -> j for j drawn uniformly from the later nodes that are not
    yet neighbors of i and still have fewer than k neighbors.
    """
    edges = [(i, i + 1) for i in range(n - 1)]
    neighbors: List[Set[int]] = [set() for _ in range(n)]
    for i, j in edges:
        neighbors[i].add(j)
        neighbors[j].add(i)

    for i in range(n):
        for _ in range(max(0, k - len(neighbors[i]))):
            if rng.random() >= p:
                continue
            eligible = [j for j in range(i + 1, n)
                        if len(neighbors[j]) < k and j not in neighbors[i]]
            if not eligible:
                continue
            j = rng.choice(eligible)
            edges.append((i, j))
            neighbors[i].add(j)
            neighbors[j].add(i)
    return edges


def ws_model(n: int, k: int, p: float, rng: random.Random) -> List[Tuple[int, int]]:
    """Connected Watts-Strogatz graph with every edge oriented low -> high."""
    if n <= 2:
        return [(i, i + 1) for i in range(n - 1)]
    k = min(k, n - 1)
    try:
        ring = nx.connected_watts_strogatz_graph(n, k, p, tries=WS_TRIES, seed=rng)
        edges = set()
    except nx.NetworkXError:
        logger.debug("WS graph (n=%d, k=%d, p=%.2f) not connected after %d tries; adding chain",
                     n, k, p, WS_TRIES)
        ring = nx.watts_strogatz_graph(n, k, p, seed=rng)
        edges = {(i, i + 1) for i in range(n - 1)}
    edges.update((min(u, v), max(u, v)) for u, v in ring.edges() if u != v)
    return sorted(edges)


def _slotted(pairs: Iterable[Tuple[int, int]]) -> Tuple[Edge, ...]:
    filled: Dict[int, int] = {}
    edges = []
    for src, dst in pairs:
        slot = filled.get(dst, 0)
        filled[dst] = slot + 1
        edges.append(Edge(src, 0, dst, slot))
    return tuple(sorted(edges))


def generate_topology(cfg: GraphGenConfig, rng: Optional[random.Random] = None) -> Graph:
    """Connected DAG over ``cfg.n`` unassigned nodes; deterministic for a seed."""
    rng = rng if rng is not None else random.Random(cfg.seed)
    if cfg.model == GraphModel.RN.value:
        pairs = rn_model(cfg.n, cfg.k, cfg.p, rng)
    else:
        pairs = ws_model(cfg.n, cfg.k, cfg.p, rng)
    return Graph(tuple(Node(i) for i in range(cfg.n)), _slotted(pairs))


# =============================================================================
# BLOCK ASSIGNMENT
# =============================================================================

class _Assignment:
    """Mutable working copy of a graph while blocks are being assigned."""

    def __init__(self, g: Graph):
        self.blocks: Dict[int, Block] = {}
        self.order = g.topological_order()
        self.edges: List[Tuple[int, int]] = [
            (e.src, e.dst) for e in sorted(g.edges, key=lambda e: (e.dst, e.dst_slot))
        ]
        self.next_id = g.next_id()
        self.placeholders: List[int] = []

    def in_edges(self, v: int) -> List[int]:
        return [i for i, (_, dst) in enumerate(self.edges) if dst == v]

    def out_edges(self, v: int) -> List[int]:
        return [i for i, (src, _) in enumerate(self.edges) if src == v]

    def in_degree(self, v: int) -> int:
        return sum(1 for _, dst in self.edges if dst == v)

    def out_degree(self, v: int) -> int:
        return sum(1 for src, _ in self.edges if src == v)

    def inject_placeholder(self, v: int) -> int:
        pid = self.next_id
        self.next_id += 1
        self.blocks[pid] = PLACEHOLDER_BLOCK
        self.placeholders.append(pid)
        self.edges.append((pid, v))
        return pid

    def can_feed(self, src: int) -> bool:
        block = self.blocks.get(src)
        return block is None or block.accepts_out(self.out_degree(src) + 1)

    def can_lose_output(self, src: int) -> bool:
        block = self.blocks.get(src)
        return block is None or block.accepts_out(self.out_degree(src) - 1)


def _nearest(degree: int, accepted: Iterable[int]) -> int:
    return min(accepted, key=lambda d: (abs(d - degree), d))


def _repair_in_degree(work: _Assignment, v: int, target: int, rng: random.Random) -> None:
    current = work.in_degree(v)
    while current > target:
        candidates = work.in_edges(v)
        tolerable = [i for i in candidates if work.can_lose_output(work.edges[i][0])]
        victim = rng.choice(tolerable or candidates)
        del work.edges[victim]
        current -= 1
    while current < target:
        position = work.order.index(v) if v in work.order else len(work.order)
        earlier = [u for u in work.order[:position] if u in work.blocks and work.can_feed(u)]
        if earlier:
            work.edges.append((rng.choice(earlier), v))
        else:
            work.inject_placeholder(v)
        current += 1


def assign_blocks(g: Graph, corpus: BlockCorpus, rng: random.Random,
                  allowed: Optional[Sequence[Block]] = None) -> Graph:
    """
    Give every node a block whose in-degree range accepts its in-degree.

    Candidates come from ``allowed`` (the chooser's vocabulary) first and the
    full corpus second. A node no block accepts has its in-degree repaired to
    the nearest accepted degree (ties go to the lower degree). Nodes without
    inputs are fed by an injected Placeholder unless the vocabulary offers a
    source block. Out-edges beyond a block's range are dropped before the
    downstream nodes are assigned.
    """
    if not any(b.accepts_in(1) for b in corpus.blocks):
        raise UnsatisfiableCorpusError("No block in the corpus accepts in-degree 1")
    vocabulary = list(allowed) if allowed else list(corpus.blocks)
    accepted_degrees = sorted({d for b in corpus.blocks for d in b.in_degree})

    work = _Assignment(g)
    for v in list(work.order):
        node = g.node(v)
        if node.op == PLACEHOLDER:
            work.blocks[v] = PLACEHOLDER_BLOCK
            continue

        degree = work.in_degree(v)
        if degree == 0:
            sources = [b for b in vocabulary if b.accepts_in(0)]
            if sources and (allowed or rng.random() < 0.5):
                chosen = _pick(sources, work.out_degree(v), rng)
                work.blocks[v] = chosen
                _fit_out_degree(work, v, chosen, rng)
                continue
            work.inject_placeholder(v)
            degree = 1

        candidates = [b for b in vocabulary if b.accepts_in(degree)]
        if not candidates:
            candidates = [b for b in corpus.blocks if b.accepts_in(degree)]
        if not candidates:
            target = _nearest(degree, [d for d in accepted_degrees if d > 0] or accepted_degrees)
            logger.debug("Repairing node %d in-degree %d -> %d", v, degree, target)
            _repair_in_degree(work, v, target, rng)
            candidates = ([b for b in vocabulary if b.accepts_in(target)]
                          or [b for b in corpus.blocks if b.accepts_in(target)])

        chosen = _pick(candidates, work.out_degree(v), rng)
        work.blocks[v] = chosen
        _fit_out_degree(work, v, chosen, rng)

    return _finish(g, work)


def _pick(candidates: List[Block], out_degree: int, rng: random.Random) -> Block:
    fitting = [b for b in candidates if b.accepts_out(out_degree)]
    return rng.choice(fitting or candidates)


def _fit_out_degree(work: _Assignment, v: int, block: Block, rng: random.Random) -> None:
    """Trim or extend v's out-edges toward its block's out-degree range."""
    degree = work.out_degree(v)
    if block.accepts_out(degree):
        return
    target = _nearest(degree, block.out_degree)
    while degree > target:
        del work.edges[rng.choice(work.out_edges(v))]
        degree -= 1
    position = work.order.index(v)
    later = [u for u in work.order[position + 1:] if work.blocks.get(u) is not PLACEHOLDER_BLOCK]
    while degree < target and later:
        work.edges.append((v, rng.choice(later)))
        degree += 1


def _finish(g: Graph, work: _Assignment) -> Graph:
    live = {src for src, _ in work.edges}
    dangling = [p for p in work.placeholders if p not in live]
    nodes = []
    for v, block in work.blocks.items():
        if v in dangling:
            continue
        if block is PLACEHOLDER_BLOCK:
            nodes.append(Node(v, block=PLACEHOLDER, op=PLACEHOLDER))
        else:
            original = g.node(v) if g.has_node(v) else Node(v)
            nodes.append(Node(v, block=block.name, params=original.params))
    pairs = [(src, dst) for src, dst in work.edges if src not in dangling]
    assigned = Graph(tuple(sorted(nodes, key=lambda n: n.id)), _slotted(pairs))
    return number_placeholders(assigned)


def number_placeholders(g: Graph) -> Graph:
    """Give Placeholders consecutive ``index`` params in node-id order."""
    index = 0
    nodes = []
    for node in sorted(g.nodes, key=lambda n: n.id):
        if node.op == PLACEHOLDER:
            node = node.with_params({'index': index})
            index += 1
        nodes.append(node)
    return Graph(tuple(nodes), g.edges)
