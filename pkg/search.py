"""
Block chooser: Monte Carlo tree search over corpus blocks, plus a random
baseline.

Each tree node below the root holds one block; the blocks on the path from
the root to the chosen node C are the vocabulary of one generation round.
Selection follows UCT, expansion adds the block whose operator currently has
the lowest operator-level coverage, and backpropagation credits the path
with 1 when the round found a new deduplicated exception.
"""

import math
import random
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from op_coverage import CoverageState, olc_op
from model_ir import Block, BlockCorpus
from utils.errors import GFuzzError
from utils.logger import setup_logger
from utils.validators import ValidationError, validate_choices, validate_positive_int

logger = setup_logger(__name__)

SEARCH_MODES = ('mcts', 'random')


class SearchExhausted(GFuzzError):
    """Every path from the root is saturated; the tree must be reset."""
    pass


@dataclass(frozen=True)
class SearchConfig:
    mode: str = 'mcts'
    e: float = 1.0 / math.sqrt(2.0)
    tc1: int = 10
    tc2: int = 1
    max_children: int = 3

    def __post_init__(self):
        validate_choices([self.mode], SEARCH_MODES, 'search.mode')
        if self.e < 0:
            raise ValidationError(f"search.e must be >= 0, got {self.e}")
        validate_positive_int(self.tc1, 'search.tc1')
        validate_positive_int(self.tc2, 'search.tc2')
        validate_positive_int(self.max_children, 'search.max_children')

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'SearchConfig':
        return cls(
            mode=data.get('mode', 'mcts'),
            e=float(data.get('e', 1.0 / math.sqrt(2.0))),
            tc1=data.get('tc1', 10),
            tc2=data.get('tc2', 1),
            max_children=data.get('max_children', 3),
        )


class MctsNode:
    """A search-tree node. ``v`` counts rewarded visits, ``n`` all visits."""

    def __init__(self, block: Optional[str] = None, parent: Optional['MctsNode'] = None):
        self.block = block
        self.parent = parent
        self.depth = parent.depth + 1 if parent is not None else 0
        self.v = 0
        self.n = 0
        self.simulations = 0
        self.saturated = False
        self.children: List['MctsNode'] = []

    def __repr__(self):
        return f"MctsNode({self.block!r}, v={self.v}, n={self.n}, depth={self.depth})"

    @property
    def is_root(self) -> bool:
        return self.parent is None

    def path(self) -> List['MctsNode']:
        """Nodes from the root's first child down to this node."""
        nodes = []
        node = self
        while node is not None and not node.is_root:
            nodes.append(node)
            node = node.parent
        return list(reversed(nodes))

    def path_blocks(self) -> List[str]:
        return [node.block for node in self.path()]

    def add_child(self, block: str) -> 'MctsNode':
        child = MctsNode(block, self)
        self.children.append(child)
        return child

    def to_dict(self) -> Dict[str, Any]:
        return {
            'block': self.block,
            'v': self.v,
            'n': self.n,
            'simulations': self.simulations,
            'saturated': self.saturated,
            'children': [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], parent: Optional['MctsNode'] = None) -> 'MctsNode':
        node = cls(data['block'], parent)
        node.v = data['v']
        node.n = data['n']
        node.simulations = data['simulations']
        node.saturated = data['saturated']
        node.children = [cls.from_dict(c, node) for c in data['children']]
        return node


def uct_potential(node: MctsNode, parent_visits: int, e: float = 1.0 / math.sqrt(2.0)) -> float:
    """v/n + e * sqrt(ln(N) / n); unvisited nodes rank first."""
    if node.n == 0:
        return math.inf
    return node.v / node.n + e * math.sqrt(math.log(parent_visits) / node.n)


class MctsTree:
    """Search tree over the blocks of one corpus."""

    def __init__(self, corpus: BlockCorpus, config: SearchConfig = SearchConfig()):
        self.corpus = corpus
        self.config = config
        self.root = MctsNode()
        self.resets = 0
        self._rank = {block.name: i for i, block in enumerate(corpus.blocks)}

    def reset(self) -> None:
        logger.info("Search tree saturated; starting a new tree")
        self.root = MctsNode()
        self.resets += 1

    def expansion_block(self, node: MctsNode, state: CoverageState,
                        rng: random.Random) -> Optional[str]:
        """
        Block for a new child of ``node``: the operator with the lowest OLC
        (ties by corpus order) that still has a block off the path and not
        already a child; the bare operator or one of its subgraphs, uniformly.
        """
        taken = set(node.path_blocks()) | {c.block for c in node.children}
        types = self.corpus.operator_types
        ranked = sorted(range(len(types)), key=lambda i: (olc_op(state, types[i]), i))
        for i in ranked:
            op = types[i]
            options: List[Block] = []
            single = self.corpus.single_block(op)
            if single is not None:
                options.append(single)
            options.extend(self.corpus.blocks_containing(op))
            options = [b for b in options if b.name not in taken]
            if options:
                return rng.choice(options).name
        return None

    def select_child(self, node: MctsNode) -> Optional[MctsNode]:
        selectable = [c for c in node.children if not c.saturated]
        if not selectable:
            return None
        selectable.sort(key=lambda c: self._rank.get(c.block, len(self._rank)))
        best = selectable[0]
        best_score = uct_potential(best, max(node.n, 1), self.config.e)
        for child in selectable[1:]:
            score = uct_potential(child, max(node.n, 1), self.config.e)
            if score > best_score:
                best, best_score = child, score
        return best

    def choose_blocks(self, state: CoverageState, rng: random.Random) -> Tuple[List[Block], MctsNode]:
        """
        Walk the tree to the node C to simulate next and return the blocks on
        the root-to-C path together with C.

        A leaf below the root is simulated again until it reaches tc2
        simulations; otherwise a node within depth tc1 with room for children
        is expanded; otherwise the best child by UCT is descended into. A node
        with nothing left to offer is marked saturated and the walk restarts.
        """
        cfg = self.config
        node = self.root
        while True:
            if not node.is_root and not node.children and node.simulations < cfg.tc2:
                return self._blocks(node), node
            if node.depth < cfg.tc1 and len(node.children) < cfg.max_children:
                block = self.expansion_block(node, state, rng)
                if block is not None:
                    child = node.add_child(block)
                    logger.debug("Expanded %s at depth %d", block, child.depth)
                    return self._blocks(child), child
            child = self.select_child(node)
            if child is not None:
                node = child
                continue
            node.saturated = True
            if node.is_root:
                raise SearchExhausted("Every block path has been explored")
            node = self.root

    def _blocks(self, node: MctsNode) -> List[Block]:
        return [self.corpus.block(name) for name in node.path_blocks()]

    def stats(self) -> Dict[str, int]:
        """Size of the current tree: nodes below the root, deepest level, saturated nodes."""
        nodes = list(walk(self.root))[1:]
        return {
            'nodes': len(nodes),
            'depth': max((n.depth for n in nodes), default=0),
            'saturated': sum(1 for n in nodes if n.saturated),
            'resets': self.resets,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {'resets': self.resets, 'root': self.root.to_dict()}

    def load(self, data: Mapping[str, Any]) -> None:
        self.root = MctsNode.from_dict(data['root'])
        self.resets = data.get('resets', 0)


def backpropagate(node: MctsNode, reward: int) -> None:
    """Credit every node from ``node`` up to the root with one visit and ``reward``."""
    reward = 1 if reward else 0
    node.simulations += 1
    current = node
    while current is not None:
        current.n += 1
        current.v += reward
        current = current.parent


def random_chooser(corpus: BlockCorpus, rng: random.Random, block_count: int) -> List[Block]:
    """``block_count`` uniform draws from the corpus, with replacement."""
    return [rng.choice(corpus.blocks) for _ in range(block_count)]


def walk(node: MctsNode):
    """Depth-first iteration over a subtree."""
    yield node
    for child in node.children:
        yield from walk(child)
