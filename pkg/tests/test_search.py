"""
Unit tests for the MCTS block chooser
"""

import math
import random
import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from op_coverage import CoverageConfig, empty_state, observe
from model_ir import GraphBuilder
from search import (
    MctsNode,
    MctsTree,
    SearchConfig,
    SearchExhausted,
    backpropagate,
    random_chooser,
    uct_potential,
    walk,
)
from utils.validators import ValidationError


class TestUct:
    """Test suite for the UCT potential."""

    def test_unvisited_ranks_first(self):
        """A child never simulated has infinite potential."""
        assert uct_potential(MctsNode('Relu', MctsNode()), 4) == math.inf

    def test_known_value(self):
        """v=1, n=2 under a parent with 4 visits."""
        node = MctsNode('Add', MctsNode())
        node.v, node.n = 1, 2
        expected = 0.5 + (1 / math.sqrt(2)) * math.sqrt(math.log(4) / 2)
        assert uct_potential(node, 4) == pytest.approx(expected)

    def test_exploration_weight(self):
        """e=0 leaves only the exploitation term."""
        node = MctsNode('Add', MctsNode())
        node.v, node.n = 3, 4
        assert uct_potential(node, 10, e=0.0) == 0.75


class TestBackpropagation:
    """Test suite for reward propagation."""

    def test_reward_reaches_root(self):
        """Every ancestor gets a visit and the reward."""
        root = MctsNode()
        leaf = root.add_child('Conv2d').add_child('Relu')
        backpropagate(leaf, 1)
        assert [(n.v, n.n) for n in walk(root)] == [(1, 1), (1, 1), (1, 1)]
        assert leaf.simulations == 1

    def test_zero_reward_counts_visit(self):
        """A round without findings still counts as a visit."""
        root = MctsNode()
        leaf = root.add_child('Add')
        backpropagate(leaf, 0)
        assert (root.v, root.n) == (0, 1)
        assert (leaf.v, leaf.n) == (0, 1)

    def test_reward_is_binary(self):
        """Several new exceptions still credit one."""
        root = MctsNode()
        leaf = root.add_child('Add')
        backpropagate(leaf, 5)
        assert leaf.v == 1


class TestMctsTree:
    """Test suite for choose_blocks."""

    def test_first_choice_expands_lowest_olc(self, small_corpus):
        """With nothing covered, ties fall to corpus order."""
        tree = MctsTree(small_corpus)
        blocks, node = tree.choose_blocks(empty_state(small_corpus), random.Random(0))
        assert [b.name for b in blocks] == ['Conv2d']
        assert node.depth == 1

    def test_expansion_prefers_uncovered_operator(self, small_corpus, coverage_models):
        """Relu has the lowest OLC after the fixture models."""
        state = empty_state(small_corpus, CoverageConfig(n_maxspc=10))
        for m in coverage_models:
            state = observe(state, m)
        tree = MctsTree(small_corpus)
        blocks, _ = tree.choose_blocks(state, random.Random(0))
        assert [b.name for b in blocks] == ['Relu']

    def test_leaf_resimulated_until_tc2(self, small_corpus):
        """A fresh leaf is returned again until it has tc2 simulations."""
        tree = MctsTree(small_corpus, SearchConfig(tc2=2, max_children=1))
        state = empty_state(small_corpus)
        rng = random.Random(0)
        _, first = tree.choose_blocks(state, rng)
        backpropagate(first, 0)
        _, again = tree.choose_blocks(state, rng)
        assert again is first
        backpropagate(again, 0)
        _, third = tree.choose_blocks(state, rng)
        assert third is not first

    def test_vocabulary_is_root_path(self, small_corpus):
        """Deeper nodes carry every block on their path, without repeats."""
        tree = MctsTree(small_corpus, SearchConfig(max_children=1))
        state = empty_state(small_corpus)
        rng = random.Random(3)
        names = []
        for _ in range(3):
            blocks, node = tree.choose_blocks(state, rng)
            backpropagate(node, 0)
            names = [b.name for b in blocks]
        assert len(names) == 3
        assert sorted(names) == ['Add', 'Conv2d', 'Relu']

    def test_stats(self, small_corpus):
        """Stats count the nodes below the root and the deepest level."""
        tree = MctsTree(small_corpus, SearchConfig(max_children=1))
        assert tree.stats() == {'nodes': 0, 'depth': 0, 'saturated': 0, 'resets': 0}
        state = empty_state(small_corpus)
        rng = random.Random(3)
        for _ in range(3):
            _, node = tree.choose_blocks(state, rng)
            backpropagate(node, 0)
        assert tree.stats() == {'nodes': 3, 'depth': 3, 'saturated': 0, 'resets': 0}

    def test_exhaustion(self, small_corpus):
        """A tree with every path explored asks to be reset."""
        tree = MctsTree(small_corpus, SearchConfig(tc1=1, max_children=3))
        state = empty_state(small_corpus)
        rng = random.Random(0)
        with pytest.raises(SearchExhausted):
            for _ in range(10):
                _, node = tree.choose_blocks(state, rng)
                backpropagate(node, 0)
        tree.reset()
        assert tree.root.children == []
        assert tree.resets == 1

    def test_round_trip_tree(self, small_corpus):
        """A checkpointed tree restores the same statistics."""
        tree = MctsTree(small_corpus)
        state = empty_state(small_corpus)
        rng = random.Random(1)
        for reward in (1, 0, 1):
            _, node = tree.choose_blocks(state, rng)
            backpropagate(node, reward)
        restored = MctsTree(small_corpus)
        restored.load(tree.to_dict())
        assert restored.to_dict() == tree.to_dict()
        assert restored.root.children[0].parent is restored.root


class TestRandomChooser:
    """Test suite for the random baseline."""

    def test_draw_count(self, default_corpus):
        """Draws come from the corpus, with replacement."""
        blocks = random_chooser(default_corpus, random.Random(5), 40)
        assert len(blocks) == 40
        assert all(default_corpus.has_block(b.name) for b in blocks)
        assert len({b.name for b in blocks}) < 40

    def test_deterministic(self, default_corpus):
        """Same rng seed, same vocabulary."""
        first = random_chooser(default_corpus, random.Random(9), 5)
        second = random_chooser(default_corpus, random.Random(9), 5)
        assert first == second


class TestSearchConfig:
    """Test suite for search settings."""

    def test_defaults(self):
        """Defaults follow the usual UCT constant."""
        cfg = SearchConfig.from_dict({})
        assert cfg.mode == 'mcts'
        assert cfg.e == pytest.approx(1 / math.sqrt(2))

    def test_invalid_mode(self):
        """Only mcts and random are modes."""
        with pytest.raises(ValidationError):
            SearchConfig(mode='greedy')

    def test_invalid_tc1(self):
        """tc1 must be positive."""
        with pytest.raises(ValidationError):
            SearchConfig.from_dict({'tc1': 0})
