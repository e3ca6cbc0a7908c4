"""
Operator-level coverage of a test set.

Five metrics are tracked per operator type c of the corpus:
  OTC  whether c occurs at all
  IDC  share of c's possible in-degrees that occurred
  ODC  share of c's possible out-degrees that occurred
  SEC  share of operator types that c fed directly
  SPC  distinct (input shapes, parameters) vectors, capped at n_maxspc
OLC is their weighted mean, per operator and for the whole set.

CoverageState is an immutable value: observing a model or merging two states
returns a new state, so states can be snapshotted and compared cheaply.
"""

import json
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from model_ir import PLACEHOLDER, BlockCorpus, ModelSpec
from shapecalc import infer_shapes
from utils.logger import setup_logger
from utils.validators import ValidationError, validate_choices, validate_positive_int

logger = setup_logger(__name__)

METRICS = ('OTC', 'IDC', 'ODC', 'SEC', 'SPC')
GATES = ('set', 'op', 'either')
SET_ROW = 'I'
TOLERANCE = 1e-12


@dataclass(frozen=True)
class CoverageConfig:
    n_maxspc: int = 200
    weights_op: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    weights_set: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    gate: str = 'either'

    def __post_init__(self):
        validate_positive_int(self.n_maxspc, 'coverage.n_maxspc')
        for name, weights in (('weights_op', self.weights_op), ('weights_set', self.weights_set)):
            if len(weights) != 5 or any(w < 0 for w in weights) or sum(weights) <= 0:
                raise ValidationError(f"coverage.{name} must be five non-negative weights with a positive sum")
        validate_choices([self.gate], GATES, 'coverage.gate')

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'CoverageConfig':
        return cls(
            n_maxspc=data.get('n_maxspc', 200),
            weights_op=tuple(float(w) for w in data.get('weights_op', (1.0,) * 5)),
            weights_set=tuple(float(w) for w in data.get('weights_set', (1.0,) * 5)),
            gate=data.get('gate', 'either'),
        )


@dataclass(frozen=True)
class CoverageDomain:
    """Operator types and the in/out-degree values each can take, from a corpus."""

    operator_types: Tuple[str, ...]
    in_domains: Mapping[str, FrozenSet[int]]
    out_domains: Mapping[str, FrozenSet[int]]

    @classmethod
    def from_corpus(cls, corpus: BlockCorpus) -> 'CoverageDomain':
        in_domains, out_domains = {}, {}
        for op in corpus.operator_types:
            single = corpus.single_block(op)
            containing = corpus.blocks_containing(op)
            kind = corpus.operator(op)
            if single is not None:
                in_domain = set(single.in_degree)
            elif kind.is_variadic:
                in_domain = set().union(*(b.in_degree for b in containing))
            else:
                in_domain = {kind.arity}
            out_domain = set(single.out_degree) if single is not None else set()
            for block in containing:
                out_domain |= block.out_degree
            in_domains[op] = frozenset(in_domain)
            out_domains[op] = frozenset(out_domain)
        return cls(corpus.operator_types, MappingProxyType(in_domains), MappingProxyType(out_domains))

    @property
    def n_t(self) -> int:
        return len(self.operator_types)


@dataclass(frozen=True)
class OperatorStats:
    seen: bool = False
    in_degrees: FrozenSet[int] = frozenset()
    out_degrees: FrozenSet[int] = frozenset()
    out_edge_targets: FrozenSet[str] = frozenset()
    sp_vectors: FrozenSet[str] = frozenset()

    def merge(self, other: 'OperatorStats') -> 'OperatorStats':
        return OperatorStats(
            seen=self.seen or other.seen,
            in_degrees=self.in_degrees | other.in_degrees,
            out_degrees=self.out_degrees | other.out_degrees,
            out_edge_targets=self.out_edge_targets | other.out_edge_targets,
            sp_vectors=self.sp_vectors | other.sp_vectors,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seen': self.seen,
            'in_degrees': sorted(self.in_degrees),
            'out_degrees': sorted(self.out_degrees),
            'out_edge_targets': sorted(self.out_edge_targets),
            'sp_vectors': sorted(self.sp_vectors),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'OperatorStats':
        return cls(
            seen=bool(data['seen']),
            in_degrees=frozenset(data['in_degrees']),
            out_degrees=frozenset(data['out_degrees']),
            out_edge_targets=frozenset(data['out_edge_targets']),
            sp_vectors=frozenset(data['sp_vectors']),
        )


@dataclass(frozen=True)
class CoverageState:
    domain: CoverageDomain = field(compare=False)
    config: CoverageConfig = field(default_factory=CoverageConfig, compare=False)
    stats: Mapping[str, OperatorStats] = field(default_factory=dict)
    # Operators outside the corpus; never part of a denominator
    foreign: Mapping[str, OperatorStats] = field(default_factory=dict)
    models: int = 0

    def operator(self, op: str) -> OperatorStats:
        return self.stats.get(op, OperatorStats())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'models': self.models,
            'stats': {op: s.to_dict() for op, s in sorted(self.stats.items())},
            'foreign': {op: s.to_dict() for op, s in sorted(self.foreign.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], domain: CoverageDomain,
                  config: CoverageConfig) -> 'CoverageState':
        return cls(
            domain=domain,
            config=config,
            stats={op: OperatorStats.from_dict(s) for op, s in data['stats'].items()},
            foreign={op: OperatorStats.from_dict(s) for op, s in data['foreign'].items()},
            models=int(data['models']),
        )


def empty_state(corpus: BlockCorpus, config: Optional[CoverageConfig] = None) -> CoverageState:
    return CoverageState(CoverageDomain.from_corpus(corpus), config or CoverageConfig())


def sp_vector(shapes: Sequence[Sequence[int]], params: Iterable[Tuple[str, Any]]) -> str:
    """Canonical shape&parameter vector: all input shapes, then sorted params."""
    return json.dumps([[list(s) for s in shapes], [[k, v] for k, v in sorted(params)]],
                      separators=(',', ':'), default=list)


def occurrences(m: ModelSpec) -> List[Tuple[str, OperatorStats]]:
    """One single-occurrence OperatorStats per operator node of a model."""
    infos = infer_shapes(m)
    graph = m.graph
    found = []
    for node in graph.nodes:
        if node.op == PLACEHOLDER:
            continue
        shapes = [infos[e.src][0] for e in graph.in_edges(node.id)]
        found.append((node.op, OperatorStats(
            seen=True,
            in_degrees=frozenset({graph.in_degree(node.id)}),
            out_degrees=frozenset({graph.out_degree(node.id)}),
            out_edge_targets=frozenset(graph.node(dst).op for dst in graph.successors(node.id)),
            sp_vectors=frozenset({sp_vector(shapes, node.params)}),
        )))
    return found


def observe(state: CoverageState, m: ModelSpec) -> CoverageState:
    """Accumulate every operator occurrence of ``m``."""
    stats = dict(state.stats)
    foreign = dict(state.foreign)
    known = set(state.domain.operator_types)
    for op, occurrence in occurrences(m):
        bucket = stats if op in known else foreign
        bucket[op] = bucket.get(op, OperatorStats()).merge(occurrence)
    return replace(state, stats=stats, foreign=foreign, models=state.models + 1)


def merge(a: CoverageState, b: CoverageState) -> CoverageState:
    """State of the union of the model multisets behind ``a`` and ``b``."""
    def union(x: Mapping[str, OperatorStats], y: Mapping[str, OperatorStats]) -> Dict[str, OperatorStats]:
        out = dict(x)
        for op, s in y.items():
            out[op] = out[op].merge(s) if op in out else s
        return out
    return replace(a, stats=union(a.stats, b.stats), foreign=union(a.foreign, b.foreign),
                   models=a.models + b.models)


# =============================================================================
# METRICS
# =============================================================================

def _ratio(hit: int, total: int) -> float:
    return hit / total if total else 0.0


def operator_metrics(state: CoverageState, c: str) -> Tuple[float, float, float, float, float]:
    """(OTC, IDC, ODC, SEC, SPC) of operator ``c``."""
    s = state.operator(c)
    domain = state.domain
    in_domain = domain.in_domains.get(c, frozenset())
    out_domain = domain.out_domains.get(c, frozenset())
    types = set(domain.operator_types)
    n_maxspc = state.config.n_maxspc
    return (
        1.0 if s.seen else 0.0,
        _ratio(len(s.in_degrees & in_domain), len(in_domain)),
        _ratio(len(s.out_degrees & out_domain), len(out_domain)),
        _ratio(len(s.out_edge_targets & types), domain.n_t),
        min(len(s.sp_vectors), n_maxspc) / n_maxspc,
    )


def _set_metric(state: CoverageState, index: int) -> float:
    types = state.domain.operator_types
    if not types:
        return 0.0
    return sum(operator_metrics(state, c)[index] for c in types) / len(types)


def otc(state: CoverageState) -> float:
    return _set_metric(state, 0)


def idc(state: CoverageState) -> float:
    return _set_metric(state, 1)


def odc(state: CoverageState) -> float:
    return _set_metric(state, 2)


def sec(state: CoverageState) -> float:
    return _set_metric(state, 3)


def spc(state: CoverageState) -> float:
    return _set_metric(state, 4)


def set_metrics(state: CoverageState) -> Tuple[float, float, float, float, float]:
    return tuple(_set_metric(state, i) for i in range(5))


def _weighted(values: Sequence[float], weights: Sequence[float]) -> float:
    return sum(w * v for w, v in zip(weights, values)) / sum(weights)


def olc_op(state: CoverageState, c: str) -> float:
    return _weighted(operator_metrics(state, c), state.config.weights_op)


def olc(state: CoverageState) -> float:
    return _weighted(set_metrics(state), state.config.weights_set)


def is_new_coverage(state: CoverageState, m: ModelSpec) -> bool:
    """Whether observing ``m`` raises the set OLC and/or some operator's OLC."""
    after = observe(state, m)
    set_gain = olc(after) > olc(state) + TOLERANCE
    op_gain = any(olc_op(after, c) > olc_op(state, c) + TOLERANCE for c in state.domain.operator_types)
    gate = state.config.gate
    if gate == 'set':
        return set_gain
    if gate == 'op':
        return op_gain
    return set_gain or op_gain


def coverage_table(state: CoverageState) -> pd.DataFrame:
    """Per-operator metrics plus the set row, in percent."""
    rows = []
    for c in state.domain.operator_types:
        values = operator_metrics(state, c)
        rows.append([c, *[v * 100 for v in values], olc_op(state, c) * 100])
    rows.append([SET_ROW, *[v * 100 for v in set_metrics(state)], olc(state) * 100])
    return pd.DataFrame(rows, columns=['Object', *METRICS, 'OLC'])
