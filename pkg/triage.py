"""
Differential triage: compare backend outputs, classify each trial and keep a
deduplicated exception registry.

Statuses:
  MCF  model conversion failure (convert stage rejected the model)
  IF   inference failure (crash, abort or timeout while running)
  DCF  data comparison failure (outputs disagree with the reference)
  DCP  data comparison pass
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from model_ir import Graph, ModelSpec
from optimized_backend import ConversionError, run_optimized, validate_bug_mask
from reference_backend import ExecutionResult, InferenceFault, run_reference
from tensors import synthesize_inputs
from utils.logger import setup_logger
from utils.validators import ValidationError, validate_choices

logger = setup_logger(__name__)

MCF, IF, DCF, DCP = 'MCF', 'IF', 'DCF', 'DCP'
STATUSES = (MCF, IF, DCF, DCP)
EXCEPTION_STATUSES = (MCF, IF, DCF)

RE_THRESHOLD = 0.999
ELEMENT_TOLERANCE = 1e-3
EPSILON = 1e-6

TEST_BACKENDS = ('optimized', 'external', 'reference')


# =============================================================================
# COMPARATOR
# =============================================================================

def success_ratio(ref: np.ndarray, test: np.ndarray) -> float:
    """Fraction of elements within relative error 1e-3 of the reference."""
    if tuple(ref.shape) != tuple(test.shape):
        return 0.0
    if ref.size == 0:
        return 1.0
    a = ref.astype(np.float64)
    b = test.astype(np.float64)
    with np.errstate(all='ignore'):
        rel = np.abs(a - b) / np.maximum(np.abs(a), EPSILON)
        ok = (rel <= ELEMENT_TOLERANCE) | (np.isnan(a) & np.isnan(b)) | (a == b)
    return float(ok.mean())


@dataclass(frozen=True)
class ComparisonReport:
    ratios: Mapping[int, float]
    re: float
    threshold: float = RE_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.re >= self.threshold

    @property
    def worst_output(self) -> Optional[int]:
        if not self.ratios:
            return None
        return min(sorted(self.ratios), key=lambda v: self.ratios[v])


def compare(ref_outputs: Mapping[int, np.ndarray], test_outputs: Mapping[int, np.ndarray],
            threshold: float = RE_THRESHOLD) -> ComparisonReport:
    """Per-output success ratios; RE is their minimum. A missing output scores 0."""
    ratios = {}
    for v in sorted(set(ref_outputs) | set(test_outputs)):
        if v not in ref_outputs or v not in test_outputs:
            ratios[v] = 0.0
        else:
            ratios[v] = success_ratio(ref_outputs[v], test_outputs[v])
    re = min(ratios.values()) if ratios else 1.0
    return ComparisonReport(ratios, re, threshold)


# =============================================================================
# OUTCOMES
# =============================================================================

@dataclass(frozen=True)
class TrialOutcome:
    status: str
    detail: Mapping[str, Any] = field(default_factory=dict)
    dedup_key: str = ''

    @property
    def is_exception(self) -> bool:
        return self.status in EXCEPTION_STATUSES

    def to_dict(self) -> Dict[str, Any]:
        return {'status': self.status, 'dedup_key': self.dedup_key, 'detail': dict(self.detail)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'TrialOutcome':
        return cls(data['status'], data.get('detail', {}), data.get('dedup_key', ''))


def _key(*parts: Any) -> str:
    return json.dumps(list(parts), separators=(',', ':'))


def arity_class(in_degree: int) -> str:
    return str(in_degree) if in_degree <= 2 else 'n'


def conversion_outcome(error: ConversionError) -> TrialOutcome:
    return TrialOutcome(MCF, {'stage': error.stage, 'code': error.code, 'op': error.op,
                              'node': error.node, 'message': str(error)},
                        _key(MCF, error.stage, error.code, error.op))


def fault_outcome(fault: InferenceFault) -> TrialOutcome:
    return TrialOutcome(IF, {'kind': fault.kind, 'op': fault.op, 'node': fault.node, 'message': str(fault)},
                        _key(IF, fault.kind, fault.op))


def _first_divergent(m: ModelSpec, ref: ExecutionResult, test: ExecutionResult) -> Tuple[Optional[int], Dict[int, float]]:
    node_re = {}
    first = None
    for v in m.graph.topological_order():
        if v in test.taps and v in ref.taps:
            node_re[v] = success_ratio(ref.taps[v], test.taps[v])
            if first is None and node_re[v] < RE_THRESHOLD:
                first = v
    return first, node_re


def faulty_kernel(m: ModelSpec, test: ExecutionResult, site: int) -> Tuple[int, ...]:
    """
    Nodes the divergence at ``site`` is charged to.

    Normally the kernel closed by ``site``. A site that reads a value from
    inside another fused kernel (a member other than its output, never tapped)
    is charged to that kernel instead.
    """
    owner = {v: members for members in test.kernels.values() for v in members}
    for p in m.graph.predecessors(site):
        members = owner.get(p)
        if members is not None and p != members[-1]:
            return members
    return owner.get(site, (site,))


def kernel_graph(graph: Graph, members: Sequence[int]) -> Graph:
    """The operators of one kernel and the edges between them."""
    keep = set(members)
    return graph.without_nodes([v for v in graph.node_ids if v not in keep])


def divergence_outcome(m: ModelSpec, ref: ExecutionResult, test: ExecutionResult,
                       report: ComparisonReport) -> TrialOutcome:
    """
    DCF record keyed by structure and operator: the structure hash of the
    faulty kernel, the arity class of its external operands and the operator
    anchoring it. The site is the first node whose tapped value diverges;
    without taps (external engines) the lowest-scoring output stands in.
    """
    first, node_re = _first_divergent(m, ref, test)
    site = first if first is not None else report.worst_output
    node = m.graph.node(site)
    members = faulty_kernel(m, test, site)
    kernel = set(members)
    operands = sum(1 for v in members for e in m.graph.in_edges(v) if e.src not in kernel)
    fault_op = m.graph.node(members[0]).op
    detail = {
        're': report.re,
        'outputs': {str(v): r for v, r in report.ratios.items()},
        'worst_node': site,
        'worst_op': node.op,
        'region': test.regions.get(members[-1], '+'.join(m.graph.node(v).op for v in members)),
        'fault_op': fault_op,
        'node_re': {str(v): r for v, r in node_re.items()} if node_re else None,
    }
    structure = kernel_graph(m.graph, members).structure_hash()
    return TrialOutcome(DCF, detail, _key(DCF, structure, arity_class(operands), fault_op))


# =============================================================================
# REGISTRY
# =============================================================================

@dataclass
class RegistryEntry:
    key: str
    status: str
    first_model: str
    detail: Mapping[str, Any]
    count: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {'key': self.key, 'status': self.status, 'first_model': self.first_model,
                'detail': dict(self.detail), 'count': self.count}


class ExceptionRegistry:
    """Deduplicated exceptions: dedup_key -> first occurrence and hit count."""

    def __init__(self):
        self.entries: Dict[str, RegistryEntry] = {}
        self.raw: Counter = Counter()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, outcome: TrialOutcome, model_id: str) -> bool:
        """Add one outcome; True when it opened a new entry. DCP is ignored."""
        if not outcome.is_exception:
            return False
        self.raw[outcome.status] += 1
        entry = self.entries.get(outcome.dedup_key)
        if entry is not None:
            entry.count += 1
            return False
        self.entries[outcome.dedup_key] = RegistryEntry(outcome.dedup_key, outcome.status, model_id,
                                                        outcome.detail)
        logger.info("New %s exception from model %s: %s", outcome.status, model_id, outcome.dedup_key)
        return True

    def dedup_counts(self) -> Dict[str, int]:
        counts = Counter(e.status for e in self.entries.values())
        return {s: counts.get(s, 0) for s in EXCEPTION_STATUSES}

    def raw_counts(self) -> Dict[str, int]:
        return {s: self.raw.get(s, 0) for s in EXCEPTION_STATUSES}

    def table(self) -> pd.DataFrame:
        """Deduplicated and total counts per status, plus an 'All' row."""
        dedup, raw = self.dedup_counts(), self.raw_counts()
        rows = [[s, dedup[s], raw[s]] for s in EXCEPTION_STATUSES]
        rows.append(['All', sum(dedup.values()), sum(raw.values())])
        return pd.DataFrame(rows, columns=['Status', 'Deduplicated', 'Total'])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'raw': self.raw_counts(),
            'entries': [self.entries[k].to_dict() for k in sorted(self.entries)],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ExceptionRegistry':
        registry = cls()
        registry.raw = Counter({k: v for k, v in data.get('raw', {}).items() if v})
        for item in data.get('entries', []):
            registry.entries[item['key']] = RegistryEntry(item['key'], item['status'], item['first_model'],
                                                          item['detail'], item['count'])
        return registry


def classify_and_dedup(outcomes: Iterable[Tuple[str, TrialOutcome]],
                       registry: Optional[ExceptionRegistry] = None) -> ExceptionRegistry:
    """Fold (model id, outcome) pairs into a registry."""
    registry = registry if registry is not None else ExceptionRegistry()
    for model_id, outcome in outcomes:
        registry.record(outcome, model_id)
    return registry


# =============================================================================
# TRIAL RUNNER
# =============================================================================

@dataclass(frozen=True)
class BackendSpec:
    """The backend under test, compared against the reference interpreter."""

    kind: str = 'optimized'
    bug_mask: Tuple[str, ...] = ()
    engine_cmd: Optional[str] = None
    timeout: float = 30.0
    fusion: bool = True

    def __post_init__(self):
        validate_choices([self.kind], TEST_BACKENDS, 'exec.test_backend')
        validate_bug_mask(self.bug_mask)
        if self.kind == 'external' and not self.engine_cmd:
            raise ValidationError("An external test backend needs an engine command")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'BackendSpec':
        return cls(
            kind=data.get('test_backend', 'optimized'),
            bug_mask=tuple(data.get('bug_mask', ())),
            engine_cmd=data.get('engine_cmd'),
            timeout=float(data.get('timeout', 30.0)),
            fusion=bool(data.get('fusion', True)),
        )


def run_test_backend(m: ModelSpec, inputs: Sequence[np.ndarray], backend: BackendSpec) -> ExecutionResult:
    if backend.kind == 'optimized':
        return run_optimized(m, inputs, backend.bug_mask, backend.fusion)
    if backend.kind == 'external':
        from engine_adapter import run_external
        return run_external(m, inputs, backend.engine_cmd, backend.timeout)
    return run_reference(m, inputs)


def run_trial(m: ModelSpec, backend: BackendSpec) -> Optional[TrialOutcome]:
    """
    Execute one model on the reference and the backend under test.

    Returns None when the reference itself cannot run the model: that is a
    generation failure, not an engine exception. Infrastructure errors
    propagate.
    """
    inputs = synthesize_inputs(m)
    try:
        ref = run_reference(m, inputs)
    except InferenceFault as e:
        logger.warning("Reference could not run the model: %s", e)
        return None
    try:
        test = run_test_backend(m, inputs, backend)
    except ConversionError as e:
        return conversion_outcome(e)
    except InferenceFault as e:
        return fault_outcome(e)
    report = compare(ref.outputs, test.outputs)
    if report.passed:
        return TrialOutcome(DCP, {'re': report.re})
    return divergence_outcome(m, ref, test, report)


def summarize(outcomes: Sequence[Optional[TrialOutcome]]) -> Dict[str, int]:
    counts = Counter(o.status for o in outcomes if o is not None)
    return {s: counts.get(s, 0) for s in STATUSES}
