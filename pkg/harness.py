"""
Campaign driver.

One round of the loop:
  1. choose a block vocabulary (MCTS path or random draw)
  2. select mutations for the round
  3. generate a batch of models from the vocabulary (input mutation)
  4. keep the models that raise coverage
  5. execute them on the reference and the backend under test
  6. record outcomes, update coverage, backpropagate the reward

Every round draws from its own PRNG stream derived from the master seed and
the round index, so a campaign is reproducible from (config, seed) and a
resumed campaign continues exactly where an uninterrupted one would.
"""

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from op_coverage import CoverageConfig, CoverageState, empty_state, is_new_coverage, observe, olc
from graphgen import GraphGenConfig, GraphModel, assign_blocks, generate_topology
from model_ir import (
    PLACEHOLDER,
    Block,
    BlockCorpus,
    ModelSpec,
    WiringError,
    deserialize_model,
    expand_blocks,
    serialize_model,
)
from mutation import (
    BNA,
    BNR,
    GEA,
    GER,
    PM,
    TSM,
    MutationAction,
    MutationConfig,
    bna,
    bnr,
    gea,
    ger,
    mutate_params,
    select_mutations,
    tsm,
)
from search import (
    MctsNode,
    MctsTree,
    SearchConfig,
    SearchExhausted,
    backpropagate,
    random_chooser,
)
from shapecalc import AdapterSynthesisError, ShapeCaps, ShapeInferenceError, resolve_model
from tensors import stream_key
from triage import BackendSpec, ExceptionRegistry, TrialOutcome, run_trial
from utils.errors import InfrastructureError
from utils.logger import setup_logger
from utils.retry import RetryContext
from utils.validators import (
    ValidationError,
    validate_choices,
    validate_positive_int,
    validate_probability,
)

logger = setup_logger(__name__)

# Failures that redraw a model instead of ending the round
GENERATION_ERRORS = (AdapterSynthesisError, ShapeInferenceError, WiringError)

MODELS_DIR = 'models'
CHECKPOINT_FILE = 'checkpoint.json'
CAMPAIGN_FILE = 'campaign.json'
COVERAGE_FILE = 'coverage.json'
REGISTRY_FILE = 'registry.json'
TREE_FILE = 'search_tree.json'
TRACE_FILE = 'search_trace.jsonl'
OUTCOMES_FILE = 'outcomes.jsonl'


def derive_seed(master_seed: int, *labels: Any) -> int:
    """Independent 64-bit seed for a labelled sub-stream of the campaign."""
    return stream_key(master_seed, *labels)


# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass(frozen=True)
class GenerationSettings:
    model: str = GraphModel.BOTH.value
    k_choices: Tuple[int, ...] = (2, 4, 6)
    p_ws: float = 0.5
    p_rn: float = 0.9
    input_shapes: Tuple[Tuple[int, ...], ...] = ((1, 8, 8, 3),)
    caps: ShapeCaps = ShapeCaps()
    max_retries: int = 10

    def __post_init__(self):
        validate_choices([self.model], [m.value for m in GraphModel], 'generation.model')
        if not self.k_choices:
            raise ValidationError("generation.k_choices must not be empty")
        for k in self.k_choices:
            validate_positive_int(k, 'generation.k_choices', minimum=2)
        validate_probability(self.p_ws, 'generation.p_ws')
        validate_probability(self.p_rn, 'generation.p_rn')
        if not self.input_shapes:
            raise ValidationError("generation.input_shapes must not be empty")
        for shape in self.input_shapes:
            if len(shape) != 4 or any(not isinstance(d, int) or d < 1 for d in shape):
                raise ValidationError(f"Input shapes must be rank-4 positive NHWC dims, got {list(shape)}")
        validate_positive_int(self.max_retries, 'generation.max_retries', minimum=0)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'GenerationSettings':
        return cls(
            model=data.get('model', GraphModel.BOTH.value),
            k_choices=tuple(data.get('k_choices', (2, 4, 6))),
            p_ws=float(data.get('p_ws', 0.5)),
            p_rn=float(data.get('p_rn', 0.9)),
            input_shapes=tuple(tuple(s) for s in data.get('input_shapes', ((1, 8, 8, 3),))),
            caps=ShapeCaps(
                max_stride=data.get('max_stride', 2),
                max_dilation=data.get('max_dilation', 3),
                max_tensor_elements=data.get('max_tensor_elements', 262144),
            ),
            max_retries=data.get('max_retries', 10),
        )


@dataclass(frozen=True)
class CampaignConfig:
    tc0: int = 400
    block_count: Tuple[int, int] = (1, 30)
    models_per_round: int = 1
    max_rounds: int = 0
    master_seed: int = 0
    checkpoint_every: int = 10
    generation: GenerationSettings = GenerationSettings()
    mutation: MutationConfig = MutationConfig()
    coverage: CoverageConfig = CoverageConfig()
    search: SearchConfig = SearchConfig()
    backend: BackendSpec = BackendSpec()
    workers: int = 4
    execute_discarded: bool = False
    # The merged dictionary this config was built from (saved as campaign.json)
    source: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        validate_positive_int(self.tc0, 'tc0')
        low, high = self.block_count
        validate_positive_int(low, 'block_count lower bound')
        validate_positive_int(high, 'block_count upper bound', minimum=low)
        validate_positive_int(self.models_per_round, 'models_per_round')
        validate_positive_int(self.max_rounds, 'max_rounds', minimum=0)
        validate_positive_int(self.checkpoint_every, 'checkpoint_every')
        validate_positive_int(self.workers, 'exec.workers')
        if not isinstance(self.master_seed, int) or not 0 <= self.master_seed < 2 ** 64:
            raise ValidationError(f"master_seed must be an unsigned 64-bit integer, got {self.master_seed!r}")

    @property
    def round_limit(self) -> int:
        return self.max_rounds or 50 * self.tc0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'CampaignConfig':
        """Typed config from a merged campaign dictionary (see config.load_campaign_file)."""
        block_count = data.get('block_count', (1, 30))
        if isinstance(block_count, int):
            block_count = (block_count, block_count)
        if len(block_count) != 2:
            raise ValidationError(f"block_count must be a number or [low, high], got {block_count!r}")
        exec_cfg = data.get('exec', {})
        master_seed = data.get('master_seed', 0)
        return cls(
            tc0=data.get('tc0', 400),
            block_count=(block_count[0], block_count[1]),
            models_per_round=data.get('models_per_round', 1),
            max_rounds=data.get('max_rounds', 0),
            master_seed=master_seed,
            checkpoint_every=data.get('checkpoint_every', 10),
            generation=GenerationSettings.from_dict(data.get('generation', {})),
            mutation=MutationConfig.from_dict(data.get('mutation', {}), seed=master_seed),
            coverage=CoverageConfig.from_dict(data.get('coverage', {})),
            search=SearchConfig.from_dict(data.get('search', {})),
            backend=BackendSpec.from_dict(exec_cfg),
            workers=exec_cfg.get('workers', 4),
            execute_discarded=bool(exec_cfg.get('execute_discarded', False)),
            source=json.loads(json.dumps(data)),
        )


# =============================================================================
# INPUT MUTATION
# =============================================================================

def input_mutation(blocks: Sequence[Block], action: MutationAction, corpus: BlockCorpus,
                   settings: GenerationSettings, mutation: MutationConfig, block_count: int,
                   rng: random.Random, weights_seed: int = 0) -> ModelSpec:
    """
    One model from a block vocabulary.

    Topology, block assignment, block-level mutations (GEA, GER), expansion,
    operator-level mutations (BNA, BNR), input shapes (TSM), parameters (PM)
    and finally shape resolution.
    """
    model = settings.model
    if model == GraphModel.BOTH.value:
        model = rng.choice((GraphModel.WS.value, GraphModel.RN.value))
    p = settings.p_ws if model == GraphModel.WS.value else settings.p_rn
    topology = generate_topology(GraphGenConfig(model, block_count, rng.choice(settings.k_choices), p), rng)
    g = assign_blocks(topology, corpus, rng, allowed=list(blocks))

    if action.has(GEA):
        g = gea(g, action.param(GEA, 'r'), rng, corpus).graph
    if action.has(GER):
        g = ger(g, action.param(GER, 'r'), rng, corpus).graph
    g = expand_blocks(g, corpus)
    if action.has(BNA):
        g = bna(g, action.param(BNA, 'r'), rng, corpus).graph
    if action.has(BNR):
        g = bnr(g, action.param(BNR, 'r'), rng).graph

    base = tuple(rng.choice(settings.input_shapes))
    count = sum(1 for n in g.nodes if n.op == PLACEHOLDER)
    if action.has(TSM):
        shapes = [tsm(base, rng, mutation.shape_domain) for _ in range(count)]
    else:
        shapes = [base] * count
    if action.has(PM):
        g, _ = mutate_params(g, corpus, rng, action.param(PM, 'node_rate', mutation.pm_node_rate))
    return resolve_model(g, shapes, corpus, rng, settings.caps, weights_seed)


# =============================================================================
# CAMPAIGN
# =============================================================================

@dataclass
class SimulationResult:
    """What one round's simulation produced."""

    new_exceptions: int = 0
    coverage_delta: float = 0.0
    generated: int = 0
    admitted: List[str] = field(default_factory=list)
    outcomes: List[Tuple[str, Optional[TrialOutcome]]] = field(default_factory=list)

    @property
    def reward(self) -> int:
        return 1 if self.new_exceptions else 0


@dataclass
class CampaignResult:
    registry: ExceptionRegistry
    coverage: CoverageState
    retained: List[str]
    rounds: int
    tree: Optional[MctsTree] = None


class Campaign:
    """
    A fuzzing campaign over one corpus.

    With ``out_dir`` set, retained models, outcomes, the search trace and
    periodic checkpoints are written there; otherwise everything stays in
    memory (tests, notebooks).
    """

    def __init__(self, cfg: CampaignConfig, corpus: BlockCorpus, out_dir: Optional[Path] = None):
        self.cfg = cfg
        self.corpus = corpus
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.registry = ExceptionRegistry()
        self.state = empty_state(corpus, cfg.coverage)
        self.tree = MctsTree(corpus, cfg.search) if cfg.search.mode == 'mcts' else None
        self.retained: List[str] = []
        self.models: Dict[str, ModelSpec] = {}
        self.round = 0
        self.trace: List[Dict[str, Any]] = []

    # ------------------------------------------------------------------ rounds

    def choose(self, rng: random.Random) -> Tuple[List[Block], Optional[MctsNode]]:
        if self.tree is None:
            return random_chooser(self.corpus, rng, rng.randint(1, self.cfg.search.tc1)), None
        try:
            return self.tree.choose_blocks(self.state, rng)
        except SearchExhausted:
            self.tree.reset()
            return self.tree.choose_blocks(self.state, rng)

    def generate(self, blocks: Sequence[Block], action: MutationAction, index: int) -> Optional[ModelSpec]:
        """One model for slot ``index`` of the current round, or None after exhausted retries."""
        cfg = self.cfg
        rng = random.Random(derive_seed(cfg.master_seed, 'model', self.round, index))
        weights_seed = derive_seed(cfg.master_seed, 'weights', self.round, index)
        retry = RetryContext(max_retries=cfg.generation.max_retries, base_delay=0,
                             label=f"round {self.round} model {index}")
        while retry.should_continue():
            block_count = rng.randint(*cfg.block_count)
            try:
                return input_mutation(blocks, action, self.corpus, cfg.generation, cfg.mutation,
                                      block_count, rng, weights_seed)
            except GENERATION_ERRORS as e:
                try:
                    retry.handle_exception(e)
                except GENERATION_ERRORS:
                    logger.warning("Round %d: generation retries exhausted, skipping model", self.round)
                    return None
        return None

    def execute(self, models: Sequence[ModelSpec]) -> List[Optional[TrialOutcome]]:
        if not models:
            return []
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            futures = [pool.submit(run_trial, m, self.cfg.backend) for m in models]
            return [f.result() for f in futures]

    def simulate(self, blocks: Sequence[Block], action: MutationAction) -> SimulationResult:
        """Generate, gate, execute and record one batch of models."""
        result = SimulationResult()
        before = olc(self.state)
        batch = []
        for index in range(self.cfg.models_per_round):
            m = self.generate(blocks, action, index)
            if m is not None:
                batch.append(m)
        result.generated = len(batch)

        admitted, discarded = [], []
        tentative = self.state
        for m in batch:
            if is_new_coverage(tentative, m):
                admitted.append(m)
                tentative = observe(tentative, m)
            else:
                discarded.append(m)

        outcomes = self.execute(admitted)
        for m, outcome in zip(admitted, outcomes):
            if outcome is None:
                continue
            model_id = f"{len(self.retained):06d}"
            self.retained.append(model_id)
            self.models[model_id] = m
            self.state = observe(self.state, m)
            result.admitted.append(model_id)
            result.outcomes.append((model_id, outcome))
            if self.registry.record(outcome, model_id):
                result.new_exceptions += 1
            logger.info("Retained model %s (%d nodes): %s", model_id, m.graph.node_count, outcome.status)
            if len(self.retained) >= self.cfg.tc0:
                break

        if self.cfg.execute_discarded:
            for index, outcome in enumerate(self.execute(discarded)):
                if outcome is not None and self.registry.record(outcome, f"r{self.round:06d}d{index}"):
                    result.new_exceptions += 1
        result.coverage_delta = olc(self.state) - before
        return result

    def step(self) -> SimulationResult:
        rng = random.Random(derive_seed(self.cfg.master_seed, 'round', self.round))
        blocks, node = self.choose(rng)
        names = [b.name for b in blocks]
        if self.cfg.mutation.apply:
            action = select_mutations(self.cfg.mutation, rng, names)
        else:
            action = MutationAction(tuple(names))
        result = self.simulate(blocks, action)
        if node is not None:
            backpropagate(node, result.reward)
        self.trace.append({
            'round': self.round,
            'blocks': names,
            'expanded': node.block if node is not None else None,
            'mutations': [m.to_dict() for m in action.ms],
            'generated': result.generated,
            'admitted': result.admitted,
            'new_exceptions': result.new_exceptions,
            'reward': result.reward,
            'olc': olc(self.state),
            'retained': len(self.retained),
        })
        self.round += 1
        return result

    def run(self) -> CampaignResult:
        cfg = self.cfg
        while len(self.retained) < cfg.tc0 and self.round < cfg.round_limit:
            result = self.step()
            if self.out_dir is not None:
                self._persist_round(result)
                if self.round % cfg.checkpoint_every == 0:
                    self.checkpoint()
        if len(self.retained) < cfg.tc0:
            logger.warning("Stopped after %d rounds with %d of %d models retained",
                           self.round, len(self.retained), cfg.tc0)
        if self.tree is not None:
            logger.info("Search tree: %s", self.tree.stats())
        if self.out_dir is not None:
            self.checkpoint()
        return CampaignResult(self.registry, self.state, list(self.retained), self.round, self.tree)

    # ------------------------------------------------------------- persistence

    def _path(self, name: str) -> Path:
        return self.out_dir / name

    def _persist_round(self, result: SimulationResult) -> None:
        try:
            models_dir = self._path(MODELS_DIR)
            models_dir.mkdir(parents=True, exist_ok=True)
            for model_id in result.admitted:
                (models_dir / f"{model_id}.json").write_bytes(serialize_model(self.models[model_id]))
            with open(self._path(TRACE_FILE), 'a', encoding='utf-8') as f:
                f.write(json.dumps(self.trace[-1], sort_keys=True) + '\n')
            with open(self._path(OUTCOMES_FILE), 'a', encoding='utf-8') as f:
                for model_id, outcome in result.outcomes:
                    f.write(json.dumps({'model': model_id, **outcome.to_dict()}, sort_keys=True) + '\n')
        except OSError as e:
            raise InfrastructureError(f"Cannot write campaign output: {e}") from e

    def checkpoint(self) -> None:
        """Write everything a resumed campaign needs."""
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(self._path(CAMPAIGN_FILE), dict(self.cfg.source))
            _write_json(self._path(COVERAGE_FILE), self.state.to_dict())
            _write_json(self._path(REGISTRY_FILE), self.registry.to_dict())
            if self.tree is not None:
                _write_json(self._path(TREE_FILE), self.tree.to_dict())
            _write_json(self._path(CHECKPOINT_FILE), {'round': self.round, 'retained': len(self.retained)})
        except OSError as e:
            raise InfrastructureError(f"Cannot write checkpoint: {e}") from e
        logger.debug("Checkpoint at round %d", self.round)

    def resume(self) -> None:
        """Restore state from the last checkpoint in ``out_dir``."""
        checkpoint = _read_json(self._path(CHECKPOINT_FILE))
        self.round = checkpoint['round']
        retained = checkpoint['retained']
        self.retained = [f"{i:06d}" for i in range(retained)]
        self.models = {mid: deserialize_model((self._path(MODELS_DIR) / f"{mid}.json").read_bytes())
                       for mid in self.retained}
        self.state = CoverageState.from_dict(_read_json(self._path(COVERAGE_FILE)),
                                             self.state.domain, self.cfg.coverage)
        self.registry = ExceptionRegistry.from_dict(_read_json(self._path(REGISTRY_FILE)))
        if self.tree is not None and self._path(TREE_FILE).exists():
            self.tree.load(_read_json(self._path(TREE_FILE)))
        self.trace = _truncate_jsonl(self._path(TRACE_FILE), lambda r: r['round'] < self.round)
        _truncate_jsonl(self._path(OUTCOMES_FILE), lambda r: r['model'] < f"{retained:06d}")
        logger.info("Resumed at round %d with %d retained models", self.round, retained)


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2), encoding='utf-8')


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise InfrastructureError(f"Cannot read {path}: {e}") from e


def _truncate_jsonl(path: Path, keep) -> List[Dict[str, Any]]:
    if not path.exists():
        return []
    records = [json.loads(line) for line in path.read_text(encoding='utf-8').splitlines() if line.strip()]
    kept = [r for r in records if keep(r)]
    path.write_text(''.join(json.dumps(r, sort_keys=True) + '\n' for r in kept), encoding='utf-8')
    return kept


def fuzz_workflow(cfg: CampaignConfig, corpus: BlockCorpus, out_dir: Optional[Path] = None,
                  resume: bool = False) -> CampaignResult:
    """Run a campaign to ``cfg.tc0`` retained models (or the round limit)."""
    campaign = Campaign(cfg, corpus, out_dir)
    if resume:
        if out_dir is None or not (Path(out_dir) / CHECKPOINT_FILE).exists():
            raise InfrastructureError(f"No checkpoint to resume in {out_dir}")
        campaign.resume()
    logger.info("Campaign: tc0=%d, search=%s, backend=%s, seed=%d",
                cfg.tc0, cfg.search.mode, cfg.backend.kind, cfg.master_seed)
    return campaign.run()
