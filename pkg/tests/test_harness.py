"""
Tests for the campaign driver
"""

import json
import random
import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from config import default_campaign_dict
from harness import (
    CHECKPOINT_FILE,
    GENERATION_ERRORS,
    MODELS_DIR,
    OUTCOMES_FILE,
    TRACE_FILE,
    Campaign,
    CampaignConfig,
    GenerationSettings,
    SimulationResult,
    derive_seed,
    fuzz_workflow,
    input_mutation,
)
from model_ir import PLACEHOLDER, deserialize_model
from mutation import MutationAction, MutationConfig, select_mutations
from op_coverage import olc
from optimized_backend import STANDARD_DEFECTS, ConversionError, run_optimized
from reference_backend import InferenceFault, run_reference
from shapecalc import infer_shapes
from tensors import synthesize_inputs
from triage import DCF, DCP, BackendSpec, compare, run_trial
from utils.errors import InfrastructureError
from utils.validators import ValidationError


def small_config(**overrides):
    data = default_campaign_dict()
    data.update({'tc0': 3, 'block_count': [1, 4], 'max_rounds': 12, 'master_seed': 21,
                 'checkpoint_every': 2})
    data['exec'].update({'workers': 1, 'bug_mask': ['concat-drop', 'cast-sat']})
    data.update(overrides)
    return CampaignConfig.from_dict(data)


def generated(corpus, action, seeds=range(10), settings=GenerationSettings()):
    models = []
    for seed in seeds:
        try:
            models.append(input_mutation(corpus.blocks, action, corpus, settings, MutationConfig(),
                                         4, random.Random(seed), weights_seed=seed))
        except GENERATION_ERRORS:
            continue
    return models


class TestSeeds:
    """Test suite for derived PRNG streams."""

    def test_derive_seed(self):
        """Streams are stable and label-dependent."""
        assert derive_seed(7, 'round', 3) == derive_seed(7, 'round', 3)
        assert derive_seed(7, 'round', 3) != derive_seed(7, 'round', 4)
        assert derive_seed(7, 'round', 3) != derive_seed(8, 'round', 3)
        assert 0 <= derive_seed(7, 'model', 0, 0) < 2 ** 64


class TestConfig:
    """Test suite for CampaignConfig and GenerationSettings."""

    def test_defaults(self):
        """The shipped defaults build a valid config."""
        cfg = CampaignConfig.from_dict(default_campaign_dict())
        assert cfg.tc0 == 400
        assert cfg.block_count == (1, 30)
        assert cfg.round_limit == 50 * 400
        assert len(cfg.generation.input_shapes) == 5
        assert cfg.search.mode == 'mcts'

    def test_fixed_block_count(self):
        """A single number fixes the block count."""
        data = default_campaign_dict()
        data['block_count'] = 5
        assert CampaignConfig.from_dict(data).block_count == (5, 5)

    def test_bad_block_range(self):
        """The upper bound cannot be below the lower."""
        data = default_campaign_dict()
        data['block_count'] = [6, 2]
        with pytest.raises(ValidationError):
            CampaignConfig.from_dict(data)

    def test_seed_range(self):
        """The master seed is an unsigned 64-bit integer."""
        with pytest.raises(ValidationError, match="master_seed"):
            CampaignConfig(master_seed=-1)
        with pytest.raises(ValidationError, match="master_seed"):
            CampaignConfig(master_seed=2 ** 64)

    def test_input_shapes_rank_four(self):
        """Input shapes are rank-4 positive dims."""
        with pytest.raises(ValidationError, match="rank-4"):
            GenerationSettings(input_shapes=((1, 8, 8),))

    def test_unknown_graph_model(self):
        """The graph model is WS, RN or both."""
        with pytest.raises(ValidationError):
            GenerationSettings(model='ER')

    def test_source_kept(self):
        """The merged dictionary is kept for campaign.json."""
        cfg = small_config()
        assert cfg.source['tc0'] == 3
        assert cfg.backend.bug_mask == ('concat-drop', 'cast-sat')


class TestInputMutation:
    """Test suite for single-model generation."""

    def test_models_resolve(self, default_corpus):
        """Generated models pass shape inference and keep their input shape."""
        models = generated(default_corpus, MutationAction())
        assert models
        for m in models:
            infer_shapes(m, default_corpus)
            assert m.graph.is_acyclic()
            assert set(m.input_shapes) <= {(1, 8, 8, 3)}
            assert len(m.input_shapes) == sum(1 for n in m.graph.nodes if n.op == PLACEHOLDER)

    def test_vocabulary_respected(self, small_corpus):
        """Operators come from the vocabulary; the corpus only fills degrees it cannot take."""
        relu = small_corpus.block('Relu')
        for seed in range(5):
            m = input_mutation([relu], MutationAction(('Relu',)), small_corpus, GenerationSettings(model='RN'),
                               MutationConfig(), 3, random.Random(seed))
            ops = {n.op for n in m.graph.nodes} - {PLACEHOLDER}
            assert ops <= {'Relu', 'Add', 'Conv2d'}
            assert 'Relu' in ops

    def test_deterministic(self, default_corpus):
        """Same PRNG state, same model."""
        action = select_mutations(MutationConfig(), random.Random(4))
        first = generated(default_corpus, action, seeds=[3, 5])
        second = generated(default_corpus, action, seeds=[3, 5])
        assert first == second

    def test_mutated_models_resolve(self, default_corpus):
        """Every mutation together still yields executable models."""
        action = select_mutations(MutationConfig(enabled=('GEA', 'GER', 'BNA', 'BNR', 'TSM', 'PM')),
                                  random.Random(0))
        for m in generated(default_corpus, action, settings=GenerationSettings(model='WS')):
            infer_shapes(m, default_corpus)
            assert m.graph.slots_complete()

    def test_clean_backend_never_diverges(self, default_corpus):
        """With no seeded defects every generated model passes the differential check."""
        action = select_mutations(MutationConfig(enabled=('GEA', 'GER', 'BNA', 'BNR', 'TSM', 'PM')),
                                  random.Random(1))
        outcomes = [run_trial(m, BackendSpec()) for m in generated(default_corpus, action, seeds=range(30))]
        assert any(o is not None for o in outcomes)
        assert all(o.status == DCP for o in outcomes if o is not None)


class TestCampaign:
    """Test suite for campaign rounds."""

    def test_reward_is_binary(self):
        """Any new exception earns reward 1."""
        assert SimulationResult().reward == 0
        assert SimulationResult(new_exceptions=3).reward == 1

    def test_rounds_in_memory(self, small_corpus):
        """A short campaign retains models with sequential ids and traces every round."""
        cfg = small_config()
        result = Campaign(cfg, small_corpus).run()
        assert 0 < len(result.retained) <= cfg.tc0
        assert result.retained == [f"{i:06d}" for i in range(len(result.retained))]
        assert result.rounds <= cfg.round_limit
        assert result.coverage.models == len(result.retained)

    def test_trace_records(self, small_corpus):
        """Every step appends one trace record."""
        campaign = Campaign(small_config(), small_corpus)
        campaign.step()
        campaign.step()
        assert [r['round'] for r in campaign.trace] == [0, 1]
        assert all(r['reward'] in (0, 1) for r in campaign.trace)
        assert campaign.tree is not None

    def test_random_search(self, small_corpus):
        """The random chooser runs without a tree."""
        data = default_campaign_dict()
        data['search']['mode'] = 'random'
        cfg = small_config(search=data['search'])
        campaign = Campaign(cfg, small_corpus)
        campaign.step()
        assert campaign.tree is None
        assert campaign.trace[0]['expanded'] is None

    def test_reproducible(self, small_corpus):
        """Same config and seed, same campaign."""
        a = Campaign(small_config(), small_corpus).run()
        b = Campaign(small_config(), small_corpus).run()
        assert a.retained == b.retained
        assert a.registry.to_dict() == b.registry.to_dict()
        assert a.coverage.to_dict() == b.coverage.to_dict()

    def test_resume_without_checkpoint(self, tmp_path, small_corpus):
        """Resuming an empty directory is an infrastructure error."""
        with pytest.raises(InfrastructureError, match="No checkpoint"):
            fuzz_workflow(small_config(), small_corpus, tmp_path, resume=True)


@pytest.mark.slow
class TestCampaignOutputs:
    """End-to-end campaigns written to disk."""

    def test_output_files(self, tmp_path, small_corpus):
        """Retained models, trace, outcomes and checkpoint are written."""
        result = fuzz_workflow(small_config(), small_corpus, tmp_path)
        models = sorted(p.stem for p in (tmp_path / MODELS_DIR).glob('*.json'))
        assert models == result.retained
        for model_id in models:
            deserialize_model((tmp_path / MODELS_DIR / f"{model_id}.json").read_bytes())
        trace = (tmp_path / TRACE_FILE).read_text(encoding='utf-8').splitlines()
        assert len(trace) == result.rounds
        outcomes = [json.loads(line) for line in (tmp_path / OUTCOMES_FILE).read_text(encoding='utf-8').splitlines()]
        assert [o['model'] for o in outcomes] == result.retained
        checkpoint = json.loads((tmp_path / CHECKPOINT_FILE).read_text(encoding='utf-8'))
        assert checkpoint == {'round': result.rounds, 'retained': len(result.retained)}

    def test_resume_matches_uninterrupted(self, tmp_path, small_corpus):
        """A campaign stopped and resumed ends where an uninterrupted one does."""
        full = fuzz_workflow(small_config(tc0=6, max_rounds=10), small_corpus, tmp_path / 'full')
        fuzz_workflow(small_config(tc0=6, max_rounds=4), small_corpus, tmp_path / 'split')
        resumed = fuzz_workflow(small_config(tc0=6, max_rounds=10), small_corpus, tmp_path / 'split', resume=True)
        assert resumed.rounds == full.rounds
        assert resumed.retained == full.retained
        assert resumed.registry.to_dict() == full.registry.to_dict()
        full_trace = (tmp_path / 'full' / TRACE_FILE).read_text(encoding='utf-8')
        split_trace = (tmp_path / 'split' / TRACE_FILE).read_text(encoding='utf-8')
        assert split_trace == full_trace


@pytest.mark.slow
class TestCleanNullAtScale:
    """Differential null over hundreds of generated models."""

    def test_five_hundred_models(self, default_corpus):
        """Five hundred models with every mutation enabled all pass against an unseeded backend."""
        cfg = MutationConfig(enabled=('GEA', 'GER', 'BNA', 'BNR', 'TSM', 'PM'))
        executed = 0
        for seed in range(500):
            rng = random.Random(seed)
            action = select_mutations(cfg, rng)
            try:
                m = input_mutation(default_corpus.blocks, action, default_corpus, GenerationSettings(), cfg,
                                   rng.randint(1, 15), rng, weights_seed=seed)
            except GENERATION_ERRORS:
                continue
            outcome = run_trial(m, BackendSpec())
            if outcome is None:
                continue
            executed += 1
            assert outcome.status == DCP
            assert outcome.detail['re'] == 1.0
        assert executed > 0


def seeded_config(seed, mode='mcts', mutations=True, bug_mask=STANDARD_DEFECTS, tc0=400):
    data = default_campaign_dict()
    data.update({'tc0': tc0, 'master_seed': seed, 'block_count': [1, 15]})
    data['exec'].update({'workers': 1, 'bug_mask': list(bug_mask)})
    data['search']['mode'] = mode
    data['mutation']['apply'] = mutations
    return CampaignConfig.from_dict(data)


def run_collecting(cfg, corpus):
    """Run a campaign in memory and keep every retained model's outcome."""
    campaign = Campaign(cfg, corpus)
    outcomes = []
    while len(campaign.retained) < cfg.tc0 and campaign.round < cfg.round_limit:
        outcomes.extend(campaign.step().outcomes)
    return campaign, outcomes


def defects_alone(m):
    """Standard defects that make ``m`` fail when enabled on their own."""
    inputs = synthesize_inputs(m)
    ref = run_reference(m, inputs)
    found = []
    for bug in STANDARD_DEFECTS:
        try:
            test = run_optimized(m, inputs, bug_mask=[bug])
        except (ConversionError, InferenceFault):
            found.append(bug)
            continue
        if not compare(ref.outputs, test.outputs).passed:
            found.append(bug)
    return found


@pytest.mark.slow
class TestSeededCampaigns:
    """Campaign-scale checks against the standard seeded defects."""

    def test_defects_detected_and_collapsed(self, default_corpus):
        """Most standard defects surface, and each one's divergences share a single entry."""
        cfg = seeded_config(0)
        campaign, outcomes = run_collecting(cfg, default_corpus)
        assert len(campaign.retained) == cfg.tc0

        keys = {}
        for model_id, outcome in outcomes:
            if not outcome.is_exception:
                continue
            defects = defects_alone(campaign.models[model_id])
            if len(defects) == 1:
                keys.setdefault(defects[0], []).append(outcome)
        assert len(keys) >= 8

        for bug, found in keys.items():
            divergent = [o.dedup_key for o in found if o.status == DCF]
            if len(divergent) < 20:
                continue
            top = max(divergent.count(k) for k in set(divergent))
            assert top / len(divergent) >= 0.95, bug

    def test_mcts_not_behind_random(self, default_corpus):
        """Over ten seed pairs MCTS finds at least as many exceptions and as much coverage."""
        found = {'mcts': [], 'random': []}
        coverage = {'mcts': [], 'random': []}
        for seed in range(10):
            for mode in found:
                result = Campaign(seeded_config(seed, mode=mode), default_corpus).run()
                found[mode].append(len(result.registry))
                coverage[mode].append(olc(result.coverage))
        assert sum(found['mcts']) >= sum(found['random'])
        assert sum(coverage['mcts']) >= sum(coverage['random'])

    def test_mutations_raise_coverage(self, default_corpus):
        """Over ten seeds, campaigns with mutations end with more coverage than without."""
        on, off = [], []
        for seed in range(10):
            for mutations, olcs in ((True, on), (False, off)):
                cfg = seeded_config(seed, mutations=mutations, bug_mask=())
                olcs.append(olc(Campaign(cfg, default_corpus).run().coverage))
        assert sum(on) > sum(off)
