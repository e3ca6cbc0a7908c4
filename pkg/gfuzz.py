"""
Graph fuzzer - Main Entry Point

Usage:
    python gfuzz.py run --out runs/a                       # campaign with defaults
    python gfuzz.py run --out runs/a --bug-mask standard   # seeded-bug campaign
    python gfuzz.py run --out runs/a --resume              # continue from checkpoint
    python gfuzz.py replay --out runs/a --model 000007     # re-execute one model
    python gfuzz.py report --out runs/a                    # rebuild report files
    python gfuzz.py engine --dir REQ --backend optimized   # serve one engine request

Exit codes: 0 when the command completed (whatever exceptions it found),
2 on infrastructure or configuration failure.
"""

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import DEFAULT_CORPUS_PATH, load_campaign_file
from op_coverage import CoverageDomain, CoverageState
from engine_adapter import SERVE_BACKENDS, serve_request
from harness import (
    CAMPAIGN_FILE,
    COVERAGE_FILE,
    MODELS_DIR,
    OUTCOMES_FILE,
    REGISTRY_FILE,
    TRACE_FILE,
    CampaignConfig,
    fuzz_workflow,
)
from model_ir import deserialize_model, load_corpus
from optimized_backend import STANDARD_DEFECTS
from reports import emit_reports, read_jsonl
from triage import ExceptionRegistry, TrialOutcome, run_trial, summarize
from utils.errors import GFuzzError
from utils.logger import app_logger as logger
from utils.logger import attach_campaign_log
from utils.validators import ValidationError

CORPUS_COPY = 'corpus.json'
EXIT_OK = 0
EXIT_INFRASTRUCTURE = 2


def parse_block_range(text: str) -> List[int]:
    """'5' -> [5, 5]; '1..30' -> [1, 30]."""
    try:
        if '..' in text:
            low, high = text.split('..', 1)
            return [int(low), int(high)]
        return [int(text), int(text)]
    except ValueError:
        raise ValidationError(f"--blocks expects N or A..B, got {text!r}")


def parse_bug_mask(text: Optional[str]) -> List[str]:
    if not text:
        return []
    if text == 'standard':
        return list(STANDARD_DEFECTS)
    return [name.strip() for name in text.split(',') if name.strip()]


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    exec_cfg: Dict[str, Any] = {}
    if args.tc0 is not None:
        overrides['tc0'] = args.tc0
    if args.seed is not None:
        overrides['master_seed'] = args.seed
    if args.blocks is not None:
        overrides['block_count'] = parse_block_range(args.blocks)
    if args.search is not None:
        overrides['search'] = {'mode': args.search}
    if args.engine is not None:
        exec_cfg.update({'test_backend': 'external', 'engine_cmd': args.engine})
    if args.bug_mask is not None:
        exec_cfg['bug_mask'] = parse_bug_mask(args.bug_mask)
    if args.workers is not None:
        exec_cfg['workers'] = args.workers
    if args.execute_discarded:
        exec_cfg['execute_discarded'] = True
    if exec_cfg:
        overrides['exec'] = exec_cfg
    return overrides


def _load_outputs(out_dir: Path):
    corpus = load_corpus(str(out_dir / CORPUS_COPY))
    settings = json.loads((out_dir / CAMPAIGN_FILE).read_text(encoding='utf-8'))
    cfg = CampaignConfig.from_dict(settings)
    registry = ExceptionRegistry.from_dict(json.loads((out_dir / REGISTRY_FILE).read_text(encoding='utf-8')))
    state = CoverageState.from_dict(json.loads((out_dir / COVERAGE_FILE).read_text(encoding='utf-8')),
                                    CoverageDomain.from_corpus(corpus), cfg.coverage)
    return corpus, cfg, registry, state


def command_run(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    if args.resume:
        settings = json.loads((out_dir / CAMPAIGN_FILE).read_text(encoding='utf-8'))
        corpus_path = out_dir / CORPUS_COPY
    else:
        settings = load_campaign_file(args.config, _overrides(args))
        corpus_path = Path(args.corpus)
    cfg = CampaignConfig.from_dict(settings)
    corpus = load_corpus(str(corpus_path))
    out_dir.mkdir(parents=True, exist_ok=True)
    if not args.resume:
        shutil.copyfile(corpus_path, out_dir / CORPUS_COPY)

    handler = attach_campaign_log(logging.getLogger(), out_dir)
    try:
        print("=" * 70)
        print("GRAPH FUZZER - CAMPAIGN")
        print("=" * 70)
        print(f"Corpus: {corpus_path} ({len(corpus.blocks)} blocks)")
        print(f"Target: {cfg.tc0} models, search={cfg.search.mode}, backend={cfg.backend.kind}")
        if cfg.backend.bug_mask:
            print(f"Seeded bugs: {', '.join(cfg.backend.bug_mask)}")
        print()

        result = fuzz_workflow(cfg, corpus, out_dir, resume=args.resume)
        emit_reports(result.registry, result.coverage, out_dir, read_jsonl(out_dir / TRACE_FILE))
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()

    dedup, raw = result.registry.dedup_counts(), result.registry.raw_counts()
    print()
    print("=" * 70)
    print(f"[OK] CAMPAIGN COMPLETED: {len(result.retained)} models in {result.rounds} rounds")
    print("=" * 70)
    counts = summarize([TrialOutcome.from_dict(r) for r in read_jsonl(out_dir / OUTCOMES_FILE)])
    print("Retained models: " + ", ".join(f"{status} {n}" for status, n in counts.items()))
    for status in dedup:
        print(f"   - {status}: {dedup[status]}/{raw[status]} (deduplicated/total)")
    print(f"Reports in: {out_dir}")
    return EXIT_OK


def command_replay(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    settings = json.loads((out_dir / CAMPAIGN_FILE).read_text(encoding='utf-8'))
    if args.engine:
        settings.setdefault('exec', {}).update({'test_backend': 'external', 'engine_cmd': args.engine})
    cfg = CampaignConfig.from_dict(settings)
    model = deserialize_model((out_dir / MODELS_DIR / f"{args.model}.json").read_bytes())
    outcome = run_trial(model, cfg.backend)
    if outcome is None:
        print(f"[WARN] Reference interpreter cannot run model {args.model}")
        return EXIT_OK
    print(f"[OK] Model {args.model}: {outcome.status}")
    print(json.dumps(outcome.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def command_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    _, _, registry, state = _load_outputs(out_dir)
    paths = emit_reports(registry, state, out_dir, read_jsonl(out_dir / TRACE_FILE))
    for name, path in paths.items():
        print(f"[OK] {name}: {path}")
    return EXIT_OK


def command_engine(args: argparse.Namespace) -> int:
    return serve_request(Path(args.dir), args.backend, parse_bug_mask(args.bug_mask))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Graph fuzzer - coverage-guided testing of DL inference engines",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python gfuzz.py run --out runs/a --tc0 50 --seed 7
  python gfuzz.py run --out runs/b --search random --bug-mask concat-drop,cast-sat
  python gfuzz.py run --out runs/c --engine "./my_engine --threads 1"
  python gfuzz.py report --out runs/a
        """,
    )
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help="Run (or resume) a campaign")
    run.add_argument('--corpus', default=DEFAULT_CORPUS_PATH, help="Block corpus JSON")
    run.add_argument('--config', default=None, help="Campaign JSON merged over the defaults")
    run.add_argument('--out', required=True, help="Campaign output directory")
    run.add_argument('--engine', default=None, help="External engine command (enables the external backend)")
    run.add_argument('--search', choices=['mcts', 'random'], default=None)
    run.add_argument('--seed', type=int, default=None, help="Master seed (unsigned 64-bit)")
    run.add_argument('--tc0', type=int, default=None, help="Number of models to retain")
    run.add_argument('--blocks', default=None, help="Blocks per model: N or A..B")
    run.add_argument('--bug-mask', default=None, help="Comma-separated seeded bugs, or 'standard'")
    run.add_argument('--workers', type=int, default=None)
    run.add_argument('--execute-discarded', action='store_true',
                     help="Also execute models the coverage gate rejects")
    run.add_argument('--resume', action='store_true', help="Continue from the checkpoint in --out")
    run.set_defaults(handler=command_run)

    replay = sub.add_parser('replay', help="Re-execute one retained model")
    replay.add_argument('--out', required=True)
    replay.add_argument('--model', required=True, help="Model id, e.g. 000007")
    replay.add_argument('--engine', default=None)
    replay.set_defaults(handler=command_replay)

    report = sub.add_parser('report', help="Rebuild report files from campaign outputs")
    report.add_argument('--out', required=True)
    report.set_defaults(handler=command_report)

    engine = sub.add_parser('engine', help="Serve one wire-protocol request with a built-in interpreter")
    engine.add_argument('--dir', required=True)
    engine.add_argument('--backend', choices=SERVE_BACKENDS, default='reference')
    engine.add_argument('--bug-mask', default=None)
    engine.set_defaults(handler=command_engine)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (GFuzzError, OSError, json.JSONDecodeError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"[ERROR] {e}")
        return EXIT_INFRASTRUCTURE


if __name__ == "__main__":
    sys.exit(main())
