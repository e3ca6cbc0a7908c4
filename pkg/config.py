"""
Configuration settings for graph-based fuzz campaigns.

Defaults: r from {0, 0.1, 0.2}, k from {2, 4, 6}, p_WS = 0.5, p_RN = 0.9,
n_maxspc = 200, unit weights, tc1 = 10, tc2 = 1, e = 1/sqrt(2) and three
children per terminal node.

Every value can be overridden by environment variables (a local .env file is
loaded automatically) and then by a JSON campaign file passed to
``gfuzz.py run --config``.
"""

import copy
import json
import math
import os
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def get_env(key: str, default: str = None, required: bool = False) -> str:
    """
    Get environment variable with optional default and required flag.

    Args:
        key: Environment variable name
        default: Default value if not set
        required: If True, raises error when not set

    Returns:
        Environment variable value

    Raises:
        ValueError: If required variable is not set
    """
    value = os.getenv(key, default)
    if required and not value:
        raise ValueError(f"Required environment variable '{key}' is not set")
    return value


def get_bool_env(key: str, default: bool = False) -> bool:
    """Read a boolean environment variable."""
    value = os.getenv(key)
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}


def get_int_env(key: str, default: int) -> int:
    """Read an integer environment variable with a clear error."""
    value = os.getenv(key, str(default))
    try:
        return int(value)
    except ValueError as exc:
        raise ValueError(f"Environment variable '{key}' must be an integer, got: {value}") from exc


def get_float_env(key: str, default: float) -> float:
    """Read a float environment variable with a clear error."""
    value = os.getenv(key, str(default))
    try:
        return float(value)
    except ValueError as exc:
        raise ValueError(f"Environment variable '{key}' must be a number, got: {value}") from exc


PROJECT_ROOT = Path(__file__).resolve().parent

# =============================================================================
# CORPUS
# =============================================================================

DEFAULT_CORPUS_PATH = get_env('GFUZZ_CORPUS', str(PROJECT_ROOT / 'data' / 'default_corpus.json'))

# =============================================================================
# GRAPH GENERATION
# =============================================================================

GENERATION_CONFIG = {
    # WS, RN or both (each model picks one of the two with equal probability)
    "model": get_env('GFUZZ_GRAPH_MODEL', 'both'),
    "k_choices": [2, 4, 6],
    "p_ws": get_float_env('GFUZZ_P_WS', 0.5),
    "p_rn": get_float_env('GFUZZ_P_RN', 0.9),
    # Five input shapes chosen uniformly when the shape is not mutated
    "input_shapes": [
        [1, 8, 8, 3],
        [1, 16, 16, 3],
        [1, 8, 8, 8],
        [1, 32, 32, 3],
        [1, 16, 16, 4],
    ],
    # Caps of the SAME-preserving solver (Max_sH, Max_dH)
    "max_stride": get_int_env('GFUZZ_MAX_STRIDE', 2),
    "max_dilation": get_int_env('GFUZZ_MAX_DILATION', 3),
    "max_retries": get_int_env('GFUZZ_GENERATION_RETRIES', 10),
    # Models with a larger intermediate tensor are redrawn
    "max_tensor_elements": get_int_env('GFUZZ_MAX_TENSOR_ELEMENTS', 262144),
}

# =============================================================================
# MUTATION
# =============================================================================

MUTATION_CONFIG = {
    "apply": get_bool_env('GFUZZ_MUTATIONS', True),
    "enabled": ["GEA", "GER", "BNA", "BNR", "TSM", "PM"],
    "r_choices": [0.0, 0.1, 0.2],
    # Probability that PM re-samples a given node's parameters
    "pm_node_rate": get_float_env('GFUZZ_PM_NODE_RATE', 0.5),
    "shape_domain": {
        "N": [1],
        "H": [4, 8, 16, 32, 64],
        "W": [4, 8, 16, 32, 64],
        "C": [1, 3, 4, 8, 16],
    },
}

# =============================================================================
# COVERAGE
# =============================================================================

COVERAGE_CONFIG = {
    "n_maxspc": get_int_env('GFUZZ_N_MAXSPC', 200),
    "weights_op": [1.0, 1.0, 1.0, 1.0, 1.0],
    "weights_set": [1.0, 1.0, 1.0, 1.0, 1.0],
    # set | op | either
    "gate": get_env('GFUZZ_COVERAGE_GATE', 'either'),
}

# =============================================================================
# SEARCH (block chooser)
# =============================================================================

SEARCH_CONFIG = {
    "mode": get_env('GFUZZ_SEARCH_MODE', 'mcts'),
    "e": get_float_env('GFUZZ_UCT_E', 1.0 / math.sqrt(2.0)),
    "tc1": get_int_env('GFUZZ_TC1', 10),
    "tc2": get_int_env('GFUZZ_TC2', 1),
    "max_children": get_int_env('GFUZZ_MAX_CHILDREN', 3),
}

# =============================================================================
# EXECUTION
# =============================================================================

EXEC_CONFIG = {
    # optimized (built-in second interpreter) or external (subprocess engine)
    "test_backend": get_env('GFUZZ_TEST_BACKEND', 'optimized'),
    "engine_cmd": get_env('GFUZZ_ENGINE_CMD', None),
    "bug_mask": [],
    "timeout": get_float_env('GFUZZ_ENGINE_TIMEOUT', 30.0),
    "workers": get_int_env('GFUZZ_WORKERS', 4),
    "execute_discarded": get_bool_env('GFUZZ_EXECUTE_DISCARDED', False),
    # Disable to run the optimized backend without operator fusion
    "fusion": get_bool_env('GFUZZ_FUSION', True),
}

# =============================================================================
# CAMPAIGN
# =============================================================================

CAMPAIGN_CONFIG = {
    "tc0": get_int_env('GFUZZ_TC0', 400),
    "block_count": [1, 30],
    "models_per_round": 1,
    # 0 means 50 * tc0; a saturated corpus cannot always reach tc0
    "max_rounds": get_int_env('GFUZZ_MAX_ROUNDS', 0),
    "master_seed": get_int_env('GFUZZ_SEED', 0),
    # Rounds between full checkpoints (a final one is always written)
    "checkpoint_every": get_int_env('GFUZZ_CHECKPOINT_EVERY', 10),
    "generation": GENERATION_CONFIG,
    "mutation": MUTATION_CONFIG,
    "coverage": COVERAGE_CONFIG,
    "search": SEARCH_CONFIG,
    "exec": EXEC_CONFIG,
}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def default_campaign_dict() -> Dict[str, Any]:
    """Return a private deep copy of the campaign defaults."""
    return copy.deepcopy(CAMPAIGN_CONFIG)


def load_campaign_file(path: str = None, overrides: Dict[str, Any] = None) -> Dict[str, Any]:
    """
    Merge a JSON campaign file (if any) and explicit overrides over defaults.

    Unknown keys are rejected so that typos do not silently fall back to
    defaults.
    """
    from utils.validators import ValidationError, validate_config_keys

    config = default_campaign_dict()
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                file_values = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"Campaign file {path} is not valid JSON: {e}") from e
        if not isinstance(file_values, dict):
            raise ValidationError(f"Campaign file {path} must contain a JSON object")
        validate_config_keys(file_values, CAMPAIGN_CONFIG)
        config = _deep_merge(config, file_values)
    if overrides:
        validate_config_keys(overrides, CAMPAIGN_CONFIG)
        config = _deep_merge(config, overrides)
    return config


# Report page (coverage table, exception table, OLC trend chart)
REPORT_TEMPLATE = """<!doctype html>
<html>
    <head>
        <meta charset="utf-8">
        <style>
            body {{ font-family: 'Segoe UI', Arial, sans-serif; line-height: 1.5; color: #2c3e50; background: #f8fafc; padding: 20px; }}
            .container {{ max-width: 1000px; margin: auto; background: #fff; border-radius: 8px; overflow: hidden; box-shadow: 0 4px 6px rgba(0, 0, 0, 0.08); }}
            .header {{ background: #2E86C1; color: white; padding: 20px; }}
            .header h2 {{ margin: 0; font-size: 22px; font-weight: 600; }}
            .content {{ padding: 25px; }}
            table {{ width: 100%; border-collapse: collapse; margin: 15px 0 25px 0; }}
            th {{ background: #f8fafc; padding: 8px 10px; text-align: left; border-bottom: 2px solid #e2e8f0; }}
            td {{ padding: 8px 10px; border-bottom: 1px solid #e2e8f0; }}
            .footer {{ padding: 15px 25px; font-size: 13px; color: #64748b; background: #f8fafc; border-top: 1px solid #e2e8f0; }}
        </style>
    </head>
    <body>
        <div class="container">
            <div class="header">
                <h2>{title}</h2>
            </div>
            <div class="content">
                {content}
            </div>
            <div class="footer">
                <p>{footer}</p>
            </div>
        </div>
    </body>
</html>
"""
