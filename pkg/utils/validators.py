"""
Input Validation Utilities
Validation for corpus files, campaign configuration and numeric parameters.
"""

import re
from typing import Any, Dict, Iterable, List, Mapping

from utils.errors import GFuzzError
from utils.logger import setup_logger

logger = setup_logger(__name__)

_IDENTIFIER = re.compile(r'^[A-Za-z_][A-Za-z0-9_+\-]*$')

CORPUS_BLOCK_KEYS = {'name', 'members', 'inner_edges', 'in_degree', 'out_degree', 'params', 'arity'}


class ValidationError(GFuzzError):
    """Raised when a corpus, model or configuration value is malformed."""
    pass


def validate_identifier(name: Any, what: str = 'name') -> str:
    """
    Validate an operator or block identifier.

    Block names of subgraphs join their members with '+', so '+' is allowed.
    """
    if not isinstance(name, str) or not _IDENTIFIER.match(name):
        raise ValidationError(f"Invalid {what}: {name!r}")
    return name


def validate_degree_set(values: Any, what: str) -> frozenset:
    """Validate a degree range given as a non-empty list of non-negative ints."""
    if not isinstance(values, (list, tuple, set, frozenset)) or not values:
        raise ValidationError(f"{what} must be a non-empty list of integers")
    result = set()
    for value in values:
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ValidationError(f"{what} contains an invalid degree: {value!r}")
        result.add(value)
    return frozenset(result)


def validate_probability(value: Any, what: str, allow_zero: bool = False,
                         allow_one: bool = True) -> float:
    """Validate a probability in (0, 1] (or [0, 1) variants)."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{what} must be a number, got: {value!r}")
    value = float(value)
    low_ok = value >= 0 if allow_zero else value > 0
    high_ok = value <= 1 if allow_one else value < 1
    if not (low_ok and high_ok):
        low = '[0' if allow_zero else '(0'
        high = '1]' if allow_one else '1)'
        raise ValidationError(f"{what} must lie in {low}, {high}, got: {value}")
    return value


def validate_positive_int(value: Any, what: str, minimum: int = 1) -> int:
    """Validate an integer that must be at least ``minimum``."""
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ValidationError(f"{what} must be an integer >= {minimum}, got: {value!r}")
    return value


def validate_index_pairs(pairs: Any, member_count: int, what: str) -> List[tuple]:
    """Validate an inner-edge adjacency list against the member count."""
    if not isinstance(pairs, (list, tuple)):
        raise ValidationError(f"{what} must be a list of [src, dst] pairs")
    result = []
    for pair in pairs:
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ValidationError(f"{what} contains a malformed pair: {pair!r}")
        src, dst = pair
        for index in (src, dst):
            if isinstance(index, bool) or not isinstance(index, int) or not 0 <= index < member_count:
                raise ValidationError(f"{what} references member {index!r} outside 0..{member_count - 1}")
        if src == dst:
            raise ValidationError(f"{what} contains a self-loop on member {src}")
        result.append((src, dst))
    return result


def validate_corpus_entry(entry: Any) -> Dict[str, Any]:
    """
    Validate the raw JSON shape of one corpus block.

    Structural checks that need the whole corpus (acyclicity, duplicate names)
    are done by model_ir.load_corpus.
    """
    if not isinstance(entry, dict):
        raise ValidationError(f"Corpus block must be an object, got: {type(entry).__name__}")
    unknown = set(entry) - CORPUS_BLOCK_KEYS
    if unknown:
        raise ValidationError(f"Corpus block {entry.get('name')!r} has unknown keys: {sorted(unknown)}")
    for key in ('name', 'members', 'in_degree', 'out_degree'):
        if key not in entry:
            raise ValidationError(f"Corpus block is missing required key '{key}'")

    name = validate_identifier(entry['name'], 'block name')
    members = entry['members']
    if not isinstance(members, list) or not members:
        raise ValidationError(f"Block {name!r}: members must be a non-empty list")
    for member in members:
        validate_identifier(member, f"member of block {name!r}")

    return {
        'name': name,
        'members': list(members),
        'inner_edges': validate_index_pairs(entry.get('inner_edges', []), len(members),
                                            f"Block {name!r} inner_edges"),
        'in_degree': validate_degree_set(entry['in_degree'], f"Block {name!r} in_degree"),
        'out_degree': validate_degree_set(entry['out_degree'], f"Block {name!r} out_degree"),
        'params': entry.get('params'),
        'arity': entry.get('arity'),
    }


def validate_config_keys(config: Mapping[str, Any], allowed: Mapping[str, Any], prefix: str = '') -> bool:
    """
    Reject keys that do not exist in the defaults.

    A typo in a campaign file ("tc_0") would otherwise silently fall back to
    the default value.
    """
    def recursive_check(d: Mapping, reference: Mapping, path: str):
        for key, value in d.items():
            full_key = f"{path}.{key}" if path else key
            if key not in reference:
                raise ValidationError(f"Unknown configuration key '{full_key}'")
            if isinstance(value, dict) and isinstance(reference[key], dict):
                recursive_check(value, reference[key], full_key)

    recursive_check(config, allowed, prefix)
    return True


def validate_choices(values: Iterable[Any], allowed: Iterable[Any], what: str) -> tuple:
    """Validate that every value is one of ``allowed``; returns a tuple."""
    allowed = tuple(allowed)
    values = tuple(values)
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ValidationError(f"{what} has unsupported values {bad}; expected any of {list(allowed)}")
    return values
