"""
Utility modules for the graph fuzzer
"""

from utils.errors import GFuzzError, InfrastructureError
from utils.logger import setup_logger, attach_campaign_log, app_logger
from utils.retry import retry_with_backoff, RetryContext
from utils.validators import (
    ValidationError,
    validate_identifier,
    validate_degree_set,
    validate_probability,
    validate_positive_int,
    validate_index_pairs,
    validate_corpus_entry,
    validate_config_keys,
    validate_choices,
)

__all__ = [
    'GFuzzError',
    'InfrastructureError',
    'setup_logger',
    'attach_campaign_log',
    'app_logger',
    'retry_with_backoff',
    'RetryContext',
    'ValidationError',
    'validate_identifier',
    'validate_degree_set',
    'validate_probability',
    'validate_positive_int',
    'validate_index_pairs',
    'validate_corpus_entry',
    'validate_config_keys',
    'validate_choices',
]
