"""
Exception hierarchy shared by all fuzzer modules.

Engine misbehaviour (conversion failures, inference faults, wrong numbers) is
data and never surfaces as one of these; only problems with the fuzzer's own
machinery do.
"""


class GFuzzError(Exception):
    """Base class for fuzzer errors."""
    pass


class InfrastructureError(GFuzzError):
    """Disk, spawn or protocol failure. Aborts a campaign with exit code 2."""
    pass
