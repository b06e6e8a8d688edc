"""Exception hierarchy.

Every error carries the process exit code the CLI should use for it, so
scripts can branch on the failure class:

    1  usage / configuration
    2  data integrity
    3  backend failure
"""

from __future__ import annotations


class PipeStagesError(Exception):
    exit_code = 2


class ConfigError(PipeStagesError):
    exit_code = 1


class TemplateError(ConfigError):
    pass


class IntegrityError(PipeStagesError):
    exit_code = 2


class MappingIntegrityError(IntegrityError):
    pass


class LabelResolutionError(IntegrityError):
    pass


class MutationError(IntegrityError):
    pass


class PolicyError(MutationError):
    pass


class IngestError(IntegrityError):
    pass


class LegendError(IngestError):
    pass


class AlignmentError(IntegrityError):
    pass


class AggregationError(IntegrityError):
    pass


class MetricError(IntegrityError):
    pass


class StatTestError(IntegrityError):
    pass


class InsightError(IntegrityError):
    pass


class PerplexityError(ValueError):
    """Perplexity is undefined for an empty token sequence."""


class BackendError(PipeStagesError):
    exit_code = 3


class TransportError(BackendError):
    """Retryable network or HTTP failure."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class FixtureError(BackendError):
    """Replay cassette miss. Fatal: the prompt or config drifted."""

    def __init__(self, request_hash: str):
        super().__init__(f"no recorded response for request {request_hash}")
        self.request_hash = request_hash
