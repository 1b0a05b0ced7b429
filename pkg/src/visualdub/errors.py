"""Error taxonomy shared across the pipeline.

ValueError is used for plain contract violations on in-memory inputs
(shape mismatches, bad ranges). The classes below exist so the CLI can
map failures onto distinct exit codes.
"""


class PipelineError(Exception):
    """Base class for pipeline failures."""


class UsageError(PipelineError):
    """Bad command line or bad configuration key. CLI exit code 1."""


class DataError(PipelineError):
    """Missing or malformed input data or files. CLI exit code 2."""


class NumericsError(PipelineError):
    """Numerical failure (non-finite loss, degenerate geometry). CLI exit code 3."""
