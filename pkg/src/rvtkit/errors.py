"""Shared exception bases.

Two families so the CLI can map failures to exit codes: bad inputs/schemas
(exit 1) versus faults inside a running pipeline stage (exit 2).
"""


class RVTError(Exception):
    pass


class ValidationFailure(RVTError):
    """Bad input, config, or schema: the request itself is invalid."""


class PipelineFault(RVTError):
    """A pipeline stage failed while doing otherwise-valid work."""
