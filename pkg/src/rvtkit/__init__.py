"""Toolkit for building digital-twin video representations, generating
reasoning benchmarks over them, scoring predictions, and running a
plan-and-execute agent against the same twins."""

__version__ = "0.1.0"
