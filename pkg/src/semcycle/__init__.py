"""Semantics-aware cycle-consistent adversarial domain translation."""

__version__ = "0.1.0"
