"""Symbolic multi-robot cooperation benchmark harness with agent-as-tool pools."""

__version__ = "0.1.0"
