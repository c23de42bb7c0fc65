"""Transient-stability simulation on a mass-matrix DAE formulation."""

__version__ = "0.1.0"
