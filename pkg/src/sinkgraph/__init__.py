"""Soft cardinality-constrained subgraph attention via entropic optimal
transport, with a small GIN, a synthetic OOD benchmark, and diagnostics."""

from sinkgraph.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
