"""Multi-agent actor-critic resource orchestration on a trace-driven cluster simulator."""

from orchestra.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
