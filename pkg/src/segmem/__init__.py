"""Memory-conditioned toy segmentation: a frozen backbone adapted purely
through learned static memory, few-shot memory, and a gated test-time
working buffer, with a routing controller and a federated simulator that
exchanges memory parameters only."""

from . import autodiff, backbone, controller, fedsim, memory, metrics, synthdata
from .backbone import ModelParams
from .memory import MemoryBank, MemoryEntry, PseudoObservation, WorkingMemoryConfig

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "backbone",
    "controller",
    "fedsim",
    "memory",
    "metrics",
    "synthdata",
    "ModelParams",
    "MemoryBank",
    "MemoryEntry",
    "PseudoObservation",
    "WorkingMemoryConfig",
    "__version__",
]
