"""
Core library for codedinfer: matrices, models, splitting, coding and the simulator.
"""

from codedinfer.core.types import (
    ActivationKind,
    DType,
    LayerKind,
    Policy,
    RunReport,
    SplitMethod,
)

__all__ = [
    "ActivationKind",
    "DType",
    "LayerKind",
    "Policy",
    "RunReport",
    "SplitMethod",
]
