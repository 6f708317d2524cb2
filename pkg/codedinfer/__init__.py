"""
codedinfer - Coded distributed computing for single-batch DNN inference.

Splits fc/conv layers across devices, adds coded weight blocks so a missing
partial is recovered by subtraction, and simulates runs under latency and
failure models.
"""

__version__ = "0.1.0"
__license__ = "MIT"

from codedinfer.core.allocation import fallback_select, load_allocation
from codedinfer.core.analytics import coverage, histogram, slowdown
from codedinfer.core.coder import decode_single, decodability, encode, peel_decode
from codedinfer.core.model import load_model, reference_forward
from codedinfer.core.runtime import CoordinatorConfig, run_inference
from codedinfer.core.splitter import merge, plan_split
from codedinfer.core.types import Policy, SplitMethod
from codedinfer.core.weights import load_weights, save_weights

__all__ = [
    "CoordinatorConfig",
    "Policy",
    "SplitMethod",
    "coverage",
    "decodability",
    "decode_single",
    "encode",
    "fallback_select",
    "histogram",
    "load_allocation",
    "load_model",
    "load_weights",
    "merge",
    "peel_decode",
    "plan_split",
    "reference_forward",
    "run_inference",
    "save_weights",
    "slowdown",
]
