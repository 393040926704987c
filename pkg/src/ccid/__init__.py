"""ccid: synthetic TCP congestion-control traces and a GRU protocol classifier."""

__version__ = "0.1.0"

from .protocols import LinkConfig, ProtocolLabel
from .simulate import FeatureRecord, FlowTrace, simulate_flow

__all__ = [
    "__version__",
    "LinkConfig",
    "ProtocolLabel",
    "FeatureRecord",
    "FlowTrace",
    "simulate_flow",
]
