"""Split learning with a frozen client-side privacy block and an offline server."""
from .errors import (
    ConfigurationError,
    DataError,
    HandshakeError,
    InternalError,
    ProtocolError,
    SplitStreamError,
    TransportClosed,
)
from .harness import ExperimentConfig, Mode, TransportKind, compare_reports, run_baseline_fedavg, run_experiment
from .metrics import MetricsReport, Task
from .models import ModelKind, ModelSpec, build_model, split_model

__all__ = [
    "ConfigurationError",
    "DataError",
    "ExperimentConfig",
    "HandshakeError",
    "InternalError",
    "MetricsReport",
    "ModelKind",
    "ModelSpec",
    "Mode",
    "ProtocolError",
    "SplitStreamError",
    "Task",
    "TransportClosed",
    "TransportKind",
    "build_model",
    "compare_reports",
    "run_baseline_fedavg",
    "run_experiment",
    "split_model",
]
