"""Batch task execution service: model, store, staging, worker, HTTP API,
client, and a YAML-driven conformance runner."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    Executor,
    IOKind,
    IOParameter,
    Resources,
    Task,
    TaskSpec,
    TaskState,
    TaskView,
    apply_view,
    is_terminal,
    is_valid_transition,
    validate_task_spec,
)
