"""Domain model for batch execution tasks.

Defines the task types, submission validation, detail-view projection,
the lifecycle state machine, and the JSON wire encoding shared by the
store, worker, HTTP service, and client.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Mapping, Optional


class TaskState(str, Enum):
    """Lifecycle state of a task."""

    UNKNOWN = "UNKNOWN"
    QUEUED = "QUEUED"
    INITIALIZING = "INITIALIZING"
    RUNNING = "RUNNING"
    PAUSED = "PAUSED"
    COMPLETE = "COMPLETE"
    EXECUTOR_ERROR = "EXECUTOR_ERROR"
    SYSTEM_ERROR = "SYSTEM_ERROR"
    CANCELING = "CANCELING"
    CANCELED = "CANCELED"
    PREEMPTED = "PREEMPTED"


class TaskView(str, Enum):
    """Level of detail for task retrieval and listing."""

    MINIMAL = "MINIMAL"
    BASIC = "BASIC"
    FULL = "FULL"


class IOKind(str, Enum):
    """Whether an input/output parameter names a file or a directory."""

    FILE = "FILE"
    DIRECTORY = "DIRECTORY"


#: States from which no further transition occurs.
TERMINAL_STATES: frozenset[TaskState] = frozenset(
    {
        TaskState.COMPLETE,
        TaskState.EXECUTOR_ERROR,
        TaskState.SYSTEM_ERROR,
        TaskState.CANCELED,
        TaskState.PREEMPTED,
    }
)

#: The full transition relation. States absent from the map have no
#: outgoing edges. PAUSED, UNKNOWN and PREEMPTED exist for wire
#: compatibility and filtering; the local backend never enters them.
TRANSITIONS: dict[TaskState, frozenset[TaskState]] = {
    TaskState.QUEUED: frozenset(
        {
            TaskState.INITIALIZING,
            TaskState.CANCELING,
            TaskState.CANCELED,
            TaskState.SYSTEM_ERROR,
        }
    ),
    TaskState.INITIALIZING: frozenset(
        {TaskState.RUNNING, TaskState.CANCELING, TaskState.SYSTEM_ERROR}
    ),
    TaskState.RUNNING: frozenset(
        {
            TaskState.COMPLETE,
            TaskState.EXECUTOR_ERROR,
            TaskState.SYSTEM_ERROR,
            TaskState.CANCELING,
        }
    ),
    TaskState.CANCELING: frozenset({TaskState.CANCELED}),
}


def is_terminal(state: TaskState) -> bool:
    """True iff no transition leaves ``state``."""
    return state in TERMINAL_STATES


def is_valid_transition(from_state: TaskState, to_state: TaskState) -> bool:
    """True iff ``from_state -> to_state`` is an edge of the lifecycle graph."""
    return to_state in TRANSITIONS.get(from_state, frozenset())


@dataclass(frozen=True)
class IOParameter:
    """A mapping between a storage URL and a sandbox path.

    Inputs carry either a ``url`` or inline ``content`` (FILE kind only).
    Outputs always carry a non-empty ``url`` and never ``content``.
    """

    url: str = ""
    path: str = ""
    kind: IOKind = IOKind.FILE
    content: Optional[str] = None
    name: Optional[str] = None
    description: Optional[str] = None


@dataclass(frozen=True)
class Executor:
    """One command-line invocation inside a task."""

    image: str = ""
    command: list[str] = field(default_factory=list)
    workdir: Optional[str] = None
    stdin: Optional[str] = None
    stdout: Optional[str] = None
    stderr: Optional[str] = None
    env: dict[str, str] = field(default_factory=dict)
    ignore_error: bool = False


@dataclass(frozen=True)
class Resources:
    """Hardware minimums requested for a task.

    GPU counts and other backend-specific knobs travel through
    ``backend_parameters`` as opaque strings.
    """

    cpu_cores: Optional[int] = None
    ram_gb: Optional[float] = None
    disk_gb: Optional[float] = None
    preemptible: bool = False
    zones: list[str] = field(default_factory=list)
    backend_parameters: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class TaskSpec:
    """A submitted task description, before the server assigns identity."""

    name: Optional[str] = None
    description: Optional[str] = None
    inputs: list[IOParameter] = field(default_factory=list)
    outputs: list[IOParameter] = field(default_factory=list)
    resources: Optional[Resources] = None
    executors: list[Executor] = field(default_factory=list)
    volumes: list[str] = field(default_factory=list)
    tags: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ExecutorLog:
    """Outcome of one executor invocation.

    ``stdout_tail``/``stderr_tail`` are ``None`` only when withheld by a
    detail view; a captured-but-empty stream is ``""``. ``exit_code`` is
    ``None`` when the process was terminated by cancellation.
    """

    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    stdout_tail: Optional[str] = ""
    stderr_tail: Optional[str] = ""
    exit_code: Optional[int] = None


@dataclass(frozen=True)
class OutputFileLog:
    """One uploaded output file."""

    url: str = ""
    path: str = ""
    size_bytes: int = 0


@dataclass(frozen=True)
class TaskLog:
    """Log of the single execution attempt of a task."""

    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    executor_logs: list[ExecutorLog] = field(default_factory=list)
    output_files: list[OutputFileLog] = field(default_factory=list)
    system_logs: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Task:
    """A stored task: server-assigned identity plus the submitted spec.

    Detail-view projections produce partial records, so every field
    beyond ``id`` and ``state`` is optional here; submission invariants
    are checked on :class:`TaskSpec` by :func:`validate_task_spec`.
    """

    id: str
    state: TaskState = TaskState.UNKNOWN
    creation_time: Optional[datetime] = None
    name: Optional[str] = None
    description: Optional[str] = None
    inputs: list[IOParameter] = field(default_factory=list)
    outputs: list[IOParameter] = field(default_factory=list)
    resources: Optional[Resources] = None
    executors: list[Executor] = field(default_factory=list)
    volumes: list[str] = field(default_factory=list)
    tags: dict[str, str] = field(default_factory=dict)
    logs: list[TaskLog] = field(default_factory=list)


@dataclass(frozen=True)
class ValidationError:
    """One invariant violation in a submitted spec."""

    field: str
    message: str


class WireFormatError(ValueError):
    """Raised when a JSON document does not match the wire schema."""

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


def task_from_spec(task_id: str, spec: TaskSpec, creation_time: datetime) -> Task:
    """Build a freshly queued task from a validated spec."""
    return Task(
        id=task_id,
        state=TaskState.QUEUED,
        creation_time=creation_time,
        name=spec.name,
        description=spec.description,
        inputs=list(spec.inputs),
        outputs=list(spec.outputs),
        resources=spec.resources,
        executors=list(spec.executors),
        volumes=list(spec.volumes),
        tags=dict(spec.tags),
        logs=[],
    )


def spec_of_task(task: Task) -> TaskSpec:
    """Project the submitted spec back out of a stored task."""
    return TaskSpec(
        name=task.name,
        description=task.description,
        inputs=list(task.inputs),
        outputs=list(task.outputs),
        resources=task.resources,
        executors=list(task.executors),
        volumes=list(task.volumes),
        tags=dict(task.tags),
    )


def _is_absolute(path: Optional[str]) -> bool:
    return bool(path) and path.startswith("/")


def validate_task_spec(spec: TaskSpec) -> list[ValidationError]:
    """Return every invariant violation in ``spec``; empty list means valid."""
    errors: list[ValidationError] = []

    if not spec.executors:
        errors.append(ValidationError("executors", "must be non-empty"))
    for i, ex in enumerate(spec.executors):
        if not ex.command:
            errors.append(ValidationError(f"executors[{i}].command", "must be non-empty"))
        for attr in ("workdir", "stdin", "stdout", "stderr"):
            value = getattr(ex, attr)
            if value is not None and not _is_absolute(value):
                errors.append(
                    ValidationError(f"executors[{i}].{attr}", "must be an absolute path")
                )

    for i, vol in enumerate(spec.volumes):
        if not _is_absolute(vol):
            errors.append(ValidationError(f"volumes[{i}]", "must be an absolute path"))

    for i, p in enumerate(spec.inputs):
        if not _is_absolute(p.path):
            errors.append(ValidationError(f"inputs[{i}].path", "must be an absolute path"))
        if not p.url and p.content is None:
            errors.append(ValidationError(f"inputs[{i}]", "url or content required"))
        elif p.url and p.content is not None:
            errors.append(
                ValidationError(f"inputs[{i}]", "url and content are mutually exclusive")
            )
        if p.content is not None and p.kind is IOKind.DIRECTORY:
            errors.append(
                ValidationError(f"inputs[{i}].content", "inline content requires FILE kind")
            )

    for i, p in enumerate(spec.outputs):
        if not _is_absolute(p.path):
            errors.append(ValidationError(f"outputs[{i}].path", "must be an absolute path"))
        if not p.url:
            errors.append(ValidationError(f"outputs[{i}].url", "must be non-empty"))
        if p.content is not None:
            errors.append(ValidationError(f"outputs[{i}].content", "not allowed for outputs"))

    res = spec.resources
    if res is not None:
        for attr in ("cpu_cores", "ram_gb", "disk_gb"):
            value = getattr(res, attr)
            if value is not None and value <= 0:
                errors.append(ValidationError(f"resources.{attr}", "must be positive"))

    return errors


def apply_view(task: Task, view: TaskView) -> Task:
    """Project a task through a detail view.

    MINIMAL keeps only id and state. BASIC withholds executor
    stdout/stderr tails, inline input content, and system logs. FULL is
    the identity.
    """
    if view is TaskView.FULL:
        return task
    if view is TaskView.MINIMAL:
        return Task(id=task.id, state=task.state)

    inputs = [replace(p, content=None) for p in task.inputs]
    logs = [
        replace(
            log,
            executor_logs=[
                replace(el, stdout_tail=None, stderr_tail=None) for el in log.executor_logs
            ],
            system_logs=[],
        )
        for log in task.logs
    ]
    return replace(task, inputs=inputs, logs=logs)


# --- wire encoding ----------------------------------------------------
#
# JSON with snake_case field names; timestamps are RFC 3339 UTC text;
# absent optional fields, empty collections and default-false flags are
# omitted (never null).


def format_time(dt: datetime) -> str:
    """Render a timestamp as RFC 3339 UTC text with a Z suffix."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_time(text: str) -> datetime:
    """Parse RFC 3339 UTC text (Z or numeric offset) into a datetime."""
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text).astimezone(timezone.utc)


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def _clean(record: dict[str, Any]) -> dict[str, Any]:
    """Drop absent values: None and empty collections."""
    return {
        k: v
        for k, v in record.items()
        if v is not None and not (isinstance(v, (list, dict)) and not v)
    }


def _io_to_wire(p: IOParameter) -> dict[str, Any]:
    return _clean(
        {
            "name": p.name,
            "description": p.description,
            "url": p.url or None,
            "path": p.path,
            "kind": p.kind.value,
            "content": p.content,
        }
    )


def _executor_to_wire(e: Executor) -> dict[str, Any]:
    return _clean(
        {
            "image": e.image or None,
            "command": list(e.command),
            "workdir": e.workdir,
            "stdin": e.stdin,
            "stdout": e.stdout,
            "stderr": e.stderr,
            "env": dict(e.env),
            "ignore_error": True if e.ignore_error else None,
        }
    )


def _resources_to_wire(r: Resources) -> dict[str, Any]:
    return _clean(
        {
            "cpu_cores": r.cpu_cores,
            "ram_gb": r.ram_gb,
            "disk_gb": r.disk_gb,
            "preemptible": True if r.preemptible else None,
            "zones": list(r.zones),
            "backend_parameters": dict(r.backend_parameters),
        }
    )


def _executor_log_to_wire(el: ExecutorLog) -> dict[str, Any]:
    record = _clean(
        {
            "start_time": format_time(el.start_time) if el.start_time else None,
            "end_time": format_time(el.end_time) if el.end_time else None,
            "exit_code": el.exit_code,
        }
    )
    # Tails are real values even when empty; None means view-withheld.
    if el.stdout_tail is not None:
        record["stdout_tail"] = el.stdout_tail
    if el.stderr_tail is not None:
        record["stderr_tail"] = el.stderr_tail
    return record


def _task_log_to_wire(log: TaskLog) -> dict[str, Any]:
    return _clean(
        {
            "start_time": format_time(log.start_time) if log.start_time else None,
            "end_time": format_time(log.end_time) if log.end_time else None,
            "executor_logs": [_executor_log_to_wire(el) for el in log.executor_logs],
            "output_files": [
                {"url": f.url, "path": f.path, "size_bytes": f.size_bytes}
                for f in log.output_files
            ],
            "system_logs": list(log.system_logs),
        }
    )


def spec_to_wire(spec: TaskSpec) -> dict[str, Any]:
    """Encode a task spec for submission."""
    return _clean(
        {
            "name": spec.name,
            "description": spec.description,
            "inputs": [_io_to_wire(p) for p in spec.inputs],
            "outputs": [_io_to_wire(p) for p in spec.outputs],
            "resources": _resources_to_wire(spec.resources) if spec.resources else None,
            "executors": [_executor_to_wire(e) for e in spec.executors],
            "volumes": list(spec.volumes),
            "tags": dict(spec.tags),
        }
    )


def task_to_wire(task: Task) -> dict[str, Any]:
    """Encode a (possibly view-projected) task."""
    record: dict[str, Any] = {"id": task.id, "state": task.state.value}
    if task.creation_time is not None:
        record["creation_time"] = format_time(task.creation_time)
    record.update(spec_to_wire(spec_of_task(task)))
    if task.logs:
        record["logs"] = [_task_log_to_wire(log) for log in task.logs]
    return record


def _expect(data: Mapping[str, Any], where: str, allowed: set[str]) -> None:
    for key in data:
        if key not in allowed:
            raise WireFormatError(where, f"unknown field {key!r}")


def _text(data: Mapping[str, Any], where: str, key: str, default: Any = None) -> Any:
    value = data.get(key, default)
    if value is not None and not isinstance(value, str):
        raise WireFormatError(f"{where}.{key}", "must be a string")
    return value


def _text_list(data: Mapping[str, Any], where: str, key: str) -> list[str]:
    value = data.get(key, [])
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise WireFormatError(f"{where}.{key}", "must be a list of strings")
    return list(value)


def _text_map(data: Mapping[str, Any], where: str, key: str) -> dict[str, str]:
    value = data.get(key, {})
    if not isinstance(value, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in value.items()
    ):
        raise WireFormatError(f"{where}.{key}", "must be a map of strings")
    return dict(value)


def _flag(data: Mapping[str, Any], where: str, key: str) -> bool:
    value = data.get(key, False)
    if not isinstance(value, bool):
        raise WireFormatError(f"{where}.{key}", "must be a boolean")
    return value


def _io_from_wire(data: Any, where: str) -> IOParameter:
    if not isinstance(data, dict):
        raise WireFormatError(where, "must be an object")
    _expect(data, where, {"name", "description", "url", "path", "kind", "content"})
    kind_text = _text(data, where, "kind", "FILE")
    try:
        kind = IOKind(kind_text)
    except ValueError:
        raise WireFormatError(f"{where}.kind", f"must be one of FILE, DIRECTORY, got {kind_text!r}")
    return IOParameter(
        url=_text(data, where, "url", "") or "",
        path=_text(data, where, "path", "") or "",
        kind=kind,
        content=_text(data, where, "content"),
        name=_text(data, where, "name"),
        description=_text(data, where, "description"),
    )


def _executor_from_wire(data: Any, where: str) -> Executor:
    if not isinstance(data, dict):
        raise WireFormatError(where, "must be an object")
    _expect(
        data,
        where,
        {"image", "command", "workdir", "stdin", "stdout", "stderr", "env", "ignore_error"},
    )
    return Executor(
        image=_text(data, where, "image", "") or "",
        command=_text_list(data, where, "command"),
        workdir=_text(data, where, "workdir"),
        stdin=_text(data, where, "stdin"),
        stdout=_text(data, where, "stdout"),
        stderr=_text(data, where, "stderr"),
        env=_text_map(data, where, "env"),
        ignore_error=_flag(data, where, "ignore_error"),
    )


def _resources_from_wire(data: Any, where: str) -> Resources:
    if not isinstance(data, dict):
        raise WireFormatError(where, "must be an object")
    _expect(
        data,
        where,
        {"cpu_cores", "ram_gb", "disk_gb", "preemptible", "zones", "backend_parameters"},
    )
    cpu = data.get("cpu_cores")
    if cpu is not None and (not isinstance(cpu, int) or isinstance(cpu, bool)):
        raise WireFormatError(f"{where}.cpu_cores", "must be an integer")
    ram = data.get("ram_gb")
    if ram is not None and (not isinstance(ram, (int, float)) or isinstance(ram, bool)):
        raise WireFormatError(f"{where}.ram_gb", "must be a number")
    disk = data.get("disk_gb")
    if disk is not None and (not isinstance(disk, (int, float)) or isinstance(disk, bool)):
        raise WireFormatError(f"{where}.disk_gb", "must be a number")
    return Resources(
        cpu_cores=cpu,
        ram_gb=float(ram) if ram is not None else None,
        disk_gb=float(disk) if disk is not None else None,
        preemptible=_flag(data, where, "preemptible"),
        zones=_text_list(data, where, "zones"),
        backend_parameters=_text_map(data, where, "backend_parameters"),
    )


def spec_from_wire(data: Any) -> TaskSpec:
    """Parse a submitted task spec, rejecting unknown fields and bad types."""
    if not isinstance(data, dict):
        raise WireFormatError("task", "must be a JSON object")
    _expect(
        data,
        "task",
        {"name", "description", "inputs", "outputs", "resources", "executors", "volumes", "tags"},
    )
    for key in ("inputs", "outputs", "executors"):
        if key in data and not isinstance(data[key], list):
            raise WireFormatError(key, "must be a list")
    return TaskSpec(
        name=_text(data, "task", "name"),
        description=_text(data, "task", "description"),
        inputs=[_io_from_wire(p, f"inputs[{i}]") for i, p in enumerate(data.get("inputs", []))],
        outputs=[_io_from_wire(p, f"outputs[{i}]") for i, p in enumerate(data.get("outputs", []))],
        resources=(
            _resources_from_wire(data["resources"], "resources")
            if data.get("resources") is not None
            else None
        ),
        executors=[
            _executor_from_wire(e, f"executors[{i}]")
            for i, e in enumerate(data.get("executors", []))
        ],
        volumes=_text_list(data, "task", "volumes"),
        tags=_text_map(data, "task", "tags"),
    )


def _executor_log_from_wire(data: Mapping[str, Any]) -> ExecutorLog:
    return ExecutorLog(
        start_time=parse_time(data["start_time"]) if "start_time" in data else None,
        end_time=parse_time(data["end_time"]) if "end_time" in data else None,
        stdout_tail=data.get("stdout_tail"),
        stderr_tail=data.get("stderr_tail"),
        exit_code=data.get("exit_code"),
    )


def _task_log_from_wire(data: Mapping[str, Any]) -> TaskLog:
    return TaskLog(
        start_time=parse_time(data["start_time"]) if "start_time" in data else None,
        end_time=parse_time(data["end_time"]) if "end_time" in data else None,
        executor_logs=[_executor_log_from_wire(el) for el in data.get("executor_logs", [])],
        output_files=[
            OutputFileLog(url=f.get("url", ""), path=f.get("path", ""), size_bytes=f.get("size_bytes", 0))
            for f in data.get("output_files", [])
        ],
        system_logs=list(data.get("system_logs", [])),
    )


def task_from_wire(data: Mapping[str, Any]) -> Task:
    """Rebuild a full task record, e.g. when replaying a journal."""
    spec = spec_from_wire(
        {
            k: v
            for k, v in data.items()
            if k in {"name", "description", "inputs", "outputs", "resources", "executors", "volumes", "tags"}
        }
    )
    return Task(
        id=data["id"],
        state=TaskState(data["state"]),
        creation_time=parse_time(data["creation_time"]) if "creation_time" in data else None,
        name=spec.name,
        description=spec.description,
        inputs=spec.inputs,
        outputs=spec.outputs,
        resources=spec.resources,
        executors=spec.executors,
        volumes=spec.volumes,
        tags=spec.tags,
        logs=[_task_log_from_wire(entry) for entry in data.get("logs", [])],
    )
