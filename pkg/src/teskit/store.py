"""Durable task registry.

Creation with server-assigned IDs, retrieval, filtered and paginated
listing, compare-and-set state transitions, and monotone log merging.
All operations are linearizable under concurrent callers; the store is
the sole owner of task mutation. An optional newline-delimited JSON
journal provides crash recovery by replay.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import secrets
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Optional

from .model import (
    ExecutorLog,
    OutputFileLog,
    Task,
    TaskLog,
    TaskSpec,
    TaskState,
    TaskView,
    ValidationError,
    apply_view,
    format_time,
    is_valid_transition,
    parse_time,
    task_from_spec,
    task_from_wire,
    task_to_wire,
    utc_now,
    validate_task_spec,
)

DEFAULT_PAGE_SIZE = 256
MAX_PAGE_SIZE = 2048
DEFAULT_CAPTURE_LIMIT = 64 * 1024


class NotFound(Exception):
    """No task with the given id exists in this store."""


class ValidationFailed(Exception):
    """A submitted spec violates its invariants."""

    def __init__(self, errors: list[ValidationError]):
        self.errors = errors
        first = errors[0] if errors else ValidationError("spec", "invalid")
        super().__init__(f"{first.field}: {first.message}")


class InvalidPageToken(Exception):
    """The page token is not one this store issued."""


class StorageUnavailable(Exception):
    """The journal could not be written."""


@dataclass(frozen=True)
class ListFilter:
    """Conjunction of list filters; empty-string tag value means key present."""

    state: Optional[TaskState] = None
    name_prefix: Optional[str] = None
    tags: dict[str, str] = field(default_factory=dict)

    def matches(self, task: Task) -> bool:
        if self.state is not None and task.state is not self.state:
            return False
        if self.name_prefix is not None and not (task.name or "").startswith(self.name_prefix):
            return False
        for key, value in self.tags.items():
            if key not in task.tags:
                return False
            if value != "" and task.tags[key] != value:
                return False
        return True


@dataclass(frozen=True)
class Page:
    items: list[Task]
    next_page_token: Optional[str] = None


def new_task_id() -> str:
    """26-character lowercase base-32 encoding of 128 random bits."""
    raw = base64.b32encode(secrets.token_bytes(16)).decode("ascii")
    return raw.rstrip("=").lower()


def encode_page_token(creation_time: datetime, task_id: str) -> str:
    payload = json.dumps([format_time(creation_time), task_id]).encode("ascii")
    return base64.urlsafe_b64encode(payload).decode("ascii")


def decode_page_token(token: str) -> tuple[datetime, str]:
    try:
        creation_text, task_id = json.loads(base64.urlsafe_b64decode(token.encode("ascii")))
        return parse_time(creation_text), task_id
    except (ValueError, TypeError, binascii.Error) as exc:
        raise InvalidPageToken(f"undecodable page token: {token!r}") from exc


@dataclass(frozen=True)
class LogUpdate:
    """Incremental additions to a task's single execution log."""

    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    executor_logs: list[ExecutorLog] = field(default_factory=list)
    output_files: list[OutputFileLog] = field(default_factory=list)
    system_logs: list[str] = field(default_factory=list)


def _log_update_to_wire(update: LogUpdate) -> dict[str, Any]:
    record: dict[str, Any] = {}
    if update.start_time:
        record["start_time"] = format_time(update.start_time)
    if update.end_time:
        record["end_time"] = format_time(update.end_time)
    if update.executor_logs:
        record["executor_logs"] = [
            {
                k: v
                for k, v in {
                    "start_time": format_time(el.start_time) if el.start_time else None,
                    "end_time": format_time(el.end_time) if el.end_time else None,
                    "stdout_tail": el.stdout_tail,
                    "stderr_tail": el.stderr_tail,
                    "exit_code": el.exit_code,
                }.items()
                if v is not None
            }
            for el in update.executor_logs
        ]
    if update.output_files:
        record["output_files"] = [
            {"url": f.url, "path": f.path, "size_bytes": f.size_bytes}
            for f in update.output_files
        ]
    if update.system_logs:
        record["system_logs"] = list(update.system_logs)
    return record


def _log_update_from_wire(data: dict[str, Any]) -> LogUpdate:
    return LogUpdate(
        start_time=parse_time(data["start_time"]) if "start_time" in data else None,
        end_time=parse_time(data["end_time"]) if "end_time" in data else None,
        executor_logs=[
            ExecutorLog(
                start_time=parse_time(el["start_time"]) if "start_time" in el else None,
                end_time=parse_time(el["end_time"]) if "end_time" in el else None,
                stdout_tail=el.get("stdout_tail", ""),
                stderr_tail=el.get("stderr_tail", ""),
                exit_code=el.get("exit_code"),
            )
            for el in data.get("executor_logs", [])
        ],
        output_files=[
            OutputFileLog(f.get("url", ""), f.get("path", ""), f.get("size_bytes", 0))
            for f in data.get("output_files", [])
        ],
        system_logs=list(data.get("system_logs", [])),
    )


class TaskStore:
    """In-process task registry with unbounded retention.

    ``journal_path``, when given, appends one JSON record per mutation;
    an existing journal is replayed on construction.
    """

    def __init__(
        self,
        journal_path: Optional[str] = None,
        capture_limit: int = DEFAULT_CAPTURE_LIMIT,
    ):
        self._lock = threading.RLock()
        self._tasks: dict[str, Task] = {}
        self._audit: list[tuple[str, TaskState, TaskState]] = []
        self._capture_limit = capture_limit
        self._journal_path = journal_path
        self._journal_file = None
        if journal_path:
            if os.path.exists(journal_path):
                self._replay(journal_path)
            self._journal_file = open(journal_path, "a", encoding="utf-8")

    # -- journal --------------------------------------------------------

    def _replay(self, path: str) -> None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                event, task_id, payload = record["event"], record["task_id"], record["payload"]
                if event == "create":
                    self._tasks[task_id] = task_from_wire(payload)
                elif event == "transition":
                    task = self._tasks[task_id]
                    self._tasks[task_id] = replace(task, state=TaskState(payload["to"]))
                    self._audit.append(
                        (task_id, TaskState(payload["from"]), TaskState(payload["to"]))
                    )
                elif event == "log":
                    self._merge_log(task_id, _log_update_from_wire(payload))

    def _journal(self, event: str, task_id: str, payload: dict[str, Any]) -> None:
        if self._journal_file is None:
            return
        record = {
            "event": event,
            "task_id": task_id,
            "payload": payload,
            "timestamp": format_time(utc_now()),
        }
        try:
            self._journal_file.write(json.dumps(record) + "\n")
            self._journal_file.flush()
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc

    def close(self) -> None:
        if self._journal_file is not None:
            self._journal_file.close()
            self._journal_file = None

    # -- operations -------------------------------------------------------

    def create_task(self, spec: TaskSpec) -> str:
        errors = validate_task_spec(spec)
        if errors:
            raise ValidationFailed(errors)
        with self._lock:
            task_id = new_task_id()
            while task_id in self._tasks:
                task_id = new_task_id()
            task = task_from_spec(task_id, spec, utc_now())
            self._tasks[task_id] = task
            self._journal("create", task_id, task_to_wire(task))
            return task_id

    def get_task(self, task_id: str, view: TaskView = TaskView.FULL) -> Task:
        with self._lock:
            task = self._tasks.get(task_id)
        if task is None:
            raise NotFound(f"no task with id {task_id!r}")
        return apply_view(task, view)

    def list_tasks(
        self,
        list_filter: Optional[ListFilter] = None,
        page_size: Optional[int] = None,
        page_token: Optional[str] = None,
        view: TaskView = TaskView.MINIMAL,
    ) -> Page:
        if page_size is None:
            page_size = DEFAULT_PAGE_SIZE
        if page_size < 1:
            raise ValueError("page_size must be >= 1")
        page_size = min(page_size, MAX_PAGE_SIZE)
        list_filter = list_filter or ListFilter()

        with self._lock:
            tasks = list(self._tasks.values())
        matching = [t for t in tasks if list_filter.matches(t)]
        # Newest first; id breaks creation-time ties.
        matching.sort(key=lambda t: (t.creation_time, t.id), reverse=True)
        if page_token is not None:
            position = decode_page_token(page_token)
            matching = [t for t in matching if (t.creation_time, t.id) < position]

        items = matching[:page_size]
        token = None
        if len(matching) > page_size:
            last = items[-1]
            token = encode_page_token(last.creation_time, last.id)
        return Page(items=[apply_view(t, view) for t in items], next_page_token=token)

    def transition_state(self, task_id: str, expected_from: TaskState, to: TaskState) -> bool:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise NotFound(f"no task with id {task_id!r}")
            if task.state is not expected_from or not is_valid_transition(expected_from, to):
                return False
            self._tasks[task_id] = replace(task, state=to)
            self._audit.append((task_id, expected_from, to))
            self._journal("transition", task_id, {"from": expected_from.value, "to": to.value})
            return True

    def record_log(self, task_id: str, update: LogUpdate) -> None:
        with self._lock:
            self._merge_log(task_id, update)
            self._journal("log", task_id, _log_update_to_wire(update))

    def _merge_log(self, task_id: str, update: LogUpdate) -> None:
        task = self._tasks.get(task_id)
        if task is None:
            raise NotFound(f"no task with id {task_id!r}")
        current = task.logs[0] if task.logs else TaskLog()
        capped = [
            replace(
                el,
                stdout_tail=self._cap(el.stdout_tail),
                stderr_tail=self._cap(el.stderr_tail),
            )
            for el in update.executor_logs
        ]
        merged = TaskLog(
            start_time=current.start_time or update.start_time,
            end_time=update.end_time or current.end_time,
            executor_logs=current.executor_logs + capped,
            output_files=current.output_files + list(update.output_files),
            system_logs=current.system_logs + list(update.system_logs),
        )
        self._tasks[task_id] = replace(task, logs=[merged])

    def _cap(self, tail: Optional[str]) -> Optional[str]:
        if tail is None or len(tail) <= self._capture_limit:
            return tail
        return tail[-self._capture_limit :]

    # -- introspection ----------------------------------------------------

    def transition_history(self) -> list[tuple[str, TaskState, TaskState]]:
        """Every successful transition in order, for lifecycle audits."""
        with self._lock:
            return list(self._audit)

    def __len__(self) -> int:
        with self._lock:
            return len(self._tasks)
