"""Task execution pipeline.

One task at a time the worker admits against capacity, prepares a
sandbox, stages inputs, runs the executor sequence with output capture,
stages declared outputs, and finalizes the task state, with cooperative
cancellation at every stage boundary and signal forwarding to the live
process.

Two runtime adapters ship here. The direct-process adapter runs commands
straight on the host: the sandbox re-roots ``/`` into a per-task
directory, and absolute task paths appearing in argv or env values are
textually rewritten to their host locations (a heuristic adequate for
tests and container-free hosts, documented on the adapter). The
container adapter shells out to a container runtime binary, bind-mounts
the sandbox, and leaves path interpretation to the container.
"""

from __future__ import annotations

import logging
import os
import posixpath
import re
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .config import WorkerConfig
from .model import (
    Executor,
    ExecutorLog,
    Resources,
    Task,
    TaskState,
    TaskView,
    is_terminal,
    utc_now,
)
from .staging import (
    ProtocolRegistry,
    StagingError,
    map_task_path,
    stage_input,
    stage_output,
)
from .store import MAX_PAGE_SIZE, ListFilter, LogUpdate, NotFound, TaskStore

log = logging.getLogger(__name__)

DEFAULT_TASK_CORES = 1
DEFAULT_TASK_RAM_GB = 1.0

_UNRESERVED = object()


class AdapterFailure(Exception):
    """The runtime adapter could not launch the executor."""


# --- sandbox ------------------------------------------------------------


@dataclass
class Sandbox:
    """Per-task directory tree; ``mounts`` maps top-level task paths to
    their host locations (always ``root + path``)."""

    root: str
    mounts: dict[str, str]
    _compiled: Optional[re.Pattern] = field(default=None, repr=False, compare=False)

    def host_path(self, task_path: str) -> str:
        return map_task_path(self.root, task_path)

    def translate(self, text: str) -> str:
        """Rewrite absolute task paths in ``text`` to host paths.

        Mount roots are replaced only when followed by a path separator
        or a non-identifier character, so ``/vol`` never rewrites inside
        ``/volume``.
        """
        if not self.mounts or not text:
            return text
        if self._compiled is None:
            alternatives = sorted(self.mounts, key=len, reverse=True)
            self._compiled = re.compile(
                "(?:" + "|".join(re.escape(a) for a in alternatives) + r")(?![A-Za-z0-9_.\-])"
            )
        return self._compiled.sub(lambda m: self.mounts[m.group(0)], text)


def _first_component(task_path: str) -> str:
    head = task_path.lstrip("/").split("/", 1)[0]
    return "/" + head if head else "/"


def create_sandbox(parent_dir: str, task: Task) -> Sandbox:
    """Create an empty per-task tree with volumes and IO parents in place."""
    os.makedirs(parent_dir, exist_ok=True)
    root = tempfile.mkdtemp(prefix=f"task-{task.id[:12]}-", dir=parent_dir)

    io_paths = [p.path for p in list(task.inputs) + list(task.outputs)]
    for executor in task.executors:
        io_paths += [p for p in (executor.stdin, executor.stdout, executor.stderr) if p]
    directories = {"/tmp"} | set(task.volumes)
    directories |= {posixpath.dirname(p) or "/" for p in io_paths}
    tops = {_first_component(p) for p in directories | set(io_paths)} - {"/"}

    mounts = {top: map_task_path(root, top) for top in sorted(tops)}
    for directory in directories:
        os.makedirs(map_task_path(root, directory), exist_ok=True)
    return Sandbox(root=root, mounts=mounts)


def remove_sandbox(sandbox: Sandbox) -> None:
    shutil.rmtree(sandbox.root, ignore_errors=True)


# --- runtime adapters ------------------------------------------------------


class ProcessHandle:
    """A launched executor process plus the way to stop it."""

    def __init__(
        self,
        popen: subprocess.Popen,
        stop_argv: Optional[list[str]] = None,
        force_argv: Optional[list[str]] = None,
    ):
        self.popen = popen
        self._stop_argv = stop_argv
        self._force_argv = force_argv

    def terminate(self) -> None:
        if self._stop_argv:
            subprocess.run(self._stop_argv, capture_output=True)
        self._signal(signal.SIGTERM)

    def kill(self) -> None:
        if self._force_argv:
            subprocess.run(self._force_argv, capture_output=True)
        self._signal(signal.SIGKILL)

    def _signal(self, sig: int) -> None:
        # Processes start in their own session; signal the whole group so
        # shell children die with the shell.
        try:
            os.killpg(os.getpgid(self.popen.pid), sig)
        except (ProcessLookupError, PermissionError):
            try:
                self.popen.send_signal(sig)
            except ProcessLookupError:
                pass


class DirectAdapter:
    """Runs commands as host processes inside the sandbox tree.

    The image field is ignored. The command runs with a scrubbed
    environment (PATH, a sandbox-local HOME, and the executor's own env)
    and with absolute task paths in argv/env rewritten via
    :meth:`Sandbox.translate`. Paths outside the sandbox mounts are left
    untouched, so this adapter provides path mapping, not isolation.
    """

    name = "direct"

    def launch(self, executor: Executor, sandbox: Sandbox, stdin, label: str) -> ProcessHandle:
        argv = [sandbox.translate(token) for token in executor.command]
        env = {
            "PATH": os.environ.get("PATH", "/usr/local/bin:/usr/bin:/bin"),
            "HOME": sandbox.host_path("/tmp"),
        }
        env.update({k: sandbox.translate(v) for k, v in executor.env.items()})
        cwd = sandbox.host_path(executor.workdir or "/")
        os.makedirs(cwd, exist_ok=True)
        try:
            popen = subprocess.Popen(
                argv,
                cwd=cwd,
                env=env,
                stdin=stdin,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
            )
        except OSError as exc:
            raise AdapterFailure(f"could not launch {argv[0]!r}: {exc}") from exc
        return ProcessHandle(popen)


class ContainerAdapter:
    """Shells out to a container runtime (docker-compatible CLI)."""

    name = "container"

    def __init__(self, binary: str = "docker"):
        self.binary = binary

    def build_argv(self, executor: Executor, sandbox: Sandbox, label: str) -> list[str]:
        argv = [self.binary, "run", "--rm", "-i", "--name", f"tes-{label}"]
        argv += ["--workdir", executor.workdir or "/"]
        for task_path, host_path in sorted(sandbox.mounts.items()):
            argv += ["--volume", f"{host_path}:{task_path}:rw"]
        argv += ["--env", "HOME=/tmp"]
        for key, value in executor.env.items():
            argv += ["--env", f"{key}={value}"]
        argv.append(executor.image)
        argv += list(executor.command)
        return argv

    def launch(self, executor: Executor, sandbox: Sandbox, stdin, label: str) -> ProcessHandle:
        argv = self.build_argv(executor, sandbox, label)
        try:
            popen = subprocess.Popen(
                argv,
                stdin=stdin,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
            )
        except OSError as exc:
            raise AdapterFailure(f"could not launch {self.binary!r}: {exc}") from exc
        return ProcessHandle(
            popen,
            stop_argv=[self.binary, "kill", "--signal", "TERM", f"tes-{label}"],
            force_argv=[self.binary, "kill", f"tes-{label}"],
        )


def make_adapter(config: WorkerConfig):
    if config.adapter == "direct":
        return DirectAdapter()
    if config.adapter == "container":
        return ContainerAdapter(config.container_binary)
    raise ValueError(f"unknown runtime adapter {config.adapter!r}")


# --- capacity ----------------------------------------------------------------


def _requested(resources: Optional[Resources]) -> tuple[int, float]:
    if resources is None:
        return DEFAULT_TASK_CORES, DEFAULT_TASK_RAM_GB
    return (
        resources.cpu_cores or DEFAULT_TASK_CORES,
        resources.ram_gb or DEFAULT_TASK_RAM_GB,
    )


class Capacity:
    """Bookkeeping of reserved cores/RAM; not an enforcement mechanism."""

    def __init__(self, cpu_cores: int = 8, ram_gb: float = 8.0):
        self.total_cpu = cpu_cores
        self.total_ram = ram_gb
        self._used_cpu = 0
        self._used_ram = 0.0
        self._lock = threading.Lock()

    def admit(self, resources: Optional[Resources]) -> bool:
        cores, ram = _requested(resources)
        with self._lock:
            if self._used_cpu + cores > self.total_cpu or self._used_ram + ram > self.total_ram:
                return False
            self._used_cpu += cores
            self._used_ram += ram
            return True

    def release(self, resources: Optional[Resources]) -> None:
        cores, ram = _requested(resources)
        with self._lock:
            self._used_cpu -= cores
            self._used_ram -= ram

    @property
    def in_use(self) -> tuple[int, float]:
        with self._lock:
            return self._used_cpu, self._used_ram


# --- worker -------------------------------------------------------------------


class Worker:
    """Runs queued tasks from a store on a bounded thread pool.

    The scheduler polls for QUEUED tasks every ``poll_interval_s`` and
    admits them oldest-first; a task that does not fit the free capacity
    is skipped, not failed, and retried on later polls. All state change
    goes through the store's compare-and-set transitions.
    """

    def __init__(
        self,
        store: TaskStore,
        registry: ProtocolRegistry,
        config: Optional[WorkerConfig] = None,
    ):
        self.store = store
        self.registry = registry
        self.config = config or WorkerConfig()
        self.capacity = Capacity(self.config.cpu_cores, self.config.ram_gb)
        self.adapter = make_adapter(self.config)
        self._pool = ThreadPoolExecutor(
            max_workers=self.config.pool_size, thread_name_prefix="tes-exec"
        )
        self._sandbox_parent = self.config.sandbox_dir or os.path.join(
            tempfile.gettempdir(), "tes-sandboxes"
        )
        self._lock = threading.Lock()
        self._cancel_events: dict[str, threading.Event] = {}
        self._reservations: dict[str, Optional[Resources]] = {}
        self._stop = threading.Event()
        self._scheduler: Optional[threading.Thread] = None

    # -- lifecycle ------------------------------------------------------

    def start(self) -> None:
        if self._scheduler is not None:
            return
        self._stop.clear()
        self._scheduler = threading.Thread(
            target=self._scheduler_loop, name="tes-scheduler", daemon=True
        )
        self._scheduler.start()

    def stop(self) -> None:
        """Stop scheduling, cancel in-flight tasks, and wait for them."""
        self._stop.set()
        if self._scheduler is not None:
            self._scheduler.join(timeout=10)
            self._scheduler = None
        with self._lock:
            active = list(self._reservations)
        for task_id in active:
            try:
                self.cancel_task(task_id)
            except NotFound:
                pass
        self._pool.shutdown(wait=True)

    def _scheduler_loop(self) -> None:
        while not self._stop.is_set():
            try:
                self._admit_pending()
            except Exception:
                log.exception("scheduler pass failed")
            self._stop.wait(self.config.poll_interval_s)

    def _admit_pending(self) -> None:
        page = self.store.list_tasks(
            ListFilter(state=TaskState.QUEUED), page_size=MAX_PAGE_SIZE, view=TaskView.FULL
        )
        for task in reversed(page.items):  # oldest first
            with self._lock:
                if task.id in self._reservations:
                    continue
                if not self.capacity.admit(task.resources):
                    continue
                self._reservations[task.id] = task.resources
            self._pool.submit(self._run_guarded, task.id)

    def _run_guarded(self, task_id: str) -> None:
        try:
            self.run_task(task_id)
        except Exception:
            log.exception("task %s failed outside the pipeline", task_id)

    # -- cancellation -----------------------------------------------------

    def _event_for(self, task_id: str) -> threading.Event:
        with self._lock:
            event = self._cancel_events.get(task_id)
            if event is None:
                event = self._cancel_events[task_id] = threading.Event()
            return event

    def cancel_task(self, task_id: str) -> bool:
        """Request cancellation; idempotent, and a no-op on terminal tasks."""
        while True:
            state = self.store.get_task(task_id, TaskView.MINIMAL).state
            if is_terminal(state):
                return True
            if state is TaskState.QUEUED:
                if self.store.transition_state(task_id, TaskState.QUEUED, TaskState.CANCELED):
                    return True
                continue
            if state in (TaskState.INITIALIZING, TaskState.RUNNING):
                if self.store.transition_state(task_id, state, TaskState.CANCELING):
                    self._event_for(task_id).set()
                    return True
                continue
            if state is TaskState.CANCELING:
                self._event_for(task_id).set()
                return True
            # PAUSED/UNKNOWN: never entered by this backend
            return True

    # -- pipeline -----------------------------------------------------------

    def run_task(self, task_id: str) -> TaskState:
        """Drive one admitted QUEUED task to a terminal state."""
        cancel_event = self._event_for(task_id)
        try:
            task = self.store.get_task(task_id, TaskView.FULL)
            if not self.store.transition_state(task_id, TaskState.QUEUED, TaskState.INITIALIZING):
                # canceled (or otherwise moved on) before we started
                return self.store.get_task(task_id, TaskView.MINIMAL).state
            self.store.record_log(task_id, LogUpdate(start_time=utc_now()))
            sandbox = None
            try:
                sandbox = create_sandbox(self._sandbox_parent, task)
                for param in task.inputs:
                    stage_input(self.registry, param, sandbox.root)

                if cancel_event.is_set():
                    return self._finalize_cancel(task_id)
                if not self.store.transition_state(
                    task_id, TaskState.INITIALIZING, TaskState.RUNNING
                ):
                    return self._finalize_cancel(task_id)

                ok, _ = self.run_executors(task, sandbox, cancel_event)
                if cancel_event.is_set():
                    return self._finalize_cancel(task_id)
                if not ok:
                    if not self.store.transition_state(
                        task_id, TaskState.RUNNING, TaskState.EXECUTOR_ERROR
                    ):
                        return self._finalize_cancel(task_id)
                    return TaskState.EXECUTOR_ERROR

                output_logs = []
                for param in task.outputs:
                    output_logs.extend(stage_output(self.registry, param, sandbox.root))
                if output_logs:
                    self.store.record_log(task_id, LogUpdate(output_files=output_logs))
                if not self.store.transition_state(
                    task_id, TaskState.RUNNING, TaskState.COMPLETE
                ):
                    return self._finalize_cancel(task_id)
                return TaskState.COMPLETE
            except (StagingError, AdapterFailure) as exc:
                return self._fail_system(task_id, str(exc))
            except Exception as exc:
                return self._fail_system(task_id, f"internal error: {exc!r}")
            finally:
                self.store.record_log(task_id, LogUpdate(end_time=utc_now()))
                if sandbox is not None and not self.config.debug_retain:
                    remove_sandbox(sandbox)
        finally:
            self._finalize_bookkeeping(task_id)

    def run_executors(
        self, task: Task, sandbox: Sandbox, cancel_event: threading.Event
    ) -> tuple[bool, list[ExecutorLog]]:
        """Run executors in order, stopping at the first fatal non-zero exit."""
        logs: list[ExecutorLog] = []
        for index, executor in enumerate(task.executors):
            if cancel_event.is_set():
                return False, logs
            entry = self.run_single_executor(
                executor, sandbox, cancel_event, label=f"{task.id[:12]}-{index}"
            )
            logs.append(entry)
            self.store.record_log(task.id, LogUpdate(executor_logs=[entry]))
            if entry.exit_code is None:  # terminated by cancellation
                return False, logs
            if entry.exit_code != 0 and not executor.ignore_error:
                return False, logs
        return True, logs

    def run_single_executor(
        self,
        executor: Executor,
        sandbox: Sandbox,
        cancel_event: threading.Event,
        label: str = "task",
    ) -> ExecutorLog:
        """Run one executor to completion or cancellation.

        stdout/stderr always feed capped tail buffers and are teed to
        their mapped sandbox paths when the executor declares them. On
        cancellation the process group gets SIGTERM, then SIGKILL after
        the grace period, and the exit code is reported absent.
        """
        start_time = utc_now()
        stdin_handle = subprocess.DEVNULL
        if executor.stdin:
            try:
                stdin_handle = open(sandbox.host_path(executor.stdin), "rb")
            except OSError as exc:
                raise AdapterFailure(f"cannot open stdin {executor.stdin!r}: {exc}") from exc

        try:
            handle = self.adapter.launch(executor, sandbox, stdin_handle, label)
        except AdapterFailure:
            if stdin_handle is not subprocess.DEVNULL:
                stdin_handle.close()
            raise

        tails: dict[str, bytes] = {"stdout": b"", "stderr": b""}
        cap = self.config.capture_limit

        def open_tee(task_path: Optional[str]):
            if not task_path:
                return None
            host = sandbox.host_path(task_path)
            os.makedirs(os.path.dirname(host), exist_ok=True)
            return open(host, "wb")

        tees = {"stdout": open_tee(executor.stdout), "stderr": open_tee(executor.stderr)}
        streams = {"stdout": handle.popen.stdout, "stderr": handle.popen.stderr}

        def pump(name: str) -> None:
            stream, tee = streams[name], tees[name]
            while True:
                chunk = stream.read(64 * 1024)
                if not chunk:
                    return
                if tee is not None:
                    tee.write(chunk)
                tails[name] = (tails[name] + chunk)[-cap:]

        pumps = [threading.Thread(target=pump, args=(n,), daemon=True) for n in ("stdout", "stderr")]
        for t in pumps:
            t.start()

        proc = handle.popen
        canceled = False
        while proc.poll() is None:
            if cancel_event.is_set():
                canceled = True
                handle.terminate()
                try:
                    proc.wait(timeout=self.config.cancel_grace_s)
                except subprocess.TimeoutExpired:
                    handle.kill()
                    proc.wait()
                break
            time.sleep(0.05)

        for t in pumps:
            t.join()
        for tee in tees.values():
            if tee is not None:
                tee.close()
        if stdin_handle is not subprocess.DEVNULL:
            stdin_handle.close()

        return ExecutorLog(
            start_time=start_time,
            end_time=utc_now(),
            stdout_tail=tails["stdout"].decode("utf-8", errors="replace"),
            stderr_tail=tails["stderr"].decode("utf-8", errors="replace"),
            exit_code=None if canceled else proc.returncode,
        )

    # -- finalization helpers ------------------------------------------------

    def _fail_system(self, task_id: str, message: str) -> TaskState:
        self.store.record_log(task_id, LogUpdate(system_logs=[message]))
        while True:
            state = self.store.get_task(task_id, TaskView.MINIMAL).state
            if is_terminal(state):
                return state
            if state is TaskState.CANCELING:
                self.store.transition_state(task_id, TaskState.CANCELING, TaskState.CANCELED)
                continue
            if self.store.transition_state(task_id, state, TaskState.SYSTEM_ERROR):
                return TaskState.SYSTEM_ERROR

    def _finalize_cancel(self, task_id: str) -> TaskState:
        while True:
            state = self.store.get_task(task_id, TaskView.MINIMAL).state
            if is_terminal(state):
                return state
            if state is TaskState.CANCELING:
                if self.store.transition_state(task_id, TaskState.CANCELING, TaskState.CANCELED):
                    self.store.record_log(task_id, LogUpdate(system_logs=["task canceled"]))
                continue
            self.store.transition_state(task_id, state, TaskState.CANCELING)

    def _finalize_bookkeeping(self, task_id: str) -> None:
        with self._lock:
            reservation = self._reservations.pop(task_id, _UNRESERVED)
            self._cancel_events.pop(task_id, None)
        if reservation is not _UNRESERVED:
            self.capacity.release(reservation)
