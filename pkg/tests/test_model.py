import copy
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teskit.model import (
    TERMINAL_STATES,
    TRANSITIONS,
    Executor,
    ExecutorLog,
    IOKind,
    IOParameter,
    OutputFileLog,
    Resources,
    Task,
    TaskLog,
    TaskSpec,
    TaskState,
    TaskView,
    WireFormatError,
    apply_view,
    format_time,
    is_terminal,
    is_valid_transition,
    parse_time,
    spec_from_wire,
    spec_to_wire,
    task_from_spec,
    task_from_wire,
    task_to_wire,
    utc_now,
    validate_task_spec,
)


def echo_spec(**overrides) -> TaskSpec:
    base = dict(executors=[Executor(command=["echo", "hi"])])
    base.update(overrides)
    return TaskSpec(**base)


def full_task() -> Task:
    spec = TaskSpec(
        name="example",
        description="a task with everything populated",
        inputs=[
            IOParameter(url="file:///tmp/in.txt", path="/inputs/in.txt"),
            IOParameter(content="inline data", path="/inputs/inline.txt"),
        ],
        outputs=[IOParameter(url="file:///tmp/out.txt", path="/out/out.txt")],
        resources=Resources(cpu_cores=2, ram_gb=1.5, zones=["zone-a"]),
        executors=[
            Executor(
                image="alpine",
                command=["sh", "-c", "echo hi"],
                workdir="/work",
                env={"K": "V"},
            )
        ],
        volumes=["/vol"],
        tags={"team": "x"},
    )
    task = task_from_spec("abc123", spec, datetime(2024, 5, 1, tzinfo=timezone.utc))
    log = TaskLog(
        start_time=datetime(2024, 5, 1, 0, 0, 1, tzinfo=timezone.utc),
        end_time=datetime(2024, 5, 1, 0, 0, 2, tzinfo=timezone.utc),
        executor_logs=[
            ExecutorLog(
                start_time=datetime(2024, 5, 1, 0, 0, 1, tzinfo=timezone.utc),
                end_time=datetime(2024, 5, 1, 0, 0, 2, tzinfo=timezone.utc),
                stdout_tail="hi\n",
                stderr_tail="",
                exit_code=0,
            )
        ],
        output_files=[OutputFileLog(url="file:///tmp/out.txt", path="/out/out.txt", size_bytes=3)],
        system_logs=["worker assigned"],
    )
    return Task(**{**task.__dict__, "state": TaskState.COMPLETE, "logs": [log]})


# --- validation -------------------------------------------------------


def test_minimal_spec_is_valid():
    assert validate_task_spec(echo_spec()) == []


def test_empty_executors_rejected():
    errors = validate_task_spec(TaskSpec(executors=[]))
    assert len(errors) == 1
    assert errors[0].field == "executors"
    assert "non-empty" in errors[0].message


@pytest.mark.parametrize(
    "spec,expected_field",
    [
        (echo_spec(inputs=[IOParameter(url="", path="/a")]), "inputs[0]"),
        (
            echo_spec(inputs=[IOParameter(url="file:///x", content="c", path="/a")]),
            "inputs[0]",
        ),
        (
            echo_spec(
                inputs=[IOParameter(content="c", path="/a", kind=IOKind.DIRECTORY)]
            ),
            "inputs[0].content",
        ),
        (echo_spec(inputs=[IOParameter(url="file:///x", path="rel")]), "inputs[0].path"),
        (echo_spec(outputs=[IOParameter(url="", path="/a")]), "outputs[0].url"),
        (
            echo_spec(outputs=[IOParameter(url="file:///x", path="/a", content="c")]),
            "outputs[0].content",
        ),
        (echo_spec(outputs=[IOParameter(url="file:///x", path="x")]), "outputs[0].path"),
        (echo_spec(volumes=["vol"]), "volumes[0]"),
        (echo_spec(executors=[Executor(command=[])]), "executors[0].command"),
        (
            echo_spec(executors=[Executor(command=["x"], workdir="w")]),
            "executors[0].workdir",
        ),
        (
            echo_spec(executors=[Executor(command=["x"], stdin="in.txt")]),
            "executors[0].stdin",
        ),
        (echo_spec(resources=Resources(cpu_cores=0)), "resources.cpu_cores"),
        (echo_spec(resources=Resources(ram_gb=-1.0)), "resources.ram_gb"),
        (echo_spec(resources=Resources(disk_gb=0.0)), "resources.disk_gb"),
    ],
)
def test_each_invariant_reported_exactly_once(spec, expected_field):
    errors = validate_task_spec(spec)
    assert len(errors) == 1, [e.field for e in errors]
    assert errors[0].field == expected_field


def test_input_needs_url_or_content_message():
    errors = validate_task_spec(echo_spec(inputs=[IOParameter(url="", path="/a")]))
    assert errors == [type(errors[0])("inputs[0]", "url or content required")]


# --- state machine ----------------------------------------------------

# Independent re-statement of the lifecycle edges, compared exhaustively
# against is_valid_transition below.
EDGES = {
    (TaskState.QUEUED, TaskState.INITIALIZING),
    (TaskState.QUEUED, TaskState.CANCELING),
    (TaskState.QUEUED, TaskState.CANCELED),
    (TaskState.QUEUED, TaskState.SYSTEM_ERROR),
    (TaskState.INITIALIZING, TaskState.RUNNING),
    (TaskState.INITIALIZING, TaskState.CANCELING),
    (TaskState.INITIALIZING, TaskState.SYSTEM_ERROR),
    (TaskState.RUNNING, TaskState.COMPLETE),
    (TaskState.RUNNING, TaskState.EXECUTOR_ERROR),
    (TaskState.RUNNING, TaskState.SYSTEM_ERROR),
    (TaskState.RUNNING, TaskState.CANCELING),
    (TaskState.CANCELING, TaskState.CANCELED),
}


def test_transition_table_exhaustive():
    for a in TaskState:
        for b in TaskState:
            assert is_valid_transition(a, b) == ((a, b) in EDGES), (a, b)


def test_normal_completion_and_terminal_absorption():
    assert is_valid_transition(TaskState.RUNNING, TaskState.COMPLETE)
    assert not is_valid_transition(TaskState.COMPLETE, TaskState.RUNNING)


def test_terminal_set():
    assert is_terminal(TaskState.COMPLETE)
    assert not is_terminal(TaskState.QUEUED)
    assert not is_terminal(TaskState.CANCELING)
    assert TERMINAL_STATES == {
        TaskState.COMPLETE,
        TaskState.EXECUTOR_ERROR,
        TaskState.SYSTEM_ERROR,
        TaskState.CANCELED,
        TaskState.PREEMPTED,
    }


def test_no_transition_leaves_a_terminal_state():
    for state in TERMINAL_STATES:
        assert state not in TRANSITIONS


def test_lifecycle_graph_is_acyclic_from_queued():
    # DFS cycle check over states reachable from QUEUED.
    visiting, done = set(), set()

    def visit(state):
        assert state not in visiting, f"cycle through {state}"
        if state in done:
            return
        visiting.add(state)
        for nxt in TRANSITIONS.get(state, ()):
            visit(nxt)
        visiting.remove(state)
        done.add(state)

    visit(TaskState.QUEUED)


# --- views ------------------------------------------------------------


def test_full_view_is_identity():
    task = full_task()
    assert apply_view(task, TaskView.FULL) == task


def test_minimal_view_field_sweep():
    wire = task_to_wire(apply_view(full_task(), TaskView.MINIMAL))
    assert set(wire) == {"id", "state"}
    assert wire["id"] == "abc123"
    assert wire["state"] == "COMPLETE"


def _strip_basic_hidden(record):
    """Independent derivation of the BASIC wire form from the FULL one."""
    record = copy.deepcopy(record)
    for p in record.get("inputs", []):
        p.pop("content", None)
    for log in record.get("logs", []):
        log.pop("system_logs", None)
        for el in log.get("executor_logs", []):
            el.pop("stdout_tail", None)
            el.pop("stderr_tail", None)
    return record


def test_basic_view_field_by_field_diff():
    task = full_task()
    full_wire = task_to_wire(apply_view(task, TaskView.FULL))
    basic_wire = task_to_wire(apply_view(task, TaskView.BASIC))
    assert basic_wire == _strip_basic_hidden(full_wire)
    executor_log = basic_wire["logs"][0]["executor_logs"][0]
    assert executor_log["exit_code"] == 0
    assert "stdout_tail" not in executor_log


def _is_subrecord(a, b):
    if isinstance(a, dict):
        return isinstance(b, dict) and all(k in b and _is_subrecord(v, b[k]) for k, v in a.items())
    if isinstance(a, list):
        return (
            isinstance(b, list)
            and len(a) == len(b)
            and all(_is_subrecord(x, y) for x, y in zip(a, b))
        )
    return a == b


@pytest.mark.parametrize("view", list(TaskView))
def test_view_projection_idempotent(view):
    task = full_task()
    once = apply_view(task, view)
    assert apply_view(once, view) == once


def test_views_are_monotone_in_detail():
    task = full_task()
    minimal = task_to_wire(apply_view(task, TaskView.MINIMAL))
    basic = task_to_wire(apply_view(task, TaskView.BASIC))
    full = task_to_wire(apply_view(task, TaskView.FULL))
    assert _is_subrecord(minimal, basic)
    assert _is_subrecord(basic, full)


# --- wire encoding ----------------------------------------------------

_paths = st.from_regex(r"/[a-z]{1,8}(/[a-z0-9_.]{1,8}){0,3}", fullmatch=True)
_names = st.text(st.characters(whitelist_categories=("Ll", "Nd")), min_size=1, max_size=12)


def _executors():
    return st.builds(
        Executor,
        image=st.sampled_from(["", "alpine", "ubuntu:22.04"]),
        command=st.lists(_names, min_size=1, max_size=3),
        workdir=st.none() | _paths,
        stdin=st.none() | _paths,
        stdout=st.none() | _paths,
        stderr=st.none() | _paths,
        env=st.dictionaries(_names, _names, max_size=2),
        ignore_error=st.booleans(),
    )


def _inputs():
    by_url = st.builds(
        IOParameter,
        url=st.just("file:///tmp/src"),
        path=_paths,
        kind=st.sampled_from([IOKind.FILE, IOKind.DIRECTORY]),
        content=st.none(),
        name=st.none() | _names,
    )
    by_content = st.builds(
        IOParameter,
        url=st.just(""),
        path=_paths,
        kind=st.just(IOKind.FILE),
        content=_names,
    )
    return st.one_of(by_url, by_content)


def _valid_specs():
    return st.builds(
        TaskSpec,
        name=st.none() | _names,
        description=st.none() | _names,
        inputs=st.lists(_inputs(), max_size=2),
        outputs=st.lists(
            st.builds(IOParameter, url=st.just("file:///tmp/dst"), path=_paths), max_size=2
        ),
        resources=st.none()
        | st.builds(
            Resources,
            cpu_cores=st.none() | st.integers(1, 16),
            ram_gb=st.none() | st.floats(0.5, 64, allow_nan=False),
            disk_gb=st.none() | st.floats(0.5, 64, allow_nan=False),
            preemptible=st.booleans(),
            zones=st.lists(_names, max_size=2),
            backend_parameters=st.dictionaries(_names, _names, max_size=2),
        ),
        executors=st.lists(_executors(), min_size=1, max_size=3),
        volumes=st.lists(_paths, max_size=2),
        tags=st.dictionaries(_names, _names, max_size=3),
    )


@settings(max_examples=60, deadline=None)
@given(_valid_specs())
def test_valid_specs_round_trip_and_revalidate(spec):
    assert validate_task_spec(spec) == []
    reparsed = spec_from_wire(spec_to_wire(spec))
    assert reparsed == spec
    assert validate_task_spec(reparsed) == []


@settings(max_examples=40, deadline=None)
@given(_valid_specs(), st.sampled_from(list(TaskView)))
def test_projection_properties_hold_for_generated_tasks(spec, view):
    task = task_from_spec("tid", spec, utc_now())
    once = apply_view(task, view)
    assert apply_view(once, view) == once
    assert _is_subrecord(
        task_to_wire(apply_view(task, TaskView.MINIMAL)),
        task_to_wire(apply_view(task, TaskView.BASIC)),
    )
    assert _is_subrecord(
        task_to_wire(apply_view(task, TaskView.BASIC)),
        task_to_wire(apply_view(task, TaskView.FULL)),
    )


def test_full_task_round_trips_through_wire():
    task = full_task()
    assert task_from_wire(task_to_wire(task)) == task


def test_wire_omits_absent_fields_rather_than_null():
    wire = task_to_wire(task_from_spec("t1", echo_spec(), utc_now()))
    assert None not in wire.values()
    assert "name" not in wire
    assert "logs" not in wire
    assert "resources" not in wire


def test_unknown_fields_rejected():
    with pytest.raises(WireFormatError, match="unknown field"):
        spec_from_wire({"executors": [{"command": ["x"]}], "bogus": 1})
    with pytest.raises(WireFormatError, match="executors\\[0\\]"):
        spec_from_wire({"executors": [{"command": ["x"], "extra": True}]})


@pytest.mark.parametrize(
    "payload,field_fragment",
    [
        ({"executors": "nope"}, "executors"),
        ({"executors": [{"command": "echo"}]}, "command"),
        ({"executors": [{"command": ["x"], "env": {"A": 1}}]}, "env"),
        ({"executors": [{"command": ["x"]}], "tags": {"a": 2}}, "tags"),
        ({"executors": [{"command": ["x"]}], "resources": {"cpu_cores": "2"}}, "cpu_cores"),
        ({"executors": [{"command": ["x"]}], "resources": {"cpu_cores": True}}, "cpu_cores"),
        ({"executors": [{"command": ["x"], "ignore_error": "yes"}]}, "ignore_error"),
        ({"executors": [{"command": ["x"]}], "inputs": [{"kind": "LINK", "url": "u", "path": "/p"}]}, "kind"),
        ("not an object", "task"),
    ],
)
def test_bad_types_rejected(payload, field_fragment):
    with pytest.raises(WireFormatError) as err:
        spec_from_wire(payload)
    assert field_fragment in err.value.field


def test_time_format_round_trip():
    now = utc_now()
    text = format_time(now)
    assert text.endswith("Z")
    assert parse_time(text) == now
    assert parse_time("2024-05-01T00:00:01+00:00") == datetime(
        2024, 5, 1, 0, 0, 1, tzinfo=timezone.utc
    )
