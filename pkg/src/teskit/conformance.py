"""Declarative conformance runner for task execution services.

Suites are YAML files: an ordered list of cases, each describing one
HTTP request, optional response-value captures into variables, an
optional poll-until condition, and a list of assertions. ``${name}``
placeholders in paths, query values, and body string leaves are
substituted from suite variables, config overrides, and prior captures.
JSON pointers (RFC 6901) select response values.
"""

from __future__ import annotations

import json
import re
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional

import click
import requests
import yaml

POLL_DEFAULT_INTERVAL_S = 1.0
POLL_DEFAULT_TIMEOUT_S = 60.0

_VARIABLE_RE = re.compile(r"\$\{([A-Za-z0-9_]+)\}")


class SchemaError(Exception):
    """The suite file does not match the expected schema."""


class TransportError(Exception):
    """The request never produced an HTTP response."""


@dataclass(frozen=True)
class RequestSpec:
    method: str
    path: str
    query: dict[str, str] = field(default_factory=dict)
    body: Any = None


@dataclass(frozen=True)
class PollSpec:
    pointer: str
    equals_one_of: list
    interval_s: Any = POLL_DEFAULT_INTERVAL_S
    timeout_s: Any = POLL_DEFAULT_TIMEOUT_S


@dataclass(frozen=True)
class Assertion:
    """One check: kind is status|exists|equals|matches|is_one_of."""

    kind: str
    expected: Any = None
    pointer: Optional[str] = None


@dataclass(frozen=True)
class ConformanceCase:
    name: str
    request: RequestSpec
    capture: dict[str, str] = field(default_factory=dict)
    poll: Optional[PollSpec] = None
    assertions: list[Assertion] = field(default_factory=list)
    halt_on_fail: bool = False


@dataclass(frozen=True)
class ConformanceSuite:
    name: str
    cases: list[ConformanceCase] = field(default_factory=list)
    variables: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class CaseResult:
    name: str
    passed: bool
    messages: list[str] = field(default_factory=list)
    duration_s: float = 0.0


@dataclass(frozen=True)
class SuiteReport:
    suite_name: str
    results: list[CaseResult]
    wall_time_s: float

    @property
    def pass_count(self) -> int:
        return sum(1 for r in self.results if r.passed)

    @property
    def fail_count(self) -> int:
        return sum(1 for r in self.results if not r.passed)

    @property
    def all_passed(self) -> bool:
        return self.fail_count == 0

    def to_wire(self) -> dict:
        return {
            "suite": self.suite_name,
            "passed": self.all_passed,
            "case_count": len(self.results),
            "pass_count": self.pass_count,
            "fail_count": self.fail_count,
            "wall_time_s": round(self.wall_time_s, 3),
            "cases": [
                {
                    "name": r.name,
                    "passed": r.passed,
                    "messages": list(r.messages),
                    "duration_s": round(r.duration_s, 3),
                }
                for r in self.results
            ],
        }


def bundled_suite_path() -> str:
    """Path of the core suite shipped with this package."""
    return str(resources.files("teskit") / "suites" / "core.yaml")


# --- JSON pointer and substitution ------------------------------------------


def json_pointer(document: Any, pointer: str) -> tuple[bool, Any]:
    """Resolve an RFC 6901 pointer; returns (found, value)."""
    if pointer == "":
        return True, document
    if not pointer.startswith("/"):
        return False, None
    current = document
    for token in pointer[1:].split("/"):
        token = token.replace("~1", "/").replace("~0", "~")
        if isinstance(current, dict):
            if token not in current:
                return False, None
            current = current[token]
        elif isinstance(current, list):
            if not re.fullmatch(r"0|[1-9][0-9]*", token):
                return False, None
            index = int(token)
            if index >= len(current):
                return False, None
            current = current[index]
        else:
            return False, None
    return True, current


def substitute(text: str, variables: dict[str, str]) -> str:
    """Replace ``${name}`` placeholders; KeyError on undefined names."""

    def lookup(match: re.Match) -> str:
        name = match.group(1)
        if name not in variables:
            raise KeyError(name)
        return variables[name]

    return _VARIABLE_RE.sub(lookup, text)


def substitute_deep(value: Any, variables: dict[str, str]) -> Any:
    if isinstance(value, str):
        return substitute(value, variables)
    if isinstance(value, list):
        return [substitute_deep(v, variables) for v in value]
    if isinstance(value, dict):
        return {k: substitute_deep(v, variables) for k, v in value.items()}
    return value


# --- suite loading ------------------------------------------------------------


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise SchemaError(message)


def _parse_assertion(raw: Any, where: str) -> Assertion:
    _require(isinstance(raw, dict), f"{where}: assertion must be a mapping")
    if "status" in raw:
        _require(set(raw) == {"status"}, f"{where}: status assertions take no other keys")
        _require(isinstance(raw["status"], int), f"{where}: status must be an integer")
        return Assertion(kind="status", expected=raw["status"])
    _require("pointer" in raw, f"{where}: assertion needs a pointer or a status")
    pointer = raw["pointer"]
    _require(isinstance(pointer, str), f"{where}: pointer must be a string")
    kinds = [k for k in ("exists", "equals", "matches", "is_one_of") if k in raw]
    _require(
        len(kinds) == 1 and set(raw) == {"pointer", kinds[0]},
        f"{where}: exactly one of exists/equals/matches/is_one_of is required",
    )
    kind = kinds[0]
    expected = raw[kind]
    if kind == "exists":
        _require(expected is True, f"{where}: exists must be true")
        expected = None
    if kind == "matches":
        _require(isinstance(expected, str), f"{where}: matches takes a regex string")
    if kind == "is_one_of":
        _require(isinstance(expected, list), f"{where}: is_one_of takes a list")
    return Assertion(kind=kind, expected=expected, pointer=pointer)


def _parse_case(raw: Any, index: int) -> ConformanceCase:
    where = f"cases[{index}]"
    _require(isinstance(raw, dict), f"{where}: case must be a mapping")
    name = raw.get("name")
    _require(isinstance(name, str) and name, f"{where}: name is required")
    where = f"{where} ({name})"
    allowed = {"name", "request", "capture", "poll", "assertions", "halt_on_fail"}
    unknown = set(raw) - allowed
    _require(not unknown, f"{where}: unknown keys {sorted(unknown)}")

    request_raw = raw.get("request")
    _require(isinstance(request_raw, dict), f"{where}: request is required")
    _require(isinstance(request_raw.get("method"), str), f"{where}: request.method is required")
    path = request_raw.get("path")
    _require(isinstance(path, str) and path.startswith("/"), f"{where}: request.path is required")
    query_raw = request_raw.get("query", {})
    _require(isinstance(query_raw, dict), f"{where}: request.query must be a mapping")
    request = RequestSpec(
        method=request_raw["method"].upper(),
        path=path,
        query={str(k): str(v) for k, v in query_raw.items()},
        body=request_raw.get("body"),
    )

    capture_raw = raw.get("capture", {})
    _require(isinstance(capture_raw, dict), f"{where}: capture must be a mapping")
    for var, pointer in capture_raw.items():
        _require(
            isinstance(pointer, str) and pointer.startswith("/"),
            f"{where}: capture {var!r} needs a JSON pointer",
        )

    poll = None
    if raw.get("poll") is not None:
        poll_raw = raw["poll"]
        _require(isinstance(poll_raw, dict), f"{where}: poll must be a mapping")
        _require(
            isinstance(poll_raw.get("pointer"), str), f"{where}: poll.pointer is required"
        )
        _require(
            isinstance(poll_raw.get("equals_one_of"), list),
            f"{where}: poll.equals_one_of is required",
        )
        poll = PollSpec(
            pointer=poll_raw["pointer"],
            equals_one_of=poll_raw["equals_one_of"],
            interval_s=poll_raw.get("interval_s", POLL_DEFAULT_INTERVAL_S),
            timeout_s=poll_raw.get("timeout_s", POLL_DEFAULT_TIMEOUT_S),
        )

    assertions_raw = raw.get("assertions", [])
    _require(isinstance(assertions_raw, list), f"{where}: assertions must be a list")
    assertions = [
        _parse_assertion(a, f"{where}.assertions[{j}]") for j, a in enumerate(assertions_raw)
    ]
    return ConformanceCase(
        name=name,
        request=request,
        capture=dict(capture_raw),
        poll=poll,
        assertions=assertions,
        halt_on_fail=bool(raw.get("halt_on_fail", False)),
    )


def load_suite(path: str) -> ConformanceSuite:
    """Load and schema-check a YAML suite file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        # PyYAML error text carries line/column context
        raise SchemaError(f"invalid YAML in {path}: {exc}") from exc
    _require(isinstance(data, dict), "suite must be a mapping")
    name = data.get("name")
    _require(isinstance(name, str) and name, "suite name is required")
    unknown = set(data) - {"name", "variables", "cases"}
    _require(not unknown, f"unknown suite keys {sorted(unknown)}")
    variables_raw = data.get("variables", {})
    _require(isinstance(variables_raw, dict), "variables must be a mapping")
    cases_raw = data.get("cases", [])
    _require(isinstance(cases_raw, list), "cases must be a list")
    return ConformanceSuite(
        name=name,
        variables={str(k): str(v) for k, v in variables_raw.items()},
        cases=[_parse_case(c, i) for i, c in enumerate(cases_raw)],
    )


# --- execution ---------------------------------------------------------------


@dataclass(frozen=True)
class HttpResponse:
    status: int
    body: Any
    text: str


def _execute(
    session: requests.Session, base_url: str, request: RequestSpec, variables: dict[str, str]
) -> HttpResponse:
    path = substitute(request.path, variables)
    query = {k: substitute(v, variables) for k, v in request.query.items()}
    body = substitute_deep(request.body, variables) if request.body is not None else None
    try:
        response = session.request(
            request.method,
            base_url.rstrip("/") + path,
            params=query or None,
            json=body,
            timeout=30,
        )
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    try:
        parsed = response.json()
    except ValueError:
        parsed = None
    return HttpResponse(status=response.status_code, body=parsed, text=response.text)


def assert_response(
    response: HttpResponse, assertion: Assertion, variables: dict[str, str]
) -> tuple[bool, str]:
    """Evaluate one assertion; the message states expected vs actual."""
    if assertion.kind == "status":
        ok = response.status == assertion.expected
        return ok, f"status: expected {assertion.expected}, got {response.status}"

    found, value = json_pointer(response.body, assertion.pointer)
    actual = repr(value) if found else "<absent>"
    if assertion.kind == "exists":
        return found, f"{assertion.pointer}: expected to exist, got {actual}"
    if assertion.kind == "equals":
        expected = assertion.expected
        if isinstance(expected, str):
            expected = substitute(expected, variables)
        return (
            found and value == expected,
            f"{assertion.pointer}: expected {expected!r}, got {actual}",
        )
    if assertion.kind == "matches":
        pattern = substitute(assertion.expected, variables)
        ok = found and isinstance(value, str) and re.search(pattern, value) is not None
        return ok, f"{assertion.pointer}: expected match for /{pattern}/, got {actual}"
    if assertion.kind == "is_one_of":
        options = [
            substitute(v, variables) if isinstance(v, str) else v for v in assertion.expected
        ]
        return (
            found and value in options,
            f"{assertion.pointer}: expected one of {options!r}, got {actual}",
        )
    return False, f"unknown assertion kind {assertion.kind!r}"


def run_case(
    session: requests.Session,
    base_url: str,
    case: ConformanceCase,
    variables: dict[str, str],
) -> CaseResult:
    started = time.monotonic()
    messages: list[str] = []
    response = None
    try:
        if case.poll is not None:
            interval = float(substitute(str(case.poll.interval_s), variables))
            timeout = float(substitute(str(case.poll.timeout_s), variables))
            options = [
                substitute(v, variables) if isinstance(v, str) else v
                for v in case.poll.equals_one_of
            ]
            deadline = started + timeout
            while True:
                response = _execute(session, base_url, case.request, variables)
                found, value = json_pointer(response.body, case.poll.pointer)
                if found and value in options:
                    break
                if time.monotonic() + interval > deadline:
                    actual = repr(value) if found else "<absent>"
                    messages.append(
                        f"poll timed out after {timeout:g}s: {case.poll.pointer} "
                        f"last saw {actual}, wanted one of {options!r}"
                    )
                    break
                time.sleep(interval)
        else:
            response = _execute(session, base_url, case.request, variables)

        for var, pointer in case.capture.items():
            found, value = json_pointer(response.body, pointer)
            if not found:
                messages.append(f"capture {var!r}: pointer {pointer} not found in response")
            else:
                variables[var] = value if isinstance(value, str) else json.dumps(value)

        for assertion in case.assertions:
            ok, message = assert_response(response, assertion, variables)
            if not ok:
                messages.append(message)
    except TransportError as exc:
        messages.append(f"transport error: {exc}")
    except KeyError as exc:
        messages.append(f"undefined variable {exc.args[0]!r}")
    return CaseResult(
        name=case.name,
        passed=not messages,
        messages=messages,
        duration_s=time.monotonic() - started,
    )


def run_suite(
    suite: ConformanceSuite,
    base_url: str,
    variables: Optional[dict[str, str]] = None,
    session: Optional[requests.Session] = None,
) -> SuiteReport:
    """Run all cases in order against ``base_url``.

    A failing case does not stop the run unless it sets ``halt_on_fail``;
    halted-over cases are reported as failed so that pass + fail always
    equals the case count.
    """
    started = time.monotonic()
    session = session or requests.Session()
    merged = dict(suite.variables)
    merged.update(variables or {})
    results: list[CaseResult] = []
    halted_by: Optional[str] = None
    for case in suite.cases:
        if halted_by is not None:
            results.append(
                CaseResult(case.name, False, [f"not run: halted by failing case {halted_by!r}"])
            )
            continue
        result = run_case(session, base_url, case, merged)
        results.append(result)
        if not result.passed and case.halt_on_fail:
            halted_by = case.name
    return SuiteReport(
        suite_name=suite.name, results=results, wall_time_s=time.monotonic() - started
    )


# --- command line ---------------------------------------------------------------


@click.group()
def main():
    """Run declarative conformance suites against a service."""


@main.command()
@click.argument("suite_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--url", required=True, help="Base URL of the service under test.")
@click.option("--json-report", default=None, type=click.Path(dir_okay=False))
@click.option("--var", "overrides", multiple=True, help="NAME=VALUE suite variable; repeatable.")
def run(suite_path, url, json_report, overrides):
    """Execute SUITE_PATH against --url; exit 0 iff every case passes."""
    try:
        suite = load_suite(suite_path)
    except SchemaError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    variables = {}
    for pair in overrides:
        name, _, value = pair.partition("=")
        variables[name] = value

    report = run_suite(suite, url, variables=variables)
    for result in report.results:
        marker = "PASS" if result.passed else "FAIL"
        click.echo(f"{marker}  {result.name}  ({result.duration_s:.2f}s)")
        for message in result.messages:
            click.echo(f"      {message}")
    click.echo(
        f"{report.suite_name}: {report.pass_count}/{len(report.results)} passed "
        f"in {report.wall_time_s:.1f}s"
    )
    if json_report:
        with open(json_report, "w", encoding="utf-8") as fh:
            json.dump(report.to_wire(), fh, indent=2)
    sys.exit(0 if report.all_passed else 1)
