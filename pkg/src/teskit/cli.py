"""Command-line tools: ``teskit`` (client) and ``teskit-server``."""

from __future__ import annotations

import json
import sys

import click

from .client import ClientError, TesClient, WaitTimeout
from .config import ServiceConfig, WorkerConfig


def _die(message: str, code: int = 1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _client(ctx) -> TesClient:
    try:
        return TesClient(ctx.obj["url"], timeout_s=ctx.obj["timeout"], token=ctx.obj["token"])
    except ValueError as exc:
        _die(str(exc))


def _print_json(data) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option(
    "--url",
    envvar="TES_URL",
    default="http://127.0.0.1:8000",
    show_default=True,
    help="Service base URL (env: TES_URL).",
)
@click.option("--timeout", default=30.0, show_default=True, help="Request timeout in seconds.")
@click.option("--token", envvar="TES_TOKEN", default=None, help="Bearer token, if required.")
@click.pass_context
def main(ctx, url, timeout, token):
    """Submit and inspect tasks on a task execution service."""
    ctx.obj = {"url": url, "timeout": timeout, "token": token}


@main.command()
@click.argument("task_file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def submit(ctx, task_file):
    """Submit a task described by a JSON file; prints the assigned id."""
    try:
        with open(task_file, encoding="utf-8") as fh:
            spec = json.load(fh)
    except json.JSONDecodeError as exc:
        _die(f"{task_file} is not valid JSON: {exc}")
    try:
        click.echo(_client(ctx).create_task(spec))
    except ClientError as exc:
        _die(str(exc))


@main.command()
@click.argument("task_id")
@click.option("--view", default="FULL", show_default=True)
@click.pass_context
def get(ctx, task_id, view):
    """Print one task as JSON."""
    try:
        _print_json(_client(ctx).get_task(task_id, view=view))
    except ClientError as exc:
        _die(str(exc))


@main.command("list")
@click.option("--view", default="MINIMAL", show_default=True)
@click.option("--state", default=None)
@click.option("--name-prefix", default=None)
@click.option("--tag", "tag_pairs", multiple=True, help="KEY=VALUE; repeatable.")
@click.option("--page-size", type=int, default=None)
@click.option("--page-token", default=None)
@click.option("--all", "follow_all", is_flag=True, help="Follow pagination to the end.")
@click.pass_context
def list_command(ctx, view, state, name_prefix, tag_pairs, page_size, page_token, follow_all):
    """List tasks, optionally filtered."""
    tags = {}
    for pair in tag_pairs:
        key, _, value = pair.partition("=")
        tags[key] = value
    kwargs = dict(view=view, state=state, name_prefix=name_prefix, tags=tags, page_size=page_size)
    try:
        client = _client(ctx)
        if follow_all:
            _print_json({"tasks": client.list_all(**kwargs)})
        else:
            _print_json(client.list_tasks(page_token=page_token, **kwargs))
    except ClientError as exc:
        _die(str(exc))


@main.command()
@click.argument("task_id")
@click.pass_context
def cancel(ctx, task_id):
    """Cancel a task."""
    try:
        _print_json(_client(ctx).cancel_task(task_id))
    except ClientError as exc:
        _die(str(exc))


@main.command()
@click.argument("task_id")
@click.option("--timeout-s", default=300.0, show_default=True, help="Give up after this long.")
@click.option("--poll-interval-s", default=0.5, show_default=True)
@click.pass_context
def wait(ctx, task_id, timeout_s, poll_interval_s):
    """Poll until the task is terminal; exit 0 iff it completed."""
    try:
        state = _client(ctx).wait(task_id, timeout_s=timeout_s, poll_interval_s=poll_interval_s)
    except WaitTimeout as exc:
        _die(str(exc), code=2)
    except ClientError as exc:
        _die(str(exc))
    click.echo(state)
    sys.exit(0 if state == "COMPLETE" else 1)


@main.command("service-info")
@click.pass_context
def service_info(ctx):
    """Print the service capability document."""
    try:
        _print_json(_client(ctx).service_info())
    except ClientError as exc:
        _die(str(exc))


@click.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--pool-size", default=4, show_default=True, help="Concurrent task limit.")
@click.option("--cpu-cores", default=8, show_default=True, help="Schedulable cores.")
@click.option("--ram-gb", default=8.0, show_default=True, help="Schedulable RAM in GB.")
@click.option(
    "--adapter",
    type=click.Choice(["direct", "container"]),
    default="direct",
    show_default=True,
    help="How executor commands are launched.",
)
@click.option("--container-binary", default="docker", show_default=True)
@click.option("--sandbox-dir", default=None, help="Parent directory for task sandboxes.")
@click.option("--capture-limit", default=64 * 1024, show_default=True, help="stdout/stderr tail bytes.")
@click.option("--debug-retain", is_flag=True, help="Keep sandboxes after tasks finish.")
@click.option("--journal", default=None, help="Append-only journal file for crash recovery.")
@click.option("--auth-token", default=None, help="Require this static bearer token.")
@click.option("--path-prefix", is_flag=True, help="Serve under /ga4gh/tes/v1.")
def server_main(
    host,
    port,
    pool_size,
    cpu_cores,
    ram_gb,
    adapter,
    container_binary,
    sandbox_dir,
    capture_limit,
    debug_retain,
    journal,
    auth_token,
    path_prefix,
):
    """Run the task execution service in the foreground."""
    from .server import serve

    config = ServiceConfig(
        host=host,
        port=port,
        auth_token=auth_token,
        path_prefix=path_prefix,
        journal_path=journal,
        worker=WorkerConfig(
            pool_size=pool_size,
            cpu_cores=cpu_cores,
            ram_gb=ram_gb,
            adapter=adapter,
            container_binary=container_binary,
            sandbox_dir=sandbox_dir,
            capture_limit=capture_limit,
            debug_retain=debug_retain,
        ),
    )
    serve(config)
