"""File staging over URL schemes.

A protocol-handler registry resolves input/output URLs to bytes. The
``file`` and ``http(s)`` handlers ship here; ``s3`` and ``ftp`` are
recognized schemes without handlers, registered by third parties via
:meth:`ProtocolRegistry.register`. Task paths are re-rooted under the
per-task sandbox directory, so staging never touches the host
filesystem outside that root.
"""

from __future__ import annotations

import os
import posixpath
import re
import shutil
import time
from dataclasses import dataclass
from pathlib import PurePosixPath
from typing import Optional

import requests

from .model import IOKind, IOParameter, OutputFileLog

_SCHEME_RE = re.compile(r"[a-z][a-z0-9+.\-]*\Z")


class StagingError(Exception):
    """Base class for staging failures; the worker maps these to SYSTEM_ERROR."""


class UnparsableUrl(StagingError):
    """The string is neither a scheme://... URL nor an absolute path."""


class UnsupportedProtocol(StagingError):
    """No registered handler covers the URL's scheme (or the direction)."""


class SourceNotFound(StagingError):
    """The input URL resolved but named nothing."""


class TransferFailed(StagingError):
    """The transfer itself failed (network, IO, protocol limits)."""


class MissingOutput(StagingError):
    """A declared output path does not exist after execution."""


@dataclass(frozen=True)
class StorageUrl:
    """A storage URL split into a lowercase scheme and its remainder."""

    scheme: str
    remainder: str

    def render(self) -> str:
        return f"{self.scheme}://{self.remainder}"

    def join(self, relative: str) -> "StorageUrl":
        return StorageUrl(self.scheme, self.remainder.rstrip("/") + "/" + relative)


def parse_storage_url(raw: str) -> StorageUrl:
    """Split at the first ``://``; bare absolute paths mean scheme ``file``."""
    if "://" in raw:
        scheme, _, remainder = raw.partition("://")
        scheme = scheme.lower()
        if not _SCHEME_RE.match(scheme):
            raise UnparsableUrl(f"invalid scheme in {raw!r}")
        return StorageUrl(scheme, remainder)
    if raw.startswith("/"):
        return StorageUrl("file", raw)
    raise UnparsableUrl(f"not a URL and not an absolute path: {raw!r}")


def map_task_path(sandbox_root: str, task_path: str) -> str:
    """Re-root an absolute task path under the sandbox root.

    Rejects relative paths and any path carrying ``..`` segments, so a
    mapped path can never climb out of the sandbox.
    """
    if not task_path.startswith("/"):
        raise StagingError(f"task path must be absolute: {task_path!r}")
    if ".." in PurePosixPath(task_path).parts:
        raise StagingError(f"task path may not contain '..': {task_path!r}")
    normalized = posixpath.normpath(task_path)
    mapped = os.path.normpath(os.path.join(sandbox_root, normalized.lstrip("/")))
    root = os.path.abspath(sandbox_root)
    if mapped != root and not mapped.startswith(root + os.sep):
        raise StagingError(f"task path escapes the sandbox: {task_path!r}")
    return mapped


class ProtocolHandler:
    """Transfers bytes for one URL scheme.

    Subclasses set ``scheme`` and the read/write capability flags and
    implement the fetch/store primitives they support.
    """

    scheme: str = ""
    can_read: bool = False
    can_write: bool = False

    def fetch_file(self, url: StorageUrl, dest: str) -> None:
        raise TransferFailed(f"{self.scheme} does not support file reads")

    def fetch_tree(self, url: StorageUrl, dest: str) -> None:
        raise TransferFailed(f"{self.scheme} does not support directory reads")

    def store_file(self, src: str, url: StorageUrl) -> None:
        raise TransferFailed(f"{self.scheme} does not support writes")


class FileHandler(ProtocolHandler):
    """Local filesystem transfers for ``file://`` URLs and bare paths."""

    scheme = "file"
    can_read = True
    can_write = True

    @staticmethod
    def _source_path(url: StorageUrl) -> str:
        if not url.remainder.startswith("/"):
            raise TransferFailed(f"file URLs must carry an absolute path: {url.render()!r}")
        return url.remainder

    def fetch_file(self, url: StorageUrl, dest: str) -> None:
        src = self._source_path(url)
        if not os.path.isfile(src):
            raise SourceNotFound(url.render())
        shutil.copyfile(src, dest)

    def fetch_tree(self, url: StorageUrl, dest: str) -> None:
        src = self._source_path(url)
        if not os.path.isdir(src):
            raise SourceNotFound(url.render())
        shutil.copytree(src, dest, dirs_exist_ok=True)

    def store_file(self, src: str, url: StorageUrl) -> None:
        dest = self._source_path(url)
        os.makedirs(os.path.dirname(dest) or "/", exist_ok=True)
        shutil.copyfile(src, dest)


class HttpHandler(ProtocolHandler):
    """HTTP(S) transfers: GET for inputs (200 required), PUT for outputs
    (2xx required). Network errors and 5xx responses are retried up to 3
    attempts with 500 ms linear backoff; directories cannot be fetched.
    """

    can_read = True
    can_write = True
    attempts = 3
    backoff_s = 0.5

    def __init__(self, scheme: str = "http", verify: bool = True, timeout_s: float = 60.0):
        self.scheme = scheme
        self.verify = verify
        self.timeout_s = timeout_s

    def _attempt(self, send):
        last_error: Optional[Exception] = None
        for attempt in range(1, self.attempts + 1):
            try:
                response = send()
            except requests.RequestException as exc:
                last_error = TransferFailed(str(exc))
            else:
                if response.status_code >= 500:
                    last_error = TransferFailed(
                        f"server error {response.status_code} from {response.url}"
                    )
                else:
                    return response
            if attempt < self.attempts:
                time.sleep(self.backoff_s * attempt)
        raise last_error

    def fetch_file(self, url: StorageUrl, dest: str) -> None:
        full = url.render()
        response = self._attempt(
            lambda: requests.get(full, stream=True, timeout=self.timeout_s, verify=self.verify)
        )
        with response:
            if response.status_code == 404:
                raise SourceNotFound(full)
            if response.status_code != 200:
                raise TransferFailed(f"GET {full} returned {response.status_code}")
            with open(dest, "wb") as fh:
                for chunk in response.iter_content(64 * 1024):
                    fh.write(chunk)

    def store_file(self, src: str, url: StorageUrl) -> None:
        full = url.render()

        def send():
            with open(src, "rb") as fh:
                return requests.put(full, data=fh, timeout=self.timeout_s, verify=self.verify)

        response = self._attempt(send)
        if not 200 <= response.status_code < 300:
            raise TransferFailed(f"PUT {full} returned {response.status_code}")


class ProtocolRegistry:
    """Maps URL schemes to handlers; the service-info storage list and
    staging both consult the same registry, so they cannot drift apart."""

    def __init__(self):
        self._handlers: dict[str, ProtocolHandler] = {}

    def register(self, handler: ProtocolHandler) -> None:
        self._handlers[handler.scheme] = handler

    def get(self, scheme: str) -> ProtocolHandler:
        handler = self._handlers.get(scheme)
        if handler is None:
            raise UnsupportedProtocol(f"no handler registered for scheme {scheme!r}")
        return handler

    def schemes(self) -> list[str]:
        return sorted(self._handlers)


def default_registry(verify_tls: bool = True) -> ProtocolRegistry:
    registry = ProtocolRegistry()
    registry.register(FileHandler())
    registry.register(HttpHandler("http"))
    registry.register(HttpHandler("https", verify=verify_tls))
    return registry


def supported_protocols(registry: ProtocolRegistry) -> list[str]:
    """Sorted, deduplicated schemes of all registered handlers."""
    return registry.schemes()


def _tree_size(root: str) -> int:
    total = 0
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            total += os.path.getsize(os.path.join(dirpath, name))
    return total


def stage_input(registry: ProtocolRegistry, param: IOParameter, sandbox_root: str) -> int:
    """Materialize one input under the sandbox; returns bytes staged."""
    dest = map_task_path(sandbox_root, param.path)
    os.makedirs(os.path.dirname(dest), exist_ok=True)

    if param.content is not None:
        data = param.content.encode("utf-8")
        with open(dest, "wb") as fh:
            fh.write(data)
        return len(data)

    url = parse_storage_url(param.url)
    handler = registry.get(url.scheme)
    if not handler.can_read:
        raise UnsupportedProtocol(f"{url.scheme} handler does not support reads")
    if param.kind is IOKind.DIRECTORY:
        handler.fetch_tree(url, dest)
        return _tree_size(dest)
    handler.fetch_file(url, dest)
    return os.path.getsize(dest)


def stage_output(
    registry: ProtocolRegistry, param: IOParameter, sandbox_root: str
) -> list[OutputFileLog]:
    """Upload one declared output; returns a log entry per file stored."""
    src = map_task_path(sandbox_root, param.path)
    url = parse_storage_url(param.url)
    handler = registry.get(url.scheme)
    if not handler.can_write:
        raise UnsupportedProtocol(f"{url.scheme} handler does not support writes")

    if not os.path.exists(src):
        raise MissingOutput(f"declared output {param.path!r} was not created")

    if param.kind is IOKind.FILE:
        if not os.path.isfile(src):
            raise MissingOutput(f"declared output {param.path!r} is not a regular file")
        handler.store_file(src, url)
        return [OutputFileLog(url=url.render(), path=param.path, size_bytes=os.path.getsize(src))]

    if not os.path.isdir(src):
        raise MissingOutput(f"declared output {param.path!r} is not a directory")
    entries = []
    for dirpath, _, filenames in os.walk(src):
        for name in sorted(filenames):
            host_file = os.path.join(dirpath, name)
            relative = os.path.relpath(host_file, src)
            dest_url = url.join(relative)
            handler.store_file(host_file, dest_url)
            entries.append(
                OutputFileLog(
                    url=dest_url.render(),
                    path=posixpath.join(param.path, relative),
                    size_bytes=os.path.getsize(host_file),
                )
            )
    return entries
