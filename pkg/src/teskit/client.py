"""HTTP client library mirroring the five task endpoints plus wait().

All states and ids in results are echoed from server responses; the
client never fabricates either.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Optional
from urllib.parse import urlparse

import requests

from .model import TERMINAL_STATES

_TERMINAL_NAMES = {state.value for state in TERMINAL_STATES}


class ClientError(Exception):
    """Transport failure or an error response from the server."""

    def __init__(self, message: str, status: Optional[int] = None):
        self.status = status
        super().__init__(message)


class WaitTimeout(ClientError):
    """The task did not reach a terminal state within the allotted time."""


@dataclass(frozen=True)
class ClientConfig:
    base_url: str
    timeout_s: float = 30.0
    token: Optional[str] = None

    def __post_init__(self):
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"base_url must be an http(s) URL, got {self.base_url!r}")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


class TesClient:
    """Thin JSON client for one task execution service endpoint."""

    def __init__(self, base_url: str, timeout_s: float = 30.0, token: Optional[str] = None):
        self.config = ClientConfig(base_url=base_url.rstrip("/"), timeout_s=timeout_s, token=token)
        self._session = requests.Session()
        if token:
            self._session.headers["Authorization"] = f"Bearer {token}"

    def _request(self, method: str, path: str, params=None, body=None) -> Any:
        url = self.config.base_url + path
        try:
            response = self._session.request(
                method, url, params=params, json=body, timeout=self.config.timeout_s
            )
        except requests.RequestException as exc:
            raise ClientError(f"transport error: {exc}") from exc
        try:
            data = response.json()
        except ValueError:
            data = None
        if response.status_code >= 400:
            message = (data or {}).get("message") if isinstance(data, dict) else None
            raise ClientError(
                message or f"{method} {path} failed with {response.status_code}",
                status=response.status_code,
            )
        return data

    # -- endpoint surface ---------------------------------------------------

    def create_task(self, spec: dict) -> str:
        return self._request("POST", "/tasks", body=spec)["id"]

    def get_task(self, task_id: str, view: str = "MINIMAL") -> dict:
        return self._request("GET", f"/tasks/{task_id}", params={"view": view})

    def list_tasks(
        self,
        view: str = "MINIMAL",
        page_size: Optional[int] = None,
        page_token: Optional[str] = None,
        state: Optional[str] = None,
        name_prefix: Optional[str] = None,
        tags: Optional[dict[str, str]] = None,
    ) -> dict:
        params: list[tuple[str, str]] = [("view", view)]
        if page_size is not None:
            params.append(("page_size", str(page_size)))
        if page_token is not None:
            params.append(("page_token", page_token))
        if state is not None:
            params.append(("state", state))
        if name_prefix is not None:
            params.append(("name_prefix", name_prefix))
        for key, value in (tags or {}).items():
            params.append(("tag_key", key))
            params.append(("tag_value", value))
        return self._request("GET", "/tasks", params=params)

    def list_all(self, **kwargs) -> list[dict]:
        """Follow pagination until exhausted; returns the merged task list."""
        kwargs.pop("page_token", None)
        tasks: list[dict] = []
        token = None
        while True:
            page = self.list_tasks(page_token=token, **kwargs)
            tasks.extend(page.get("tasks", []))
            token = page.get("next_page_token")
            if token is None:
                return tasks

    def cancel_task(self, task_id: str) -> dict:
        return self._request("POST", f"/tasks/{task_id}:cancel")

    def service_info(self) -> dict:
        return self._request("GET", "/service-info")

    def wait(self, task_id: str, timeout_s: float = 300.0, poll_interval_s: float = 0.5) -> str:
        """Poll until the task is terminal; returns the final state."""
        deadline = time.monotonic() + timeout_s
        while True:
            state = self.get_task(task_id, view="MINIMAL")["state"]
            if state in _TERMINAL_NAMES:
                return state
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise WaitTimeout(f"task {task_id} still {state} after {timeout_s}s")
            time.sleep(min(poll_interval_s, remaining))
