"""Runtime configuration for the worker pool and the HTTP service."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

DEFAULT_CAPTURE_LIMIT = 64 * 1024


@dataclass
class WorkerConfig:
    pool_size: int = 4
    cpu_cores: int = 8
    ram_gb: float = 8.0
    adapter: str = "direct"  # "direct" or "container"
    container_binary: str = "docker"
    sandbox_dir: Optional[str] = None  # default: <tempdir>/tes-sandboxes
    capture_limit: int = DEFAULT_CAPTURE_LIMIT
    debug_retain: bool = False  # keep sandboxes after finalization
    poll_interval_s: float = 0.25
    cancel_grace_s: float = 5.0


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    service_id: str = "org.example.teskit"
    service_name: str = "teskit"
    service_description: str = "Self-contained batch task execution service"
    auth_token: Optional[str] = None  # static bearer token; None disables auth
    path_prefix: bool = False  # serve under /ga4gh/tes/v1 instead of /
    journal_path: Optional[str] = None
    worker: WorkerConfig = field(default_factory=WorkerConfig)
