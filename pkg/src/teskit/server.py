"""HTTP endpoint surface.

Five JSON endpoints over the store and worker: POST /tasks,
GET /tasks, GET /tasks/{id}, POST /tasks/{id}:cancel, and
GET /service-info. Every error response carries ``{message, status}``
with status mirroring the HTTP status code.
"""

from __future__ import annotations

import json
from contextlib import asynccontextmanager
from typing import Optional

import uvicorn
from fastapi import APIRouter, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import __version__
from .config import ServiceConfig
from .model import TaskState, TaskView, WireFormatError, spec_from_wire, task_to_wire
from .staging import ProtocolRegistry, default_registry, supported_protocols
from .store import InvalidPageToken, ListFilter, NotFound, TaskStore, ValidationFailed
from .worker import Worker

API_PREFIX = "/ga4gh/tes/v1"
API_TYPE = {"group": "org.ga4gh", "artifact": "tes", "version": "1.1.0"}


def _parse_view(raw: Optional[str]) -> TaskView:
    if raw is None:
        return TaskView.MINIMAL
    try:
        return TaskView(raw)
    except ValueError:
        raise HTTPException(400, f"unknown view {raw!r}")


def build_app(
    config: Optional[ServiceConfig] = None,
    registry: Optional[ProtocolRegistry] = None,
    store: Optional[TaskStore] = None,
) -> FastAPI:
    """Wire the registry, store, and worker into a FastAPI application.

    The worker's scheduler runs for the lifetime of the application and
    is stopped (canceling in-flight tasks) on shutdown.
    """
    config = config or ServiceConfig()
    registry = registry if registry is not None else default_registry()
    store = store or TaskStore(
        journal_path=config.journal_path, capture_limit=config.worker.capture_limit
    )
    worker = Worker(store, registry, config.worker)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        worker.start()
        try:
            yield
        finally:
            worker.stop()

    app = FastAPI(
        title=config.service_name,
        lifespan=lifespan,
        docs_url=None,
        redoc_url=None,
        openapi_url=None,
    )
    app.state.config = config
    app.state.registry = registry
    app.state.store = store
    app.state.worker = worker

    if config.auth_token is not None:
        expected = f"Bearer {config.auth_token}"

        @app.middleware("http")
        async def check_bearer_token(request: Request, call_next):
            if request.headers.get("authorization") != expected:
                return JSONResponse({"message": "unauthorized", "status": 401}, status_code=401)
            return await call_next(request)

    router = APIRouter(prefix=API_PREFIX if config.path_prefix else "")

    @router.post("/tasks")
    async def create_task(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise HTTPException(400, "request body is not valid JSON")
        try:
            spec = spec_from_wire(body)
            task_id = store.create_task(spec)
        except (WireFormatError, ValidationFailed) as exc:
            raise HTTPException(400, str(exc))
        return {"id": task_id}

    @router.get("/tasks")
    async def list_tasks(request: Request):
        params = request.query_params
        view = _parse_view(params.get("view"))

        page_size = None
        if params.get("page_size") is not None:
            try:
                page_size = int(params["page_size"])
            except ValueError:
                raise HTTPException(400, "page_size must be an integer")
            if page_size < 1:
                raise HTTPException(400, "page_size must be >= 1")

        state = None
        if params.get("state") is not None:
            try:
                state = TaskState(params["state"])
            except ValueError:
                raise HTTPException(400, f"unknown state {params['state']!r}")

        tag_keys = params.getlist("tag_key")
        tag_values = params.getlist("tag_value")
        if len(tag_keys) != len(tag_values):
            raise HTTPException(400, "tag_key and tag_value counts must match")

        list_filter = ListFilter(
            state=state,
            name_prefix=params.get("name_prefix"),
            tags=dict(zip(tag_keys, tag_values)),
        )
        try:
            page = store.list_tasks(
                list_filter,
                page_size=page_size,
                page_token=params.get("page_token"),
                view=view,
            )
        except InvalidPageToken as exc:
            raise HTTPException(400, str(exc))
        body = {"tasks": [task_to_wire(t) for t in page.items]}
        if page.next_page_token is not None:
            body["next_page_token"] = page.next_page_token
        return body

    @router.get("/tasks/{task_id}")
    async def get_task(task_id: str, request: Request):
        view = _parse_view(request.query_params.get("view"))
        try:
            task = store.get_task(task_id, view)
        except NotFound as exc:
            raise HTTPException(404, str(exc))
        return task_to_wire(task)

    @router.post("/tasks/{task_id}:cancel")
    async def cancel_task(task_id: str):
        try:
            worker.cancel_task(task_id)
        except NotFound as exc:
            raise HTTPException(404, str(exc))
        return {}

    @router.get("/service-info")
    async def service_info():
        return {
            "id": config.service_id,
            "name": config.service_name,
            "description": config.service_description,
            "type": dict(API_TYPE),
            "storage": supported_protocols(registry),
            "version": __version__,
        }

    app.include_router(router)

    @app.exception_handler(StarletteHTTPException)
    async def http_error(request: Request, exc: StarletteHTTPException):
        return JSONResponse(
            {"message": str(exc.detail), "status": exc.status_code}, status_code=exc.status_code
        )

    @app.exception_handler(RequestValidationError)
    async def request_error(request: Request, exc: RequestValidationError):
        return JSONResponse({"message": str(exc), "status": 400}, status_code=400)

    @app.exception_handler(Exception)
    async def unhandled_error(request: Request, exc: Exception):
        return JSONResponse(
            {"message": f"internal error: {exc}", "status": 500}, status_code=500
        )

    return app


def serve(config: Optional[ServiceConfig] = None) -> None:
    """Run the service in the foreground until interrupted."""
    config = config or ServiceConfig()
    uvicorn.run(build_app(config), host=config.host, port=config.port, log_level="info")
