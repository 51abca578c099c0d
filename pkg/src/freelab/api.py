"""HTTP surface: the UI-facing and apparatus-facing endpoint sets plus CSV
export, delegating to scheduler/store/identity and remaining byte-agnostic to
experiment payloads.

Handlers are stateless; all shared state lives behind the scheduler/store
contracts. Payload fields travel inside JSON envelopes as verbatim strings.
The server never initiates a connection to anything.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import socket
import threading
from dataclasses import replace
from pathlib import Path
from typing import Optional

import uvicorn
from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, RedirectResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .errors import (
    BindFailure,
    FreelabError,
    Forbidden,
    MalformedRequest,
    NotFound,
    Unauthorized,
    WrongApparatus,
)
from .identity import SESSION_COOKIE, IdentityService, authorize
from .model import (
    Apparatus,
    Execution,
    ExecutionStatus,
    Principal,
    Result,
    ResultKind,
    localized,
    rfc3339,
)
from .scheduler import Scheduler
from .store import Store

log = logging.getLogger(__name__)

_HTTP_STATUS = {
    "unauthorized": 401,
    "forbidden": 403,
    "wrong_apparatus": 403,
    "not_found": 404,
    "illegal_transition": 409,
    "busy": 409,
    "delete_refused": 409,
    "validation_failed": 422,
    "quota_exceeded": 429,
    "malformed_request": 400,
    "error": 500,
}


class ExecutionIn(BaseModel):
    apparatus_id: int
    protocol_id: int
    config: str


class ExecutionUpdateIn(BaseModel):
    config: str


class ResultIn(BaseModel):
    execution_id: int
    kind: ResultKind
    payload: str


class StatusIn(BaseModel):
    status: str


class LoginIn(BaseModel):
    username: str
    password: str


class AssertionIn(BaseModel):
    assertion: str


# ---------------------------------------------------------------------------
# JSON shapes
# ---------------------------------------------------------------------------


def _ts(value) -> Optional[str]:
    return rfc3339(value) if value is not None else None


def execution_json(e: Execution) -> dict:
    return {
        "id": e.id,
        "owner_id": e.owner_id,
        "apparatus_id": e.apparatus_id,
        "protocol_id": e.protocol_id,
        "config_payload": e.config_payload,
        "status": e.status.value,
        "created_at": _ts(e.created_at),
        "submitted_at": _ts(e.submitted_at),
        "started_at": _ts(e.started_at),
        "finished_at": _ts(e.finished_at),
    }


def result_json(r: Result) -> dict:
    return {
        "execution_id": r.execution_id,
        "seq": r.seq,
        "kind": r.kind.value,
        "payload": r.payload,
        "received_at": rfc3339(r.received_at),
    }


def principal_json(p: Principal) -> dict:
    return {
        "id": p.id,
        "username": p.username,
        "email": p.email,
        "display_name": p.display_name,
        "role": p.role.value,
        "provider": p.provider,
        "groups": sorted(p.groups),
    }


def apparatus_json(a: Apparatus) -> dict:
    """Apparatus record for its own agent; never includes the secret token."""
    return {
        "id": a.id,
        "apparatus_type_id": a.apparatus_type_id,
        "location": a.location,
        "protocol_ids": sorted(a.protocol_ids),
        "stream_url": a.stream_url,
        "last_heartbeat": _ts(a.last_heartbeat),
        "enabled": a.enabled,
    }


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------


def export_csv(store: Store, execution_id: int, actor: Principal) -> str:
    """Render the measurement table (the PARTIAL result stream) as CSV.

    When every payload parses as a flat JSON object of scalars the columns are
    seq,received_at,kind plus the union of payload keys in first-appearance
    order, absent keys empty. Otherwise a single raw payload column. RFC 4180
    quoting, UTF-8, LF line endings.
    """
    execution = store.get("execution", execution_id)
    if not authorize(actor, "execution:read", execution):
        raise Forbidden("not your execution")
    rows = [r for r in store.results_after(execution_id, 0) if r.kind == ResultKind.PARTIAL]

    parsed: list[dict] = []
    flat = True
    for row in rows:
        try:
            obj = json.loads(row.payload)
        except json.JSONDecodeError:
            flat = False
            break
        if not isinstance(obj, dict) or any(isinstance(v, (dict, list)) for v in obj.values()):
            flat = False
            break
        parsed.append(obj)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if flat:
        columns: list[str] = []
        for obj in parsed:
            for key in obj:
                if key not in columns:
                    columns.append(key)
        writer.writerow(["seq", "received_at", "kind"] + columns)
        for row, obj in zip(rows, parsed):
            writer.writerow(
                [row.seq, rfc3339(row.received_at), row.kind.value]
                + [_cell(obj[c]) if c in obj else "" for c in columns])
    else:
        writer.writerow(["seq", "received_at", "kind", "payload"])
        for row in rows:
            writer.writerow([row.seq, rfc3339(row.received_at), row.kind.value, row.payload])
    return buffer.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    return json.dumps(value)


# ---------------------------------------------------------------------------
# Application factory
# ---------------------------------------------------------------------------


def create_app(store: Store, scheduler: Optional[Scheduler] = None,
               identity: Optional[IdentityService] = None,
               static_dir: Optional[str] = None) -> FastAPI:
    scheduler = scheduler or Scheduler(store, clock=store.clock)
    identity = identity or IdentityService(store, clock=store.clock)
    app = FastAPI(title="freelab", docs_url=None, redoc_url=None, openapi_url=None)
    app.state.store = store
    app.state.scheduler = scheduler
    app.state.identity = identity

    @app.exception_handler(FreelabError)
    async def _domain_error(request: Request, exc: FreelabError):
        body = {"code": exc.code, "message": str(exc)}
        if hasattr(exc, "report"):
            body["errors"] = [
                {"field": e.field, "message": e.message} for e in exc.report.errors]
        return JSONResponse(status_code=_HTTP_STATUS.get(exc.code, 500), content=body)

    @app.exception_handler(RequestValidationError)
    async def _malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"code": "malformed_request", "message": str(exc.errors()[:3])})

    @app.middleware("http")
    async def _access_log(request: Request, call_next):
        response = await call_next(request)
        log.info("%s %s -> %d principal=%s", request.method, request.url.path,
                 response.status_code, getattr(request.state, "principal_name", "-"))
        return response

    # -- auth helpers ---------------------------------------------------------

    def _bearer(request: Request) -> Optional[str]:
        header = request.headers.get("authorization", "")
        if header.lower().startswith("bearer "):
            return header[7:].strip()
        return None

    def session_principal(request: Request) -> Principal:
        token = _bearer(request) or request.cookies.get(SESSION_COOKIE)
        if not token:
            raise Unauthorized("missing session")
        principal = identity.authenticate(token)
        request.state.principal_name = principal.username
        return principal

    def bearer_apparatus(request: Request) -> Apparatus:
        token = _bearer(request)
        if not token:
            raise Unauthorized("missing apparatus token")
        apparatus = store.find("apparatus", lambda a: a.secret_token == token)
        if apparatus is None:
            raise Unauthorized("unknown apparatus token")
        request.state.principal_name = f"apparatus:{apparatus.id}"
        return apparatus

    def own_execution(request: Request, execution_id: int, action: str) -> tuple[Principal, Execution]:
        principal = session_principal(request)
        execution = store.get("execution", execution_id)
        if not authorize(principal, action, execution):
            raise Forbidden("not your execution")
        return principal, execution

    # -- identity routes --------------------------------------------------------

    @app.post("/login")
    def login(body: LoginIn, request: Request):
        session = identity.login_local(body.username, body.password)
        principal = store.get("principal", session.principal_id)
        response = JSONResponse(
            {"token": session.token, "principal": principal_json(principal)})
        response.set_cookie(SESSION_COOKIE, session.token, httponly=True)
        return response

    @app.post("/logout")
    def logout(request: Request):
        token = _bearer(request) or request.cookies.get(SESSION_COOKIE)
        if token:
            identity.logout(token)
        response = JSONResponse({"ok": True})
        response.delete_cookie(SESSION_COOKIE)
        return response

    @app.get("/me")
    def me(request: Request):
        return principal_json(session_principal(request))

    @app.get("/providers")
    def providers():
        return {"providers": sorted(identity.providers)}

    @app.post("/auth/{provider_id}")
    def provider_login(provider_id: str, body: AssertionIn):
        session = identity.external_login(provider_id, body.assertion)
        principal = store.get("principal", session.principal_id)
        response = JSONResponse(
            {"token": session.token, "principal": principal_json(principal)})
        response.set_cookie(SESSION_COOKIE, session.token, httponly=True)
        return response

    @app.post("/lti/launch")
    async def lti_launch(request: Request):
        form = await request.form()
        url = str(request.url).split("?", 1)[0]
        session, target = identity.lti_launch(dict(form), url, request.method)
        response = RedirectResponse(target, status_code=303)
        response.set_cookie(SESSION_COOKIE, session.token, httponly=True)
        return response

    # -- UI set (session-authenticated) -------------------------------------------

    @app.post("/execution", status_code=201)
    def create_execution(body: ExecutionIn, request: Request):
        principal = session_principal(request)
        store.get("apparatus", body.apparatus_id)
        protocol = store.get("protocol", body.protocol_id)
        if not authorize(principal, "execution:create", protocol):
            raise Forbidden("protocol not accessible to this user")
        execution = store.put(Execution(
            owner_id=principal.id,
            apparatus_id=body.apparatus_id,
            protocol_id=body.protocol_id,
            config_payload=body.config,
            created_at=store.clock(),
        ))
        return execution_json(execution)

    @app.get("/execution/{execution_id}")
    def read_execution(execution_id: int, request: Request):
        _, execution = own_execution(request, execution_id, "execution:read")
        return execution_json(execution)

    @app.put("/execution/{execution_id}")
    def update_execution(execution_id: int, body: ExecutionUpdateIn, request: Request):
        _, execution = own_execution(request, execution_id, "execution:update")
        if execution.status != ExecutionStatus.DRAFT:
            raise MalformedRequest(
                f"only DRAFT executions can be updated; this one is {execution.status.value}")
        updated = store.put(replace(execution, config_payload=body.config))
        return execution_json(updated)

    @app.delete("/execution/{execution_id}")
    def delete_execution(execution_id: int, request: Request):
        own_execution(request, execution_id, "execution:delete")
        return store.delete("execution", execution_id)

    @app.get("/execution/{execution_id}/result")
    def all_results(execution_id: int, request: Request):
        own_execution(request, execution_id, "execution:read")
        return [result_json(r) for r in store.results_after(execution_id, 0)]

    @app.get("/execution/{execution_id}/result/{last_seq}")
    def results_after(execution_id: int, last_seq: int, request: Request):
        own_execution(request, execution_id, "execution:read")
        return [result_json(r) for r in store.results_after(execution_id, last_seq)]

    @app.put("/execution/{execution_id}/start")
    def start_execution(execution_id: int, request: Request):
        principal, _ = own_execution(request, execution_id, "execution:submit")
        return execution_json(scheduler.submit(execution_id, principal))

    @app.get("/execution/{execution_id}/status")
    def execution_status(execution_id: int, request: Request):
        principal = session_principal(request)
        return {"status": scheduler.status_of(execution_id, principal).value}

    @app.get("/execution/{execution_id}/results.csv")
    def results_csv(execution_id: int, request: Request):
        principal = session_principal(request)
        document = export_csv(store, execution_id, principal)
        return Response(
            content=document,
            media_type="text/csv; charset=utf-8",
            headers={"Content-Disposition":
                     f'attachment; filename="execution-{execution_id}.csv"'})

    @app.get("/apparatus")
    def catalog():
        """Public catalog: names, protocols, liveness and stream URL — no tokens."""
        entries = []
        for apparatus in store.list("apparatus", lambda a: a.enabled):
            atype = store.get("apparatus_type", apparatus.apparatus_type_id)
            protocols = [store.get("protocol", pid) for pid in sorted(apparatus.protocol_ids)]
            entries.append({
                "id": apparatus.id,
                "names": atype.names,
                "display_name": localized(atype.names),
                "description": atype.description,
                "location": apparatus.location,
                "liveness": scheduler.liveness_of(apparatus).value,
                "stream_url": apparatus.stream_url,
                "protocols": [{
                    "id": p.id,
                    "names": p.names,
                    "display_name": localized(p.names),
                    "description": p.description,
                    "config_schema": p.config_schema,
                    "ui_plugin": p.ui_plugin,
                } for p in protocols],
            })
        return entries

    # -- apparatus set (bearer-token-authenticated) ---------------------------------

    @app.put("/execution/{execution_id}/status")
    def apply_status(execution_id: int, body: StatusIn, request: Request):
        apparatus = bearer_apparatus(request)
        try:
            target = ExecutionStatus(body.status)
        except ValueError:
            raise MalformedRequest(f"unknown status {body.status!r}") from None
        try:
            updated = scheduler.apply_status(
                apparatus.id, apparatus.secret_token, execution_id, target)
        except ValueError as exc:
            raise MalformedRequest(str(exc)) from None
        return execution_json(updated)

    @app.put("/apparatus/{apparatus_id}/heartbeat")
    def heartbeat(apparatus_id: int, request: Request):
        apparatus = bearer_apparatus(request)
        if apparatus.id != apparatus_id:
            raise WrongApparatus(f"token belongs to apparatus {apparatus.id}")
        state = scheduler.heartbeat(apparatus_id, apparatus.secret_token)
        return {"liveness": state.value}

    @app.get("/apparatus/{apparatus_id}/nextexecution")
    def next_execution(apparatus_id: int, request: Request):
        apparatus = bearer_apparatus(request)
        if apparatus.id != apparatus_id:
            raise WrongApparatus(f"token belongs to apparatus {apparatus.id}")
        delivery = scheduler.pull_next(apparatus_id, apparatus.secret_token)
        if delivery is None:
            return Response(status_code=204)
        return {
            "execution_id": delivery.execution_id,
            "protocol_id": delivery.protocol_id,
            "config_payload": delivery.config_payload,
        }

    @app.post("/result", status_code=201)
    def post_result(body: ResultIn, request: Request):
        apparatus = bearer_apparatus(request)
        execution = store.get("execution", body.execution_id)
        if execution.apparatus_id != apparatus.id:
            raise WrongApparatus(
                f"execution {body.execution_id} belongs to apparatus {execution.apparatus_id}")
        result = store.append_result(body.execution_id, body.kind, body.payload)
        return {"seq": result.seq}

    @app.get("/apparatus/{apparatus_id}/queue")
    def waiting_queue(apparatus_id: int, request: Request):
        apparatus = bearer_apparatus(request)
        if apparatus.id != apparatus_id:
            raise WrongApparatus(f"token belongs to apparatus {apparatus.id}")
        return [{
            "id": e.id,
            "protocol_id": e.protocol_id,
            "submitted_at": _ts(e.submitted_at),
        } for e in store.waiting_queue(apparatus_id)]

    @app.get("/apparatus/{apparatus_id}")
    def apparatus_info(apparatus_id: int, request: Request):
        apparatus = bearer_apparatus(request)
        if apparatus.id != apparatus_id:
            raise WrongApparatus(f"token belongs to apparatus {apparatus.id}")
        return apparatus_json(apparatus)

    # -- static portal -----------------------------------------------------------

    if static_dir and Path(static_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=static_dir, html=True), name="ui")

        @app.get("/")
        def index():
            return RedirectResponse("/ui/")

    return app


# ---------------------------------------------------------------------------
# Serving
# ---------------------------------------------------------------------------


class ServerHandle:
    """A running service; stop() shuts it down and joins the worker thread."""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread,
                 host: str, port: int):
        self._server = server
        self._thread = thread
        self.host = host
        self.port = port
        self.base_url = f"http://{host}:{port}"

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)


def serve(bind_address: str, store: Store,
          scheduler: Optional[Scheduler] = None,
          identity: Optional[IdentityService] = None,
          static_dir: Optional[str] = None,
          log_level: str = "warning") -> ServerHandle:
    """Bind and serve the API in a background thread; raises BindFailure when
    the address cannot be bound. ``host:port`` with port 0 picks a free port."""
    host, _, port_text = bind_address.partition(":")
    try:
        port = int(port_text)
    except ValueError:
        raise BindFailure(f"unusable bind address {bind_address!r}") from None
    app = create_app(store, scheduler=scheduler, identity=identity, static_dir=static_dir)

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot bind {bind_address}: {exc}") from None
    sock.listen(128)
    actual_port = sock.getsockname()[1]

    config = uvicorn.Config(app, host=host, port=actual_port, log_level=log_level,
                            access_log=False)
    server = uvicorn.Server(config)
    thread = threading.Thread(
        target=server.run, kwargs={"sockets": [sock]}, daemon=True,
        name=f"freelab-serve-{actual_port}")
    thread.start()
    while not server.started:
        if not thread.is_alive():
            raise BindFailure(f"server failed to start on {bind_address}")
        thread.join(timeout=0.01)
    return ServerHandle(server, thread, host, actual_port)
