"""HTTP/JSON facade over the registry, aggregator and control engine.

Every endpoint except login demands ``Authorization: Bearer <token>``.
Responses are JSON; Unknown values travel as null.  The service can also
serve a directory of static dashboard assets for non-/api paths.

Command scope ``all`` is disabled unless explicitly configured: running
a typo'd command across the entire fleet is the one obvious way to ruin
an afternoon, so fleet-wide control is opt-in.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlparse

from . import auth, control, registry as registry_mod
from .aggregator import Aggregator, BadScope, BadWindow, parse_scope
from .control import ControlEngine, ExecutionMode
from .registry import INITIAL

log = logging.getLogger(__name__)

CPU_AMBER_AT = 50.0   # percent busy; below is green
CPU_RED_ABOVE = 80.0
NET_AMBER_AT = 1e6    # bytes/s in+out
NET_RED_ABOVE = 1e7


class ApiError(Exception):
    status = 400
    code = "bad_request"

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.code)
        self.detail = detail or self.code


class Unauthorized(ApiError):
    status = 401
    code = "unauthorized"


class AllScopeDisabled(ApiError):
    status = 403
    code = "all_scope_disabled"


class NotFound(ApiError):
    status = 404
    code = "not_found"


@dataclass
class ApiConfig:
    listen: tuple[str, int] = ("127.0.0.1", 0)
    credentials_path: str | None = None
    default_username: str = "admin"
    default_password: str = "admin"
    allow_all_scope: bool = False
    cpu_amber_at: float = CPU_AMBER_AT
    cpu_red_above: float = CPU_RED_ABOVE
    net_amber_at: float = NET_AMBER_AT
    net_red_above: float = NET_RED_ABOVE
    rack_layout: list[tuple[int, int, str]] | None = None
    palette_path: str | None = None
    static_dir: str | None = None
    session_ttl: float = auth.SESSION_TTL


def classify(value: float | None, amber_at: float, red_above: float) -> str:
    if value is None:
        return "unknown"
    if value < amber_at:
        return "green"
    if value > red_above:
        return "red"
    return "amber"


# maps domain exceptions to (status, error-code) pairs
_ERROR_MAP: list[tuple[type, int, str]] = [
    (auth.Throttled, 429, "throttled"),
    (auth.InvalidCredentials, 401, "invalid_credentials"),
    (auth.WeakPassword, 400, "weak_password"),
    (registry_mod.ReservedName, 400, "reserved_name"),
    (registry_mod.InvalidName, 400, "invalid_name"),
    (registry_mod.DuplicateName, 409, "duplicate_name"),
    (registry_mod.AlreadyMember, 409, "already_member"),
    (registry_mod.NotAMember, 404, "not_a_member"),
    (registry_mod.UnknownCloudlet, 404, "unknown_cloudlet"),
    (registry_mod.UnknownHost, 404, "unknown_host"),
    (registry_mod.RegistryError, 400, "registry_error"),
    (control.UnknownJob, 404, "unknown_job"),
    (control.EmptyTargets, 400, "empty_targets"),
    (control.EmptyCommand, 400, "empty_command"),
    (control.ControlError, 400, "control_error"),
    (BadScope, 400, "bad_scope"),
    (BadWindow, 400, "bad_window"),
]


class ApiService:
    def __init__(self, aggregator: Aggregator, engine: ControlEngine, config: ApiConfig | None = None):
        self.aggregator = aggregator
        self.engine = engine
        self.config = config or ApiConfig()
        self.credentials = auth.CredentialStore(self.config.credentials_path)
        if self.credentials.ensure_user(self.config.default_username, self.config.default_password):
            log.warning(
                "created default administrator %r with the default password; change it",
                self.config.default_username,
            )
        self.sessions = auth.SessionManager(ttl=self.config.session_ttl)
        self.throttle = auth.LoginThrottle()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self.address: tuple[str, int] | None = None

    # -- endpoint bodies -----------------------------------------------------

    def login(self, source: str, username: str, password: str) -> dict:
        self.throttle.check(source)
        if not self.credentials.verify(username, password):
            self.throttle.record_failure(source)
            raise auth.InvalidCredentials("invalid credentials")
        token, expires_at = self.sessions.create(username)
        return {"token": token, "expires_at": expires_at}

    def change_password(self, token: str, username: str, old: str, new: str) -> dict:
        if not self.credentials.verify(username, old):
            raise auth.InvalidCredentials("invalid credentials")
        self.credentials.set_password(username, new)
        revoked = self.sessions.invalidate_all_except(token)
        return {"ok": True, "revoked_sessions": revoked}

    def host_status(self, hostname: str) -> dict:
        agg = self.aggregator
        idle = agg.latest_value(hostname, "cpu_idle")
        busy = None if idle is None else 100.0 - idle
        bytes_in = agg.latest_value(hostname, "bytes_in")
        bytes_out = agg.latest_value(hostname, "bytes_out")
        net = None
        if bytes_in is not None or bytes_out is not None:
            net = (bytes_in or 0.0) + (bytes_out or 0.0)
        return {
            "hostname": hostname,
            "up": agg.is_up(hostname),
            "cpu_class": classify(busy, self.config.cpu_amber_at, self.config.cpu_red_above),
            "net_class": classify(net, self.config.net_amber_at, self.config.net_red_above),
            "cloudlet": agg.registry.member_of(hostname) or INITIAL,
        }

    def overview(self) -> dict:
        agg = self.aggregator
        snap = agg.registry.snapshot()
        known = agg.known_hostnames()
        cloudlets = []
        for cloudlet in snap.cloudlets:
            up, down, cpus = agg.cloudlet_summary(cloudlet.name)
            cloudlets.append(
                {
                    "name": cloudlet.name,
                    "members": [self.host_status(h) for h in cloudlet.members],
                    "summary": {"hosts_up": up, "hosts_down": down, "cpus_total": cpus},
                }
            )
        pool = agg.registry.initial_pool(known)
        return {
            "revision": snap.revision,
            "cloudlets": cloudlets,
            "initial_pool": [self.host_status(h) for h in pool],
        }

    def series(self, scope: str, metric: str, start: float, end: float) -> dict:
        stacked = self.aggregator.aggregate(scope, metric, start, end)
        body = stacked.to_json_dict()
        body["scope"] = scope
        return body

    def control_submit(self, scope: str, command: str, mode: str) -> dict:
        kind, arg = parse_scope(scope)
        if kind == "all":
            if not self.config.allow_all_scope:
                raise AllScopeDisabled("scope 'all' is disabled; enable allow_all_scope to use it")
            targets = self.aggregator.known_hostnames()
        elif kind == "host":
            targets = [arg]
        else:
            if arg == INITIAL:
                targets = self.aggregator.registry.initial_pool(self.aggregator.known_hostnames())
            else:
                targets = self.aggregator.registry.members(arg)
        job_id = self.engine.submit(targets, command, ExecutionMode.parse(mode))
        return {"job_id": job_id, "targets": list(dict.fromkeys(targets))}

    def control_result(self, job_id: str) -> dict:
        job = self.engine.get_job(job_id)
        return {
            "job_id": job.job_id,
            "state": job.state.value,
            "command": job.command,
            "mode": job.mode.value,
            "targets": list(job.targets),
            "results": [r.to_json_dict() for r in job.ordered_results()],
        }

    def heatmap(self) -> dict:
        layout = self.config.rack_layout or []
        return {"cells": self.aggregator.heatmap(layout)}

    def commands(self) -> dict:
        palette = control.popular_commands(self.config.palette_path)
        return {"commands": [e.to_json_dict() for e in palette]}

    # -- server lifecycle ------------------------------------------------------

    def start(self) -> "ApiService":
        handler = _build_handler(self)
        self._server = ThreadingHTTPServer(self.config.listen, handler)
        self._server.daemon_threads = True
        self.address = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever, name="api-http", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2)

    @property
    def base_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"


def _build_handler(service: ApiService):
    routes: list[tuple[str, re.Pattern, object, bool]] = []

    def route(method, pattern, needs_auth=True):
        compiled = re.compile(f"^{pattern}$")

        def register(fn):
            routes.append((method, compiled, fn, needs_auth))
            return fn

        return register

    @route("POST", r"/api/login", needs_auth=False)
    def _login(ctx):
        body = ctx.json_body()
        return 200, service.login(ctx.source, str(body.get("username", "")), str(body.get("password", "")))

    @route("POST", r"/api/password")
    def _password(ctx):
        body = ctx.json_body()
        return 200, service.change_password(ctx.token, ctx.username,
                                            str(body.get("old", "")), str(body.get("new", "")))

    @route("GET", r"/api/overview")
    def _overview(ctx):
        return 200, service.overview()

    @route("GET", r"/api/hosts")
    def _hosts(ctx):
        return 200, {"hosts": [service.host_status(h) for h in service.aggregator.known_hostnames()]}

    @route("POST", r"/api/cloudlets")
    def _create_cloudlet(ctx):
        snap = service.aggregator.registry.create_cloudlet(str(ctx.json_body().get("name", "")))
        return 201, {"revision": snap.revision}

    @route("DELETE", r"/api/cloudlets/(?P<name>[^/]+)")
    def _delete_cloudlet(ctx):
        snap = service.aggregator.registry.delete_cloudlet(unquote(ctx.group("name")))
        return 200, {"revision": snap.revision}

    @route("POST", r"/api/cloudlets/(?P<name>[^/]+)/members")
    def _add_member(ctx):
        body = ctx.json_body()
        snap = service.aggregator.registry.add_member(
            unquote(ctx.group("name")), str(body.get("host", "")),
            pre_registered=bool(body.get("pre_registered", False)),
        )
        return 200, {"revision": snap.revision}

    @route("DELETE", r"/api/cloudlets/(?P<name>[^/]+)/members/(?P<host>[^/]+)")
    def _remove_member(ctx):
        snap = service.aggregator.registry.remove_member(
            unquote(ctx.group("name")), unquote(ctx.group("host"))
        )
        return 200, {"revision": snap.revision}

    @route("POST", r"/api/members/(?P<host>[^/]+)/move")
    def _move_member(ctx):
        body = ctx.json_body()
        host = unquote(ctx.group("host"))
        to_cloudlet = str(body.get("to", ""))
        from_cloudlet = body.get("from") or service.aggregator.registry.member_of(host)
        if from_cloudlet is None:
            raise registry_mod.NotAMember(f"{host} is not in any cloudlet")
        snap = service.aggregator.registry.move_member(host, str(from_cloudlet), to_cloudlet)
        return 200, {"revision": snap.revision}

    @route("GET", r"/api/series")
    def _series(ctx):
        scope = ctx.query_one("scope")
        metric = ctx.query_one("metric")
        try:
            start = float(ctx.query_one("start"))
            end = float(ctx.query_one("end"))
        except (TypeError, ValueError):
            raise BadWindow("start and end must be numeric") from None
        if scope is None or metric is None:
            raise BadScope("scope and metric are required")
        return 200, service.series(scope, metric, start, end)

    @route("GET", r"/api/heatmap")
    def _heatmap(ctx):
        return 200, service.heatmap()

    @route("GET", r"/api/commands")
    def _commands(ctx):
        return 200, service.commands()

    @route("POST", r"/api/control")
    def _control(ctx):
        body = ctx.json_body()
        result = service.control_submit(
            str(body.get("scope", "")), str(body.get("command", "")), str(body.get("mode", "parallel"))
        )
        return 202, result

    @route("GET", r"/api/control/(?P<job_id>[^/]+)")
    def _control_result(ctx):
        return 200, service.control_result(unquote(ctx.group("job_id")))

    class Context:
        def __init__(self, handler, match):
            self.handler = handler
            self.match = match
            self.token = None
            self.username = None
            parsed = urlparse(handler.path)
            self.query = parse_qs(parsed.query)

        @property
        def source(self):
            return self.handler.client_address[0]

        def group(self, name):
            return self.match.group(name)

        def query_one(self, name):
            values = self.query.get(name)
            return values[0] if values else None

        def json_body(self):
            length = int(self.handler.headers.get("Content-Length") or 0)
            raw = self.handler.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode("utf-8") or "{}")
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise ApiError("request body is not valid JSON") from None
            if not isinstance(body, dict):
                raise ApiError("request body must be a JSON object")
            return body

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "c2ms"

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

        def _send_json(self, status, body):
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _dispatch(self, method):
            path = urlparse(self.path).path
            for route_method, pattern, fn, needs_auth in routes:
                if route_method != method:
                    continue
                match = pattern.match(path)
                if not match:
                    continue
                ctx = Context(self, match)
                try:
                    if needs_auth:
                        header = self.headers.get("Authorization", "")
                        token = header.removeprefix("Bearer ").strip() if header.startswith("Bearer ") else None
                        username = service.sessions.validate(token)
                        if username is None:
                            raise Unauthorized("missing or expired token")
                        ctx.token, ctx.username = token, username
                    status, body = fn(ctx)
                except ApiError as exc:
                    self._send_json(exc.status, {"error": exc.code, "detail": exc.detail})
                except Exception as exc:  # noqa: BLE001 - mapped below
                    for klass, status, code in _ERROR_MAP:
                        if isinstance(exc, klass):
                            self._send_json(status, {"error": code, "detail": str(exc)})
                            break
                    else:
                        log.exception("internal error on %s %s", method, path)
                        self._send_json(500, {"error": "internal", "detail": str(exc)})
                else:
                    self._send_json(status, body)
                return
            if method == "GET" and not path.startswith("/api/") and service.config.static_dir:
                self._serve_static(path)
                return
            self._send_json(404, {"error": "not_found", "detail": path})

        def _serve_static(self, path):
            root = os.path.realpath(service.config.static_dir)
            rel = unquote(path).lstrip("/") or "index.html"
            full = os.path.realpath(os.path.join(root, rel))
            if not full.startswith(root + os.sep) and full != root:
                self._send_json(404, {"error": "not_found", "detail": path})
                return
            if os.path.isdir(full):
                full = os.path.join(full, "index.html")
            if not os.path.isfile(full):
                # SPA fallback: unknown extensionless paths render the app
                if "." not in os.path.basename(rel):
                    full = os.path.join(root, "index.html")
                if not os.path.isfile(full):
                    self._send_json(404, {"error": "not_found", "detail": path})
                    return
            ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
            with open(full, "rb") as fh:
                data = fh.read()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_DELETE(self):
            self._dispatch("DELETE")

    return Handler
