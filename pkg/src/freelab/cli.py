"""Operator command line: run the server, provision catalog entities and
users, register apparatus (emitting tokens once), seed a demo deployment,
prune inactive users, and launch the simulation harness.

Exit codes: 0 success, 1 user error (bad flags or input), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import signal
import sys
import threading
import time
from typing import Optional

import httpx

from .agent import Agent, AgentConfig, PendulumDriver
from .api import serve
from .errors import FreelabError
from .identity import IdentityService, load_providers
from .model import (
    Apparatus,
    ApparatusType,
    Protocol,
    Role,
    parse_rfc3339,
    utc_now,
)
from .scheduler import Scheduler
from .sim import DEMO_SCHEMA, run_simulation
from .store import Backend, Store, StoreConfig

log = logging.getLogger(__name__)

DEMO_LOCATION = "demo-lab"
DEMO_USERNAME = "demo"
DEMO_PASSWORD = "demo"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; operator errors are exit 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _open_store(path: Optional[str]) -> Store:
    if path is None:
        return Store(StoreConfig())
    return Store(StoreConfig(backend=Backend.FILE, file_path=path))


def _build_parser() -> _Parser:
    parser = _Parser(prog="adminctl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="initialize a file-backed store")
    p.add_argument("--store-path", required=True)

    p = sub.add_parser("serve", help="run the control server")
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.add_argument("--store-path", required=True)
    p.add_argument("--ui-dir", default=None, help="directory of portal static assets")

    p = sub.add_parser("create-user", help="create a local user")
    p.add_argument("--store-path", required=True)
    p.add_argument("--username", required=True)
    p.add_argument("--password", required=True)
    p.add_argument("--role", default="USER", choices=[r.value for r in Role])
    p.add_argument("--groups", default="", help="comma-separated group ids")

    p = sub.add_parser("create-apparatus-type", help="register a hardware class")
    p.add_argument("--store-path", required=True)
    p.add_argument("--name-en", required=True)
    p.add_argument("--name-pt")
    p.add_argument("--name-es")
    p.add_argument("--description-en", default="")

    p = sub.add_parser("create-protocol", help="register an experiment type")
    p.add_argument("--store-path", required=True)
    p.add_argument("--apparatus-type", required=True, type=int)
    p.add_argument("--name-en", required=True)
    p.add_argument("--schema-file", help="JSON config schema for the experiment form")
    p.add_argument("--ui-plugin")
    p.add_argument("--access-groups", default="", help="comma-separated group ids")

    p = sub.add_parser("create-apparatus", help="register a device; prints its token once")
    p.add_argument("--store-path", required=True)
    p.add_argument("--apparatus-type", required=True, type=int)
    p.add_argument("--protocols", required=True, help="comma-separated protocol ids")
    p.add_argument("--location", required=True)
    p.add_argument("--stream-url")

    p = sub.add_parser("register-lti", help="register an LMS consumer")
    p.add_argument("--store-path", required=True)
    p.add_argument("--consumer-key", required=True)
    p.add_argument("--shared-secret", required=True)
    p.add_argument("--tool-url", default="")

    p = sub.add_parser("prune", help="delete old and inactive users")
    p.add_argument("--store-path", required=True)
    p.add_argument("--now", help="RFC 3339 reference instant (defaults to now)")

    p = sub.add_parser("demo", help="seed a pendulum demo and serve it with one agent")
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.add_argument("--store-path", help="optional persistent store (in-memory otherwise)")
    p.add_argument("--ui-dir", default=None)

    p = sub.add_parser("simulate", help="run the deterministic multi-agent simulation")
    p.add_argument("--apparatus", required=True, type=int)
    p.add_argument("--executions", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _names(args) -> dict[str, str]:
    names = {"en": args.name_en}
    if getattr(args, "name_pt", None):
        names["pt"] = args.name_pt
    if getattr(args, "name_es", None):
        names["es"] = args.name_es
    return names


def _groups(text: str) -> frozenset[str]:
    return frozenset(g.strip() for g in text.split(",") if g.strip())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_init(args) -> int:
    store = _open_store(args.store_path)
    store.close()
    print(f"initialized store at {args.store_path}")
    return 0


def _cmd_create_user(args) -> int:
    store = _open_store(args.store_path)
    identity = IdentityService(store)
    principal = identity.create_local_user(
        args.username, args.password, role=Role(args.role), groups=_groups(args.groups))
    store.close()
    print(f"user id={principal.id} username={principal.username} role={principal.role.value}")
    return 0


def _cmd_create_apparatus_type(args) -> int:
    store = _open_store(args.store_path)
    description = {"en": args.description_en} if args.description_en else {}
    atype = store.put(ApparatusType(names=_names(args), description=description))
    store.close()
    print(f"apparatus-type id={atype.id}")
    return 0


def _cmd_create_protocol(args) -> int:
    store = _open_store(args.store_path)
    schema = None
    if args.schema_file:
        with open(args.schema_file, "r", encoding="utf-8") as fh:
            schema = json.load(fh)
    protocol = store.put(Protocol(
        apparatus_type_id=args.apparatus_type,
        names=_names(args),
        config_schema=schema,
        ui_plugin=args.ui_plugin,
        access_groups=_groups(args.access_groups),
    ))
    store.close()
    print(f"protocol id={protocol.id}")
    return 0


def _cmd_create_apparatus(args) -> int:
    store = _open_store(args.store_path)
    token = secrets.token_urlsafe(32)
    apparatus = store.put(Apparatus(
        apparatus_type_id=args.apparatus_type,
        location=args.location,
        protocol_ids=frozenset(int(p) for p in args.protocols.split(",") if p.strip()),
        secret_token=token,
        stream_url=args.stream_url,
    ))
    store.close()
    # The only time the token is ever shown; reads never return it.
    print(f"apparatus id={apparatus.id}")
    print(f"secret-token={token}")
    return 0


def _cmd_register_lti(args) -> int:
    store = _open_store(args.store_path)
    identity = IdentityService(store)
    consumer = identity.register_consumer(
        args.consumer_key, args.shared_secret, args.tool_url)
    store.close()
    print(f"lti-consumer id={consumer.id} key={consumer.consumer_key}")
    return 0


def _cmd_prune(args) -> int:
    store = _open_store(args.store_path)
    now = parse_rfc3339(args.now) if args.now else utc_now()
    report = store.prune(now)
    store.close()
    print(f"pruned users={report.users_removed} executions={report.executions_removed}")
    return 0


def _cmd_serve(args) -> int:
    store = _open_store(args.store_path)
    identity = IdentityService(store, providers=load_providers(dict(os.environ)))
    scheduler = Scheduler(store)
    handle = serve(args.bind, store, scheduler=scheduler, identity=identity,
                   static_dir=args.ui_dir, log_level="info")
    print(f"serving on {handle.base_url}", flush=True)
    _wait_forever()
    handle.stop()
    store.close()
    return 0


def _cmd_demo(args) -> int:
    """Idempotent pendulum demo: seed the catalog and a demo user, serve the
    API and keep one simulated agent polling it."""
    store = _open_store(args.store_path)
    identity = IdentityService(store, providers=load_providers(dict(os.environ)))
    scheduler = Scheduler(store)

    apparatus = store.find("apparatus", lambda a: a.location == DEMO_LOCATION)
    if apparatus is None:
        atype = store.put(ApparatusType(
            names={"en": "Pendulum", "pt": "Pêndulo", "es": "Péndulo"},
            description={"en": "Swinging mass for local gravity measurements."}))
        protocol = store.put(Protocol(
            apparatus_type_id=atype.id,
            names={"en": "Gravity measurement"},
            description={"en": "Measure the period over a number of samples."},
            config_schema=DEMO_SCHEMA))
        apparatus = store.put(Apparatus(
            apparatus_type_id=atype.id,
            location=DEMO_LOCATION,
            protocol_ids=frozenset({protocol.id}),
            secret_token=secrets.token_urlsafe(32)))
        protocol_id = protocol.id
    else:
        protocol_id = sorted(apparatus.protocol_ids)[0]
    if store.find("principal", lambda p: p.username == DEMO_USERNAME) is None:
        identity.create_local_user(DEMO_USERNAME, DEMO_PASSWORD, role=Role.USER)

    handle = serve(args.bind, store, scheduler=scheduler, identity=identity,
                   static_dir=args.ui_dir, log_level="warning")
    print(f"serving on {handle.base_url}", flush=True)
    print(f"demo user: {DEMO_USERNAME} / {DEMO_PASSWORD}", flush=True)
    print(f"demo apparatus id={apparatus.id} protocol id={protocol_id}", flush=True)

    agent = Agent(
        AgentConfig(server_url=handle.base_url, apparatus_id=apparatus.id,
                    secret_token=apparatus.secret_token, poll_interval=0.5),
        {protocol_id: PendulumDriver(length_m=1.0, gravity_mps2=9.80665,
                                     noise_rel=0.001, seed=2022)},
        client=httpx.Client(base_url=handle.base_url, timeout=10.0),
    )
    stop = threading.Event()
    worker = threading.Thread(target=agent.run_forever, args=(stop,),
                              daemon=True, name="demo-agent")
    worker.start()
    _wait_forever()
    stop.set()
    worker.join(timeout=10)
    handle.stop()
    store.close()
    return 0


def _cmd_simulate(args) -> int:
    report = run_simulation(args.apparatus, args.executions, args.seed)
    print(report.to_json())
    return 0 if not report.invariant_violations else 2


def _wait_forever() -> None:
    event = threading.Event()

    def _stop(signum, frame):
        event.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, _stop)
        except ValueError:  # not the main thread (e.g. under tests)
            break
    try:
        while not event.is_set():
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass


_COMMANDS = {
    "init": _cmd_init,
    "serve": _cmd_serve,
    "create-user": _cmd_create_user,
    "create-apparatus-type": _cmd_create_apparatus_type,
    "create-protocol": _cmd_create_protocol,
    "create-apparatus": _cmd_create_apparatus,
    "register-lti": _cmd_register_lti,
    "prune": _cmd_prune,
    "demo": _cmd_demo,
    "simulate": _cmd_simulate,
}


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stdout,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return _COMMANDS[args.command](args)
    except FreelabError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
