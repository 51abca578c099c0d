"""Deterministic multi-agent simulation harness.

Runs the server and N agents in one process over an instrumented in-process
transport that records every connection's initiator, under a manual clock and
a seeded scheduler. The report carries connection-direction counts (the server
must initiate zero), per-execution latencies, FIFO ordering per apparatus and
any invariant violations observed while stepping.
"""

from __future__ import annotations

import json
import random
import secrets
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import httpx
from fastapi.testclient import TestClient

from .agent import Agent, AgentConfig, PendulumDriver
from .api import create_app
from .identity import IdentityService
from .model import Apparatus, ApparatusType, ExecutionStatus, Protocol, Role
from .scheduler import Scheduler
from .store import Store, StoreConfig

SIM_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)

DEMO_SCHEMA = {
    "type": "object",
    "properties": {
        "deltaX": {"type": "integer", "default": 10, "minimum": 3,
                   "maximum": 22, "multipleOf": 1},
        "samples": {"type": "integer", "default": 50, "minimum": 4,
                    "maximum": 250, "multipleOf": 1},
    },
}


class ManualClock:
    """A clock the harness advances by hand; callable like utc_now."""

    def __init__(self, start: datetime = SIM_EPOCH):
        self._now = start

    def __call__(self) -> datetime:
        return self._now

    def now(self) -> datetime:
        return self._now

    def epoch(self) -> float:
        return self._now.timestamp()

    def advance(self, seconds: float) -> None:
        self._now += timedelta(seconds=seconds)


class ConnectionLog:
    """Counts every connection by its initiator."""

    def __init__(self):
        self.counts: dict[str, int] = {"server": 0}
        self.entries: list[tuple[str, str, str]] = []

    def record(self, initiator: str, method: str, url: str) -> None:
        self.counts[initiator] = self.counts.get(initiator, 0) + 1
        self.entries.append((initiator, method, url))


class RecordingClient(httpx.Client):
    """An httpx client whose every request is tagged with its initiator."""

    def __init__(self, inner: httpx.Client, initiator: str, log: ConnectionLog):
        self._inner = inner
        self._initiator = initiator
        self._log = log

    def request(self, method: str, url, **kwargs) -> httpx.Response:
        self._log.record(self._initiator, method, str(url))
        return self._inner.request(method, url, **kwargs)

    def get(self, url, **kwargs):
        return self.request("GET", url, **kwargs)

    def post(self, url, **kwargs):
        return self.request("POST", url, **kwargs)

    def put(self, url, **kwargs):
        return self.request("PUT", url, **kwargs)

    def delete(self, url, **kwargs):
        return self.request("DELETE", url, **kwargs)


@dataclass
class SimulationReport:
    apparatus_count: int
    executions_total: int
    executions_finished: int
    server_initiated_connections: int
    connection_counts: dict[str, int]
    per_execution_latency_s: dict[int, float]
    submission_order: dict[int, list[int]]
    completion_order: dict[int, list[int]]
    fifo_ok: bool
    invariant_violations: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "apparatus_count": self.apparatus_count,
            "executions_total": self.executions_total,
            "executions_finished": self.executions_finished,
            "server_initiated_connections": self.server_initiated_connections,
            "connection_counts": self.connection_counts,
            "per_execution_latency_s": self.per_execution_latency_s,
            "submission_order": {str(k): v for k, v in self.submission_order.items()},
            "completion_order": {str(k): v for k, v in self.completion_order.items()},
            "fifo_ok": self.fifo_ok,
            "invariant_violations": self.invariant_violations,
        }, sort_keys=True)


def run_simulation(apparatus_count: int, executions_per_apparatus: int,
                   seed: int = 0) -> SimulationReport:
    """Provision a fresh in-process deployment, drive it to completion with a
    seeded interleaving of agent steps, and report what happened."""
    rng = random.Random(seed)
    clock = ManualClock()
    log = ConnectionLog()
    store = Store(StoreConfig(max_executions_per_user=10_000), clock=clock)
    scheduler = Scheduler(store, clock=clock)
    identity = IdentityService(store, clock=clock)
    app = create_app(store, scheduler=scheduler, identity=identity)
    backend = TestClient(app)

    # Catalog: one pendulum apparatus type/protocol, N replica apparatus.
    atype = store.put(ApparatusType(names={"en": "Pendulum"}))
    protocol = store.put(Protocol(
        apparatus_type_id=atype.id, names={"en": "Gravity measurement"},
        config_schema=DEMO_SCHEMA))
    tokens: dict[int, str] = {}
    for i in range(apparatus_count):
        token = f"sim-{i}-{secrets.token_hex(8)}"
        apparatus = store.put(Apparatus(
            apparatus_type_id=atype.id, location=f"sim-lab-{i}",
            protocol_ids=frozenset({protocol.id}), secret_token=token))
        tokens[apparatus.id] = token

    identity.create_local_user("simuser", "sim-password", role=Role.USER)
    ui = RecordingClient(backend, "ui", log)
    login = ui.post("/login", json={"username": "simuser", "password": "sim-password"})
    session = {"Authorization": f"Bearer {login.json()['token']}"}

    # Submit every execution up front, FIFO order per apparatus recorded.
    submission_order: dict[int, list[int]] = {a: [] for a in tokens}
    for apparatus_id in tokens:
        for _ in range(executions_per_apparatus):
            samples = rng.randint(4, 6)
            created = ui.post("/execution", headers=session, json={
                "apparatus_id": apparatus_id,
                "protocol_id": protocol.id,
                "config": json.dumps({"deltaX": 10, "samples": samples}),
            })
            execution_id = created.json()["id"]
            ui.put(f"/execution/{execution_id}/start", headers=session)
            submission_order[apparatus_id].append(execution_id)
            clock.advance(0.01)

    agents = []
    for apparatus_id, token in tokens.items():
        agent_client = RecordingClient(backend, f"agent:{apparatus_id}", log)
        agents.append(Agent(
            AgentConfig(server_url="http://testserver", apparatus_id=apparatus_id,
                        secret_token=token, poll_interval=0.5, heartbeat_interval=30.0),
            {protocol.id: PendulumDriver(seed=seed + apparatus_id)},
            client=agent_client,
            clock=clock.epoch,
        ))

    violations: list[str] = []
    total = apparatus_count * executions_per_apparatus
    # Generous cap: polls while peers run plus every result post.
    step_cap = max(200, total * 100)
    steps = 0

    def finished_count() -> int:
        return sum(1 for e in store.list("execution")
                   if e.status == ExecutionStatus.FINISHED)

    while finished_count() < total and steps < step_cap:
        agent = rng.choice(agents)
        agent.step()
        clock.advance(0.05)
        steps += 1
        running = {}
        for e in store.list("execution", lambda e: e.status == ExecutionStatus.RUNNING):
            running[e.apparatus_id] = running.get(e.apparatus_id, 0) + 1
        for apparatus_id, count in running.items():
            if count > 1:
                violations.append(
                    f"apparatus {apparatus_id} had {count} RUNNING executions "
                    f"at step {steps}")
    if finished_count() < total:
        violations.append(
            f"stalled: only {finished_count()}/{total} executions finished "
            f"within {step_cap} steps")

    latencies: dict[int, float] = {}
    completion_order: dict[int, list[int]] = {a: [] for a in tokens}
    finished = store.list("execution", lambda e: e.status == ExecutionStatus.FINISHED)
    for e in sorted(finished, key=lambda e: e.finished_at):
        completion_order[e.apparatus_id].append(e.id)
        latencies[e.id] = (e.finished_at - e.submitted_at).total_seconds()
    fifo_ok = all(
        completion_order[a] == [x for x in submission_order[a] if x in latencies]
        for a in tokens)
    if not fifo_ok:
        violations.append("completion order diverged from submission order")

    return SimulationReport(
        apparatus_count=apparatus_count,
        executions_total=total,
        executions_finished=len(finished),
        server_initiated_connections=log.counts.get("server", 0),
        connection_counts=dict(log.counts),
        per_execution_latency_s=latencies,
        submission_order=submission_order,
        completion_order=completion_order,
        fifo_ok=fifo_ok,
        invariant_violations=violations,
    )
