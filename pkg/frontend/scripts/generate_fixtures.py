#!/usr/bin/env python3
"""Regenerate the portal test fixtures through the control server's HTTP API.

Runs the same seeded 50-sample pendulum flow the server-side acceptance suite
uses, then freezes the catalog, the result stream and the CSV document the
API served. Deterministic: a manual clock and fixed seeds.

Usage: python3 scripts/generate_fixtures.py   (from the frontend/ directory)
"""

from __future__ import annotations

import json
import pathlib

from fastapi.testclient import TestClient

from freelab.agent import Agent, AgentConfig, PendulumDriver
from freelab.api import create_app
from freelab.identity import IdentityService
from freelab.model import Apparatus, ApparatusType, Protocol, Role
from freelab.scheduler import Scheduler
from freelab.sim import DEMO_SCHEMA, ManualClock
from freelab.store import Store, StoreConfig

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"

APPARATUS_TOKEN = "fixture-token"
CONFIG_TEXT = '{"deltaX":10,"samples":50}'


def main() -> None:
    clock = ManualClock()
    store = Store(StoreConfig(), clock=clock)
    scheduler = Scheduler(store, clock=clock)
    identity = IdentityService(store, clock=clock)
    client = TestClient(create_app(store, scheduler=scheduler, identity=identity))

    atype = store.put(ApparatusType(
        names={"en": "Pendulum", "pt": "Pêndulo", "es": "Péndulo"},
        description={"en": "Swinging mass for local gravity measurements."}))
    protocol = store.put(Protocol(
        apparatus_type_id=atype.id, names={"en": "Gravity measurement"},
        description={"en": "Measure the period over a number of samples."},
        config_schema=DEMO_SCHEMA))
    store.put(Apparatus(
        apparatus_type_id=atype.id, location="demo-lab",
        protocol_ids=frozenset({protocol.id}), secret_token=APPARATUS_TOKEN,
        stream_url="https://stream.example/pendulum"))
    identity.create_local_user("demo", "demo", role=Role.USER)

    auth = {"Authorization": "Bearer " + client.post(
        "/login", json={"username": "demo", "password": "demo"}).json()["token"]}
    catalog = client.get("/apparatus").json()
    execution_id = client.post("/execution", headers=auth, json={
        "apparatus_id": catalog[0]["id"],
        "protocol_id": catalog[0]["protocols"][0]["id"],
        "config": CONFIG_TEXT}).json()["id"]
    client.put(f"/execution/{execution_id}/start", headers=auth)

    agent = Agent(
        AgentConfig(server_url="http://testserver", apparatus_id=catalog[0]["id"],
                    secret_token=APPARATUS_TOKEN, poll_interval=0.1),
        {protocol.id: PendulumDriver(seed=6)},
        client=client, clock=clock.epoch)
    while agent.report.executions_finished == 0:
        agent.step()
        clock.advance(0.05)

    results = client.get(f"/execution/{execution_id}/result", headers=auth).json()
    csv_document = client.get(f"/execution/{execution_id}/results.csv",
                              headers=auth).text

    FIXTURES.mkdir(parents=True, exist_ok=True)
    (FIXTURES / "catalog.json").write_text(
        json.dumps(catalog, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (FIXTURES / "demo-results.json").write_text(
        json.dumps(results, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (FIXTURES / "demo-results.csv").write_text(csv_document, encoding="utf-8")
    print(f"wrote {len(results)} results and {len(csv_document.splitlines())} CSV lines"
          f" to {FIXTURES}")


if __name__ == "__main__":
    main()
