"""Shared fixtures: a manual clock, a seeded catalog and an app client."""

from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from freelab.api import create_app
from freelab.identity import IdentityService
from freelab.model import Apparatus, ApparatusType, Protocol, Role
from freelab.scheduler import Scheduler
from freelab.sim import DEMO_SCHEMA, ManualClock
from freelab.store import Store, StoreConfig

TOKEN_A = "token-apparatus-a-0123456789abcdef"
TOKEN_B = "token-apparatus-b-fedcba9876543210"


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def store(clock):
    return Store(StoreConfig(), clock=clock)


@pytest.fixture
def scheduler(store, clock):
    return Scheduler(store, clock=clock)


@pytest.fixture
def identity(store, clock):
    return IdentityService(store, clock=clock)


class World:
    """A small provisioned deployment: one apparatus type, two protocols
    (with and without schema), two replica apparatus, three users."""

    def __init__(self, store, scheduler, identity):
        self.store = store
        self.scheduler = scheduler
        self.identity = identity
        self.atype = store.put(ApparatusType(names={"en": "Pendulum", "pt": "Pêndulo"}))
        self.pendulum = store.put(Protocol(
            apparatus_type_id=self.atype.id,
            names={"en": "Gravity measurement"},
            config_schema=DEMO_SCHEMA))
        self.freeform = store.put(Protocol(
            apparatus_type_id=self.atype.id,
            names={"en": "Free swing"}))
        self.apparatus_a = store.put(Apparatus(
            apparatus_type_id=self.atype.id, location="lab-a",
            protocol_ids=frozenset({self.pendulum.id, self.freeform.id}),
            secret_token=TOKEN_A, stream_url="https://stream.example/a"))
        self.apparatus_b = store.put(Apparatus(
            apparatus_type_id=self.atype.id, location="lab-b",
            protocol_ids=frozenset({self.pendulum.id}),
            secret_token=TOKEN_B))
        self.alice = identity.create_local_user("alice", "alice-pw", role=Role.USER)
        self.bob = identity.create_local_user("bob", "bob-pw", role=Role.USER)
        self.root = identity.create_local_user("root", "root-pw", role=Role.ADMIN)


@pytest.fixture
def world(store, scheduler, identity):
    return World(store, scheduler, identity)


@pytest.fixture
def app(world):
    return create_app(world.store, scheduler=world.scheduler, identity=world.identity)


@pytest.fixture
def client(app):
    return TestClient(app)


def login(client, username, password):
    response = client.post("/login", json={"username": username, "password": password})
    assert response.status_code == 200, response.text
    return {"Authorization": f"Bearer {response.json()['token']}"}


@pytest.fixture
def alice_auth(client):
    return login(client, "alice", "alice-pw")


@pytest.fixture
def bob_auth(client):
    return login(client, "bob", "bob-pw")


@pytest.fixture
def bearer_a():
    return {"Authorization": f"Bearer {TOKEN_A}"}


@pytest.fixture
def bearer_b():
    return {"Authorization": f"Bearer {TOKEN_B}"}
