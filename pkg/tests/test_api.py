"""HTTP contract: both endpoint sets, error mapping, payload agnosticism,
token scoping, incremental polling, CSV export and secret hygiene."""

from __future__ import annotations

import json
import re

import pytest
from fastapi.testclient import TestClient

from freelab.api import create_app, export_csv, serve
from freelab.errors import BindFailure
from freelab.identity import IdentityService, load_providers, make_assertion, signed_launch_form
from freelab.model import ExecutionStatus, ResultKind
from freelab.scheduler import Scheduler
from freelab.store import Store, StoreConfig

from conftest import TOKEN_A, TOKEN_B, World, login

PAYLOAD = '{"deltaX":10,"samples":50}'


def create_execution(client, auth, world, config=PAYLOAD, apparatus=None, protocol=None):
    response = client.post("/execution", headers=auth, json={
        "apparatus_id": (apparatus or world.apparatus_a).id,
        "protocol_id": (protocol or world.pendulum).id,
        "config": config,
    })
    assert response.status_code == 201, response.text
    return response.json()["id"]


def run_results(client, world, bearer, execution_id, payloads):
    """Claim the execution and post the given PARTIAL payloads over HTTP."""
    claimed = client.put(f"/execution/{execution_id}/status",
                         headers=bearer, json={"status": "RUNNING"})
    assert claimed.status_code == 200, claimed.text
    for payload in payloads:
        posted = client.post("/result", headers=bearer, json={
            "execution_id": execution_id, "kind": "PARTIAL", "payload": payload})
        assert posted.status_code == 201, posted.text


class TestAuthentication:
    def test_unauthenticated_post_execution(self, client, world):
        response = client.post("/execution", json={
            "apparatus_id": world.apparatus_a.id,
            "protocol_id": world.pendulum.id, "config": "{}"})
        assert response.status_code == 401
        assert response.json()["code"] == "unauthorized"

    @pytest.mark.parametrize("method,path", [
        ("GET", "/execution/1"), ("PUT", "/execution/1/start"),
        ("GET", "/execution/1/result"), ("GET", "/execution/1/status"),
        ("GET", "/execution/1/results.csv"), ("GET", "/me"),
    ])
    def test_protected_ui_routes(self, client, method, path):
        assert client.request(method, path).status_code == 401

    @pytest.mark.parametrize("method,path", [
        ("PUT", "/apparatus/1/heartbeat"), ("GET", "/apparatus/1/nextexecution"),
        ("GET", "/apparatus/1/queue"), ("GET", "/apparatus/1"),
        ("PUT", "/execution/1/status"),
    ])
    def test_protected_apparatus_routes(self, client, method, path):
        kwargs = {"json": {"status": "RUNNING"}} if method == "PUT" and "status" in path else {}
        assert client.request(method, path, **kwargs).status_code == 401

    def test_expired_session_is_401_everywhere(self, world, clock):
        app = create_app(world.store, scheduler=world.scheduler, identity=world.identity)
        client = TestClient(app)
        auth = login(client, "alice", "alice-pw")
        clock.advance(13 * 3600)
        assert client.get("/me", headers=auth).status_code == 401

    def test_cookie_session_works(self, client):
        client.post("/login", json={"username": "alice", "password": "alice-pw"})
        assert client.get("/me").status_code == 200

    def test_bad_login_is_uniform_401(self, client):
        for body in ({"username": "alice", "password": "x"},
                     {"username": "ghost", "password": "x"}):
            response = client.post("/login", json=body)
            assert response.status_code == 401
            assert response.json()["code"] == "unauthorized"


class TestExecutionLifecycleRoutes:
    def test_create_read_round_trip(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        body = client.get(f"/execution/{execution_id}", headers=alice_auth).json()
        assert body["config_payload"] == PAYLOAD
        assert body["status"] == "DRAFT"

    def test_update_while_draft(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        response = client.put(f"/execution/{execution_id}", headers=alice_auth,
                              json={"config": '{"deltaX":4,"samples":10}'})
        assert response.status_code == 200
        assert response.json()["config_payload"] == '{"deltaX":4,"samples":10}'

    def test_update_after_submit_rejected(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        response = client.put(f"/execution/{execution_id}", headers=alice_auth,
                              json={"config": "{}"})
        assert response.status_code == 400

    def test_start_queues(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        response = client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        assert response.status_code == 200
        assert response.json()["status"] == "QUEUED"
        status = client.get(f"/execution/{execution_id}/status", headers=alice_auth)
        assert status.json() == {"status": "QUEUED"}

    def test_start_with_invalid_config_is_422(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world,
                                        config='{"deltaX":2,"samples":50}')
        response = client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        assert response.status_code == 422
        body = response.json()
        assert body["code"] == "validation_failed"
        assert body["errors"] == [{"field": "deltaX", "message": "below minimum 3"}]

    def test_delete_draft(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        assert client.delete(f"/execution/{execution_id}",
                             headers=alice_auth).json() == {"result": "deleted"}
        assert client.get(f"/execution/{execution_id}",
                          headers=alice_auth).status_code == 404

    def test_delete_queued_soft_aborts(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        assert client.delete(f"/execution/{execution_id}",
                             headers=alice_auth).json() == {"result": "aborted"}
        body = client.get(f"/execution/{execution_id}", headers=alice_auth).json()
        assert body["status"] == "ABORTED"

    def test_delete_running_refused(self, client, alice_auth, bearer_a, world):
        execution_id = create_execution(client, alice_auth, world)
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        client.put(f"/execution/{execution_id}/status", headers=bearer_a,
                   json={"status": "RUNNING"})
        response = client.delete(f"/execution/{execution_id}", headers=alice_auth)
        assert response.status_code == 409
        assert response.json()["code"] == "delete_refused"

    def test_foreign_execution_forbidden(self, client, alice_auth, bob_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        for method, path in [("GET", f"/execution/{execution_id}"),
                             ("PUT", f"/execution/{execution_id}/start"),
                             ("GET", f"/execution/{execution_id}/result"),
                             ("GET", f"/execution/{execution_id}/status"),
                             ("DELETE", f"/execution/{execution_id}")]:
            response = client.request(method, path, headers=bob_auth)
            assert response.status_code == 403, (method, path)

    def test_double_submit_conflicts(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        response = client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        assert response.status_code == 409
        assert response.json()["code"] == "illegal_transition"

    def test_quota_maps_to_429(self, clock):
        store = Store(StoreConfig(max_executions_per_user=1), clock=clock)
        world = World(store, Scheduler(store, clock=clock),
                      IdentityService(store, clock=clock))
        client = TestClient(create_app(store, scheduler=world.scheduler,
                                       identity=world.identity))
        auth = login(client, "alice", "alice-pw")
        create_execution(client, auth, world)
        response = client.post("/execution", headers=auth, json={
            "apparatus_id": world.apparatus_a.id,
            "protocol_id": world.pendulum.id, "config": "{}"})
        assert response.status_code == 429
        assert response.json()["code"] == "quota_exceeded"

    def test_malformed_body_is_400(self, client, alice_auth):
        response = client.post(
            "/execution",
            headers={**alice_auth, "Content-Type": "application/json"},
            content=b"definitely not json")
        assert response.status_code == 400
        assert response.json()["code"] == "malformed_request"

    def test_guest_cannot_create(self, client, world):
        from freelab.model import Role

        world.identity.create_local_user("visitor", "guest-pw", role=Role.GUEST)
        auth = login(client, "visitor", "guest-pw")
        response = client.post("/execution", headers=auth, json={
            "apparatus_id": world.apparatus_a.id,
            "protocol_id": world.pendulum.id, "config": "{}"})
        assert response.status_code == 403


class TestApparatusRoutes:
    def queue_one(self, client, alice_auth, world, config=PAYLOAD):
        execution_id = create_execution(client, alice_auth, world, config=config)
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        return execution_id

    def test_nextexecution_204_when_empty(self, client, bearer_a, world):
        response = client.get(f"/apparatus/{world.apparatus_a.id}/nextexecution",
                              headers=bearer_a)
        assert response.status_code == 204

    def test_nextexecution_delivers(self, client, alice_auth, bearer_a, world):
        execution_id = self.queue_one(client, alice_auth, world)
        response = client.get(f"/apparatus/{world.apparatus_a.id}/nextexecution",
                              headers=bearer_a)
        assert response.status_code == 200
        body = response.json()
        assert body["execution_id"] == execution_id
        assert body["config_payload"] == PAYLOAD

    def test_heartbeat(self, client, bearer_a, world):
        response = client.put(f"/apparatus/{world.apparatus_a.id}/heartbeat",
                              headers=bearer_a)
        assert response.status_code == 200
        assert response.json() == {"liveness": "ONLINE"}

    def test_queue_listing(self, client, alice_auth, bearer_a, world, clock):
        ids = []
        for _ in range(3):
            ids.append(self.queue_one(client, alice_auth, world))
            clock.advance(1)
        response = client.get(f"/apparatus/{world.apparatus_a.id}/queue",
                              headers=bearer_a)
        assert [e["id"] for e in response.json()] == ids

    def test_apparatus_info_sans_token(self, client, bearer_a, world):
        response = client.get(f"/apparatus/{world.apparatus_a.id}", headers=bearer_a)
        assert response.status_code == 200
        body = response.json()
        assert body["id"] == world.apparatus_a.id
        assert "secret_token" not in body
        assert TOKEN_A not in response.text

    def test_status_change_flow(self, client, alice_auth, bearer_a, world):
        execution_id = self.queue_one(client, alice_auth, world)
        for status in ("RUNNING", "FINISHED"):
            response = client.put(f"/execution/{execution_id}/status",
                                  headers=bearer_a, json={"status": status})
            assert response.status_code == 200, response.text
        body = client.get(f"/execution/{execution_id}", headers=alice_auth).json()
        assert body["status"] == "FINISHED"
        assert body["started_at"] <= body["finished_at"]

    def test_result_for_queued_execution_conflicts(self, client, alice_auth,
                                                   bearer_a, world):
        execution_id = self.queue_one(client, alice_auth, world)
        response = client.post("/result", headers=bearer_a, json={
            "execution_id": execution_id, "kind": "PARTIAL", "payload": "{}"})
        assert response.status_code == 409
        assert response.json()["code"] == "illegal_transition"

    def test_unknown_status_value(self, client, alice_auth, bearer_a, world):
        execution_id = self.queue_one(client, alice_auth, world)
        response = client.put(f"/execution/{execution_id}/status",
                              headers=bearer_a, json={"status": "LEVITATING"})
        assert response.status_code == 400

    def test_agents_cannot_request_draft(self, client, alice_auth, bearer_a, world):
        execution_id = self.queue_one(client, alice_auth, world)
        response = client.put(f"/execution/{execution_id}/status",
                              headers=bearer_a, json={"status": "DRAFT"})
        assert response.status_code == 400

    def test_busy_second_claim(self, client, alice_auth, bearer_a, world):
        first = self.queue_one(client, alice_auth, world)
        second = self.queue_one(client, alice_auth, world)
        client.put(f"/execution/{first}/status", headers=bearer_a,
                   json={"status": "RUNNING"})
        response = client.put(f"/execution/{second}/status", headers=bearer_a,
                              json={"status": "RUNNING"})
        assert response.status_code == 409
        assert response.json()["code"] == "busy"


class TestTokenScoping:
    """A token for apparatus A is rejected with 403 on everything of B."""

    def test_unknown_token_is_401(self, client, world):
        headers = {"Authorization": "Bearer forged-token"}
        response = client.get(f"/apparatus/{world.apparatus_a.id}/nextexecution",
                              headers=headers)
        assert response.status_code == 401

    @pytest.mark.parametrize("method,path_template", [
        ("PUT", "/apparatus/{b}/heartbeat"),
        ("GET", "/apparatus/{b}/nextexecution"),
        ("GET", "/apparatus/{b}/queue"),
        ("GET", "/apparatus/{b}"),
    ])
    def test_apparatus_routes_scoped(self, client, bearer_a, world,
                                     method, path_template):
        path = path_template.format(b=world.apparatus_b.id)
        response = client.request(method, path, headers=bearer_a)
        assert response.status_code == 403
        assert response.json()["code"] == "wrong_apparatus"

    def test_execution_routes_scoped(self, client, alice_auth, bearer_a,
                                     bearer_b, world):
        execution_id = create_execution(client, alice_auth, world,
                                        apparatus=world.apparatus_b)
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        response = client.put(f"/execution/{execution_id}/status",
                              headers=bearer_a, json={"status": "RUNNING"})
        assert response.status_code == 403
        assert response.json()["code"] == "wrong_apparatus"
        client.put(f"/execution/{execution_id}/status", headers=bearer_b,
                   json={"status": "RUNNING"})
        response = client.post("/result", headers=bearer_a, json={
            "execution_id": execution_id, "kind": "PARTIAL", "payload": "{}"})
        assert response.status_code == 403


class TestPayloadAgnosticism:
    WEIRD = ' {"uni": "π≈3.14", \t"spacing":   [1,2 ,3], "quote": "\\"x\\""} '

    def test_config_round_trip_bytes(self, client, alice_auth, bearer_a, world):
        execution_id = create_execution(client, alice_auth, world,
                                        config=self.WEIRD,
                                        protocol=world.freeform)
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        delivered = client.get(f"/apparatus/{world.apparatus_a.id}/nextexecution",
                               headers=bearer_a).json()
        read_back = client.get(f"/execution/{execution_id}", headers=alice_auth).json()
        assert delivered["config_payload"] == self.WEIRD
        assert read_back["config_payload"] == self.WEIRD

    def test_results_round_trip_bytes(self, client, alice_auth, bearer_a, world):
        execution_id = create_execution(client, alice_auth, world,
                                        protocol=world.freeform, config="cfg")
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        run_results(client, world, bearer_a, execution_id,
                    [self.WEIRD, "<xml a='1'>not json</xml>"])
        rows = client.get(f"/execution/{execution_id}/result",
                          headers=alice_auth).json()
        assert [r["payload"] for r in rows] == [self.WEIRD, "<xml a='1'>not json</xml>"]


class TestIncrementalPolling:
    def test_concatenation_property(self, client, alice_auth, bearer_a, world):
        execution_id = create_execution(client, alice_auth, world,
                                        protocol=world.freeform, config="c")
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        payloads = [json.dumps({"n": i}) for i in range(1, 13)]
        run_results(client, world, bearer_a, execution_id, payloads)

        full = client.get(f"/execution/{execution_id}/result",
                          headers=alice_auth).json()
        assert [r["seq"] for r in full] == list(range(1, 13))
        for split in range(0, 13):
            tail = client.get(f"/execution/{execution_id}/result/{split}",
                              headers=alice_auth).json()
            assert full[:split] + tail == full

    def test_negative_cursor_rejected(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        response = client.get(f"/execution/{execution_id}/result/-1",
                              headers=alice_auth)
        assert response.status_code == 400


class TestCatalog:
    def test_catalog_is_public_and_complete(self, client, world):
        body = client.get("/apparatus").json()
        assert len(body) == 2
        entry = next(e for e in body if e["id"] == world.apparatus_a.id)
        assert entry["display_name"] == "Pendulum"
        assert entry["liveness"] == "NEVER_SEEN"
        assert entry["stream_url"] == "https://stream.example/a"
        protocol_ids = {p["id"] for p in entry["protocols"]}
        assert protocol_ids == {world.pendulum.id, world.freeform.id}
        schema = next(p for p in entry["protocols"]
                      if p["id"] == world.pendulum.id)["config_schema"]
        assert schema["properties"]["deltaX"]["maximum"] == 22

    def test_liveness_flips_online(self, client, bearer_a, world):
        client.put(f"/apparatus/{world.apparatus_a.id}/heartbeat", headers=bearer_a)
        entry = next(e for e in client.get("/apparatus").json()
                     if e["id"] == world.apparatus_a.id)
        assert entry["liveness"] == "ONLINE"

    def test_disabled_apparatus_hidden(self, client, world):
        from dataclasses import replace
        world.store.put(replace(
            world.store.get("apparatus", world.apparatus_b.id), enabled=False))
        ids = [e["id"] for e in client.get("/apparatus").json()]
        assert world.apparatus_b.id not in ids


class TestCsvExport:
    def finished_run(self, client, alice_auth, bearer_a, world, payloads):
        execution_id = create_execution(client, alice_auth, world,
                                        protocol=world.freeform, config="c")
        client.put(f"/execution/{execution_id}/start", headers=alice_auth)
        run_results(client, world, bearer_a, execution_id, payloads)
        client.post("/result", headers=bearer_a, json={
            "execution_id": execution_id, "kind": "FINAL",
            "payload": '{"summary": 1}'})
        client.put(f"/execution/{execution_id}/status", headers=bearer_a,
                   json={"status": "FINISHED"})
        return execution_id

    def test_flat_payloads_make_columns(self, client, alice_auth, bearer_a, world):
        execution_id = self.finished_run(client, alice_auth, bearer_a, world,
                                         ['{"t":1.99}', '{"t":2.01}'])
        response = client.get(f"/execution/{execution_id}/results.csv",
                              headers=alice_auth)
        assert response.status_code == 200
        assert response.headers["content-type"].startswith("text/csv")
        lines = response.text.split("\n")
        assert lines[0] == "seq,received_at,kind,t"
        assert len([l for l in lines if l]) == 3
        assert lines[1].endswith("PARTIAL,1.99")

    def test_union_in_first_appearance_order(self, client, alice_auth, bearer_a, world):
        execution_id = self.finished_run(
            client, alice_auth, bearer_a, world,
            ['{"a":1}', '{"b":2,"a":3}', '{"c":null}'])
        text = client.get(f"/execution/{execution_id}/results.csv",
                          headers=alice_auth).text
        lines = text.split("\n")
        assert lines[0] == "seq,received_at,kind,a,b,c"
        assert lines[1].endswith(",1,,")   # absent keys empty
        assert lines[3].endswith(",,,")    # null renders empty too

    def test_fallback_on_unparseable_payload(self, client, alice_auth,
                                             bearer_a, world):
        execution_id = self.finished_run(client, alice_auth, bearer_a, world,
                                         ["raw-blob"])
        text = client.get(f"/execution/{execution_id}/results.csv",
                          headers=alice_auth).text
        lines = text.split("\n")
        assert lines[0] == "seq,received_at,kind,payload"
        assert lines[1].endswith("PARTIAL,raw-blob")

    def test_zero_results_header_only(self, client, alice_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        text = client.get(f"/execution/{execution_id}/results.csv",
                          headers=alice_auth).text
        assert text == "seq,received_at,kind\n"

    def test_rfc4180_quoting(self, client, alice_auth, bearer_a, world):
        execution_id = self.finished_run(
            client, alice_auth, bearer_a, world,
            ['{"note":"a,b","quoted":"say \\"hi\\""}'])
        text = client.get(f"/execution/{execution_id}/results.csv",
                          headers=alice_auth).text
        lines = text.split("\n")
        assert lines[1].endswith('"a,b","say ""hi"""')
        assert "\r" not in text

    def test_forbidden_for_other_user(self, client, alice_auth, bob_auth, world):
        execution_id = create_execution(client, alice_auth, world)
        response = client.get(f"/execution/{execution_id}/results.csv",
                              headers=bob_auth)
        assert response.status_code == 403


class TestIdentityRoutes:
    def test_providers_listing(self, world, clock):
        providers = load_providers({
            "FREE_GOOGLE_OAUTH": "on", "FREE_GOOGLE_KEY": "k",
            "FREE_GOOGLE_SECRET": "provider-secret"})
        identity = IdentityService(world.store, clock=clock, providers=providers)
        client = TestClient(create_app(world.store, scheduler=world.scheduler,
                                       identity=identity))
        assert client.get("/providers").json() == {"providers": ["google"]}
        assertion = make_assertion("provider-secret", "uid-9", "u@example.com", "U")
        response = client.post("/auth/google", json={"assertion": assertion})
        assert response.status_code == 200
        me = client.get("/me", headers={
            "Authorization": f"Bearer {response.json()['token']}"})
        assert me.json()["provider"] == "google"

    def test_unknown_provider_404(self, client):
        response = client.post("/auth/github", json={"assertion": "x"})
        assert response.status_code == 404

    def test_lti_launch_over_http(self, client, world, clock):
        world.identity.register_consumer("moodle-1", "sh-secret")
        form = signed_launch_form(
            "http://testserver/lti/launch", "moodle-1", "sh-secret", "user-7",
            email="student@university.tv",
            timestamp=int(clock.now().timestamp()))
        response = client.post("/lti/launch", data=form, follow_redirects=False)
        assert response.status_code == 303
        assert response.headers["location"] == "/ui/"
        cookie = response.cookies.get("free_session")
        assert cookie
        me = client.get("/me", cookies={"free_session": cookie})
        assert re.fullmatch(r"student@university\.tv_[0-9a-f]{7}",
                            me.json()["username"])

    def test_lti_mutation_is_401(self, client, world, clock):
        world.identity.register_consumer("moodle-1", "sh-secret")
        form = signed_launch_form(
            "http://testserver/lti/launch", "moodle-1", "sh-secret", "user-7",
            timestamp=int(clock.now().timestamp()))
        form["user_id"] = "someone-else"
        response = client.post("/lti/launch", data=form, follow_redirects=False)
        assert response.status_code == 401

    def test_lti_replay_is_401(self, client, world, clock):
        world.identity.register_consumer("moodle-1", "sh-secret")
        form = signed_launch_form(
            "http://testserver/lti/launch", "moodle-1", "sh-secret", "user-7",
            timestamp=int(clock.now().timestamp()), nonce="nonce-once")
        assert client.post("/lti/launch", data=form,
                           follow_redirects=False).status_code == 303
        response = client.post("/lti/launch", data=form, follow_redirects=False)
        assert response.status_code == 401


class TestSecretHygiene:
    def test_no_route_ever_leaks_a_token(self, client, alice_auth, bearer_a, world):
        """Drive a whole flow and sweep every recorded response body."""
        bodies = []

        def collect(response):
            bodies.append(response.text)

        execution_id = create_execution(client, alice_auth, world)
        collect(client.get("/apparatus"))
        collect(client.get(f"/execution/{execution_id}", headers=alice_auth))
        collect(client.put(f"/execution/{execution_id}/start", headers=alice_auth))
        collect(client.get(f"/apparatus/{world.apparatus_a.id}/nextexecution",
                           headers=bearer_a))
        collect(client.put(f"/execution/{execution_id}/status", headers=bearer_a,
                           json={"status": "RUNNING"}))
        collect(client.post("/result", headers=bearer_a, json={
            "execution_id": execution_id, "kind": "FINAL", "payload": "{}"}))
        collect(client.put(f"/execution/{execution_id}/status", headers=bearer_a,
                           json={"status": "FINISHED"}))
        collect(client.get(f"/execution/{execution_id}/result", headers=alice_auth))
        collect(client.get(f"/execution/{execution_id}/results.csv",
                           headers=alice_auth))
        collect(client.get(f"/apparatus/{world.apparatus_a.id}", headers=bearer_a))
        collect(client.get(f"/apparatus/{world.apparatus_a.id}/queue",
                           headers=bearer_a))
        pattern = re.compile(re.escape(TOKEN_A) + "|" + re.escape(TOKEN_B))
        for body in bodies:
            assert not pattern.search(body)


class TestServe:
    def test_serve_and_bind_failure(self, world):
        handle = serve("127.0.0.1:0", world.store, scheduler=world.scheduler,
                       identity=world.identity)
        try:
            import httpx

            response = httpx.get(f"{handle.base_url}/apparatus", timeout=5)
            assert response.status_code == 200
            with pytest.raises(BindFailure):
                serve(f"127.0.0.1:{handle.port}", world.store)
        finally:
            handle.stop()

    def test_unusable_bind_address(self, world):
        with pytest.raises(BindFailure):
            serve("127.0.0.1:not-a-port", world.store)


class TestStaticPortal:
    def test_ui_mounted_when_directory_given(self, world, tmp_path):
        (tmp_path / "index.html").write_text("<!doctype html><title>portal</title>")
        app = create_app(world.store, scheduler=world.scheduler,
                         identity=world.identity, static_dir=str(tmp_path))
        client = TestClient(app)
        response = client.get("/ui/")
        assert response.status_code == 200
        assert "portal" in response.text
        assert client.get("/", follow_redirects=False).status_code == 307

    def test_no_ui_mounted_without_directory(self, client):
        assert client.get("/ui/").status_code == 404

    def test_built_frontend_serves(self, world):
        import pathlib

        dist = pathlib.Path(__file__).resolve().parent.parent / "frontend" / "dist"
        if not (dist / "index.html").exists():
            pytest.skip("frontend not built")
        app = create_app(world.store, scheduler=world.scheduler,
                         identity=world.identity, static_dir=str(dist))
        client = TestClient(app)
        page = client.get("/ui/")
        assert page.status_code == 200
        assert 'type="module"' in page.text
        assert client.get("/ui/assets/main.js").status_code == 200
        assert client.get("/ui/style.css").status_code == 200
