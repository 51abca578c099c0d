"""The polling agent that sits next to an apparatus, plus two simulated
drivers (pendulum and photovoltaic panel).

Every connection is agent-initiated: the loop heartbeats on its interval,
polls for the next execution, claims it RUNNING, streams PARTIAL results,
posts the FINAL one and marks the execution FINISHED. Driver failures turn
into an ERROR status with a final ``{"error": ...}`` payload.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol as Interface

import httpx

from .errors import InvariantViolation, Unauthorized

log = logging.getLogger(__name__)

BACKOFF_CAP_SECONDS = 60.0


@dataclass(frozen=True)
class AgentConfig:
    server_url: str
    apparatus_id: int
    secret_token: str
    poll_interval: float = 2.0
    heartbeat_interval: float = 30.0

    def check(self) -> None:
        if self.poll_interval <= 0 or self.heartbeat_interval <= 0:
            raise InvariantViolation("agent intervals must be positive")
        if self.poll_interval > self.heartbeat_interval:
            raise InvariantViolation("poll_interval must not exceed heartbeat_interval")


class ExperimentDriver(Interface):
    """What an experiment implementation provides to the agent."""

    def setup(self, config_payload: str) -> Any: ...

    def step(self, state: Any) -> Optional[str]: ...

    def finalize(self, state: Any) -> str: ...


# ---------------------------------------------------------------------------
# Simulated drivers
# ---------------------------------------------------------------------------


def pendulum_period(length_m: float, gravity_mps2: float) -> float:
    """Small-angle period 2*pi*sqrt(L/g)."""
    if length_m <= 0 or gravity_mps2 <= 0:
        raise ValueError("length and gravity must be positive")
    return 2.0 * math.pi * math.sqrt(length_m / gravity_mps2)


@dataclass
class PendulumDriver:
    """Streams one simulated period measurement per sample, then an estimate
    of local gravity from the mean period."""

    length_m: float = 1.0
    gravity_mps2: float = 9.80665
    noise_rel: float = 0.001
    seed: int = 0

    def setup(self, config_payload: str) -> dict:
        config = json.loads(config_payload)
        samples = int(config["samples"])
        if samples < 1:
            raise ValueError("samples must be positive")
        return {
            "samples": samples,
            "emitted": 0,
            "periods": [],
            "rng": random.Random(self.seed),
        }

    def step(self, state: dict) -> Optional[str]:
        if state["emitted"] >= state["samples"]:
            return None
        base = pendulum_period(self.length_m, self.gravity_mps2)
        period = base * (1.0 + state["rng"].uniform(-self.noise_rel, self.noise_rel))
        state["emitted"] += 1
        state["periods"].append(period)
        return json.dumps({"n": state["emitted"], "period_s": period})

    def finalize(self, state: dict) -> str:
        mean_period = sum(state["periods"]) / len(state["periods"])
        g_estimate = 4.0 * math.pi ** 2 * self.length_m / mean_period ** 2
        return json.dumps({"mean_period_s": mean_period, "g_estimate_mps2": g_estimate})


_COLOR_FACTOR = {"red": 0.8, "green": 1.0, "blue": 0.9}

# Matched-load sweep around the 5-ohm internal resistance of the panel model.
_PV_INTERNAL_OHM = 5.0
_PV_LOADS = [0.5 * 1.25 ** i for i in range(24)]


@dataclass
class PhotovoltaicDriver:
    """Sweeps a load across a panel lit by a tricolor source; generated power
    follows the cosine of the incidence angle scaled per color."""

    max_power_w: float = 2.0
    seed: int = 0

    def setup(self, config_payload: str) -> dict:
        config = json.loads(config_payload)
        angle = float(config["angle_deg"])
        power_pct = float(config["power_pct"])
        color = config["color"]
        if not 0 <= angle <= 90:
            raise ValueError("angle_deg must be within 0..90")
        if not 0 <= power_pct <= 100:
            raise ValueError("power_pct must be within 0..100")
        if color not in _COLOR_FACTOR:
            raise ValueError(f"color must be one of {sorted(_COLOR_FACTOR)}")
        generated = (self.max_power_w * (power_pct / 100.0)
                     * math.cos(math.radians(angle)) * _COLOR_FACTOR[color])
        return {
            "generated_w": generated,
            "index": 0,
            "best_w": 0.0,
            "rng": random.Random(self.seed),
        }

    def step(self, state: dict) -> Optional[str]:
        if state["index"] >= len(_PV_LOADS):
            return None
        # The load knob is imprecise; measurements over the dialed load are exact.
        load = _PV_LOADS[state["index"]] * (1.0 + state["rng"].uniform(-0.001, 0.001))
        state["index"] += 1
        source_v = 2.0 * math.sqrt(state["generated_w"] * _PV_INTERNAL_OHM)
        current = source_v / (_PV_INTERNAL_OHM + load)
        voltage = current * load
        state["best_w"] = max(state["best_w"], voltage * current)
        return json.dumps({"load_ohm": load, "voltage_v": voltage, "current_a": current})

    def finalize(self, state: dict) -> str:
        return json.dumps({"p_max_w": state["best_w"]})


DRIVER_KINDS: dict[str, type] = {
    "pendulum": PendulumDriver,
    "photovoltaic": PhotovoltaicDriver,
}


def build_driver(kind: str, params: dict) -> ExperimentDriver:
    try:
        cls = DRIVER_KINDS[kind]
    except KeyError:
        raise InvariantViolation(f"unknown driver kind {kind!r}") from None
    return cls(**params)


# ---------------------------------------------------------------------------
# The agent loop
# ---------------------------------------------------------------------------


@dataclass
class AgentReport:
    executions_finished: int = 0
    executions_errored: int = 0
    heartbeats_sent: int = 0
    polls: int = 0
    results_posted: int = 0
    fatal: Optional[str] = None


class Agent:
    """Drives a map of protocol -> driver against the server, one execution in
    flight at a time. ``step()`` performs one small unit of work so a harness
    can interleave several agents deterministically; ``run_forever`` wraps it
    with pacing and backoff for real deployments.
    """

    def __init__(self, config: AgentConfig, drivers: dict[int, ExperimentDriver],
                 client: Optional[httpx.Client] = None,
                 clock: Callable[[], float] = time.time):
        config.check()
        self.config = config
        self.drivers = drivers
        self.client = client or httpx.Client(base_url=config.server_url, timeout=10.0)
        self.clock = clock
        self.report = AgentReport()
        self._auth = {"Authorization": f"Bearer {config.secret_token}"}
        self._last_heartbeat: Optional[float] = None
        self._run: Optional[dict] = None

    # -- HTTP helpers --------------------------------------------------------

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        response = self.client.request(method, path, headers=self._auth, **kwargs)
        if response.status_code == 401:
            raise Unauthorized(f"{method} {path}: server rejected the apparatus token")
        return response

    def _heartbeat_if_due(self) -> None:
        now = self.clock()
        if (self._last_heartbeat is not None
                and now - self._last_heartbeat < self.config.heartbeat_interval):
            return
        self._request("PUT", f"/apparatus/{self.config.apparatus_id}/heartbeat")
        self._last_heartbeat = now
        self.report.heartbeats_sent += 1

    def _apply_status(self, execution_id: int, status: str) -> None:
        self._request("PUT", f"/execution/{execution_id}/status",
                      json={"status": status}).raise_for_status()

    def _post_result(self, execution_id: int, kind: str, payload: str) -> None:
        self._request("POST", "/result", json={
            "execution_id": execution_id, "kind": kind, "payload": payload,
        }).raise_for_status()
        self.report.results_posted += 1

    # -- one unit of work ------------------------------------------------------

    def step(self) -> bool:
        """Do one unit of work; True when a run is active or work was found."""
        self._heartbeat_if_due()
        if self._run is None:
            return self._poll()
        self._advance_run()
        return True

    def _poll(self) -> bool:
        self.report.polls += 1
        response = self._request(
            "GET", f"/apparatus/{self.config.apparatus_id}/nextexecution")
        if response.status_code == 204:
            return False
        response.raise_for_status()
        delivery = response.json()
        execution_id = delivery["execution_id"]
        payload = delivery["config_payload"]
        log.info("delivery execution=%d payload=%s", execution_id, payload)
        self._apply_status(execution_id, "RUNNING")
        driver = self.drivers.get(delivery["protocol_id"])
        if driver is None:
            self._fail(execution_id, f"no driver for protocol {delivery['protocol_id']}")
            return True
        try:
            state = driver.setup(payload)
        except Exception as exc:
            self._fail(execution_id, f"setup failed: {exc}")
            return True
        self._run = {"execution_id": execution_id, "driver": driver, "state": state,
                     "pending_partial": None, "final": None, "final_posted": False}
        return True

    def _advance_run(self) -> None:
        # Driver work and result delivery are decoupled so a step interrupted
        # by a transient network error resumes without skipping a measurement
        # or running the driver twice.
        run = self._run
        execution_id = run["execution_id"]
        try:
            if run["pending_partial"] is None and run["final"] is None:
                partial = run["driver"].step(run["state"])
                if partial is None:
                    run["final"] = run["driver"].finalize(run["state"])
                else:
                    run["pending_partial"] = partial
        except Exception as exc:
            self._run = None
            self._fail(execution_id, f"driver failed: {exc}")
            return
        if run["pending_partial"] is not None:
            self._post_result(execution_id, "PARTIAL", run["pending_partial"])
            run["pending_partial"] = None
            return
        if not run["final_posted"]:
            response = self._request("POST", "/result", json={
                "execution_id": execution_id, "kind": "FINAL", "payload": run["final"]})
            # 409 means the final already landed on an earlier, half-lost retry.
            if response.status_code != 409:
                response.raise_for_status()
                self.report.results_posted += 1
            run["final_posted"] = True
        self._apply_status(execution_id, "FINISHED")
        self.report.executions_finished += 1
        log.info("finished execution=%d", execution_id)
        self._run = None

    def _fail(self, execution_id: int, message: str) -> None:
        # Post the error payload while still RUNNING; results close before the status.
        log.warning("execution=%d error: %s", execution_id, message)
        try:
            self._post_result(execution_id, "FINAL", json.dumps({"error": message}))
        except Exception:
            log.warning("could not deliver error payload for execution=%d", execution_id)
        self._apply_status(execution_id, "ERROR")
        self.report.executions_errored += 1

    # -- deployment loop ----------------------------------------------------------

    def run_forever(self, stop: threading.Event,
                    sleep: Callable[[float], None] = time.sleep) -> AgentReport:
        backoff = self.config.poll_interval
        # An in-flight run finishes before the stop signal is honored, so no
        # execution is ever left RUNNING by a shutdown.
        while not stop.is_set() or self._run is not None:
            try:
                busy = self.step()
                backoff = self.config.poll_interval
                if not busy and not stop.is_set():
                    sleep(self.config.poll_interval)
            except Unauthorized as exc:
                self.report.fatal = str(exc)
                log.error("fatal: %s", exc)
                break
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                log.warning("transient error, retrying in %.1fs: %s", backoff, exc)
                sleep(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_SECONDS)
        return self.report


def run_agent(config: AgentConfig, drivers: dict[int, ExperimentDriver],
              stop: threading.Event,
              client: Optional[httpx.Client] = None) -> AgentReport:
    """Run one agent until the stop signal; returns its exit report."""
    return Agent(config, drivers, client=client).run_forever(stop)


# ---------------------------------------------------------------------------
# Standalone entry point
# ---------------------------------------------------------------------------


def load_agent_file(path: str) -> tuple[AgentConfig, dict[int, ExperimentDriver]]:
    """Agent config file: UTF-8 JSON with server_url, apparatus_id,
    secret_token, poll_interval_s, heartbeat_interval_s and a drivers list of
    {protocol_id, kind, params}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    config = AgentConfig(
        server_url=raw["server_url"],
        apparatus_id=int(raw["apparatus_id"]),
        secret_token=raw["secret_token"],
        poll_interval=float(raw.get("poll_interval_s", 2.0)),
        heartbeat_interval=float(raw.get("heartbeat_interval_s", 30.0)),
    )
    drivers = {
        int(entry["protocol_id"]): build_driver(entry["kind"], entry.get("params", {}))
        for entry in raw.get("drivers", [])
    }
    return config, drivers


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="freelab-agent",
                                     description="Run an experiment-control agent.")
    parser.add_argument("--config", required=True, help="path to the agent JSON config")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    config, drivers = load_agent_file(args.config)
    stop = threading.Event()
    try:
        report = run_agent(config, drivers, stop)
    except KeyboardInterrupt:
        return 0
    return 0 if report.fatal is None else 2


if __name__ == "__main__":
    raise SystemExit(main())
