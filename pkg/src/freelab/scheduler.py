"""Coordinates execution lifecycle over the store: submit, apparatus claim,
status changes and heartbeats — enforcing the state machine and per-apparatus
serialization atomically.

Only callee operations are exposed to agents; nothing here (or anywhere else
in the server) ever addresses an agent, so agents need no public address.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from typing import Callable, Optional

from .errors import Busy, Forbidden, Unauthorized, ValidationFailed, WrongApparatus
from .model import (
    Apparatus,
    Execution,
    ExecutionEvent,
    ExecutionStatus,
    LivenessState,
    Principal,
    Role,
    derive_liveness,
    transition,
    utc_now,
    validate_config,
)
from .store import Store

DEFAULT_HEARTBEAT_INTERVAL = timedelta(seconds=30)

# Target status an agent may request, and the event that models it.
_EVENT_FOR_STATUS = {
    ExecutionStatus.RUNNING: ExecutionEvent.CLAIM_RUNNING,
    ExecutionStatus.FINISHED: ExecutionEvent.FINISH,
    ExecutionStatus.ERROR: ExecutionEvent.FAIL,
    ExecutionStatus.ABORTED: ExecutionEvent.ABORT,
}


@dataclass(frozen=True)
class ExecutionDelivery:
    """What an apparatus receives: a bit-exact copy of the stored payload."""

    execution_id: int
    protocol_id: int
    config_payload: str


class Scheduler:
    def __init__(self, store: Store, clock: Callable[[], datetime] = utc_now,
                 heartbeat_interval: timedelta = DEFAULT_HEARTBEAT_INTERVAL):
        self.store = store
        self.clock = clock
        self.heartbeat_interval = heartbeat_interval
        # One lock serializes claim/queue mutations; reads stay consistent
        # because the store snapshots under its own lock.
        self._lock = threading.RLock()

    # -- user side --------------------------------------------------------------

    def submit(self, execution_id: int, actor: Principal) -> Execution:
        """DRAFT -> QUEUED, validating the payload when the protocol has a schema.

        Default-filling is the one documented payload mutation: the filled
        text is what gets stored and later delivered.
        """
        with self._lock:
            execution = self.store.get("execution", execution_id)
            self._check_owner(execution, actor)
            new_status = transition(execution.status, ExecutionEvent.SUBMIT)
            protocol = self.store.get("protocol", execution.protocol_id)
            payload = execution.config_payload
            if protocol.config_schema is not None:
                report = validate_config(protocol.config_schema, payload)
                if not report.ok:
                    raise ValidationFailed(report)
                if report.normalized_payload is not None:
                    payload = report.normalized_payload
            queued = replace(execution, status=new_status, config_payload=payload,
                             submitted_at=self.clock())
            return self.store.put(queued)

    def status_of(self, execution_id: int, actor: Principal) -> ExecutionStatus:
        execution = self.store.get("execution", execution_id)
        self._check_owner(execution, actor)
        return execution.status

    @staticmethod
    def _check_owner(execution: Execution, actor: Principal) -> None:
        if actor.role != Role.ADMIN and execution.owner_id != actor.id:
            raise Forbidden(f"execution {execution.id} belongs to another user")

    # -- apparatus side -----------------------------------------------------------

    def authenticate_apparatus(self, apparatus_id: int, token: str) -> Apparatus:
        apparatus = self.store.get("apparatus", apparatus_id)
        if token != apparatus.secret_token:
            raise Unauthorized("bad apparatus token")
        return apparatus

    def pull_next(self, apparatus_id: int, token: str) -> Optional[ExecutionDelivery]:
        """Head of the queue as an idempotent read; claiming stays explicit.

        Records an implicit heartbeat so a polling agent need not chatter.
        Disabled apparatus are offered nothing.
        """
        with self._lock:
            apparatus = self.authenticate_apparatus(apparatus_id, token)
            self._record_heartbeat(apparatus)
            if not apparatus.enabled:
                return None
            execution = self.store.next_queued(apparatus_id)
            if execution is None:
                return None
            return ExecutionDelivery(
                execution_id=execution.id,
                protocol_id=execution.protocol_id,
                config_payload=execution.config_payload,
            )

    def apply_status(self, apparatus_id: int, token: str, execution_id: int,
                     new_status: ExecutionStatus) -> Execution:
        """Atomically move an execution of this apparatus to ``new_status``."""
        with self._lock:
            self.authenticate_apparatus(apparatus_id, token)
            execution = self.store.get("execution", execution_id)
            if execution.apparatus_id != apparatus_id:
                raise WrongApparatus(
                    f"execution {execution_id} belongs to apparatus {execution.apparatus_id}")
            event = _EVENT_FOR_STATUS.get(new_status)
            if event is None:
                raise ValueError(f"agents cannot request status {new_status.value}")
            next_status = transition(execution.status, event)
            now = self.clock()
            if next_status == ExecutionStatus.RUNNING:
                others_running = self.store.list(
                    "execution",
                    lambda e: e.apparatus_id == apparatus_id
                    and e.status == ExecutionStatus.RUNNING,
                )
                if others_running:
                    raise Busy(
                        f"apparatus {apparatus_id} is already running "
                        f"execution {others_running[0].id}")
                execution = replace(execution, status=next_status, started_at=now)
            elif next_status.is_terminal():
                execution = replace(execution, status=next_status, finished_at=now)
            else:
                execution = replace(execution, status=next_status)
            return self.store.put(execution)

    def heartbeat(self, apparatus_id: int, token: str,
                  now: Optional[datetime] = None) -> LivenessState:
        with self._lock:
            apparatus = self.authenticate_apparatus(apparatus_id, token)
            self._record_heartbeat(apparatus, now)
            return LivenessState.ONLINE

    def _record_heartbeat(self, apparatus: Apparatus, now: Optional[datetime] = None) -> None:
        stamped = replace(apparatus, last_heartbeat=now or self.clock())
        self.store.put(stamped)

    def liveness_of(self, apparatus: Apparatus) -> LivenessState:
        return derive_liveness(apparatus.last_heartbeat, self.clock(), self.heartbeat_interval)
