"""Transactional persistence for all entities, the per-apparatus queue query,
incremental result reads, and fair-use pruning.

Two observationally equivalent backends: MEMORY for tests and embedding, FILE
for deployment. The FILE backend keeps one directory holding a snapshot file
plus an append-only transaction journal, both UTF-8 JSON lines, versioned by
a ``{"free_store_version": 1}`` header. Every mutating operation appends one
fsynced journal record, so reopening after any completed transaction
reproduces the pre-close state.

Writes are serialized under a single-writer lock per store instance; reads
take the same lock and return snapshots, so callers may invoke from any
number of concurrent contexts.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterator, Optional

from .errors import (
    DeleteRefused,
    DuplicateFinal,
    InvariantViolation,
    MissingReference,
    NotFound,
    QuotaExceeded,
    WrongState,
)
from .model import (
    ENTITY_KINDS,
    KIND_OF_TYPE,
    Apparatus,
    Execution,
    ExecutionStatus,
    Principal,
    Protocol,
    Result,
    ResultKind,
    Role,
    entity_from_dict,
    entity_to_dict,
    utc_now,
    with_id,
)

STORE_VERSION = 1
SNAPSHOT_FILE = "snapshot.jsonl"
JOURNAL_FILE = "journal.jsonl"


class Backend(str, Enum):
    MEMORY = "MEMORY"
    FILE = "FILE"


@dataclass(frozen=True)
class StoreConfig:
    backend: Backend = Backend.MEMORY
    file_path: Optional[str] = None
    max_executions_per_user: int = 100
    user_inactivity_limit: timedelta = timedelta(days=365)

    def check(self) -> None:
        if (self.backend == Backend.FILE) != (self.file_path is not None):
            raise InvariantViolation("file_path is required iff backend is FILE")
        if self.max_executions_per_user < 1:
            raise InvariantViolation("max_executions_per_user must be positive")


@dataclass(frozen=True)
class PruneReport:
    users_removed: int
    executions_removed: int


class Store:
    """Entity tables plus the operations the scheduler and API build on."""

    def __init__(self, config: Optional[StoreConfig] = None,
                 clock: Callable[[], datetime] = utc_now):
        self.config = config or StoreConfig()
        self.config.check()
        self.clock = clock
        self._lock = threading.RLock()
        # kind -> id -> entity; results ride separately keyed by execution.
        self._tables: dict[str, dict[int, Any]] = {k: {} for k in ENTITY_KINDS if k != "result"}
        self._results: dict[int, list[Result]] = {}
        self._journal = None
        if self.config.backend == Backend.FILE:
            self._open_files(Path(self.config.file_path))

    # -- FILE backend plumbing ------------------------------------------------

    def _open_files(self, root: Path) -> None:
        root.mkdir(parents=True, exist_ok=True)
        snapshot = root / SNAPSHOT_FILE
        journal = root / JOURNAL_FILE
        if snapshot.exists():
            self._load_lines(snapshot)
        else:
            with open(snapshot, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"free_store_version": STORE_VERSION}) + "\n")
        if journal.exists():
            self._load_lines(journal)
        else:
            journal.touch()
        self._journal = open(journal, "a", encoding="utf-8")

    def _load_lines(self, path: Path) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    break  # torn tail write from a crash; everything before it committed
                if "free_store_version" in record:
                    if record["free_store_version"] != STORE_VERSION:
                        raise InvariantViolation(
                            f"unsupported store version {record['free_store_version']}")
                    continue
                self._apply_changes(record["tx"])

    def _apply_changes(self, changes: list[dict]) -> None:
        for change in changes:
            kind, action, data = change["kind"], change["action"], change.get("row")
            if kind == "result":
                if action == "append":
                    row = entity_from_dict("result", data)
                    self._results.setdefault(row.execution_id, []).append(row)
                elif action == "clear":
                    self._results.pop(change["execution_id"], None)
            elif action == "upsert":
                row = entity_from_dict(kind, data)
                self._tables[kind][row.id] = row
            elif action == "delete":
                self._tables[kind].pop(change["id"], None)

    def _commit(self, changes: list[dict]) -> None:
        self._apply_changes(changes)
        if self._journal is not None:
            self._journal.write(json.dumps({"tx": changes}, ensure_ascii=False) + "\n")
            self._journal.flush()
            os.fsync(self._journal.fileno())

    def close(self) -> None:
        """Compact: write the full state as a fresh snapshot, truncate the journal."""
        with self._lock:
            if self._journal is None:
                return
            self._journal.close()
            self._journal = None
            root = Path(self.config.file_path)
            tmp = root / (SNAPSHOT_FILE + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"free_store_version": STORE_VERSION}) + "\n")
                for tx in self._state_as_changes():
                    fh.write(json.dumps({"tx": [tx]}, ensure_ascii=False) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, root / SNAPSHOT_FILE)
            with open(root / JOURNAL_FILE, "w", encoding="utf-8"):
                pass

    def _state_as_changes(self) -> Iterator[dict]:
        for kind, table in self._tables.items():
            for row in table.values():
                yield {"kind": kind, "action": "upsert", "row": entity_to_dict(row)}
        for rows in self._results.values():
            for row in rows:
                yield {"kind": "result", "action": "append", "row": entity_to_dict(row)}

    # -- integrity ------------------------------------------------------------

    def _require(self, kind: str, entity_id: Optional[int], what: str) -> Any:
        row = self._tables[kind].get(entity_id)
        if row is None:
            raise MissingReference(f"{what} {entity_id} does not exist")
        return row

    def _check_references(self, entity: Any) -> None:
        if isinstance(entity, Protocol):
            self._require("apparatus_type", entity.apparatus_type_id, "apparatus type")
        elif isinstance(entity, Apparatus):
            atype = self._require("apparatus_type", entity.apparatus_type_id, "apparatus type")
            for pid in entity.protocol_ids:
                proto = self._require("protocol", pid, "protocol")
                if proto.apparatus_type_id != atype.id:
                    raise InvariantViolation(
                        f"protocol {pid} does not belong to apparatus type {atype.id}")
        elif isinstance(entity, Execution):
            self._require("principal", entity.owner_id, "principal")
            apparatus = self._require("apparatus", entity.apparatus_id, "apparatus")
            if entity.protocol_id not in apparatus.protocol_ids:
                raise MissingReference(
                    f"protocol {entity.protocol_id} is not served by apparatus {apparatus.id}")

    # -- core operations -------------------------------------------------------

    def put(self, entity: Any) -> Any:
        """Insert or update an entity; assigns a monotone id when absent."""
        kind = KIND_OF_TYPE[type(entity)]
        if kind == "result":
            raise InvariantViolation("results are appended via append_result")
        with self._lock:
            entity.check()
            self._check_references(entity)
            table = self._tables[kind]
            if entity.id is None:
                entity = with_id(entity, max(table, default=0) + 1)
            elif entity.id not in table:
                raise NotFound(f"{kind} {entity.id} does not exist")
            if (
                kind == "execution"
                and entity.id not in table
                and self._executions_owned(entity.owner_id) >= self.config.max_executions_per_user
            ):
                raise QuotaExceeded(
                    f"user {entity.owner_id} reached the execution quota "
                    f"({self.config.max_executions_per_user})")
            if kind == "principal":
                self._check_principal_unique(entity)
            self._commit([{"kind": kind, "action": "upsert", "row": entity_to_dict(entity)}])
            return entity

    def _executions_owned(self, owner_id: int) -> int:
        return sum(1 for e in self._tables["execution"].values() if e.owner_id == owner_id)

    def _check_principal_unique(self, entity: Principal) -> None:
        for other in self._tables["principal"].values():
            if other.id == entity.id:
                continue
            if other.username == entity.username:
                raise InvariantViolation(f"username {entity.username!r} already exists")
            if (
                entity.provider != "LOCAL"
                and (other.provider, other.provider_uid) == (entity.provider, entity.provider_uid)
            ):
                raise InvariantViolation(
                    f"provider identity {entity.provider}/{entity.provider_uid} already exists")

    def get(self, kind: str, entity_id: int) -> Any:
        with self._lock:
            row = self._tables[kind].get(entity_id)
            if row is None:
                raise NotFound(f"{kind} {entity_id} not found")
            return row

    def find(self, kind: str, predicate: Callable[[Any], bool]) -> Optional[Any]:
        with self._lock:
            for row in self._tables[kind].values():
                if predicate(row):
                    return row
            return None

    def list(self, kind: str, predicate: Optional[Callable[[Any], bool]] = None) -> list[Any]:
        with self._lock:
            rows = [r for r in self._tables[kind].values() if predicate is None or predicate(r)]
            return sorted(rows, key=lambda r: r.id)

    def delete(self, kind: str, entity_id: int) -> dict:
        """Delete an entity; executions follow the lifecycle-aware rules.

        Deleting anything still referenced elsewhere is refused so no
        operation sequence can leave a dangling reference.
        """
        with self._lock:
            row = self._tables[kind].get(entity_id)
            if row is None:
                raise NotFound(f"{kind} {entity_id} not found")
            if kind == "execution":
                return self._delete_execution(row)
            self._check_not_referenced(kind, entity_id)
            self._commit([{"kind": kind, "action": "delete", "id": entity_id}])
            return {"result": "deleted"}

    def _check_not_referenced(self, kind: str, entity_id: int) -> None:
        holders: list[str] = []
        if kind == "apparatus_type":
            if any(p.apparatus_type_id == entity_id for p in self._tables["protocol"].values()):
                holders.append("protocol")
            if any(a.apparatus_type_id == entity_id for a in self._tables["apparatus"].values()):
                holders.append("apparatus")
        elif kind == "protocol":
            if any(entity_id in a.protocol_ids for a in self._tables["apparatus"].values()):
                holders.append("apparatus")
            if any(e.protocol_id == entity_id for e in self._tables["execution"].values()):
                holders.append("execution")
        elif kind == "apparatus":
            if any(e.apparatus_id == entity_id for e in self._tables["execution"].values()):
                holders.append("execution")
        elif kind == "principal":
            if any(e.owner_id == entity_id for e in self._tables["execution"].values()):
                holders.append("execution")
        if holders:
            raise DeleteRefused(f"{kind} {entity_id} is referenced by {', '.join(holders)}")

    def _delete_execution(self, execution: Execution) -> dict:
        if execution.status == ExecutionStatus.RUNNING:
            raise DeleteRefused(f"execution {execution.id} is running")
        if execution.status == ExecutionStatus.QUEUED:
            # Soft-abort keeps the audit trail; the record stays readable.
            aborted = replace(execution, status=ExecutionStatus.ABORTED,
                              finished_at=self.clock())
            self._commit([{"kind": "execution", "action": "upsert",
                           "row": entity_to_dict(aborted)}])
            return {"result": "aborted"}
        self._commit([
            {"kind": "result", "action": "clear", "execution_id": execution.id},
            {"kind": "execution", "action": "delete", "id": execution.id},
        ])
        return {"result": "deleted"}

    # -- results ---------------------------------------------------------------

    def append_result(self, execution_id: int, kind: ResultKind, payload: str,
                      received_at: Optional[datetime] = None) -> Result:
        """Append a result with the next contiguous seq; payload kept bit-exact."""
        with self._lock:
            execution = self._tables["execution"].get(execution_id)
            if execution is None:
                raise NotFound(f"execution {execution_id} not found")
            if execution.status != ExecutionStatus.RUNNING:
                raise WrongState(
                    f"execution {execution_id} is {execution.status.value}, not RUNNING")
            rows = self._results.get(execution_id, [])
            if kind == ResultKind.FINAL and any(r.kind == ResultKind.FINAL for r in rows):
                raise DuplicateFinal(f"execution {execution_id} already has a FINAL result")
            result = Result(
                execution_id=execution_id,
                seq=len(rows) + 1,
                kind=kind,
                payload=payload,
                received_at=received_at or self.clock(),
            )
            result.check()
            self._commit([{"kind": "result", "action": "append",
                           "row": entity_to_dict(result)}])
            return result

    def results_after(self, execution_id: int, last_seq: int) -> list[Result]:
        """Results with seq > last_seq, ascending; 0 returns everything."""
        with self._lock:
            if execution_id not in self._tables["execution"]:
                raise NotFound(f"execution {execution_id} not found")
            if last_seq < 0:
                raise InvariantViolation("last_seq must be >= 0")
            return [r for r in self._results.get(execution_id, []) if r.seq > last_seq]

    # -- queue queries -----------------------------------------------------------

    def _queued_sorted(self, apparatus_id: int) -> list[Execution]:
        queued = [
            e for e in self._tables["execution"].values()
            if e.apparatus_id == apparatus_id and e.status == ExecutionStatus.QUEUED
        ]
        return sorted(queued, key=lambda e: (e.submitted_at, e.id))

    def next_queued(self, apparatus_id: int) -> Optional[Execution]:
        """Head of the FIFO queue, or nothing while the apparatus runs a job.

        Read-only; the hardware is serialized so nothing is offered while any
        execution of this apparatus is RUNNING.
        """
        with self._lock:
            if apparatus_id not in self._tables["apparatus"]:
                raise NotFound(f"apparatus {apparatus_id} not found")
            running = any(
                e.apparatus_id == apparatus_id and e.status == ExecutionStatus.RUNNING
                for e in self._tables["execution"].values()
            )
            if running:
                return None
            queue = self._queued_sorted(apparatus_id)
            return queue[0] if queue else None

    def waiting_queue(self, apparatus_id: int) -> list[Execution]:
        with self._lock:
            if apparatus_id not in self._tables["apparatus"]:
                raise NotFound(f"apparatus {apparatus_id} not found")
            return self._queued_sorted(apparatus_id)

    # -- fair use ------------------------------------------------------------------

    def prune(self, now: datetime) -> PruneReport:
        """Remove non-admin users inactive beyond the limit, cascading their
        executions and results. Users owning a RUNNING execution are kept
        until the job ends. Idempotent."""
        cutoff = now - self.config.user_inactivity_limit
        users_removed = 0
        executions_removed = 0
        with self._lock:
            for principal in list(self._tables["principal"].values()):
                if principal.role == Role.ADMIN:
                    continue
                if principal.last_active is not None and principal.last_active >= cutoff:
                    continue
                owned = [e for e in self._tables["execution"].values()
                         if e.owner_id == principal.id]
                if any(e.status == ExecutionStatus.RUNNING for e in owned):
                    continue
                changes: list[dict] = []
                for execution in owned:
                    changes.append({"kind": "result", "action": "clear",
                                    "execution_id": execution.id})
                    changes.append({"kind": "execution", "action": "delete",
                                    "id": execution.id})
                changes.append({"kind": "principal", "action": "delete", "id": principal.id})
                self._commit(changes)
                users_removed += 1
                executions_removed += len(owned)
        return PruneReport(users_removed, executions_removed)

    # -- observability ----------------------------------------------------------------

    def dump(self) -> dict:
        """Canonical JSON-able view of the whole store, for equivalence checks."""
        with self._lock:
            out: dict[str, Any] = {}
            for kind, table in self._tables.items():
                out[kind] = [entity_to_dict(table[i]) for i in sorted(table)]
            out["result"] = [
                entity_to_dict(r)
                for eid in sorted(self._results)
                for r in self._results[eid]
            ]
            return out
