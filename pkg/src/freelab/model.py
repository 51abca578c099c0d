"""Domain entities, the execution lifecycle state machine, config-schema
validation and liveness derivation.

All types are immutable values and all operations are pure functions, so
anything here is safe to call from any number of concurrent contexts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any, Optional

from .errors import IllegalTransition, InvariantViolation, SchemaMalformed

LOCALES = ("en", "pt", "es")


# ---------------------------------------------------------------------------
# Timestamps (RFC 3339 UTC on the wire)
# ---------------------------------------------------------------------------


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def rfc3339(ts: datetime) -> str:
    """Serialize a timestamp as an RFC 3339 UTC string with a Z suffix."""
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_rfc3339(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00")).astimezone(timezone.utc)


# ---------------------------------------------------------------------------
# Entities
# ---------------------------------------------------------------------------


def localized(names: dict[str, str], locale: str = "en") -> str:
    """Pick a display string for ``locale``, falling back to the mandatory en entry."""
    return names.get(locale) or names["en"]


@dataclass(frozen=True)
class ApparatusType:
    """A class of physical hardware sharing capabilities (e.g. pendulum rigs)."""

    names: dict[str, str]
    description: dict[str, str] = field(default_factory=dict)
    id: Optional[int] = None

    def check(self) -> None:
        if not self.names.get("en"):
            raise InvariantViolation("apparatus type names must contain an 'en' entry")


@dataclass(frozen=True)
class Protocol:
    """One experiment type an apparatus type can run, with its config schema.

    ``access_groups`` empty means public; otherwise only principals sharing a
    group may create executions on it.
    """

    apparatus_type_id: int
    names: dict[str, str]
    description: dict[str, str] = field(default_factory=dict)
    config_schema: Optional[dict] = None
    ui_plugin: Optional[str] = None
    access_groups: frozenset[str] = frozenset()
    id: Optional[int] = None

    def check(self) -> None:
        if not self.names.get("en"):
            raise InvariantViolation("protocol names must contain an 'en' entry")
        if self.config_schema is not None:
            check_schema(self.config_schema)


@dataclass(frozen=True)
class Apparatus:
    """A concrete registered device instance.

    ``secret_token`` authenticates its agent and is never exposed by
    non-admin reads. Several apparatus may share the same protocols
    (replicas), and one apparatus may serve several protocols.
    """

    apparatus_type_id: int
    location: str
    protocol_ids: frozenset[int]
    secret_token: str
    stream_url: Optional[str] = None
    last_heartbeat: Optional[datetime] = None
    enabled: bool = True
    id: Optional[int] = None

    def check(self) -> None:
        if not self.secret_token:
            raise InvariantViolation("apparatus requires a secret token")


class ExecutionStatus(str, Enum):
    DRAFT = "DRAFT"
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    FINISHED = "FINISHED"
    ABORTED = "ABORTED"
    ERROR = "ERROR"

    def is_terminal(self) -> bool:
        return self in (self.FINISHED, self.ABORTED, self.ERROR)


class ExecutionEvent(str, Enum):
    SUBMIT = "SUBMIT"
    CLAIM_RUNNING = "CLAIM_RUNNING"
    FINISH = "FINISH"
    FAIL = "FAIL"
    ABORT = "ABORT"


_TRANSITIONS: dict[tuple[ExecutionStatus, ExecutionEvent], ExecutionStatus] = {
    (ExecutionStatus.DRAFT, ExecutionEvent.SUBMIT): ExecutionStatus.QUEUED,
    (ExecutionStatus.QUEUED, ExecutionEvent.CLAIM_RUNNING): ExecutionStatus.RUNNING,
    (ExecutionStatus.RUNNING, ExecutionEvent.FINISH): ExecutionStatus.FINISHED,
    (ExecutionStatus.RUNNING, ExecutionEvent.FAIL): ExecutionStatus.ERROR,
    (ExecutionStatus.QUEUED, ExecutionEvent.FAIL): ExecutionStatus.ERROR,
    (ExecutionStatus.DRAFT, ExecutionEvent.ABORT): ExecutionStatus.ABORTED,
    (ExecutionStatus.QUEUED, ExecutionEvent.ABORT): ExecutionStatus.ABORTED,
}


def transition(status: ExecutionStatus, event: ExecutionEvent) -> ExecutionStatus:
    """Return the successor state; total over the state x event table.

    Terminal states absorb every event with an IllegalTransition.
    """
    try:
        return _TRANSITIONS[(status, event)]
    except KeyError:
        raise IllegalTransition(status.value, event.value) from None


@dataclass(frozen=True)
class Execution:
    """One user-owned experiment run: an opaque config payload plus lifecycle.

    ``config_payload`` is stored and forwarded byte-identically; it is never
    parsed except for optional validation at submit time.
    """

    owner_id: int
    apparatus_id: int
    protocol_id: int
    config_payload: str
    status: ExecutionStatus = ExecutionStatus.DRAFT
    created_at: Optional[datetime] = None
    submitted_at: Optional[datetime] = None
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None
    id: Optional[int] = None

    # Timestamp presence by status: each stamp exists iff the state was reached.
    # submitted is optional for ABORTED (draft aborts never queued) and started
    # is optional for ERROR/ABORTED (queue-side failures never ran).
    _REQUIRED = {
        ExecutionStatus.DRAFT: ("created_at",),
        ExecutionStatus.QUEUED: ("created_at", "submitted_at"),
        ExecutionStatus.RUNNING: ("created_at", "submitted_at", "started_at"),
        ExecutionStatus.FINISHED: ("created_at", "submitted_at", "started_at", "finished_at"),
        ExecutionStatus.ABORTED: ("created_at", "finished_at"),
        ExecutionStatus.ERROR: ("created_at", "submitted_at", "finished_at"),
    }
    _FORBIDDEN = {
        ExecutionStatus.DRAFT: ("submitted_at", "started_at", "finished_at"),
        ExecutionStatus.QUEUED: ("started_at", "finished_at"),
        ExecutionStatus.RUNNING: ("finished_at",),
        ExecutionStatus.FINISHED: (),
        ExecutionStatus.ABORTED: ("started_at",),
        ExecutionStatus.ERROR: (),
    }

    def check(self) -> None:
        if not isinstance(self.config_payload, str):
            raise InvariantViolation("config_payload must be text")
        for name in self._REQUIRED[self.status]:
            if getattr(self, name) is None:
                raise InvariantViolation(f"{self.status.value} execution requires {name}")
        for name in self._FORBIDDEN[self.status]:
            if getattr(self, name) is not None:
                raise InvariantViolation(f"{self.status.value} execution must not set {name}")
        stamps = [
            t
            for t in (self.created_at, self.submitted_at, self.started_at, self.finished_at)
            if t is not None
        ]
        if any(a > b for a, b in zip(stamps, stamps[1:])):
            raise InvariantViolation("execution timestamps must be monotone")


class ResultKind(str, Enum):
    PARTIAL = "PARTIAL"
    FINAL = "FINAL"


@dataclass(frozen=True)
class Result:
    """One append-only result record; ``seq`` is contiguous 1..N per execution."""

    execution_id: int
    seq: int
    kind: ResultKind
    payload: str
    received_at: datetime

    def check(self) -> None:
        if self.seq < 1:
            raise InvariantViolation("result seq must be positive")
        if not isinstance(self.payload, str):
            raise InvariantViolation("result payload must be text")


class Role(str, Enum):
    ADMIN = "ADMIN"
    USER = "USER"
    GUEST = "GUEST"


LOCAL_PROVIDER = "LOCAL"


@dataclass(frozen=True)
class Principal:
    """A user identity: local, external-provider, or LTI-provisioned."""

    username: str
    role: Role = Role.USER
    email: Optional[str] = None
    display_name: str = ""
    provider: str = LOCAL_PROVIDER
    provider_uid: Optional[str] = None
    password_hash: Optional[str] = None
    groups: frozenset[str] = frozenset()
    last_active: Optional[datetime] = None
    id: Optional[int] = None

    def check(self) -> None:
        if not self.username:
            raise InvariantViolation("principal requires a username")
        if self.provider == LOCAL_PROVIDER:
            if self.provider_uid is not None:
                raise InvariantViolation("local principals carry no provider uid")
        else:
            if not self.provider_uid:
                raise InvariantViolation("external principals require a provider uid")
            if self.password_hash is not None:
                raise InvariantViolation("external principals carry no password hash")


@dataclass(frozen=True)
class LtiConsumer:
    """A registered LMS consumer allowed to sign launches."""

    consumer_key: str
    shared_secret: str
    tool_url: str = ""
    id: Optional[int] = None

    def check(self) -> None:
        if not self.consumer_key or not self.shared_secret:
            raise InvariantViolation("LTI consumer requires key and secret")


class LivenessState(str, Enum):
    ONLINE = "ONLINE"
    OFFLINE = "OFFLINE"
    NEVER_SEEN = "NEVER_SEEN"


def derive_liveness(
    last_heartbeat: Optional[datetime], now: datetime, interval: timedelta
) -> LivenessState:
    """Derive liveness purely from the last heartbeat: ONLINE within 3x the
    heartbeat interval, OFFLINE beyond it, NEVER_SEEN without any heartbeat."""
    if interval <= timedelta(0):
        raise ValueError("heartbeat interval must be positive")
    if last_heartbeat is None:
        return LivenessState.NEVER_SEEN
    if now - last_heartbeat <= 3 * interval:
        return LivenessState.ONLINE
    return LivenessState.OFFLINE


# ---------------------------------------------------------------------------
# Config-schema validation
# ---------------------------------------------------------------------------
#
# The schema subset is deliberately tiny so the validator and the UI form
# generator stay in lockstep: a single-level object of integer properties
# with default/minimum/maximum/multipleOf. Anything richer is rejected as
# malformed rather than silently ignored.

_SCHEMA_KEYS = {"type", "properties"}
_PROPERTY_KEYS = {"type", "default", "minimum", "maximum", "multipleOf"}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def check_schema(schema: dict) -> None:
    """Raise SchemaMalformed unless ``schema`` fits the supported subset."""
    if not isinstance(schema, dict):
        raise SchemaMalformed("schema document must be a JSON object")
    unknown = set(schema) - _SCHEMA_KEYS
    if unknown:
        raise SchemaMalformed(f"unsupported schema keys: {sorted(unknown)}")
    if "type" in schema and schema["type"] != "object":
        raise SchemaMalformed("schema type must be 'object'")
    properties = schema.get("properties", {})
    if not isinstance(properties, dict):
        raise SchemaMalformed("schema properties must be an object")
    for name, prop in properties.items():
        if not isinstance(prop, dict):
            raise SchemaMalformed(f"property {name} must be an object")
        unknown = set(prop) - _PROPERTY_KEYS
        if unknown:
            raise SchemaMalformed(f"property {name} has unsupported keys: {sorted(unknown)}")
        if prop.get("type") != "integer":
            raise SchemaMalformed(f"property {name} must declare type 'integer'")
        for key in ("default", "minimum", "maximum", "multipleOf"):
            if key in prop and not _is_int(prop[key]):
                raise SchemaMalformed(f"property {name}.{key} must be an integer")
        if "multipleOf" in prop and prop["multipleOf"] < 1:
            raise SchemaMalformed(f"property {name}.multipleOf must be positive")
        lo, hi = prop.get("minimum"), prop.get("maximum")
        if lo is not None and hi is not None and lo > hi:
            raise SchemaMalformed(f"property {name} has minimum above maximum")
        if "default" in prop:
            bad = _constraint_error(prop, prop["default"])
            if bad:
                raise SchemaMalformed(f"property {name} default {bad}")


def _constraint_error(prop: dict, value: Any) -> Optional[str]:
    if not _is_int(value):
        return "expected integer"
    if "minimum" in prop and value < prop["minimum"]:
        return f"below minimum {prop['minimum']}"
    if "maximum" in prop and value > prop["maximum"]:
        return f"above maximum {prop['maximum']}"
    if "multipleOf" in prop and value % prop["multipleOf"] != 0:
        return f"not a multiple of {prop['multipleOf']}"
    return None


@dataclass(frozen=True)
class FieldError:
    field: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validating a payload against a protocol schema.

    ``normalized_payload`` is set only when missing defaults were filled;
    otherwise the original bytes stand untouched.
    """

    ok: bool
    errors: tuple[FieldError, ...] = ()
    filled_defaults: dict[str, int] = field(default_factory=dict)
    normalized_payload: Optional[str] = None


def validate_config(schema: dict, payload: str) -> ValidationReport:
    """Validate opaque payload text against a schema in the supported subset.

    Deterministic and side-effect free. Unknown extra properties are errors;
    missing properties with a declared default are filled and accepted.
    """
    check_schema(schema)
    try:
        parsed = json.loads(payload)
    except (json.JSONDecodeError, TypeError) as exc:
        return ValidationReport(False, (FieldError("", f"payload is not valid JSON: {exc}"),))
    if not isinstance(parsed, dict):
        return ValidationReport(False, (FieldError("", "payload must be a JSON object"),))

    properties = schema.get("properties", {})
    errors: list[FieldError] = []
    filled: dict[str, int] = {}
    for name in parsed:
        if name not in properties:
            errors.append(FieldError(name, "unknown property"))
    for name, prop in properties.items():
        if name in parsed:
            bad = _constraint_error(prop, parsed[name])
            if bad:
                errors.append(FieldError(name, bad))
        elif "default" in prop:
            filled[name] = prop["default"]
        else:
            errors.append(FieldError(name, "missing and no default declared"))
    if errors:
        return ValidationReport(False, tuple(errors))
    normalized = None
    if filled:
        merged = dict(parsed)
        merged.update(filled)
        normalized = json.dumps(merged, ensure_ascii=False, separators=(", ", ": "))
    return ValidationReport(True, (), filled, normalized)


# ---------------------------------------------------------------------------
# Serialization (UTF-8 JSON; ids as decimal integers; RFC 3339 timestamps)
# ---------------------------------------------------------------------------

_TS_FIELDS = {"last_heartbeat", "created_at", "submitted_at", "started_at", "finished_at",
              "received_at", "last_active"}
_SET_FIELDS = {"protocol_ids", "groups", "access_groups"}
_ENUM_FIELDS = {"status": ExecutionStatus, "kind": ResultKind, "role": Role}

ENTITY_KINDS: dict[str, type] = {
    "apparatus_type": ApparatusType,
    "protocol": Protocol,
    "apparatus": Apparatus,
    "execution": Execution,
    "result": Result,
    "principal": Principal,
    "lti_consumer": LtiConsumer,
}

KIND_OF_TYPE = {cls: kind for kind, cls in ENTITY_KINDS.items()}


def entity_to_dict(entity: Any) -> dict:
    out: dict[str, Any] = {}
    for name, value in vars(entity).items():
        if value is None:
            out[name] = None
        elif name in _TS_FIELDS:
            out[name] = rfc3339(value)
        elif name in _SET_FIELDS:
            out[name] = sorted(value)
        elif isinstance(value, Enum):
            out[name] = value.value
        else:
            out[name] = value
    return out


def entity_from_dict(kind: str, data: dict) -> Any:
    cls = ENTITY_KINDS[kind]
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        if value is None:
            kwargs[name] = None
        elif name in _TS_FIELDS:
            kwargs[name] = parse_rfc3339(value)
        elif name in _SET_FIELDS:
            kwargs[name] = frozenset(value)
        elif name in _ENUM_FIELDS:
            kwargs[name] = _ENUM_FIELDS[name](value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def with_id(entity: Any, new_id: int) -> Any:
    return replace(entity, id=new_id)
