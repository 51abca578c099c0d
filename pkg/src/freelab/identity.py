"""Local accounts, pluggable external identity providers configured by
environment variables, LTI-style signed launch with user auto-provisioning,
sessions, and group-based authorization.

External providers are verified offline: an assertion is the base64 of a JSON
object ``{uid, email, display_name, hmac}`` where ``hmac`` is the hex
HMAC-SHA256 of ``uid|email|display_name`` under the provider secret. LTI
launches are OAuth 1.0a form posts signed with HMAC-SHA1.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import logging
import re
import secrets
import threading
import urllib.parse
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from typing import Any, Callable, Mapping, Optional

from .errors import (
    BadAssertion,
    BadCredentials,
    BadSignature,
    ReplayedNonce,
    StaleTimestamp,
    Unauthorized,
    UnknownConsumer,
    UnknownProvider,
)
from .model import (
    Execution,
    LtiConsumer,
    Principal,
    Protocol,
    Role,
    utc_now,
)
from .store import Store

log = logging.getLogger(__name__)

SESSION_COOKIE = "free_session"
DEFAULT_SESSION_TTL = timedelta(hours=12)
LTI_MAX_AGE_SECONDS = 300
NONCE_RETENTION_SECONDS = 600

_PROVIDER_ENV_RE = re.compile(r"^FREE_([A-Z0-9]+)_OAUTH$")

_PBKDF2_ITERATIONS = 120_000


# ---------------------------------------------------------------------------
# Passwords
# ---------------------------------------------------------------------------


def hash_password(password: str) -> str:
    salt = secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode(), salt, _PBKDF2_ITERATIONS)
    return f"pbkdf2_sha256${_PBKDF2_ITERATIONS}${salt.hex()}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    try:
        _, iterations, salt_hex, digest_hex = stored.split("$")
        digest = hashlib.pbkdf2_hmac(
            "sha256", password.encode(), bytes.fromhex(salt_hex), int(iterations))
        return hmac.compare_digest(digest.hex(), digest_hex)
    except (ValueError, AttributeError):
        return False


# Checked against when the username is unknown, so both failure paths cost
# one PBKDF2 evaluation.
_DUMMY_HASH = hash_password("*")


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderConfig:
    provider_id: str
    enabled: bool
    key: str
    secret: str


def load_providers(environ: Mapping[str, str]) -> list[ProviderConfig]:
    """Collect enabled providers from FREE_<P>_OAUTH / _KEY / _SECRET variables.

    Lenient: disabled or incomplete providers are excluded with a warning.
    """
    providers = []
    for name, value in sorted(environ.items()):
        match = _PROVIDER_ENV_RE.match(name)
        if not match:
            continue
        tag = match.group(1)
        if value.strip().lower() != "on":
            log.warning("provider %s is configured off; skipping", tag.lower())
            continue
        key = environ.get(f"FREE_{tag}_KEY", "")
        secret = environ.get(f"FREE_{tag}_SECRET", "")
        if not key or not secret:
            log.warning("provider %s enabled but key/secret incomplete; skipping", tag.lower())
            continue
        providers.append(ProviderConfig(tag.lower(), True, key, secret))
    return providers


def make_assertion(secret: str, uid: str, email: str = "", display_name: str = "") -> str:
    """Produce a provider assertion; the mock-provider counterpart of external_login."""
    mac = hmac.new(secret.encode(), f"{uid}|{email}|{display_name}".encode(),
                   hashlib.sha256).hexdigest()
    body = json.dumps(
        {"uid": uid, "email": email, "display_name": display_name, "hmac": mac})
    return base64.b64encode(body.encode()).decode()


# ---------------------------------------------------------------------------
# OAuth 1.0a (HMAC-SHA1) launch signatures
# ---------------------------------------------------------------------------


def _pct(value: str) -> str:
    return urllib.parse.quote(str(value), safe="")


def oauth_base_string(method: str, url: str, params: Mapping[str, str]) -> str:
    pairs = sorted(
        (_pct(k), _pct(v)) for k, v in params.items() if k != "oauth_signature")
    param_string = "&".join(f"{k}={v}" for k, v in pairs)
    return "&".join([method.upper(), _pct(url), _pct(param_string)])


def sign_launch(method: str, url: str, params: Mapping[str, str], shared_secret: str) -> str:
    """Base64 HMAC-SHA1 over the OAuth 1.0a signature base string (no token secret)."""
    key = _pct(shared_secret) + "&"
    base = oauth_base_string(method, url, params)
    digest = hmac.new(key.encode(), base.encode(), hashlib.sha1).digest()
    return base64.b64encode(digest).decode()


def signed_launch_form(url: str, consumer_key: str, shared_secret: str,
                       user_id: str, email: Optional[str] = None,
                       timestamp: Optional[int] = None,
                       nonce: Optional[str] = None,
                       extra: Optional[Mapping[str, str]] = None) -> dict[str, str]:
    """Assemble a correctly signed launch form, as an LMS would."""
    form = {
        "oauth_consumer_key": consumer_key,
        "oauth_signature_method": "HMAC-SHA1",
        "oauth_timestamp": str(timestamp if timestamp is not None else int(utc_now().timestamp())),
        "oauth_nonce": nonce or secrets.token_hex(16),
        "oauth_version": "1.0",
        "lti_message_type": "basic-lti-launch-request",
        "lti_version": "LTI-1p0",
        "user_id": user_id,
    }
    if email:
        form["lis_person_contact_email_primary"] = email
    if extra:
        form.update(extra)
    form["oauth_signature"] = sign_launch("POST", url, form, shared_secret)
    return form


def lti_username(consumer_key: str, user_id: str, email: Optional[str]) -> str:
    suffix = hashlib.sha256(f"{consumer_key}|{user_id}".encode()).hexdigest()[:7]
    return f"{email}_{suffix}" if email else f"lti_{suffix}"


# ---------------------------------------------------------------------------
# Sessions and the identity service
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Session:
    token: str
    principal_id: int
    created_at: datetime
    expires_at: datetime


class IdentityService:
    def __init__(self, store: Store, clock: Callable[[], datetime] = utc_now,
                 session_ttl: timedelta = DEFAULT_SESSION_TTL,
                 providers: Optional[list[ProviderConfig]] = None):
        self.store = store
        self.clock = clock
        self.session_ttl = session_ttl
        self.providers = {p.provider_id: p for p in (providers or []) if p.enabled}
        self._sessions: dict[str, Session] = {}
        self._nonces: dict[tuple[str, str], float] = {}
        self._lock = threading.RLock()

    # -- sessions ---------------------------------------------------------------

    def _issue_session(self, principal: Principal) -> Session:
        now = self.clock()
        session = Session(
            token=secrets.token_urlsafe(32),
            principal_id=principal.id,
            created_at=now,
            expires_at=now + self.session_ttl,
        )
        with self._lock:
            self._sessions[session.token] = session
        self.store.put(replace(principal, last_active=now))
        return session

    def authenticate(self, token: str) -> Principal:
        """Resolve a session token to its principal, refreshing last_active."""
        with self._lock:
            session = self._sessions.get(token)
            if session is None:
                raise Unauthorized("unknown session")
            now = self.clock()
            if now >= session.expires_at:
                del self._sessions[token]
                raise Unauthorized("session expired")
        try:
            principal = self.store.get("principal", session.principal_id)
        except Exception:
            raise Unauthorized("session principal no longer exists") from None
        self.store.put(replace(principal, last_active=now))
        return principal

    def logout(self, token: str) -> None:
        with self._lock:
            self._sessions.pop(token, None)

    # -- local accounts ------------------------------------------------------------

    def create_local_user(self, username: str, password: str,
                          role: Role = Role.USER,
                          groups: frozenset[str] = frozenset()) -> Principal:
        principal = Principal(
            username=username,
            role=role,
            password_hash=hash_password(password),
            groups=groups,
            last_active=self.clock(),
        )
        return self.store.put(principal)

    def login_local(self, username: str, password: str) -> Session:
        """Constant-time credential check: unknown-user and wrong-password paths
        both evaluate one PBKDF2 and raise the same error."""
        principal = self.store.find(
            "principal",
            lambda p: p.username == username and p.provider == "LOCAL")
        if principal is None or principal.password_hash is None:
            verify_password(password, _DUMMY_HASH)
            raise BadCredentials("bad credentials")
        if not verify_password(password, principal.password_hash):
            raise BadCredentials("bad credentials")
        return self._issue_session(principal)

    # -- external providers -----------------------------------------------------------

    def external_login(self, provider_id: str, assertion: str) -> Session:
        provider = self.providers.get(provider_id)
        if provider is None:
            raise UnknownProvider(f"provider {provider_id!r} is not enabled")
        try:
            body = json.loads(base64.b64decode(assertion, validate=True))
            uid = body["uid"]
            email = body.get("email", "")
            display_name = body.get("display_name", "")
            presented = body["hmac"]
        except Exception as exc:
            raise BadAssertion(f"undecodable assertion: {exc}") from None
        expected = hmac.new(provider.secret.encode(),
                            f"{uid}|{email}|{display_name}".encode(),
                            hashlib.sha256).hexdigest()
        if not hmac.compare_digest(expected, str(presented)):
            raise BadAssertion("assertion MAC mismatch")
        principal = self._find_or_create(
            provider=provider_id,
            provider_uid=uid,
            username=email or f"{provider_id}.{uid}",
            email=email or None,
            display_name=display_name,
        )
        return self._issue_session(principal)

    # -- LTI launch ----------------------------------------------------------------

    def register_consumer(self, consumer_key: str, shared_secret: str,
                          tool_url: str = "") -> LtiConsumer:
        return self.store.put(LtiConsumer(consumer_key, shared_secret, tool_url))

    def lti_launch(self, form: Mapping[str, str], url: str,
                   method: str = "POST") -> tuple[Session, str]:
        """Verify a signed launch and log the user in without further credentials.

        Returns the session plus the redirect target into the portal.
        """
        for required in ("oauth_consumer_key", "oauth_signature",
                         "oauth_timestamp", "oauth_nonce", "user_id"):
            if not form.get(required):
                raise BadSignature(f"launch form lacks {required}")
        if form.get("oauth_signature_method", "HMAC-SHA1") != "HMAC-SHA1":
            raise BadSignature("unsupported signature method")
        consumer_key = form["oauth_consumer_key"]
        consumer = self.store.find(
            "lti_consumer", lambda c: c.consumer_key == consumer_key)
        if consumer is None:
            raise UnknownConsumer(f"unknown consumer key {consumer_key!r}")
        expected = sign_launch(method, url, form, consumer.shared_secret)
        if not hmac.compare_digest(expected, form["oauth_signature"]):
            raise BadSignature("launch signature mismatch")
        try:
            launch_ts = int(form["oauth_timestamp"])
        except ValueError:
            raise StaleTimestamp("unreadable oauth_timestamp") from None
        now_epoch = self.clock().timestamp()
        if abs(now_epoch - launch_ts) > LTI_MAX_AGE_SECONDS:
            raise StaleTimestamp(f"launch timestamp {launch_ts} outside the accepted window")
        with self._lock:
            self._evict_nonces(now_epoch)
            nonce_key = (consumer_key, form["oauth_nonce"])
            if nonce_key in self._nonces:
                raise ReplayedNonce(f"nonce {form['oauth_nonce']!r} already seen")
            self._nonces[nonce_key] = now_epoch
        email = form.get("lis_person_contact_email_primary")
        principal = self._find_or_create(
            provider=consumer_key,
            provider_uid=form["user_id"],
            username=lti_username(consumer_key, form["user_id"], email),
            email=email,
            display_name=form.get("lis_person_name_full", ""),
        )
        return self._issue_session(principal), "/ui/"

    def _evict_nonces(self, now_epoch: float) -> None:
        expired = [k for k, seen in self._nonces.items()
                   if now_epoch - seen > NONCE_RETENTION_SECONDS]
        for key in expired:
            del self._nonces[key]

    # -- provisioning ---------------------------------------------------------------

    def _find_or_create(self, provider: str, provider_uid: str, username: str,
                        email: Optional[str], display_name: str) -> Principal:
        """Atomic find-or-create keyed by (provider, uid): N identical logins
        provision exactly one principal."""
        with self._lock:
            existing = self.store.find(
                "principal",
                lambda p: (p.provider, p.provider_uid) == (provider, provider_uid))
            if existing is not None:
                return existing
            if self.store.find("principal", lambda p: p.username == username):
                username = f"{username}_{provider}"
            principal = Principal(
                username=username,
                role=Role.USER,
                email=email,
                display_name=display_name,
                provider=provider,
                provider_uid=provider_uid,
                last_active=self.clock(),
            )
            return self.store.put(principal)


# ---------------------------------------------------------------------------
# Authorization
# ---------------------------------------------------------------------------


def authorize(principal: Optional[Principal], action: str, resource: Any = None) -> bool:
    """Group-based permission check; total over any (principal, action, resource).

    ADMIN allows everything. USER may create executions on protocols whose
    access-group set is empty (public) or intersects the user's groups, and
    may touch only their own executions. GUEST is read-only catalog.
    """
    if action == "catalog:read":
        return True
    if principal is None:
        return False
    if principal.role == Role.ADMIN:
        return True
    if principal.role == Role.GUEST:
        return False
    if action == "execution:create" and isinstance(resource, Protocol):
        return not resource.access_groups or bool(resource.access_groups & principal.groups)
    if action in ("execution:read", "execution:update", "execution:delete",
                  "execution:submit") and isinstance(resource, Execution):
        return resource.owner_id == principal.id
    return False
