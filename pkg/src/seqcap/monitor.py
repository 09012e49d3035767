"""Per-resource-server sequence monitor.

This is the decision core each resource server runs for every access request:
validate the presented capability chain, check the client/expiry/revocation
gates, enforce the sequence order against the server's session counter, query
context requirements, and mint the successor state capability on mid-sequence
invocations.

The monitor itself is pure: it takes the current counter value and returns the
decision plus the counter's new value. Atomicity lives in CounterStore, which
serializes check-and-advance per session and persists the advanced counter
before the caller can hand the new token to the client.
"""

from __future__ import annotations

import datetime
import enum
import json
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography import x509

from .capability import (
    MasterCapability,
    SignedEnvelope,
    StateCapability,
    sign,
    verify,
)
from .errors import InvariantViolation, MalformedEnvelope
from .keys import (
    PrincipalKeys,
    alg_for_key,
    certificate_principal,
    verify_bytes,
    verify_certificate,
)

logger = logging.getLogger(__name__)

CHALLENGE_BYTES = 16
CHALLENGE_VALIDITY_SECONDS = 60.0


class DecisionKind(enum.Enum):
    INVOKE = "Invoke"
    INVOKE_LAST = "InvokeLast"
    DENY = "Deny"


class DenyReason(enum.Enum):
    NO_CAPABILITY = "NoCapability"
    BAD_SIGNATURE = "BadSignature"
    WRONG_CLIENT = "WrongClient"
    EXPIRED = "Expired"
    REVOKED = "Revoked"
    WRONG_RS = "WrongRS"
    OUT_OF_ORDER = "OutOfOrder"
    CONTEXT_INACTIVE = "ContextInactive"
    BINDING_FAILURE = "BindingFailure"
    POP_FAILURE = "PopFailure"


# Deny reasons that stem from identity/credential failure map to 401; the rest
# are well-formed requests the policy machinery refuses, which map to 403.
UNAUTHENTICATED_REASONS = frozenset(
    {DenyReason.NO_CAPABILITY, DenyReason.BAD_SIGNATURE, DenyReason.WRONG_CLIENT, DenyReason.POP_FAILURE}
)


@dataclass(frozen=True)
class AccessRequest:
    """One client request at a resource server."""

    permission: str
    presented: SignedEnvelope | None
    client_id: str | None = None
    eso_capability: SignedEnvelope | None = None
    pop_challenge: bytes | None = None
    pop_signature: bytes | None = None


@dataclass(frozen=True)
class PresentedToken:
    """A validated capability chain: the envelope as presented, the signed
    master inside it, and the effective state/expiry."""

    envelope: SignedEnvelope
    master_envelope: SignedEnvelope
    master: MasterCapability
    state: int
    expiry: datetime.datetime


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    reason: DenyReason | None = None
    new_capability: SignedEnvelope | None = None
    new_counter: int | None = None
    presented: PresentedToken | None = None

    @property
    def allowed(self) -> bool:
        return self.kind is not DecisionKind.DENY

    @property
    def session_id(self) -> str | None:
        return self.presented.master.session_id if self.presented else None

    @property
    def consumed_index(self) -> int | None:
        return self.presented.state if self.allowed and self.presented else None


def _deny(reason: DenyReason, presented: PresentedToken | None = None, counter: int | None = None) -> Decision:
    return Decision(kind=DecisionKind.DENY, reason=reason, new_counter=counter, presented=presented)


def resolve_presented(
    env: SignedEnvelope,
    as_certificate: x509.Certificate,
    root_certificate: x509.Certificate,
) -> PresentedToken | None:
    """Validate a presented master or state capability chain.

    Returns None when any signature or chain link fails:
    * master tokens must verify under the authorization server's certificate;
    * state tokens must verify under their embedded issuer certificate, which
      must chain to the root and belong to the resource server that served the
      preceding sequence entry -- otherwise any certified principal (the
      client included) could mint itself an advanced state.
    """
    try:
        cap = env.capability()
    except MalformedEnvelope:
        return None
    if isinstance(cap, MasterCapability):
        if not verify(env, as_certificate):
            return None
        return PresentedToken(
            envelope=env, master_envelope=env, master=cap, state=cap.state, expiry=cap.expiry
        )
    if isinstance(cap, StateCapability):
        master_env = cap.master
        try:
            master = cap.master_capability()
            issuer_cert = cap.issuer_certificate()
        except (MalformedEnvelope, InvariantViolation, ValueError):
            return None
        if not verify(master_env, as_certificate):
            return None
        if not verify_certificate(issuer_cert, root_certificate):
            return None
        expected_issuer = master.sequence[cap.state - 1].rs_id
        if certificate_principal(issuer_cert) != expected_issuer:
            return None
        if not verify(env, issuer_cert):
            return None
        expiry = min(cap.expiry, master.expiry)
        return PresentedToken(
            envelope=env, master_envelope=master_env, master=master, state=cap.state, expiry=expiry
        )
    return None


class SequenceMonitor:
    """The authorization algorithm, bound to one resource server identity."""

    def __init__(
        self,
        rs_id: str,
        rs_keys: PrincipalKeys,
        as_certificate: x509.Certificate,
        root_certificate: x509.Certificate,
    ) -> None:
        if rs_keys.principal_id != rs_id:
            raise InvariantViolation("rs_keys must belong to rs_id")
        self.rs_id = rs_id
        self.rs_keys = rs_keys
        self.as_certificate = as_certificate
        self.root_certificate = root_certificate

    def authorize(
        self,
        req: AccessRequest,
        counter_value: int,
        now: datetime.datetime,
        revocation_oracle: Callable[[str], bool],
        context_oracle: Callable[..., bool],
    ) -> Decision:
        """Decide one access request against the current session counter.

        revocation_oracle(session_id) -> True when the session is revoked or
        completed. context_oracle(requirement, request) -> True when the
        environmental condition currently holds; it receives the original
        request so implementations can reach the presented observer token.
        """
        if req.presented is None:
            return _deny(DenyReason.NO_CAPABILITY, counter=counter_value)
        token = resolve_presented(req.presented, self.as_certificate, self.root_certificate)
        if token is None:
            return _deny(DenyReason.BAD_SIGNATURE, counter=counter_value)
        master = token.master
        if req.client_id is not None and req.client_id != master.client_id:
            return _deny(DenyReason.WRONG_CLIENT, token, counter_value)
        if now > token.expiry:
            return _deny(DenyReason.EXPIRED, token, counter_value)
        if revocation_oracle(master.session_id):
            return _deny(DenyReason.REVOKED, token, counter_value)

        entry = master.sequence[token.state]
        if entry.rs_id != self.rs_id:
            return _deny(DenyReason.WRONG_RS, token, counter_value)
        if entry.permission != req.permission:
            return _deny(DenyReason.OUT_OF_ORDER, token, counter_value)
        if token.state < counter_value:
            return _deny(DenyReason.OUT_OF_ORDER, token, counter_value)
        for requirement in entry.contexts:
            if not context_oracle(requirement, req):
                return _deny(DenyReason.CONTEXT_INACTIVE, token, counter_value)

        if token.state == master.sequence.last_index:
            # Final entry: invoke, leave the counter alone, signal completion.
            return Decision(
                kind=DecisionKind.INVOKE_LAST,
                new_counter=counter_value,
                presented=token,
            )
        advanced = token.state + 1
        successor = StateCapability(
            master=token.master_envelope,
            state=advanced,
            issuer_cert_pem=self.rs_keys.certificate_pem(),
            expiry=master.expiry,
        )
        return Decision(
            kind=DecisionKind.INVOKE,
            new_capability=sign(successor, self.rs_keys),
            new_counter=advanced,
            presented=token,
        )


class ChallengeStore:
    """Proof-of-possession nonces: 16 random bytes, single use, short lived.

    A challenge is consumed by the first verification attempt, successful or
    not, so a denied request cannot recycle its nonce.
    """

    def __init__(
        self,
        validity_seconds: float = CHALLENGE_VALIDITY_SECONDS,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.validity_seconds = validity_seconds
        self._clock = clock
        self._issued: dict[bytes, float] = {}
        self._lock = threading.Lock()

    def issue(self) -> bytes:
        nonce = secrets.token_bytes(CHALLENGE_BYTES)
        with self._lock:
            self._issued[nonce] = self._clock()
            if len(self._issued) > 4096:
                self._prune_locked()
        return nonce

    def consume(self, nonce: bytes) -> bool:
        """Remove and validate a nonce. False for unknown, reused, or stale."""
        with self._lock:
            issued_at = self._issued.pop(nonce, None)
        if issued_at is None:
            return False
        return self._clock() - issued_at <= self.validity_seconds

    def _prune_locked(self) -> None:
        cutoff = self._clock() - self.validity_seconds
        self._issued = {n: t for n, t in self._issued.items() if t >= cutoff}


def verify_pop(
    challenge: bytes | None,
    signature: bytes | None,
    client_certificate: x509.Certificate,
    store: ChallengeStore,
) -> bool:
    """Check a proof-of-possession response against an issued challenge."""
    if not challenge or not signature:
        return False
    if not store.consume(challenge):
        return False
    public_key = client_certificate.public_key()
    return verify_bytes(public_key, alg_for_key(public_key), signature, challenge)


@dataclass
class SessionCounter:
    session_id: str
    value: int = 0


class CounterStore:
    """Per-session sequence counters with serialized check-and-advance.

    An optional write-ahead file (JSON lines) records every advance and
    completion mark before the enclosing transaction returns, so a restarted
    server resumes with the counters it had promised.
    """

    def __init__(self, path: Path | None = None) -> None:
        self._path = path
        self._counters: dict[str, int] = {}
        self._completed: set[str] = set()
        self._locks: dict[str, threading.Lock] = {}
        self._master_lock = threading.Lock()
        if path is not None and path.exists():
            self._replay(path)

    def _replay(self, path: Path) -> None:
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            session = record["session"]
            if record.get("completed"):
                self._completed.add(session)
            if "counter" in record:
                self._counters[session] = record["counter"]
            if record.get("dropped"):
                self._counters.pop(session, None)

    def _append(self, record: dict) -> None:
        if self._path is None:
            return
        with self._path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._master_lock:
            lock = self._locks.get(session_id)
            if lock is None:
                lock = self._locks[session_id] = threading.Lock()
            return lock

    def value(self, session_id: str) -> int:
        return self._counters.get(session_id, 0)

    def is_completed(self, session_id: str) -> bool:
        return session_id in self._completed

    def transact(self, session_id: str, fn: Callable[[int], Decision]) -> Decision:
        """Run one decision atomically against this session's counter.

        The counter write (and, for final invocations, the completion mark)
        lands in the write-ahead file while the session lock is still held.
        """
        with self._lock_for(session_id):
            current = self._counters.get(session_id, 0)
            decision = fn(current)
            if decision.kind is DecisionKind.INVOKE:
                new_value = decision.new_counter
                if new_value is None or new_value < current:
                    raise InvariantViolation("session counters never decrease")
                if new_value != current:
                    self._append({"session": session_id, "counter": new_value})
                    self._counters[session_id] = new_value
            elif decision.kind is DecisionKind.INVOKE_LAST:
                self._append({"session": session_id, "completed": True})
                self._completed.add(session_id)
            return decision

    def drop(self, session_id: str) -> None:
        """Forget a session's counter once the authorization server has
        acknowledged completion. The completion mark stays."""
        with self._lock_for(session_id):
            if session_id in self._counters:
                self._append({"session": session_id, "dropped": True})
                self._counters.pop(session_id, None)


__all__ = [
    "AccessRequest",
    "ChallengeStore",
    "CounterStore",
    "Decision",
    "DecisionKind",
    "DenyReason",
    "PresentedToken",
    "SequenceMonitor",
    "SessionCounter",
    "UNAUTHENTICATED_REASONS",
    "resolve_presented",
    "verify_pop",
]
