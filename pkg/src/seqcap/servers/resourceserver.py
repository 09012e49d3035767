"""Resource server: wraps the sequence monitor as request middleware around a
small object store, with proof-of-possession, observer-token binding checks,
introspection-backed revocation, and completion notification."""

from __future__ import annotations

import base64
import datetime
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from cryptography import x509
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse
from starlette.datastructures import Headers

from ..capability import (
    ContextRequirement,
    EsoCapability,
    MasterCapability,
    SignedEnvelope,
    check_binding,
    parse_token,
    verify,
)
from ..errors import MalformedEnvelope
from ..keys import PrincipalKeys, load_certificate_pem, verify_certificate
from ..monitor import (
    AccessRequest,
    ChallengeStore,
    CounterStore,
    Decision,
    DecisionKind,
    DenyReason,
    SequenceMonitor,
    UNAUTHENTICATED_REASONS,
    resolve_presented,
    verify_pop,
)
from .common import error_body

logger = logging.getLogger(__name__)


class _BindingRejected(Exception):
    """Raised inside the decision closure when a required observer token is
    missing, unverifiable, out of scope, or bound to a different master."""


class _ObjectMissing(Exception):
    pass


def _b64url_decode(value: str | None) -> bytes | None:
    if not value:
        return None
    try:
        padded = value + "=" * (-len(value) % 4)
        return base64.urlsafe_b64decode(padded.encode("ascii"))
    except Exception:
        return None


def parse_amount(value: Any) -> float:
    """Money amounts arrive as strings like "$10"."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return float(value.strip().lstrip("$"))
    raise ValueError(f"unparseable amount: {value!r}")


@dataclass
class ResourceServerState:
    rs_id: str
    keys: PrincipalKeys
    as_certificate: x509.Certificate
    root_certificate: x509.Certificate
    certificates: Mapping[str, str]  # principal id -> certificate PEM
    introspect: Callable[[str], str]  # session id -> "active" | "revoked_or_completed"
    complete: Callable[[str], bool]  # session id -> acknowledged
    query_context: Callable[[str, ContextRequirement], bool]
    counters: CounterStore = field(default_factory=CounterStore)
    challenges: ChallengeStore = field(default_factory=ChallengeStore)
    accounts: dict[str, float] = field(default_factory=dict)
    invocations: list[dict[str, Any]] = field(default_factory=list)
    plain_mode: bool = False
    objects_lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self) -> None:
        self.monitor = SequenceMonitor(
            rs_id=self.rs_id,
            rs_keys=self.keys,
            as_certificate=self.as_certificate,
            root_certificate=self.root_certificate,
        )

    def certificate_for(self, principal_id: str) -> x509.Certificate | None:
        pem = self.certificates.get(principal_id)
        if pem is None:
            return None
        cert = load_certificate_pem(pem)
        if not verify_certificate(cert, self.root_certificate):
            return None
        return cert


def _charge(state: ResourceServerState, owner: str, master: MasterCapability) -> dict[str, Any]:
    scope = master.metadata.get("scope", {}) if isinstance(master.metadata, dict) else {}
    amount = parse_amount(scope.get("amount", 0))
    with state.objects_lock:
        if owner not in state.accounts:
            raise _ObjectMissing(owner)
        state.accounts[owner] -= amount
        balance = state.accounts[owner]
    return {"charged": amount, "balance": balance}


def _run_action(
    state: ResourceServerState,
    owner: str,
    resource: str,
    permission: str,
    master: MasterCapability,
    consumed_index: int | None,
) -> dict[str, Any]:
    """Invoke the permission against the object store. Every invocation lands
    in the ordered log; "charge" additionally moves money."""
    result: dict[str, Any] = {"invoked": permission}
    if permission == "charge":
        result.update(_charge(state, owner, master))
    with state.objects_lock:
        state.invocations.append(
            {
                "rs": state.rs_id,
                "permission": permission,
                "owner": owner,
                "resource": resource,
                "session": master.session_id,
                "index": consumed_index,
            }
        )
    return result


def _timing_header(timing: dict[str, float]) -> dict[str, str]:
    return {"x-timing": json.dumps({k: round(v, 3) for k, v in timing.items()})}


def _deny(reason: DenyReason, timing: dict[str, float]) -> JSONResponse:
    status = 401 if reason in UNAUTHENTICATED_REASONS else 403
    return JSONResponse(error_body(reason.value), status_code=status, headers=_timing_header(timing))


def _validate_observer_token(
    state: ResourceServerState,
    tokens: list[str],
    master_envelope: SignedEnvelope,
    requirement: ContextRequirement,
) -> str:
    """Pick the presented observer token that covers the requirement, after
    checking its issuer signature, master binding, and scope. Raises
    _BindingRejected when none qualifies."""
    for raw in tokens:
        try:
            env = parse_token(raw)
            cap = env.capability()
        except MalformedEnvelope:
            continue
        if not isinstance(cap, EsoCapability):
            continue
        if not verify(env, state.as_certificate):
            continue
        if not check_binding(cap, master_envelope):
            continue
        scope = cap.scope
        if scope.context != requirement.property or scope.rs_id != state.rs_id:
            continue
        if scope.user_id != requirement.subject_id:
            continue
        return raw
    raise _BindingRejected(requirement.property)


def _plain_access(
    state: ResourceServerState,
    owner: str,
    resource: str,
    headers: Headers,
    body: dict[str, Any],
    timing: dict[str, float],
) -> JSONResponse:
    """Comparison mode: bearer-token validation only. No sequence counters,
    no proof of possession, no observer tokens, no introspection."""
    permission = body.get("permission", "")
    raw = headers.get("x-oauth-token")
    if raw is None:
        return _deny(DenyReason.NO_CAPABILITY, timing)
    try:
        env = parse_token(raw)
    except MalformedEnvelope:
        return _deny(DenyReason.BAD_SIGNATURE, timing)
    token = resolve_presented(env, state.as_certificate, state.root_certificate)
    if token is None:
        return _deny(DenyReason.BAD_SIGNATURE, timing)
    now = datetime.datetime.now(datetime.timezone.utc)
    if now > token.expiry:
        return _deny(DenyReason.EXPIRED, timing)
    try:
        result = _run_action(state, owner, resource, permission, token.master, None)
    except _ObjectMissing:
        return JSONResponse(error_body("unknown_object"), status_code=404)
    return JSONResponse({"result": result}, headers=_timing_header(timing))


def _access(
    state: ResourceServerState,
    owner: str,
    resource: str,
    headers: Headers,
    body: dict[str, Any],
) -> JSONResponse:
    started = time.perf_counter()
    timing: dict[str, float] = {}
    if state.plain_mode:
        response = _plain_access(state, owner, resource, headers, body, timing)
        timing["total_ms"] = (time.perf_counter() - started) * 1000.0
        response.headers["x-timing"] = _timing_header(timing)["x-timing"]
        return response

    permission = body.get("permission", "")
    now = datetime.datetime.now(datetime.timezone.utc)

    raw = headers.get("x-oauth-token")
    if raw is None:
        return _deny(DenyReason.NO_CAPABILITY, timing)
    try:
        env = parse_token(raw)
    except MalformedEnvelope:
        return _deny(DenyReason.BAD_SIGNATURE, timing)
    token = resolve_presented(env, state.as_certificate, state.root_certificate)
    if token is None:
        return _deny(DenyReason.BAD_SIGNATURE, timing)

    # the presenter claims an identity; default is the one the master binds
    effective_client = headers.get("x-client-id") or token.master.client_id
    client_cert = state.certificate_for(effective_client)
    pop_challenge = _b64url_decode(headers.get("x-pop-challenge"))
    pop_signature = _b64url_decode(headers.get("x-pop-signature"))
    if client_cert is None or not verify_pop(
        pop_challenge, pop_signature, client_cert, state.challenges
    ):
        return _deny(DenyReason.POP_FAILURE, timing)
    pop_done = time.perf_counter()
    timing["validate_ms"] = (pop_done - started) * 1000.0

    eso_tokens = [t for t in (headers.get("x-eso-token") or "").split(",") if t]
    context_ms = 0.0

    def revoked(session_id: str) -> bool:
        if state.counters.is_completed(session_id):
            return True
        try:
            return state.introspect(session_id) != "active"
        except Exception:
            logger.warning("introspection unreachable; failing closed")
            return True

    def context_active(requirement: ContextRequirement, _req: AccessRequest) -> bool:
        nonlocal context_ms
        chosen = _validate_observer_token(state, eso_tokens, token.master_envelope, requirement)
        t0 = time.perf_counter()
        try:
            verdict = state.query_context(chosen, requirement)
        except Exception:
            logger.warning("context oracle unreachable; failing closed")
            verdict = False
        context_ms += (time.perf_counter() - t0) * 1000.0
        return verdict

    access_request = AccessRequest(
        permission=permission,
        presented=env,
        client_id=effective_client,
        pop_challenge=pop_challenge,
        pop_signature=pop_signature,
    )
    session_id = token.master.session_id

    def decide(counter_value: int) -> Decision:
        if state.counters.is_completed(session_id):
            return Decision(kind=DecisionKind.DENY, reason=DenyReason.REVOKED, new_counter=counter_value)
        return state.monitor.authorize(access_request, counter_value, now, revoked, context_active)

    try:
        decision = state.counters.transact(session_id, decide)
    except _BindingRejected:
        return _deny(DenyReason.BINDING_FAILURE, timing)
    timing["context_ms"] = context_ms

    if not decision.allowed:
        assert decision.reason is not None
        return _deny(decision.reason, timing)

    action_start = time.perf_counter()
    try:
        result = _run_action(
            state, owner, resource, permission, token.master, decision.consumed_index
        )
    except _ObjectMissing:
        return JSONResponse(error_body("unknown_object"), status_code=404)
    timing["action_ms"] = (time.perf_counter() - action_start) * 1000.0

    if decision.kind is DecisionKind.INVOKE_LAST:
        try:
            acknowledged = state.complete(session_id)
        except Exception:
            logger.warning("completion notification failed for %s", session_id)
            acknowledged = False
        if acknowledged:
            state.counters.drop(session_id)
        timing["total_ms"] = (time.perf_counter() - started) * 1000.0
        return JSONResponse(
            {"result": result, "completed": True}, headers=_timing_header(timing)
        )

    assert decision.new_capability is not None
    timing["total_ms"] = (time.perf_counter() - started) * 1000.0
    return JSONResponse(
        {
            "result": result,
            "state_token": decision.new_capability.token(),
            "state": decision.new_counter,
        },
        headers=_timing_header(timing),
    )


def create_resource_app(state: ResourceServerState) -> FastAPI:
    app = FastAPI(title=state.rs_id, docs_url=None, redoc_url=None)

    @app.get("/challenge")
    def challenge() -> JSONResponse:
        nonce = state.challenges.issue()
        encoded = base64.urlsafe_b64encode(nonce).rstrip(b"=").decode("ascii")
        return JSONResponse({"challenge": encoded})

    @app.get("/{owner}/{resource}")
    def read_object(owner: str, resource: str) -> JSONResponse:
        with state.objects_lock:
            body: dict[str, Any] = {"owner": owner, "resource": resource}
            if owner in state.accounts:
                body["balance"] = state.accounts[owner]
            body["invocations"] = [i for i in state.invocations if i["owner"] == owner]
        return JSONResponse(body)

    @app.post("/{owner}/{resource}")
    async def access(owner: str, resource: str, request: Request) -> JSONResponse:
        try:
            body = await request.json()
            if not isinstance(body, dict):
                body = {}
        except Exception:
            body = {}
        return await run_in_threadpool(_access, state, owner, resource, request.headers, body)

    return app


__all__ = [
    "ResourceServerState",
    "create_resource_app",
    "parse_amount",
]
