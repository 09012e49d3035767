"""Authorization server: authenticates client claims, evaluates policy, mints
the master capability plus one context-observer capability per required
context, tracks sessions, and answers introspection and completion calls from
resource servers."""

from __future__ import annotations

import datetime
import logging
import secrets
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping

from cryptography import x509
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..capability import (
    ClientClaim,
    EsoCapability,
    EsoScope,
    MasterCapability,
    SignedEnvelope,
    bind_hash,
    parse_token,
    sign,
    verify,
)
from ..errors import MalformedEnvelope, NotRegistered, AlreadyRegistered
from ..keys import PrincipalKeys, certificate_principal, load_certificate_pem, verify_certificate
from ..policy import (
    EsoRegistry,
    EsoRegistryEntry,
    FrequencyHistory,
    PolicyStore,
    SubjectAttributes,
    check_frequency,
    evaluate,
)
from .common import SERVICE_FRESHNESS_SECONDS, error_body, is_fresh, verify_service_message

logger = logging.getLogger(__name__)

GRANT_TYPE = "client_credentials"
CLIENT_ASSERTION_TYPE = "jwt-bearer"
DEFAULT_MASTER_TTL = datetime.timedelta(hours=24)

ACTIVE = "active"
COMPLETED = "completed"
REVOKED = "revoked"


@dataclass
class SessionRecord:
    session_id: str
    client_id: str
    master: SignedEnvelope
    eso_caps: list[SignedEnvelope]
    status: str
    issued_at: datetime.datetime
    rule_name: str
    rs_ids: tuple[str, ...]

    def mark(self, status: str) -> None:
        # the only legal moves: active -> completed, active -> revoked
        if self.status == status:
            return
        if self.status != ACTIVE or status not in (COMPLETED, REVOKED):
            raise ValueError(f"illegal session transition {self.status} -> {status}")
        self.status = status


@dataclass
class AuthServerState:
    keys: PrincipalKeys
    root_certificate: x509.Certificate
    policy_store: PolicyStore
    subjects: Mapping[str, SubjectAttributes]
    certificates: Mapping[str, str]  # principal id -> certificate PEM
    eso_registry: EsoRegistry = field(default_factory=EsoRegistry)
    admin_token: str = ""
    master_ttl: datetime.timedelta = DEFAULT_MASTER_TTL
    plain_mode: bool = False
    sessions: dict[str, SessionRecord] = field(default_factory=dict)
    frequency: FrequencyHistory = field(default_factory=FrequencyHistory)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def certificate_for(self, principal_id: str) -> x509.Certificate | None:
        pem = self.certificates.get(principal_id)
        if pem is None:
            return None
        cert = load_certificate_pem(pem)
        if not verify_certificate(cert, self.root_certificate):
            return None
        return cert

    def introspection_status(self, session_id: str) -> str | None:
        with self.lock:
            record = self.sessions.get(session_id)
            if record is None:
                return None
            return ACTIVE if record.status == ACTIVE else "revoked_or_completed"


def _authenticate_claim(state: AuthServerState, assertion: str) -> tuple[SignedEnvelope, ClientClaim] | None:
    try:
        env = parse_token(assertion)
        claim = env.capability()
    except MalformedEnvelope:
        return None
    if not isinstance(claim, ClientClaim):
        return None
    cert = state.certificate_for(claim.client_id)
    if cert is None:
        return None
    if not verify(env, cert):
        return None
    return env, claim


def _mint_tokens(
    state: AuthServerState,
    claim: ClientClaim,
    grant,
    now: datetime.datetime,
) -> tuple[SignedEnvelope, dict[str, SignedEnvelope], str]:
    session_id = secrets.token_hex(16)
    sequence = grant.sequence
    rs_ids = sorted({entry.rs_id for entry in sequence})
    master = MasterCapability(
        sequence=sequence,
        client_id=claim.client_id,
        state=0,
        session_id=session_id,
        issued_at=now,
        expiry=now + state.master_ttl,
        metadata={
            "issuer": state.keys.principal_id,
            "audience": rs_ids,
            "scope": claim.requested_scope,
        },
    )
    master_env = sign(master, state.keys)
    digest = bind_hash(master_env)

    eso_envs: dict[str, SignedEnvelope] = {}
    if not state.plain_mode:
        seen: set[tuple[str, str, str]] = set()
        for entry in sequence:
            for requirement in entry.contexts:
                key = (requirement.property, requirement.subject_id, requirement.rs_id)
                if key in seen:
                    continue
                seen.add(key)
                registered = state.eso_registry.resolve(requirement.property)
                scope = EsoScope(
                    rs_id=requirement.rs_id,
                    eso_id=registered.url,
                    permission="read",
                    context=requirement.property,
                    user_id=requirement.subject_id,
                )
                eso_cap = EsoCapability(
                    master_hash=digest,
                    scope=scope,
                    expiry=master.expiry,
                    metadata={"issuer": state.keys.principal_id},
                )
                eso_envs[requirement.property] = sign(eso_cap, state.keys)
    return master_env, eso_envs, session_id


def create_auth_app(state: AuthServerState) -> FastAPI:
    app = FastAPI(title="authorization-server", docs_url=None, redoc_url=None)

    @app.post("/authorization")
    def authorization(request: Request) -> JSONResponse:
        grant_type = request.headers.get("grant-type")
        assertion_type = request.headers.get("client-assertion-type")
        assertion = request.headers.get("client-assertion")
        if grant_type != GRANT_TYPE:
            return JSONResponse(error_body("unsupported_grant_type"), status_code=400)
        if assertion_type != CLIENT_ASSERTION_TYPE or not assertion:
            return JSONResponse(error_body("invalid_request"), status_code=400)

        authenticated = _authenticate_claim(state, assertion)
        if authenticated is None:
            return JSONResponse(error_body("invalid_client"), status_code=401)
        _, claim = authenticated

        attrs = state.subjects.get(claim.client_id)
        if attrs is None:
            return JSONResponse(error_body("access_denied"), status_code=403)
        grant = evaluate(claim, attrs, state.policy_store.policies())
        if not grant.permitted:
            return JSONResponse(error_body("access_denied"), status_code=403)

        now = datetime.datetime.now(datetime.timezone.utc)
        rule = grant.matched_rule
        assert rule is not None and grant.sequence is not None
        if not check_frequency(claim.client_id, rule, state.frequency, now):
            return JSONResponse(error_body("frequency_exceeded"), status_code=403)
        if rule.frequency is not None:
            # a frequency-limited grant also runs one session at a time
            with state.lock:
                for record in state.sessions.values():
                    if (
                        record.client_id == claim.client_id
                        and record.rule_name == rule.name
                        and record.status == ACTIVE
                    ):
                        return JSONResponse(error_body("active_session"), status_code=403)

        try:
            master_env, eso_envs, session_id = _mint_tokens(state, claim, grant, now)
        except NotRegistered as exc:
            logger.error("policy names an unregistered context: %s", exc)
            return JSONResponse(error_body("dangling_context"), status_code=500)

        record = SessionRecord(
            session_id=session_id,
            client_id=claim.client_id,
            master=master_env,
            eso_caps=list(eso_envs.values()),
            status=ACTIVE,
            issued_at=now,
            rule_name=rule.name,
            rs_ids=tuple(sorted({e.rs_id for e in grant.sequence})),
        )
        with state.lock:
            state.sessions[session_id] = record

        return JSONResponse(
            {
                "access_token": master_env.token(),
                "token_type": "capability",
                "expires_in": int(state.master_ttl.total_seconds()),
                "session_id": session_id,
                "eso_tokens": {name: env.token() for name, env in eso_envs.items()},
            }
        )

    def _verified_rs_call(payload: dict[str, Any], purpose: str) -> tuple[SessionRecord | None, JSONResponse | None]:
        session_id = payload.get("session_id", "")
        rs_id = payload.get("rs_id", "")
        timestamp = payload.get("timestamp", "")
        signature = payload.get("signature", "")
        with state.lock:
            record = state.sessions.get(session_id)
        if record is None:
            return None, JSONResponse(error_body("unknown_session"), status_code=404)
        cert = state.certificate_for(rs_id)
        if cert is None or rs_id not in record.rs_ids:
            return None, JSONResponse(error_body("unauthorized_caller"), status_code=403)
        if not is_fresh(timestamp, window=SERVICE_FRESHNESS_SECONDS):
            return None, JSONResponse(error_body("stale_request"), status_code=403)
        if not verify_service_message(cert, signature, purpose, session_id, rs_id, str(timestamp)):
            return None, JSONResponse(error_body("bad_signature"), status_code=403)
        return record, None

    @app.post("/introspect")
    async def introspect(request: Request) -> JSONResponse:
        payload = await request.json()
        record, failure = _verified_rs_call(payload, "introspect")
        if failure is not None:
            return failure
        assert record is not None
        status = ACTIVE if record.status == ACTIVE else "revoked_or_completed"
        return JSONResponse({"session_id": record.session_id, "status": status})

    @app.post("/complete")
    async def complete(request: Request) -> JSONResponse:
        payload = await request.json()
        record, failure = _verified_rs_call(payload, "complete")
        if failure is not None:
            return failure
        assert record is not None
        now = datetime.datetime.now(datetime.timezone.utc)
        with state.lock:
            if record.status == ACTIVE:
                record.mark(COMPLETED)
                state.frequency.record_completed(record.client_id, record.rule_name, now)
        return JSONResponse({"session_id": record.session_id, "status": record.status})

    @app.post("/eso-registry")
    async def register_eso(request: Request) -> JSONResponse:
        if not state.admin_token or request.headers.get("x-admin-token") != state.admin_token:
            return JSONResponse(error_body("unauthorized"), status_code=401)
        payload = await request.json()
        entry = EsoRegistryEntry(
            context_name=payload.get("context_name", ""),
            url=payload.get("eso_url", ""),
            description=payload.get("description", ""),
        )
        try:
            state.eso_registry.register(entry)
        except AlreadyRegistered:
            return JSONResponse(error_body("duplicate_context"), status_code=409)
        return JSONResponse({"status": "registered", "context_name": entry.context_name})

    return app


__all__ = [
    "ACTIVE",
    "COMPLETED",
    "REVOKED",
    "AuthServerState",
    "SessionRecord",
    "create_auth_app",
]
