"""Environmental situation oracle: verifies the observer capability and the
querying resource server's detached signature, evaluates one tracked
condition, and answers with the boolean wire body and nothing else."""

from __future__ import annotations

import base64
import datetime
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

from cryptography import x509
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..capability import EsoCapability, parse_token, verify
from ..errors import MalformedEnvelope
from ..keys import alg_for_key, load_certificate_pem, verify_bytes, verify_certificate
from .common import SERVICE_FRESHNESS_SECONDS, context_query_message, error_body, is_fresh

logger = logging.getLogger(__name__)

TWO_MONTHS = datetime.timedelta(days=60)


@dataclass(frozen=True)
class SituationEvaluator:
    """One tracked environmental condition over fixed backing data."""

    context_name: str
    predicate: Callable[[str, datetime.datetime], bool]

    def active(self, user_id: str, now: datetime.datetime) -> bool:
        return bool(self.predicate(user_id, now))


def recent_use_evaluator(
    context_name: str,
    login_history: Mapping[str, datetime.datetime],
    window: datetime.timedelta = TWO_MONTHS,
) -> SituationEvaluator:
    """Fixture-backed: the condition holds when the user's last recorded
    login falls within the window."""

    def predicate(user_id: str, now: datetime.datetime) -> bool:
        last = login_history.get(user_id)
        return last is not None and now - last <= window

    return SituationEvaluator(context_name=context_name, predicate=predicate)


@dataclass
class EsoServerState:
    eso_id: str  # the identity observer scopes must name (URL form)
    as_certificate: x509.Certificate
    root_certificate: x509.Certificate
    certificates: Mapping[str, str]  # resource-server certificate PEMs
    evaluators: dict[str, SituationEvaluator] = field(default_factory=dict)

    def certificate_for(self, principal_id: str) -> x509.Certificate | None:
        pem = self.certificates.get(principal_id)
        if pem is None:
            return None
        cert = load_certificate_pem(pem)
        if not verify_certificate(cert, self.root_certificate):
            return None
        return cert


def _decode_b64url(value: str) -> bytes | None:
    try:
        padded = value + "=" * (-len(value) % 4)
        return base64.urlsafe_b64decode(padded.encode("ascii"))
    except Exception:
        return None


def create_eso_app(state: EsoServerState) -> FastAPI:
    app = FastAPI(title="context-oracle", docs_url=None, redoc_url=None)

    @app.post("/{context_name}")
    def get_state(context_name: str, request: Request) -> JSONResponse:
        raw = request.headers.get("x-eso-token")
        if not raw:
            return JSONResponse(error_body("NoCapability"), status_code=401)
        try:
            env = parse_token(raw)
            cap = env.capability()
        except MalformedEnvelope:
            return JSONResponse(error_body("BadSignature"), status_code=401)
        if not isinstance(cap, EsoCapability) or not verify(env, state.as_certificate):
            return JSONResponse(error_body("BadSignature"), status_code=401)

        # only the resource server the scope names may ask
        signature = _decode_b64url(request.headers.get("x-rs-signature") or "")
        timestamp = request.headers.get("x-rs-timestamp") or ""
        rs_cert = state.certificate_for(cap.scope.rs_id)
        if (
            signature is None
            or rs_cert is None
            or not is_fresh(timestamp, window=SERVICE_FRESHNESS_SECONDS)
        ):
            return JSONResponse(error_body("RsAuthFailure"), status_code=401)
        public_key = rs_cert.public_key()
        if not verify_bytes(
            public_key,
            alg_for_key(public_key),
            signature,
            context_query_message(raw, timestamp),
        ):
            return JSONResponse(error_body("RsAuthFailure"), status_code=401)

        now = datetime.datetime.now(datetime.timezone.utc)
        if now > cap.expiry:
            return JSONResponse(error_body("Expired"), status_code=403)

        scope = cap.scope
        if scope.eso_id != state.eso_id or scope.permission != "read" or scope.context != context_name:
            return JSONResponse(error_body("OutOfScope"), status_code=403)
        evaluator = state.evaluators.get(context_name)
        if evaluator is None:
            return JSONResponse(error_body("UnknownContext"), status_code=404)

        verdict = evaluator.active(scope.user_id, now)
        return JSONResponse({"Context": "True" if verdict else "False"})

    return app


__all__ = [
    "EsoServerState",
    "SituationEvaluator",
    "create_eso_app",
    "recent_use_evaluator",
]
