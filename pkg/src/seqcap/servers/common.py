"""Cross-service plumbing: detached service-to-service signatures, freshness
windows, and the shared error-body shape."""

from __future__ import annotations

import base64
import time

from cryptography import x509

from ..keys import PrincipalKeys, alg_for_key, sign_bytes, verify_bytes

SERVICE_FRESHNESS_SECONDS = 60.0


def service_message(purpose: str, *parts: str) -> bytes:
    """Canonical bytes for a purpose-tagged service call. The purpose prefix
    keeps a signature for one endpoint from being replayed against another."""
    return "|".join((purpose, *parts)).encode("utf-8")


def sign_service_message(keys: PrincipalKeys, purpose: str, *parts: str) -> str:
    raw = sign_bytes(keys.private_key, keys.alg, service_message(purpose, *parts))
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def verify_service_message(
    certificate: x509.Certificate, signature_b64: str, purpose: str, *parts: str
) -> bool:
    try:
        padded = signature_b64 + "=" * (-len(signature_b64) % 4)
        raw = base64.urlsafe_b64decode(padded.encode("ascii"))
    except Exception:
        return False
    public_key = certificate.public_key()
    return verify_bytes(public_key, alg_for_key(public_key), raw, service_message(purpose, *parts))


def context_query_message(eso_token: str, timestamp: str) -> bytes:
    """Bytes a resource server signs when querying a context oracle: the
    capability it presents concatenated with its timestamp."""
    return eso_token.encode("ascii") + timestamp.encode("ascii")


def is_fresh(timestamp: str, now: float | None = None, window: float = SERVICE_FRESHNESS_SECONDS) -> bool:
    """Whether a caller-supplied epoch-seconds timestamp is within the replay
    window, in either direction (clocks may disagree slightly)."""
    try:
        stamp = float(timestamp)
    except (TypeError, ValueError):
        return False
    reference = time.time() if now is None else now
    return abs(reference - stamp) <= window


def error_body(reason: str) -> dict[str, str]:
    return {"error": reason}
