"""Capability token types and their canonical wire format.

Four token kinds flow through the system:

* master capability -- minted by the authorization server; carries the whole
  permission sequence, the client identity, the session id, and state 0.
* state capability -- minted by a resource server after a mid-sequence
  invocation; embeds the signed master verbatim and carries the advanced state.
* observer capability -- minted by the authorization server for environment
  state observers; bound to one master token by a SHA-256 digest of the signed
  master envelope.
* client claim -- signed by the client and presented to the authorization
  server when requesting a grant.

Wire format: ``b64url(header) . b64url(body) . b64url(sigblock)`` where header
and body are canonical JSON (sorted keys, compact separators, UTF-8) and the
sigblock names the algorithm and signer key id alongside the raw signature.
The first two segments are exactly the output of :func:`canonical_serialize`,
which is also the byte string signatures are computed over; the same logical
capability therefore always produces the same signing input.
"""

from __future__ import annotations

import base64
import binascii
import datetime
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

from cryptography import x509

from .errors import InvariantViolation, MalformedEnvelope
from .keys import PrincipalKeys, SignatureAlg, load_certificate_pem, sign_bytes, verify_bytes

UTC = datetime.timezone.utc

MASTER_HASH_LEN = 32


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64(text: str) -> bytes:
    pad = "=" * (-len(text) % 4)
    try:
        return base64.urlsafe_b64decode(text + pad)
    except (binascii.Error, ValueError) as exc:
        raise MalformedEnvelope(f"bad base64url segment: {exc}") from exc


def canonical_json(obj: Any) -> str:
    """Deterministic JSON: sorted keys, no insignificant whitespace."""
    try:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    except (TypeError, ValueError) as exc:
        raise InvariantViolation(f"value is not JSON-representable: {exc}") from exc


def _require_id(value: str, name: str) -> None:
    if not isinstance(value, str) or not value:
        raise InvariantViolation(f"{name} must be a non-empty string")


def _require_time(value: datetime.datetime, name: str) -> datetime.datetime:
    if not isinstance(value, datetime.datetime) or value.tzinfo is None:
        raise InvariantViolation(f"{name} must be a timezone-aware datetime")
    # Second precision on the wire; normalize here so round-trips are identity.
    return value.astimezone(UTC).replace(microsecond=0)

def _ts(value: datetime.datetime) -> int:
    return int(value.timestamp())


def _from_ts(value: Any, name: str) -> datetime.datetime:
    if not isinstance(value, int):
        raise InvariantViolation(f"{name} must be an integer timestamp")
    return datetime.datetime.fromtimestamp(value, tz=UTC)


def _frozen_json_map(value: Mapping[str, Any], name: str) -> dict[str, Any]:
    if not isinstance(value, Mapping):
        raise InvariantViolation(f"{name} must be a mapping")
    # Round through canonical JSON so equality survives serialization
    # (tuples become lists now, not at parse time).
    return json.loads(canonical_json(dict(value)))


@dataclass(frozen=True)
class ContextRequirement:
    """An environmental condition a sequence entry is gated on."""

    property: str
    subject_id: str
    rs_id: str

    def __post_init__(self) -> None:
        _require_id(self.property, "property")
        _require_id(self.subject_id, "subject_id")
        _require_id(self.rs_id, "rs_id")

    def to_json(self) -> dict[str, str]:
        return {"property": self.property, "rs_id": self.rs_id, "subject_id": self.subject_id}

    @classmethod
    def from_json(cls, obj: Any) -> "ContextRequirement":
        if not isinstance(obj, dict):
            raise InvariantViolation("context requirement must be an object")
        return cls(
            property=obj.get("property", ""),
            subject_id=obj.get("subject_id", ""),
            rs_id=obj.get("rs_id", ""),
        )


@dataclass(frozen=True)
class PermissionEntry:
    """One step of a permission sequence: a permission at a resource server."""

    rs_id: str
    permission: str
    contexts: tuple[ContextRequirement, ...] = ()

    def __post_init__(self) -> None:
        _require_id(self.rs_id, "rs_id")
        _require_id(self.permission, "permission")
        object.__setattr__(self, "contexts", tuple(self.contexts))

    def to_json(self) -> dict[str, Any]:
        return {
            "contexts": [c.to_json() for c in self.contexts],
            "permission": self.permission,
            "rs_id": self.rs_id,
        }

    @classmethod
    def from_json(cls, obj: Any) -> "PermissionEntry":
        if not isinstance(obj, dict):
            raise InvariantViolation("sequence entry must be an object")
        raw_ctx = obj.get("contexts", [])
        if not isinstance(raw_ctx, list):
            raise InvariantViolation("contexts must be a list")
        return cls(
            rs_id=obj.get("rs_id", ""),
            permission=obj.get("permission", ""),
            contexts=tuple(ContextRequirement.from_json(c) for c in raw_ctx),
        )


@dataclass(frozen=True)
class PermissionSequence:
    """An ordered, non-empty list of permission entries."""

    entries: tuple[PermissionEntry, ...]

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        if not entries:
            raise InvariantViolation("permission sequence must have at least one entry")
        if not all(isinstance(e, PermissionEntry) for e in entries):
            raise InvariantViolation("sequence entries must be PermissionEntry values")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> PermissionEntry:
        return self.entries[index]

    def __iter__(self) -> Iterator[PermissionEntry]:
        return iter(self.entries)

    @property
    def last_index(self) -> int:
        return len(self.entries) - 1

    def permissions(self) -> list[str]:
        return [e.permission for e in self.entries]

    def to_json(self) -> list[dict[str, Any]]:
        return [e.to_json() for e in self.entries]

    @classmethod
    def from_json(cls, obj: Any) -> "PermissionSequence":
        if not isinstance(obj, list):
            raise InvariantViolation("sequence must be a list")
        return cls(entries=tuple(PermissionEntry.from_json(e) for e in obj))


@dataclass(frozen=True)
class MasterCapability:
    """The grant minted by the authorization server at state 0."""

    sequence: PermissionSequence
    client_id: str
    state: int
    session_id: str
    issued_at: datetime.datetime
    expiry: datetime.datetime
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _require_id(self.client_id, "client_id")
        _require_id(self.session_id, "session_id")
        if not isinstance(self.sequence, PermissionSequence):
            raise InvariantViolation("sequence must be a PermissionSequence")
        if not isinstance(self.state, int) or not 0 <= self.state < len(self.sequence):
            raise InvariantViolation("state must satisfy 0 <= state < len(sequence)")
        object.__setattr__(self, "issued_at", _require_time(self.issued_at, "issued_at"))
        object.__setattr__(self, "expiry", _require_time(self.expiry, "expiry"))
        if self.expiry <= self.issued_at:
            raise InvariantViolation("expiry must be after issued_at")
        object.__setattr__(self, "metadata", _frozen_json_map(self.metadata, "metadata"))

    def body(self) -> dict[str, Any]:
        return {
            "client_id": self.client_id,
            "exp": _ts(self.expiry),
            "iat": _ts(self.issued_at),
            "metadata": dict(self.metadata),
            "sequence": self.sequence.to_json(),
            "session_id": self.session_id,
            "state": self.state,
        }

    @classmethod
    def from_body(cls, obj: dict[str, Any]) -> "MasterCapability":
        return cls(
            sequence=PermissionSequence.from_json(obj.get("sequence")),
            client_id=obj.get("client_id", ""),
            state=obj.get("state", -1),
            session_id=obj.get("session_id", ""),
            issued_at=_from_ts(obj.get("iat"), "iat"),
            expiry=_from_ts(obj.get("exp"), "exp"),
            metadata=obj.get("metadata", {}),
        )


@dataclass(frozen=True)
class StateCapability:
    """A resource-server-minted token carrying the advanced sequence state.

    The signed master travels inside, byte for byte, so every verifier can
    re-check the original grant without talking to the authorization server.
    """

    master: "SignedEnvelope"
    state: int
    issuer_cert_pem: str
    expiry: datetime.datetime

    def __post_init__(self) -> None:
        if not isinstance(self.master, SignedEnvelope):
            raise InvariantViolation("master must be a SignedEnvelope")
        inner = self.master.capability()
        if not isinstance(inner, MasterCapability):
            raise InvariantViolation("embedded envelope must contain a master capability")
        if not isinstance(self.state, int) or not 1 <= self.state <= inner.sequence.last_index:
            raise InvariantViolation("state must satisfy 1 <= state <= len(sequence) - 1")
        _require_id(self.issuer_cert_pem, "issuer_cert_pem")
        object.__setattr__(self, "expiry", _require_time(self.expiry, "expiry"))

    def master_capability(self) -> MasterCapability:
        inner = self.master.capability()
        assert isinstance(inner, MasterCapability)
        return inner

    def issuer_certificate(self) -> x509.Certificate:
        return load_certificate_pem(self.issuer_cert_pem)

    def body(self) -> dict[str, Any]:
        return {
            "exp": _ts(self.expiry),
            "issuer_cert": self.issuer_cert_pem,
            "master": self.master.token(),
            "state": self.state,
        }

    @classmethod
    def from_body(cls, obj: dict[str, Any]) -> "StateCapability":
        raw = obj.get("master")
        if not isinstance(raw, str):
            raise InvariantViolation("master must be a token string")
        return cls(
            master=SignedEnvelope.parse_token(raw),
            state=obj.get("state", 0),
            issuer_cert_pem=obj.get("issuer_cert", ""),
            expiry=_from_ts(obj.get("exp"), "exp"),
        )


@dataclass(frozen=True)
class EsoScope:
    """What an observer capability is good for: one context question, asked by
    one resource server about one user."""

    rs_id: str
    eso_id: str
    permission: str
    context: str
    user_id: str

    def __post_init__(self) -> None:
        _require_id(self.rs_id, "rs_id")
        _require_id(self.eso_id, "eso_id")
        _require_id(self.permission, "permission")
        _require_id(self.context, "context")
        _require_id(self.user_id, "user_id")

    def to_json(self) -> dict[str, str]:
        return {
            "context": self.context,
            "eso_id": self.eso_id,
            "permission": self.permission,
            "rs_id": self.rs_id,
            "user_id": self.user_id,
        }

    @classmethod
    def from_json(cls, obj: Any) -> "EsoScope":
        if not isinstance(obj, dict):
            raise InvariantViolation("scope must be an object")
        return cls(
            rs_id=obj.get("rs_id", ""),
            eso_id=obj.get("eso_id", ""),
            permission=obj.get("permission", ""),
            context=obj.get("context", ""),
            user_id=obj.get("user_id", ""),
        )


@dataclass(frozen=True)
class EsoCapability:
    """Authorization for a resource server to query one environment observer,
    tied to a single master token by digest."""

    master_hash: bytes
    scope: EsoScope
    expiry: datetime.datetime
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.master_hash, bytes) or len(self.master_hash) != MASTER_HASH_LEN:
            raise InvariantViolation(f"master_hash must be exactly {MASTER_HASH_LEN} bytes")
        if not isinstance(self.scope, EsoScope):
            raise InvariantViolation("scope must be an EsoScope")
        object.__setattr__(self, "expiry", _require_time(self.expiry, "expiry"))
        object.__setattr__(self, "metadata", _frozen_json_map(self.metadata, "metadata"))

    def body(self) -> dict[str, Any]:
        return {
            "exp": _ts(self.expiry),
            "master_hash": _b64(self.master_hash),
            "metadata": dict(self.metadata),
            "scope": self.scope.to_json(),
        }

    @classmethod
    def from_body(cls, obj: dict[str, Any]) -> "EsoCapability":
        raw = obj.get("master_hash")
        if not isinstance(raw, str):
            raise InvariantViolation("master_hash must be a base64url string")
        return cls(
            master_hash=_unb64(raw),
            scope=EsoScope.from_json(obj.get("scope")),
            expiry=_from_ts(obj.get("exp"), "exp"),
            metadata=obj.get("metadata", {}),
        )


@dataclass(frozen=True)
class ClientClaim:
    """The client's signed request for a grant."""

    client_id: str
    target_rs: str
    requested_scope: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _require_id(self.client_id, "client_id")
        _require_id(self.target_rs, "target_rs")
        object.__setattr__(
            self, "requested_scope", _frozen_json_map(self.requested_scope, "requested_scope")
        )

    def body(self) -> dict[str, Any]:
        return {
            "client_id": self.client_id,
            "requested_scope": dict(self.requested_scope),
            "target_rs": self.target_rs,
        }

    @classmethod
    def from_body(cls, obj: dict[str, Any]) -> "ClientClaim":
        return cls(
            client_id=obj.get("client_id", ""),
            target_rs=obj.get("target_rs", ""),
            requested_scope=obj.get("requested_scope", {}),
        )


Capability = MasterCapability | StateCapability | EsoCapability | ClientClaim

_KIND_BY_TYPE: dict[type, str] = {
    MasterCapability: "master",
    StateCapability: "state",
    EsoCapability: "eso",
    ClientClaim: "claim",
}
_TYPE_BY_KIND = {kind: typ for typ, kind in _KIND_BY_TYPE.items()}


def capability_kind(cap: Capability) -> str:
    try:
        return _KIND_BY_TYPE[type(cap)]
    except KeyError:
        raise InvariantViolation(f"not a capability type: {type(cap).__name__}") from None


def canonical_serialize(cap: Capability) -> bytes:
    """Deterministic serialization of one capability.

    The result is the ``header.body`` prefix of the wire format and doubles as
    the signing input; identical logical capabilities yield identical bytes.
    """
    kind = capability_kind(cap)
    header = _b64(canonical_json({"typ": kind}).encode("utf-8"))
    body = _b64(canonical_json(cap.body()).encode("utf-8"))
    return f"{header}.{body}".encode("ascii")


def deserialize(data: bytes | str) -> Capability:
    """Parse ``header.body`` bytes back into a capability.

    Raises MalformedEnvelope for anything that does not parse cleanly into a
    valid capability, including structurally sound JSON with invalid values.
    """
    text = data.decode("ascii", errors="strict") if isinstance(data, bytes) else data
    parts = text.split(".")
    if len(parts) != 2:
        raise MalformedEnvelope("expected two dot-separated segments")
    try:
        header = json.loads(_unb64(parts[0]))
        body = json.loads(_unb64(parts[1]))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedEnvelope(f"undecodable segment: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(body, dict):
        raise MalformedEnvelope("header and body must be JSON objects")
    kind = header.get("typ")
    cap_type = _TYPE_BY_KIND.get(kind)
    if cap_type is None:
        raise MalformedEnvelope(f"unknown capability kind: {kind!r}")
    try:
        return cap_type.from_body(body)
    except InvariantViolation as exc:
        raise MalformedEnvelope(f"invalid {kind} capability: {exc}") from exc


@dataclass(frozen=True)
class SignedEnvelope:
    """A capability plus its signature, exactly as carried on the wire."""

    payload: bytes
    signature: bytes
    alg: SignatureAlg
    signer_id: str

    def __post_init__(self) -> None:
        _require_id(self.signer_id, "signer_id")
        if not isinstance(self.payload, bytes) or not self.payload:
            raise InvariantViolation("payload must be non-empty bytes")
        if not isinstance(self.signature, bytes) or not self.signature:
            raise InvariantViolation("signature must be non-empty bytes")

    def capability(self) -> Capability:
        return deserialize(self.payload)

    def kind(self) -> str:
        return capability_kind(self.capability())

    def token(self) -> str:
        sigblock = canonical_json(
            {"alg": self.alg.value, "kid": self.signer_id, "sig": _b64(self.signature)}
        )
        return self.payload.decode("ascii") + "." + _b64(sigblock.encode("utf-8"))

    @classmethod
    def parse_token(cls, token: str) -> "SignedEnvelope":
        if not isinstance(token, str):
            raise MalformedEnvelope("token must be a string")
        parts = token.split(".")
        if len(parts) != 3:
            raise MalformedEnvelope("expected three dot-separated segments")
        try:
            sigblock = json.loads(_unb64(parts[2]))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedEnvelope(f"undecodable signature block: {exc}") from exc
        if not isinstance(sigblock, dict):
            raise MalformedEnvelope("signature block must be a JSON object")
        try:
            alg = SignatureAlg(sigblock.get("alg"))
        except ValueError:
            raise MalformedEnvelope(f"unknown alg: {sigblock.get('alg')!r}") from None
        sig = sigblock.get("sig")
        if not isinstance(sig, str):
            raise MalformedEnvelope("signature block missing sig")
        kid = sigblock.get("kid")
        if not isinstance(kid, str) or not kid:
            raise MalformedEnvelope("signature block missing kid")
        # Keep the payload exactly as received; any mutation must surface as a
        # signature failure, not be papered over by re-canonicalization.
        payload = (parts[0] + "." + parts[1]).encode("ascii")
        try:
            return cls(payload=payload, signature=_unb64(sig), alg=alg, signer_id=kid)
        except InvariantViolation as exc:
            raise MalformedEnvelope(str(exc)) from exc


# Free-function spelling; call sites rarely care that parsing lives on the class.
parse_token = SignedEnvelope.parse_token


def sign(cap: Capability, keys: PrincipalKeys, alg: SignatureAlg | None = None) -> SignedEnvelope:
    """Sign a capability with a principal's key.

    Raises KeyMismatch when an explicit alg disagrees with the key type.
    """
    use_alg = alg or keys.alg
    payload = canonical_serialize(cap)
    signature = sign_bytes(keys.private_key, use_alg, payload)
    return SignedEnvelope(
        payload=payload, signature=signature, alg=use_alg, signer_id=keys.principal_id
    )


def verify(env: SignedEnvelope, cert: x509.Certificate) -> bool:
    """Check an envelope's signature against a certificate's public key.

    Returns False for any mismatch (wrong key, wrong alg for the key type,
    mutated payload); never raises.
    """
    return verify_bytes(cert.public_key(), env.alg, env.signature, env.payload)


def verify_token(token: str, cert: x509.Certificate) -> bool:
    """verify() over a wire token string; malformed tokens count as failed."""
    try:
        env = SignedEnvelope.parse_token(token)
        env.capability()
    except MalformedEnvelope:
        return False
    return verify(env, cert)


def bind_hash(master_env: SignedEnvelope) -> bytes:
    """SHA-256 digest over the complete signed master envelope.

    Covering the signature as well as the payload means two grants with
    identical contents but different signing events still bind distinctly.
    """
    return hashlib.sha256(master_env.token().encode("ascii")).digest()


def check_binding(eso_cap: EsoCapability, master_env: SignedEnvelope) -> bool:
    """True iff the observer capability was minted for this exact master."""
    return eso_cap.master_hash == bind_hash(master_env)
