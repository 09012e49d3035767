"""Token layer: canonical serialization, signing, and digest binding.

The expected canonical payload and the frozen envelope digest below were
computed independently with the standard library (json + base64 + hashlib)
before the implementation existed; they are the oracle this module is held to.
"""

from __future__ import annotations

import base64
import datetime
import hashlib
import json
from pathlib import Path

import pytest
from cryptography.hazmat.primitives import serialization

from seqcap.capability import (
    ClientClaim,
    ContextRequirement,
    EsoCapability,
    EsoScope,
    MasterCapability,
    PermissionEntry,
    PermissionSequence,
    SignedEnvelope,
    StateCapability,
    bind_hash,
    canonical_serialize,
    check_binding,
    deserialize,
    sign,
    verify,
    verify_token,
)
from seqcap.errors import InvariantViolation, KeyMismatch, MalformedEnvelope
from seqcap.keys import SignatureAlg, sign_bytes

from conftest import make_master

UTC = datetime.timezone.utc
DATA = Path(__file__).parent / "data"

# Frozen oracle values (stdlib-computed; see module docstring).
KAT_SESSION = "0123456789abcdef0123456789abcdef"
KAT_METADATA = {
    "audience": "https://localhost:4990/Alice/balance",
    "issuer": "https://localhost:5000/authorization",
}
KAT_ENVELOPE_DIGEST = "35908b27685f371dfbf46afbfac1cb69601343b7d47f220f77b1ec93633171e3"


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode()


def _stdlib_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def kat_master(charge_sequence) -> MasterCapability:
    return make_master(charge_sequence, metadata=KAT_METADATA)


class TestCanonicalSerialize:
    def test_payload_matches_stdlib_oracle(self, charge_sequence):
        body = {
            "client_id": "B",
            "exp": 1_700_086_400,
            "iat": 1_700_000_000,
            "metadata": KAT_METADATA,
            "sequence": [
                {
                    "contexts": [
                        {
                            "property": "used_within_two_months",
                            "rs_id": "payments-rs",
                            "subject_id": "Alice",
                        }
                    ],
                    "permission": "charge",
                    "rs_id": "payments-rs",
                }
            ],
            "session_id": KAT_SESSION,
            "state": 0,
        }
        expected = (
            _b64(_stdlib_canonical({"typ": "master"}).encode())
            + "."
            + _b64(_stdlib_canonical(body).encode())
        )
        assert canonical_serialize(kat_master(charge_sequence)) == expected.encode()

    def test_deterministic(self, charge_sequence):
        cap = kat_master(charge_sequence)
        assert canonical_serialize(cap) == canonical_serialize(cap)
        # a structurally equal twin serializes identically
        twin = kat_master(charge_sequence)
        assert canonical_serialize(twin) == canonical_serialize(cap)

    def test_round_trip_master(self, three_step_sequence):
        cap = make_master(three_step_sequence, metadata={"audience": "https://rs1"})
        assert deserialize(canonical_serialize(cap)) == cap

    def test_round_trip_claim(self):
        claim = ClientClaim(
            client_id="B",
            target_rs="payments-rs",
            requested_scope={
                "application": "Payment",
                "objectAttribute": {"resourceType": ["balance"], "resourceID": "Alice"},
                "actions": ["charge"],
                "amount": "$10",
            },
        )
        assert deserialize(canonical_serialize(claim)) == claim

    def test_round_trip_eso(self, charge_sequence, as_keys):
        env = sign(kat_master(charge_sequence), as_keys)
        cap = EsoCapability(
            master_hash=bind_hash(env),
            scope=EsoScope(
                rs_id="payments-rs",
                eso_id="https://localhost:4995/used_within_two_months",
                permission="read",
                context="used_within_two_months",
                user_id="Alice",
            ),
            expiry=datetime.datetime.fromtimestamp(1_700_086_400, tz=UTC),
        )
        assert deserialize(canonical_serialize(cap)) == cap

    def test_round_trip_state_capability(self, three_step_sequence, as_keys, rs_keys):
        master_env = sign(make_master(three_step_sequence), as_keys)
        cap = StateCapability(
            master=master_env,
            state=1,
            issuer_cert_pem=rs_keys.certificate_pem(),
            expiry=datetime.datetime.fromtimestamp(1_700_086_400, tz=UTC),
        )
        parsed = deserialize(canonical_serialize(cap))
        assert parsed == cap
        # the embedded master survives byte-identically
        assert parsed.master.token() == master_env.token()

    def test_malformed_inputs_raise(self):
        with pytest.raises(MalformedEnvelope):
            deserialize(b"onlyonesegment")
        with pytest.raises(MalformedEnvelope):
            deserialize(b"!notb64.!either")
        header = _b64(b'{"typ":"nonsense"}')
        body = _b64(b"{}")
        with pytest.raises(MalformedEnvelope):
            deserialize(f"{header}.{body}".encode())
        # structurally valid JSON, invalid values
        header = _b64(b'{"typ":"master"}')
        with pytest.raises(MalformedEnvelope):
            deserialize(f"{header}.{body}".encode())


class TestConstructionInvariants:
    def test_empty_sequence_rejected(self):
        with pytest.raises(InvariantViolation):
            PermissionSequence(entries=())

    def test_state_bounds(self, charge_sequence):
        with pytest.raises(InvariantViolation):
            make_master(charge_sequence).__class__(
                sequence=charge_sequence,
                client_id="B",
                state=1,  # == len(sequence), out of range
                session_id=KAT_SESSION,
                issued_at=datetime.datetime.fromtimestamp(1_700_000_000, tz=UTC),
                expiry=datetime.datetime.fromtimestamp(1_700_086_400, tz=UTC),
            )

    def test_naive_datetime_rejected(self, charge_sequence):
        with pytest.raises(InvariantViolation):
            MasterCapability(
                sequence=charge_sequence,
                client_id="B",
                state=0,
                session_id=KAT_SESSION,
                issued_at=datetime.datetime(2023, 1, 1),
                expiry=datetime.datetime(2023, 1, 2),
            )

    def test_empty_identifier_rejected(self):
        with pytest.raises(InvariantViolation):
            PermissionEntry(rs_id="", permission="charge")
        with pytest.raises(InvariantViolation):
            ContextRequirement(property="p", subject_id="", rs_id="r")

    def test_master_hash_must_be_32_bytes(self):
        scope = EsoScope(
            rs_id="r", eso_id="e", permission="read", context="c", user_id="u"
        )
        with pytest.raises(InvariantViolation):
            EsoCapability(
                master_hash=b"short",
                scope=scope,
                expiry=datetime.datetime.now(UTC) + datetime.timedelta(hours=1),
            )

    def test_state_capability_state_bounds(self, three_step_sequence, as_keys, rs_keys):
        env = sign(make_master(three_step_sequence), as_keys)
        exp = datetime.datetime.fromtimestamp(1_700_086_400, tz=UTC)
        for bad_state in (0, 3):
            with pytest.raises(InvariantViolation):
                StateCapability(
                    master=env, state=bad_state,
                    issuer_cert_pem=rs_keys.certificate_pem(), expiry=exp,
                )


class TestSignVerify:
    def test_sign_then_verify(self, charge_sequence, as_keys):
        env = sign(kat_master(charge_sequence), as_keys)
        assert verify(env, as_keys.certificate)

    def test_wrong_certificate_fails(self, charge_sequence, as_keys, rs_keys):
        env = sign(kat_master(charge_sequence), as_keys)
        assert not verify(env, rs_keys.certificate)

    def test_alg_key_mismatch_raises(self, charge_sequence, as_keys):
        with pytest.raises(KeyMismatch):
            sign(kat_master(charge_sequence), as_keys, alg=SignatureAlg.RSA3072_SHA256)

    def test_ecdsa_signature_fails_under_rsa_cert(self, charge_sequence, as_keys, rsa_as_keys):
        env = sign(kat_master(charge_sequence), as_keys)
        assert not verify(env, rsa_as_keys.certificate)

    def test_rsa_sign_verify(self, charge_sequence, rsa_as_keys):
        env = sign(kat_master(charge_sequence), rsa_as_keys)
        assert env.alg is SignatureAlg.RSA3072_SHA256
        assert verify(env, rsa_as_keys.certificate)

    def test_token_round_trip(self, charge_sequence, as_keys):
        env = sign(kat_master(charge_sequence), as_keys)
        parsed = SignedEnvelope.parse_token(env.token())
        assert parsed == env
        assert parsed.capability() == kat_master(charge_sequence)

    def test_single_byte_payload_mutation_detected(self, charge_sequence, as_keys):
        env = sign(kat_master(charge_sequence), as_keys)
        token = env.token()
        # flip one character in the body segment to a different b64 character
        head, body, sig = token.split(".")
        flipped = ("A" if body[10] != "A" else "B")
        mutated = f"{head}.{body[:10] + flipped + body[11:]}.{sig}"
        assert not verify_token(mutated, as_keys.certificate)

    def test_signature_segment_mutation_detected(self, charge_sequence, as_keys):
        env = sign(kat_master(charge_sequence), as_keys)
        head, body, sig = env.token().split(".")
        flipped = ("A" if sig[5] != "A" else "B")
        assert not verify_token(f"{head}.{body}.{sig[:5] + flipped + sig[6:]}", as_keys.certificate)


class TestBinding:
    def test_frozen_envelope_digest(self, charge_sequence):
        key = serialization.load_pem_private_key(
            (DATA / "frozen_rsa3072.pem").read_bytes(), password=None
        )
        payload = canonical_serialize(kat_master(charge_sequence))
        env = SignedEnvelope(
            payload=payload,
            signature=sign_bytes(key, SignatureAlg.RSA3072_SHA256, payload),
            alg=SignatureAlg.RSA3072_SHA256,
            signer_id="authz-server",
        )
        assert bind_hash(env).hex() == KAT_ENVELOPE_DIGEST
        assert len(bind_hash(env)) == 32

    def test_session_id_changes_digest(self, charge_sequence, as_keys):
        a = sign(make_master(charge_sequence, session_id="a" * 32), as_keys)
        b = sign(make_master(charge_sequence, session_id="b" * 32), as_keys)
        assert bind_hash(a) != bind_hash(b)

    def test_check_binding(self, charge_sequence, as_keys):
        env = sign(make_master(charge_sequence, session_id="a" * 32), as_keys)
        other = sign(make_master(charge_sequence, session_id="b" * 32), as_keys)
        scope = EsoScope(
            rs_id="payments-rs",
            eso_id="https://localhost:4995/used_within_two_months",
            permission="read",
            context="used_within_two_months",
            user_id="Alice",
        )
        eso = EsoCapability(
            master_hash=bind_hash(env),
            scope=scope,
            expiry=datetime.datetime.now(UTC) + datetime.timedelta(hours=1),
        )
        assert check_binding(eso, env)
        assert not check_binding(eso, other)

    def test_digest_covers_signature_not_just_payload(self, charge_sequence, rsa_as_keys, as_keys):
        # same capability signed by different principals must bind differently
        cap = kat_master(charge_sequence)
        assert bind_hash(sign(cap, as_keys)) != bind_hash(sign(cap, rsa_as_keys))


class TestTokenFieldSets:
    """The minted tokens carry the documented field set for the payments use
    case: a one-day TTL, state 0, the charge permission, the login-recency
    context, and audience/issuer metadata."""

    def test_master_field_set(self, charge_sequence):
        cap = make_master(
            charge_sequence,
            metadata={
                "audience": "https://localhost:4990/Alice/balance",
                "issuer": "https://localhost:5000/authorization",
                "action_attributes": {"amount": "$10", "frequency": "monthly"},
            },
        )
        body = json.loads(
            base64.urlsafe_b64decode(
                canonical_serialize(cap).split(b".")[1] + b"=="
            )
        )
        assert body["exp"] - body["iat"] == 86_400  # one day
        assert body["state"] == 0
        assert body["client_id"] == "B"
        assert [e["permission"] for e in body["sequence"]] == ["charge"]
        assert [c["property"] for e in body["sequence"] for c in e["contexts"]] == [
            "used_within_two_months"
        ]
        assert body["metadata"]["audience"] == "https://localhost:4990/Alice/balance"
        assert body["metadata"]["issuer"] == "https://localhost:5000/authorization"
        assert body["metadata"]["action_attributes"] == {
            "amount": "$10",
            "frequency": "monthly",
        }

    def test_eso_field_set(self, charge_sequence, as_keys):
        env = sign(make_master(charge_sequence), as_keys)
        eso = EsoCapability(
            master_hash=bind_hash(env),
            scope=EsoScope(
                rs_id="payments-rs",
                eso_id="https://localhost:4995/used_within_two_months",
                permission="read",
                context="used_within_two_months",
                user_id="Alice",
            ),
            expiry=datetime.datetime.fromtimestamp(1_700_086_400, tz=UTC),
            metadata={"issuer": "https://localhost:5000/authorization"},
        )
        body = json.loads(
            base64.urlsafe_b64decode(canonical_serialize(eso).split(b".")[1] + b"==")
        )
        assert body["master_hash"] == _b64(bind_hash(env))
        assert body["scope"]["rs_id"] == "payments-rs"
        assert body["scope"]["eso_id"].endswith("/used_within_two_months")
        assert body["scope"]["permission"] == "read"
        assert body["scope"]["user_id"] == "Alice"
        assert body["scope"]["context"] == "used_within_two_months"
        assert body["metadata"]["issuer"] == "https://localhost:5000/authorization"
