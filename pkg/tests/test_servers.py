"""Service-level tests over in-process apps: the authorization server with a
real policy store, resource servers with injected backend fakes, and the
context oracle."""

from __future__ import annotations

import base64
import datetime
import json
import time

import pytest
from fastapi.testclient import TestClient

from seqcap.capability import (
    ClientClaim,
    ContextRequirement,
    EsoCapability,
    EsoScope,
    MasterCapability,
    PermissionEntry,
    PermissionSequence,
    bind_hash,
    parse_token,
    sign,
    verify,
)
from seqcap.keys import sign_bytes
from seqcap.policy import (
    EsoRegistry,
    EsoRegistryEntry,
    PolicyRule,
    PolicyStore,
    SubjectAttributes,
)
from seqcap.servers import (
    AuthServerState,
    EsoServerState,
    ResourceServerState,
    create_auth_app,
    create_eso_app,
    create_resource_app,
)
from seqcap.servers.common import context_query_message, sign_service_message
from seqcap.servers.esoserver import recent_use_evaluator

UTC = datetime.timezone.utc
CONTEXT = "used_within_two_months"
ESO_URL = "https://eso.example"

POLICY_DOC = {
    "type": "ABAC policy",
    "name": "ApplicationServiceCharge",
    "application": "Payment",
    "rules": {
        "subjectAttribute": {"ApplicationID": ["B"]},
        "objectAttribute": {"resourceType": ["balance"], "resourceID": "Alice"},
        "authorization": "permit",
        "actionAttribute": {"actions": ["charge"], "amount": "$10", "frequency": "monthly"},
        "environmentcontext": [CONTEXT],
        "Default": {"authorization": "deny"},
    },
}

SUBJECT_DOC = {
    "subject_id": "B",
    "application": "Payment",
    "subjectAttribute": {"ApplicationID": ["B"]},
    "name": "ApplicationB",
}


def b64url(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def charge_claim_token(keys, client_id: str = "B", amount: str = "$10") -> str:
    claim = ClientClaim(
        client_id=client_id,
        target_rs="payments-rs",
        requested_scope={
            "application": "Payment",
            "objectAttribute": {"resourceType": ["balance"], "resourceID": "Alice"},
            "actions": ["charge"],
            "amount": amount,
        },
    )
    return sign(claim, keys).token()


def authz_headers(assertion: str, grant_type: str = "client_credentials") -> dict[str, str]:
    return {
        "grant-type": grant_type,
        "client-assertion-type": "jwt-bearer",
        "client-assertion": assertion,
    }


def fresh_master(sequence: PermissionSequence, client_id: str = "B", session_id: str | None = None,
                 ttl: int = 3600, amount: str = "$10") -> MasterCapability:
    now = datetime.datetime.now(UTC)
    return MasterCapability(
        sequence=sequence,
        client_id=client_id,
        state=0,
        session_id=session_id or f"{int(time.time() * 1e6):032x}",
        issued_at=now,
        expiry=now + datetime.timedelta(seconds=ttl),
        metadata={"issuer": "authz-server", "scope": {"amount": amount}},
    )


def fresh_eso(master_env, as_keys, rs_id: str = "payments-rs", context: str = CONTEXT,
              user_id: str = "Alice", eso_id: str = ESO_URL, ttl: int = 3600):
    cap = EsoCapability(
        master_hash=bind_hash(master_env),
        scope=EsoScope(rs_id=rs_id, eso_id=eso_id, permission="read", context=context, user_id=user_id),
        expiry=datetime.datetime.now(UTC) + datetime.timedelta(seconds=ttl),
        metadata={"issuer": "authz-server"},
    )
    return sign(cap, as_keys)


@pytest.fixture
def auth_state(ca, as_keys, rs_keys, rs2_keys, client_keys, mallory_keys) -> AuthServerState:
    certs = {
        k.principal_id: k.certificate_pem()
        for k in (rs_keys, rs2_keys, client_keys, mallory_keys)
    }
    return AuthServerState(
        keys=as_keys,
        root_certificate=ca.root_certificate,
        policy_store=PolicyStore(policies=[PolicyRule.from_json(POLICY_DOC)]),
        subjects={"B": SubjectAttributes.from_json(SUBJECT_DOC)},
        certificates=certs,
        eso_registry=EsoRegistry(
            [EsoRegistryEntry(context_name=CONTEXT, url=ESO_URL, description="login recency")]
        ),
        admin_token="admin-secret",
    )


@pytest.fixture
def auth_client(auth_state) -> TestClient:
    return TestClient(create_auth_app(auth_state))


def rs_call_payload(purpose: str, session_id: str, keys, timestamp: str | None = None) -> dict:
    ts = timestamp if timestamp is not None else str(time.time())
    return {
        "session_id": session_id,
        "rs_id": keys.principal_id,
        "timestamp": ts,
        "signature": sign_service_message(keys, purpose, session_id, keys.principal_id, ts),
    }


class TestAuthorizationEndpoint:
    def test_happy_path_issues_bound_tokens(self, auth_client, auth_state, client_keys, as_keys):
        response = auth_client.post("/authorization", headers=authz_headers(charge_claim_token(client_keys)))
        assert response.status_code == 200, response.text
        body = response.json()
        assert body["token_type"] == "capability"
        assert body["expires_in"] == 86400

        master_env = parse_token(body["access_token"])
        assert verify(master_env, as_keys.certificate)
        master = master_env.capability()
        assert master.client_id == "B"
        assert master.state == 0
        assert master.session_id == body["session_id"]
        assert [e.permission for e in master.sequence] == ["charge"]
        assert master.sequence[0].rs_id == "payments-rs"
        assert master.sequence[0].contexts[0].property == CONTEXT
        assert master.sequence[0].contexts[0].subject_id == "Alice"
        assert master.metadata["scope"]["amount"] == "$10"

        eso_env = parse_token(body["eso_tokens"][CONTEXT])
        eso = eso_env.capability()
        assert eso.master_hash == bind_hash(master_env)
        assert eso.scope.eso_id == ESO_URL
        assert eso.scope.user_id == "Alice"
        assert auth_state.sessions[body["session_id"]].status == "active"

    def test_wrong_grant_type(self, auth_client, client_keys):
        response = auth_client.post(
            "/authorization",
            headers=authz_headers(charge_claim_token(client_keys), grant_type="password"),
        )
        assert response.status_code == 400
        assert response.json() == {"error": "unsupported_grant_type"}

    def test_missing_assertion(self, auth_client):
        response = auth_client.post(
            "/authorization",
            headers={"grant-type": "client_credentials", "client-assertion-type": "jwt-bearer"},
        )
        assert response.status_code == 400

    def test_claim_signed_by_wrong_key(self, auth_client, mallory_keys):
        # claims to be B but signs with mallory's key
        forged = charge_claim_token(mallory_keys, client_id="B")
        response = auth_client.post("/authorization", headers=authz_headers(forged))
        assert response.status_code == 401
        assert response.json() == {"error": "invalid_client"}

    def test_unknown_client(self, auth_client, ca):
        stranger = ca.issue("stranger")
        token = charge_claim_token(stranger, client_id="stranger")
        response = auth_client.post("/authorization", headers=authz_headers(token))
        assert response.status_code == 401

    def test_policy_denies_wrong_amount(self, auth_client, client_keys):
        response = auth_client.post(
            "/authorization", headers=authz_headers(charge_claim_token(client_keys, amount="$20"))
        )
        assert response.status_code == 403
        assert response.json() == {"error": "access_denied"}

    def test_one_active_session_per_frequency_rule(self, auth_client, client_keys):
        first = auth_client.post("/authorization", headers=authz_headers(charge_claim_token(client_keys)))
        assert first.status_code == 200
        second = auth_client.post("/authorization", headers=authz_headers(charge_claim_token(client_keys)))
        assert second.status_code == 403
        assert second.json() == {"error": "active_session"}

    def test_frequency_window_after_completion(self, auth_client, auth_state, client_keys, rs_keys):
        issued = auth_client.post("/authorization", headers=authz_headers(charge_claim_token(client_keys)))
        session_id = issued.json()["session_id"]
        done = auth_client.post("/complete", json=rs_call_payload("complete", session_id, rs_keys))
        assert done.status_code == 200

        again = auth_client.post("/authorization", headers=authz_headers(charge_claim_token(client_keys)))
        assert again.status_code == 403
        assert again.json() == {"error": "frequency_exceeded"}

    def test_dangling_context_registration(self, auth_state, client_keys):
        auth_state.eso_registry = EsoRegistry()
        client = TestClient(create_auth_app(auth_state))
        response = client.post("/authorization", headers=authz_headers(charge_claim_token(client_keys)))
        assert response.status_code == 500
        assert response.json() == {"error": "dangling_context"}


class TestIntrospectionAndCompletion:
    def issue(self, auth_client, client_keys) -> str:
        body = auth_client.post(
            "/authorization", headers=authz_headers(charge_claim_token(client_keys))
        ).json()
        return body["session_id"]

    def test_fresh_session_is_active(self, auth_client, client_keys, rs_keys):
        session_id = self.issue(auth_client, client_keys)
        response = auth_client.post("/introspect", json=rs_call_payload("introspect", session_id, rs_keys))
        assert response.status_code == 200
        assert response.json()["status"] == "active"

    def test_unknown_session(self, auth_client, rs_keys):
        response = auth_client.post("/introspect", json=rs_call_payload("introspect", "f" * 32, rs_keys))
        assert response.status_code == 404

    def test_completion_revokes(self, auth_client, client_keys, rs_keys):
        session_id = self.issue(auth_client, client_keys)
        done = auth_client.post("/complete", json=rs_call_payload("complete", session_id, rs_keys))
        assert done.status_code == 200
        assert done.json()["status"] == "completed"
        after = auth_client.post("/introspect", json=rs_call_payload("introspect", session_id, rs_keys))
        assert after.json()["status"] == "revoked_or_completed"

    def test_completion_is_idempotent(self, auth_client, client_keys, rs_keys):
        session_id = self.issue(auth_client, client_keys)
        for _ in range(2):
            done = auth_client.post("/complete", json=rs_call_payload("complete", session_id, rs_keys))
            assert done.status_code == 200
            assert done.json()["status"] == "completed"

    def test_client_cannot_complete(self, auth_client, client_keys):
        session_id = self.issue(auth_client, client_keys)
        forged = rs_call_payload("complete", session_id, client_keys)
        response = auth_client.post("/complete", json=forged)
        assert response.status_code == 403

    def test_rs_outside_sequence_cannot_introspect(self, auth_client, client_keys, rs2_keys):
        session_id = self.issue(auth_client, client_keys)
        response = auth_client.post("/introspect", json=rs_call_payload("introspect", session_id, rs2_keys))
        assert response.status_code == 403

    def test_stale_timestamp_rejected(self, auth_client, client_keys, rs_keys):
        session_id = self.issue(auth_client, client_keys)
        stale = rs_call_payload("introspect", session_id, rs_keys, timestamp=str(time.time() - 3600))
        response = auth_client.post("/introspect", json=stale)
        assert response.status_code == 403

    def test_purpose_confusion_rejected(self, auth_client, client_keys, rs_keys):
        # a signature minted for introspection must not complete the session
        session_id = self.issue(auth_client, client_keys)
        payload = rs_call_payload("introspect", session_id, rs_keys)
        response = auth_client.post("/complete", json=payload)
        assert response.status_code == 403


class TestEsoRegistryEndpoint:
    def test_requires_admin_token(self, auth_client):
        response = auth_client.post("/eso-registry", json={"context_name": "x", "eso_url": "https://x"})
        assert response.status_code == 401

    def test_registers_and_rejects_duplicates(self, auth_client):
        entry = {"context_name": "in_home_area", "eso_url": "https://geo.example", "description": "geo"}
        first = auth_client.post("/eso-registry", json=entry, headers={"x-admin-token": "admin-secret"})
        assert first.status_code == 200
        second = auth_client.post("/eso-registry", json=entry, headers={"x-admin-token": "admin-secret"})
        assert second.status_code == 409


def charge_sequence_for_rs() -> PermissionSequence:
    return PermissionSequence(
        entries=(
            PermissionEntry(
                rs_id="payments-rs",
                permission="charge",
                contexts=(
                    ContextRequirement(property=CONTEXT, subject_id="Alice", rs_id="payments-rs"),
                ),
            ),
        )
    )


def two_step_sequence_for_rs() -> PermissionSequence:
    return PermissionSequence(
        entries=(
            PermissionEntry(rs_id="payments-rs", permission="reserve"),
            PermissionEntry(rs_id="payments-rs", permission="charge"),
        )
    )


class RsHarness:
    """One resource server app with scriptable backends."""

    def __init__(self, ca, rs_keys, as_keys, client_certs: dict[str, str], plain: bool = False):
        self.introspect_status = "active"
        self.introspect_error: Exception | None = None
        self.context_verdict = True
        self.context_error: Exception | None = None
        self.completions: list[str] = []
        self.context_queries: list[str] = []

        def introspect(session_id: str) -> str:
            if self.introspect_error is not None:
                raise self.introspect_error
            return self.introspect_status

        def complete(session_id: str) -> bool:
            self.completions.append(session_id)
            return True

        def query_context(token: str, requirement) -> bool:
            self.context_queries.append(requirement.property)
            if self.context_error is not None:
                raise self.context_error
            return self.context_verdict

        self.state = ResourceServerState(
            rs_id="payments-rs",
            keys=rs_keys,
            as_certificate=as_keys.certificate,
            root_certificate=ca.root_certificate,
            certificates=client_certs,
            introspect=introspect,
            complete=complete,
            query_context=query_context,
            accounts={"alice": 100.0},
            plain_mode=plain,
        )
        self.client = TestClient(create_resource_app(self.state))

    def pop_headers(self, keys) -> dict[str, str]:
        encoded = self.client.get("/challenge").json()["challenge"]
        padded = encoded + "=" * (-len(encoded) % 4)
        nonce = base64.urlsafe_b64decode(padded.encode("ascii"))
        signature = sign_bytes(keys.private_key, keys.alg, nonce)
        return {"x-pop-challenge": encoded, "x-pop-signature": b64url(signature)}

    def post(self, headers: dict[str, str], permission: str = "charge", owner: str = "alice",
             resource: str = "account"):
        return self.client.post(f"/{owner}/{resource}", headers=headers, json={"permission": permission})


@pytest.fixture
def rs(ca, rs_keys, as_keys, client_keys, mallory_keys) -> RsHarness:
    certs = {
        client_keys.principal_id: client_keys.certificate_pem(),
        mallory_keys.principal_id: mallory_keys.certificate_pem(),
    }
    return RsHarness(ca, rs_keys, as_keys, certs)


class TestResourceServer:
    def test_single_step_charge_completes(self, rs, as_keys, client_keys):
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        eso_env = fresh_eso(master_env, as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-eso-token": eso_env.token(),
            **rs.pop_headers(client_keys),
        }
        response = rs.post(headers)
        assert response.status_code == 200, response.text
        body = response.json()
        assert body["completed"] is True
        assert body["result"]["charged"] == 10.0
        assert rs.state.accounts["alice"] == 90.0
        assert rs.completions == [master_env.capability().session_id]
        assert rs.context_queries == [CONTEXT]
        timing = json.loads(response.headers["x-timing"])
        assert {"validate_ms", "context_ms", "action_ms", "total_ms"} <= set(timing)

    def test_mid_sequence_invoke_returns_state_token(self, rs, as_keys, rs_keys, client_keys):
        master_env = sign(fresh_master(two_step_sequence_for_rs()), as_keys)
        headers = {"x-oauth-token": master_env.token(), **rs.pop_headers(client_keys)}
        response = rs.post(headers, permission="reserve")
        assert response.status_code == 200, response.text
        body = response.json()
        assert body["state"] == 1
        state_env = parse_token(body["state_token"])
        assert verify(state_env, rs_keys.certificate)
        embedded = state_env.capability()
        assert embedded.master.token() == master_env.token()

        # replaying the spent master now falls behind the counter
        replay = rs.post(
            {"x-oauth-token": master_env.token(), **rs.pop_headers(client_keys)},
            permission="reserve",
        )
        assert replay.status_code == 403
        assert replay.json() == {"error": "OutOfOrder"}

        # the state token drives the second step to completion
        done = rs.post(
            {"x-oauth-token": body["state_token"], **rs.pop_headers(client_keys)},
            permission="charge",
        )
        assert done.status_code == 200
        assert done.json()["completed"] is True

    def test_missing_token(self, rs, client_keys):
        response = rs.post(rs.pop_headers(client_keys))
        assert response.status_code == 401
        assert response.json() == {"error": "NoCapability"}

    def test_garbage_token(self, rs, client_keys):
        headers = {"x-oauth-token": "not.a.token", **rs.pop_headers(client_keys)}
        response = rs.post(headers)
        assert response.status_code == 401
        assert response.json() == {"error": "BadSignature"}

    def test_missing_pop(self, rs, as_keys):
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        response = rs.post({"x-oauth-token": master_env.token()})
        assert response.status_code == 401
        assert response.json() == {"error": "PopFailure"}

    def test_stolen_token_fails_pop(self, rs, as_keys, mallory_keys):
        # mallory presents B's token and answers the challenge with her key
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        headers = {"x-oauth-token": master_env.token(), **rs.pop_headers(mallory_keys)}
        response = rs.post(headers)
        assert response.status_code == 401
        assert response.json() == {"error": "PopFailure"}

    def test_declared_other_identity_is_wrong_client(self, rs, as_keys, mallory_keys):
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-client-id": "mallory",
            **rs.pop_headers(mallory_keys),
        }
        response = rs.post(headers)
        assert response.status_code == 401
        assert response.json() == {"error": "WrongClient"}

    def test_context_inactive(self, rs, as_keys, client_keys):
        rs.context_verdict = False
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        eso_env = fresh_eso(master_env, as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-eso-token": eso_env.token(),
            **rs.pop_headers(client_keys),
        }
        response = rs.post(headers)
        assert response.status_code == 403
        assert response.json() == {"error": "ContextInactive"}
        assert rs.state.accounts["alice"] == 100.0

    def test_oracle_unreachable_fails_closed(self, rs, as_keys, client_keys):
        rs.context_error = ConnectionError("down")
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        eso_env = fresh_eso(master_env, as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-eso-token": eso_env.token(),
            **rs.pop_headers(client_keys),
        }
        response = rs.post(headers)
        assert response.status_code == 403
        assert response.json() == {"error": "ContextInactive"}

    def test_introspection_unreachable_fails_closed(self, rs, as_keys, client_keys):
        rs.introspect_error = ConnectionError("down")
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        eso_env = fresh_eso(master_env, as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-eso-token": eso_env.token(),
            **rs.pop_headers(client_keys),
        }
        response = rs.post(headers)
        assert response.status_code == 403
        assert response.json() == {"error": "Revoked"}
        assert rs.state.accounts["alice"] == 100.0

    def test_revoked_session(self, rs, as_keys, client_keys):
        rs.introspect_status = "revoked_or_completed"
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        eso_env = fresh_eso(master_env, as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-eso-token": eso_env.token(),
            **rs.pop_headers(client_keys),
        }
        response = rs.post(headers)
        assert response.status_code == 403
        assert response.json() == {"error": "Revoked"}

    def test_missing_observer_token_is_binding_failure(self, rs, as_keys, client_keys):
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        headers = {"x-oauth-token": master_env.token(), **rs.pop_headers(client_keys)}
        response = rs.post(headers)
        assert response.status_code == 403
        assert response.json() == {"error": "BindingFailure"}
        assert rs.context_queries == []

    def test_observer_token_for_other_master_is_binding_failure(self, rs, as_keys, client_keys):
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        other_env = sign(fresh_master(charge_sequence_for_rs(), session_id="e" * 32), as_keys)
        eso_env = fresh_eso(other_env, as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-eso-token": eso_env.token(),
            **rs.pop_headers(client_keys),
        }
        response = rs.post(headers)
        assert response.status_code == 403
        assert response.json() == {"error": "BindingFailure"}

    def test_wrong_permission_out_of_order(self, rs, as_keys, client_keys):
        master_env = sign(fresh_master(two_step_sequence_for_rs()), as_keys)
        headers = {"x-oauth-token": master_env.token(), **rs.pop_headers(client_keys)}
        response = rs.post(headers, permission="charge")
        assert response.status_code == 403
        assert response.json() == {"error": "OutOfOrder"}

    def test_unknown_owner(self, rs, as_keys, client_keys):
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        eso_env = fresh_eso(master_env, as_keys)
        headers = {
            "x-oauth-token": master_env.token(),
            "x-eso-token": eso_env.token(),
            **rs.pop_headers(client_keys),
        }
        response = rs.post(headers, owner="nobody")
        assert response.status_code == 404

    def test_read_endpoint(self, rs):
        response = rs.client.get("/alice/account")
        assert response.status_code == 200
        assert response.json()["balance"] == 100.0


class TestPlainMode:
    def test_bearer_token_suffices(self, ca, rs_keys, as_keys, client_keys):
        harness = RsHarness(ca, rs_keys, as_keys, {}, plain=True)
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        response = harness.post({"x-oauth-token": master_env.token()})
        assert response.status_code == 200
        assert harness.state.accounts["alice"] == 90.0
        # none of the enforcement machinery ran
        assert harness.completions == []
        assert harness.context_queries == []

    def test_replay_is_not_caught_in_plain_mode(self, ca, rs_keys, as_keys, client_keys):
        # the comparison baseline deliberately lacks sequence enforcement
        harness = RsHarness(ca, rs_keys, as_keys, {}, plain=True)
        master_env = sign(fresh_master(charge_sequence_for_rs()), as_keys)
        first = harness.post({"x-oauth-token": master_env.token()})
        second = harness.post({"x-oauth-token": master_env.token()})
        assert first.status_code == second.status_code == 200
        assert harness.state.accounts["alice"] == 80.0

    def test_signature_still_required(self, ca, rs_keys, as_keys):
        harness = RsHarness(ca, rs_keys, as_keys, {}, plain=True)
        response = harness.post({"x-oauth-token": "ey.garbage.ey"})
        assert response.status_code == 401


class EsoHarness:
    def __init__(self, ca, as_keys, rs_keys, now: datetime.datetime | None = None):
        now = now or datetime.datetime.now(UTC)
        history = {
            "Alice": now - datetime.timedelta(days=5),
            "Carol": now - datetime.timedelta(days=90),
        }
        self.state = EsoServerState(
            eso_id=ESO_URL,
            as_certificate=as_keys.certificate,
            root_certificate=ca.root_certificate,
            certificates={rs_keys.principal_id: rs_keys.certificate_pem()},
            evaluators={CONTEXT: recent_use_evaluator(CONTEXT, history)},
        )
        self.client = TestClient(create_eso_app(self.state))

    def query(self, token: str, signer=None, timestamp: str | None = None, context: str = CONTEXT):
        headers = {"x-eso-token": token}
        if signer is not None:
            ts = timestamp if timestamp is not None else str(time.time())
            message = context_query_message(token, ts)
            signature = sign_bytes(signer.private_key, signer.alg, message)
            headers["x-rs-signature"] = b64url(signature)
            headers["x-rs-timestamp"] = ts
        return self.client.post(f"/{context}", headers=headers)


@pytest.fixture
def eso(ca, as_keys, rs_keys) -> EsoHarness:
    return EsoHarness(ca, as_keys, rs_keys)


class TestEsoServer:
    def master_env(self, as_keys):
        return sign(fresh_master(charge_sequence_for_rs()), as_keys)

    def test_recent_user_is_active(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys).token()
        response = eso.query(token, signer=rs_keys)
        assert response.status_code == 200
        assert response.json() == {"Context": "True"}

    def test_stale_user_is_inactive(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys, user_id="Carol").token()
        response = eso.query(token, signer=rs_keys)
        assert response.status_code == 200
        assert response.json() == {"Context": "False"}

    def test_unknown_user_is_inactive(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys, user_id="Nobody").token()
        response = eso.query(token, signer=rs_keys)
        assert response.json() == {"Context": "False"}

    def test_response_carries_only_the_boolean(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys).token()
        body = eso.query(token, signer=rs_keys).json()
        assert set(body) == {"Context"}

    def test_direct_query_without_rs_signature(self, eso, as_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys).token()
        response = eso.query(token, signer=None)
        assert response.status_code == 401
        assert response.json() == {"error": "RsAuthFailure"}

    def test_client_signed_query_rejected(self, eso, as_keys, client_keys):
        # a client impersonating the resource server fails against its cert
        token = fresh_eso(self.master_env(as_keys), as_keys).token()
        response = eso.query(token, signer=client_keys)
        assert response.status_code == 401
        assert response.json() == {"error": "RsAuthFailure"}

    def test_stale_rs_timestamp(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys).token()
        response = eso.query(token, signer=rs_keys, timestamp=str(time.time() - 600))
        assert response.status_code == 401

    def test_tampered_token(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys).token()
        payload, _, sig = token.rpartition(".")
        flipped = payload[:-1] + ("A" if payload[-1] != "A" else "B") + "." + sig
        response = eso.query(flipped, signer=rs_keys)
        assert response.status_code == 401
        assert response.json() == {"error": "BadSignature"}

    def test_expired_token(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys, ttl=-60).token()
        response = eso.query(token, signer=rs_keys)
        assert response.status_code == 403
        assert response.json() == {"error": "Expired"}

    def test_scope_names_other_oracle(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys, eso_id="https://other.example").token()
        response = eso.query(token, signer=rs_keys)
        assert response.status_code == 403
        assert response.json() == {"error": "OutOfScope"}

    def test_context_path_mismatch(self, eso, as_keys, rs_keys):
        token = fresh_eso(self.master_env(as_keys), as_keys).token()
        response = eso.query(token, signer=rs_keys, context="in_home_area")
        assert response.status_code == 403
        assert response.json() == {"error": "OutOfScope"}

    def test_master_token_rejected_here(self, eso, as_keys, rs_keys):
        # a master capability is not an observer capability
        response = eso.query(self.master_env(as_keys).token(), signer=rs_keys)
        assert response.status_code == 401
