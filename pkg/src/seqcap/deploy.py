"""Single-process deployments for tests, scenarios, and benchmarks.

Every server in the cast (authorization server, resource servers, one
context observer) runs on its own ephemeral localhost port, wired together
through the same HTTP calls a distributed install would use. Trust is
provisioned the way an operator would: one fresh certificate authority per
deployment, each principal's certificate handed to exactly the parties that
need to verify it.
"""

from __future__ import annotations

import base64
import datetime
import secrets
import ssl
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import httpx
import uvicorn
from cryptography.hazmat.primitives import serialization

from .capability import ContextRequirement, parse_token
from .errors import DeploymentError, MalformedEnvelope
from .keys import CredentialAuthority, PrincipalKeys, SignatureAlg, save_private_key, sign_bytes
from .policy import EsoRegistry, EsoRegistryEntry, PolicyRule, PolicyStore, SubjectAttributes
from .servers import (
    AuthServerState,
    EsoServerState,
    ResourceServerState,
    create_auth_app,
    create_eso_app,
    create_resource_app,
)
from .servers.common import context_query_message, sign_service_message
from .servers.esoserver import recent_use_evaluator

UTC = datetime.timezone.utc

RECENT_USE = "used_within_two_months"
BACKEND_TIMEOUT = 5.0


@dataclass
class Profile:
    """What a deployment should contain: policies, principals, fixtures."""

    name: str
    policy_docs: list[dict[str, Any]]
    subject_docs: dict[str, dict[str, Any]]
    clients: tuple[str, ...]
    resource_servers: dict[str, dict[str, float]]  # rs id -> initial accounts
    contexts: dict[str, dict[str, float]] = field(default_factory=dict)  # name -> user -> days since use


def _charge_policy(
    name: str,
    client: str,
    action: str = "charge",
    amount: str | None = "$10",
    frequency: str | None = "monthly",
    contexts: tuple[str, ...] = (RECENT_USE,),
) -> dict[str, Any]:
    action_attr: dict[str, Any] = {"actions": [action]}
    if amount is not None:
        action_attr["amount"] = amount
    if frequency is not None:
        action_attr["frequency"] = frequency
    return {
        "type": "ABAC policy",
        "name": name,
        "application": "Payment",
        "rules": {
            "subjectAttribute": {"ApplicationID": [client]},
            "objectAttribute": {"resourceType": ["balance"], "resourceID": "Alice"},
            "authorization": "permit",
            "actionAttribute": action_attr,
            "environmentcontext": list(contexts),
            "Default": {"authorization": "deny"},
        },
    }


def _subject_doc(client: str, application: str, label: str) -> dict[str, Any]:
    return {
        "subject_id": client,
        "application": application,
        "subjectAttribute": {"ApplicationID": [client]},
        "name": label,
    }


def payments_profile() -> Profile:
    """The payment use case: one charge at the payments server, gated on the
    account owner's recent use, at most once a month. A second frequency-free
    grant exists so a client can hold two live sessions at once."""
    return Profile(
        name="payments",
        policy_docs=[
            _charge_policy("ApplicationServiceCharge", "B"),
            _charge_policy("AliceDonationGrant", "B", action="donate", amount=None, frequency=None),
        ],
        subject_docs={"B": _subject_doc("B", "Payment", "ApplicationB")},
        clients=("B",),
        resource_servers={"payments-rs": {"alice": 100.0}},
        contexts={RECENT_USE: {"Alice": 5.0, "Carol": 90.0}},
    )


def workflow_profile() -> Profile:
    """Three permissions across three servers, in a fixed order, no context
    gates; the shape used to exercise cross-server sequencing."""
    return Profile(
        name="workflow",
        policy_docs=[
            {
                "type": "ABAC policy",
                "name": "ThreeStepWorkflow",
                "application": "Workflow",
                "rules": {
                    "subjectAttribute": {"ApplicationID": ["B"]},
                    "objectAttribute": {"resourceType": ["workflow"], "resourceID": "wf-7"},
                    "authorization": "permit",
                    "actionAttribute": {"actions": ["rs1:p1", "rs2:p2", "rs3:p3"]},
                    "environmentcontext": [],
                    "Default": {"authorization": "deny"},
                },
            }
        ],
        subject_docs={"B": _subject_doc("B", "Workflow", "ApplicationB")},
        clients=("B",),
        resource_servers={"rs1": {}, "rs2": {}, "rs3": {}},
    )


def bench_profile() -> Profile:
    """Like payments but with no frequency cap, so the load generator can
    open as many sessions as it needs."""
    return Profile(
        name="bench",
        policy_docs=[
            _charge_policy("BenchCharge", "B", frequency=None),
        ],
        subject_docs={"B": _subject_doc("B", "Payment", "ApplicationB")},
        clients=("B",),
        resource_servers={"payments-rs": {"alice": 1_000_000.0}},
        contexts={RECENT_USE: {"Alice": 5.0}},
    )


PROFILES: dict[str, Callable[[], Profile]] = {
    "payments": payments_profile,
    "workflow": workflow_profile,
    "bench": bench_profile,
}


class ServerHandle:
    """One uvicorn server running in a daemon thread on an ephemeral port."""

    def __init__(
        self,
        name: str,
        app: Any,
        certfile: str | None = None,
        keyfile: str | None = None,
    ) -> None:
        self.name = name
        self._tls = certfile is not None
        config = uvicorn.Config(
            app,
            host="127.0.0.1",
            port=0,
            log_level="error",
            access_log=False,
            ssl_certfile=certfile,
            ssl_keyfile=keyfile,
        )
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, name=f"uvicorn-{name}", daemon=True)
        self.url = ""

    def start(self, timeout: float = 15.0) -> None:
        self.thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if not self.thread.is_alive():
                raise DeploymentError(f"server {self.name!r} exited during startup")
            if time.monotonic() > deadline:
                raise DeploymentError(f"server {self.name!r} did not start within {timeout}s")
            time.sleep(0.005)
        sockets = self.server.servers[0].sockets
        port = sockets[0].getsockname()[1]
        scheme = "https" if self._tls else "http"
        self.url = f"{scheme}://127.0.0.1:{port}"

    def stop(self, timeout: float = 5.0) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=timeout)


def _introspect_adapter(http: httpx.Client, as_url: str, keys: PrincipalKeys) -> Callable[[str], str]:
    def introspect(session_id: str) -> str:
        ts = str(time.time())
        response = http.post(
            f"{as_url}/introspect",
            json={
                "session_id": session_id,
                "rs_id": keys.principal_id,
                "timestamp": ts,
                "signature": sign_service_message(keys, "introspect", session_id, keys.principal_id, ts),
            },
            timeout=BACKEND_TIMEOUT,
        )
        if response.status_code == 404:
            # a session this server never ran; treat like any dead grant
            return "revoked_or_completed"
        if response.status_code != 200:
            raise DeploymentError(f"introspection refused: {response.status_code}")
        return str(response.json().get("status", ""))

    return introspect


def _complete_adapter(http: httpx.Client, as_url: str, keys: PrincipalKeys) -> Callable[[str], bool]:
    def complete(session_id: str) -> bool:
        ts = str(time.time())
        response = http.post(
            f"{as_url}/complete",
            json={
                "session_id": session_id,
                "rs_id": keys.principal_id,
                "timestamp": ts,
                "signature": sign_service_message(keys, "complete", session_id, keys.principal_id, ts),
            },
            timeout=BACKEND_TIMEOUT,
        )
        return response.status_code == 200 and response.json().get("status") == "completed"

    return complete


def _context_adapter(http: httpx.Client, keys: PrincipalKeys) -> Callable[[str, ContextRequirement], bool]:
    def query_context(eso_token: str, requirement: ContextRequirement) -> bool:
        try:
            scope = parse_token(eso_token).capability().scope
        except (MalformedEnvelope, AttributeError) as exc:
            raise DeploymentError(f"unusable observer token: {exc}") from exc
        ts = str(time.time())
        message = context_query_message(eso_token, ts)
        signature = sign_bytes(keys.private_key, keys.alg, message)
        response = http.post(
            f"{scope.eso_id}/{requirement.property}",
            headers={
                "x-eso-token": eso_token,
                "x-rs-signature": base64.urlsafe_b64encode(signature).rstrip(b"=").decode("ascii"),
                "x-rs-timestamp": ts,
            },
            timeout=BACKEND_TIMEOUT,
        )
        if response.status_code != 200:
            raise DeploymentError(f"observer refused the query: {response.status_code}")
        body = response.json()
        return body.get("Context", body.get("Contex")) == "True"

    return query_context


class LocalDeployment:
    """Bring up a whole deployment on localhost and tear it down cleanly.

    plain=True trims the resource servers down to bearer-token validation
    (no sequencing, no proof of possession, no context checks) while leaving
    the authorization server untouched, which is the comparison baseline the
    benchmarks run against.
    """

    def __init__(
        self,
        profile: str | Profile = "payments",
        alg: SignatureAlg = SignatureAlg.ECDSA_P256_SHA256,
        tls: bool = False,
        plain: bool = False,
    ) -> None:
        self.profile = PROFILES[profile]() if isinstance(profile, str) else profile
        self.alg = alg
        self.tls = tls
        self.plain = plain
        self.ca = CredentialAuthority()
        self.admin_token = secrets.token_hex(8)
        self.login_history: dict[str, dict[str, datetime.datetime]] = {}
        self._handles: list[ServerHandle] = []
        self._tempdir: tempfile.TemporaryDirectory | None = None
        self._backend: httpx.Client | None = None
        self._started = False

        self.as_keys = self.ca.issue("authz-server", alg=alg)
        self.rs_keys = {rs_id: self.ca.issue(rs_id, alg=alg) for rs_id in self.profile.resource_servers}
        self.client_keys = {cid: self.ca.issue(cid, alg=alg) for cid in self.profile.clients}
        # an attacker-controlled key pair, never registered with any server
        self.outsider_keys = self.ca.issue("mallory", alg=alg)

        self.as_url = ""
        self.rs_urls: dict[str, str] = {}
        self.eso_url = ""
        self.as_state: AuthServerState | None = None
        self.rs_states: dict[str, ResourceServerState] = {}
        self.eso_state: EsoServerState | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "LocalDeployment":
        if self._started:
            return self
        self._tempdir = tempfile.TemporaryDirectory(prefix="seqcap-deploy-")
        try:
            self._start_all()
        except BaseException:
            self.stop()
            raise
        self._started = True
        return self

    def stop(self) -> None:
        for handle in reversed(self._handles):
            handle.stop()
        self._handles.clear()
        if self._backend is not None:
            self._backend.close()
            self._backend = None
        if self._tempdir is not None:
            self._tempdir.cleanup()
            self._tempdir = None
        self._started = False

    def __enter__(self) -> "LocalDeployment":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()

    # -- wiring ------------------------------------------------------------

    def _tls_files(self, name: str) -> tuple[str | None, str | None]:
        if not self.tls:
            return None, None
        assert self._tempdir is not None
        key, cert = self.ca.issue_tls("127.0.0.1")
        base = Path(self._tempdir.name)
        keyfile = base / f"{name}.key"
        certfile = base / f"{name}.crt"
        save_private_key(key, keyfile)
        certfile.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        return str(certfile), str(keyfile)

    def _launch(self, name: str, app: Any) -> ServerHandle:
        certfile, keyfile = self._tls_files(name)
        handle = ServerHandle(name, app, certfile=certfile, keyfile=keyfile)
        handle.start()
        self._handles.append(handle)
        return handle

    def _verify_arg(self) -> ssl.SSLContext | bool:
        if not self.tls:
            return False
        assert self._tempdir is not None
        bundle = Path(self._tempdir.name) / "root.crt"
        if not bundle.exists():
            bundle.write_text(self.ca.root_certificate_pem())
        return ssl.create_default_context(cafile=str(bundle))

    def _start_all(self) -> None:
        profile = self.profile
        now = datetime.datetime.now(UTC)
        self.login_history = {
            context: {user: now - datetime.timedelta(days=days) for user, days in users.items()}
            for context, users in profile.contexts.items()
        }

        # One principal directory for every server: identity comes from the
        # chain-valid certificate, authorization from policy on top of it.
        # mallory is in the directory (an enrolled principal) but no policy
        # ever permits her.
        directory = {
            k.principal_id: k.certificate_pem()
            for k in (
                self.as_keys,
                *self.rs_keys.values(),
                *self.client_keys.values(),
                self.outsider_keys,
            )
        }

        if profile.contexts:
            self.eso_state = EsoServerState(
                eso_id="pending",
                as_certificate=self.as_keys.certificate,
                root_certificate=self.ca.root_certificate,
                certificates=directory,
                evaluators={
                    name: recent_use_evaluator(name, history)
                    for name, history in self.login_history.items()
                },
            )
            handle = self._launch("eso", create_eso_app(self.eso_state))
            self.eso_state.eso_id = handle.url
            self.eso_url = handle.url

        registry = EsoRegistry(
            EsoRegistryEntry(context_name=name, url=self.eso_url, description="deployment fixture")
            for name in profile.contexts
        )
        self.as_state = AuthServerState(
            keys=self.as_keys,
            root_certificate=self.ca.root_certificate,
            policy_store=PolicyStore(policies=[PolicyRule.from_json(d) for d in profile.policy_docs]),
            subjects={
                cid: SubjectAttributes.from_json(doc) for cid, doc in profile.subject_docs.items()
            },
            certificates=directory,
            eso_registry=registry,
            admin_token=self.admin_token,
        )
        self.as_url = self._launch("authz", create_auth_app(self.as_state)).url

        self._backend = httpx.Client(verify=self._verify_arg())
        for rs_id, accounts in profile.resource_servers.items():
            keys = self.rs_keys[rs_id]
            state = ResourceServerState(
                rs_id=rs_id,
                keys=keys,
                as_certificate=self.as_keys.certificate,
                root_certificate=self.ca.root_certificate,
                certificates=directory,
                introspect=_introspect_adapter(self._backend, self.as_url, keys),
                complete=_complete_adapter(self._backend, self.as_url, keys),
                query_context=_context_adapter(self._backend, keys),
                accounts=dict(accounts),
                plain_mode=self.plain,
            )
            self.rs_states[rs_id] = state
            self.rs_urls[rs_id] = self._launch(rs_id, create_resource_app(state)).url

    # -- conveniences ------------------------------------------------------

    def http(self, **kwargs: Any) -> httpx.Client:
        """A client configured to trust this deployment's transport certs."""
        kwargs.setdefault("verify", self._verify_arg())
        kwargs.setdefault("timeout", 10.0)
        return httpx.Client(**kwargs)

    def set_login(self, user: str, days_ago: float, context: str | None = None) -> None:
        """Move a user's last-use fixture; takes effect on the next query."""
        now = datetime.datetime.now(UTC)
        names = [context] if context is not None else list(self.login_history)
        for name in names:
            self.login_history[name][user] = now - datetime.timedelta(days=days_ago)

    def balance(self, rs_id: str, owner: str) -> float:
        return self.rs_states[rs_id].accounts[owner]


__all__ = [
    "LocalDeployment",
    "PROFILES",
    "Profile",
    "RECENT_USE",
    "ServerHandle",
    "bench_profile",
    "payments_profile",
    "workflow_profile",
]
