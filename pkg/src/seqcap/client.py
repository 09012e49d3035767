"""Protocol client and the scripted scenario runner.

The client side of the protocol is deliberately thin: request a grant, hold
the returned tokens, answer proof-of-possession challenges, and present the
right capability for each step of the sequence. Scenarios script that client
(including its dishonest variants) as JSON: an ordered list of steps, each
with an expected outcome, so the same machinery drives both the happy path
and the attack suite.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import httpx

from .capability import ClientClaim, MasterCapability, parse_token, sign
from .deploy import LocalDeployment
from .errors import ScenarioMismatch
from .keys import PrincipalKeys, sign_bytes
from .servers.common import context_query_message

GRANT_HEADERS = {
    "grant-type": "client_credentials",
    "client-assertion-type": "jwt-bearer",
}


def _b64url(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def _unb64url(text: str) -> bytes:
    return base64.urlsafe_b64decode((text + "=" * (-len(text) % 4)).encode("ascii"))


@dataclass
class GrantTokens:
    """Everything the authorization server handed back for one session."""

    session_id: str
    master: str
    eso: dict[str, str] = field(default_factory=dict)
    expires_in: int = 0

    def master_capability(self) -> MasterCapability:
        cap = parse_token(self.master).capability()
        assert isinstance(cap, MasterCapability)
        return cap


class ProtocolClient:
    """One principal's view of the protocol: its key pair and the calls it
    can make with it."""

    def __init__(self, as_url: str, keys: PrincipalKeys, http: httpx.Client) -> None:
        self.as_url = as_url
        self.keys = keys
        self.http = http

    # -- authorization -----------------------------------------------------

    def request_authorization(
        self,
        target_rs: str,
        scope: Mapping[str, Any],
        sign_with: PrincipalKeys | None = None,
        claim_client: str | None = None,
    ) -> httpx.Response:
        """POST the signed claim; sign_with/claim_client allow a caller to
        misrepresent itself, which the attack scenarios rely on."""
        claim = ClientClaim(
            client_id=claim_client or self.keys.principal_id,
            target_rs=target_rs,
            requested_scope=dict(scope),
        )
        assertion = sign(claim, sign_with or self.keys).token()
        headers = dict(GRANT_HEADERS, **{"client-assertion": assertion})
        return self.http.post(f"{self.as_url}/authorization", headers=headers)

    def grant(self, target_rs: str, scope: Mapping[str, Any]) -> GrantTokens:
        response = self.request_authorization(target_rs, scope)
        response.raise_for_status()
        body = response.json()
        return GrantTokens(
            session_id=body["session_id"],
            master=body["access_token"],
            eso=dict(body.get("eso_tokens", {})),
            expires_in=int(body.get("expires_in", 0)),
        )

    # -- resource access ---------------------------------------------------

    def pop_headers(self, rs_url: str, sign_with: PrincipalKeys | None = None) -> dict[str, str]:
        """Fetch a fresh challenge and sign it."""
        keys = sign_with or self.keys
        response = self.http.get(f"{rs_url}/challenge")
        response.raise_for_status()
        encoded = response.json()["challenge"]
        signature = sign_bytes(keys.private_key, keys.alg, _unb64url(encoded))
        return {"x-pop-challenge": encoded, "x-pop-signature": _b64url(signature)}

    def access(
        self,
        rs_url: str,
        owner: str,
        resource: str,
        permission: str,
        token: str,
        eso_tokens: Iterable[str] = (),
        pop: bool = True,
        pop_with: PrincipalKeys | None = None,
        declared_client: str | None = None,
    ) -> httpx.Response:
        headers = {"x-oauth-token": token}
        eso_joined = ",".join(eso_tokens)
        if eso_joined:
            headers["x-eso-token"] = eso_joined
        if declared_client is not None:
            headers["x-client-id"] = declared_client
        if pop:
            headers.update(self.pop_headers(rs_url, sign_with=pop_with))
        return self.http.post(
            f"{rs_url}/{owner}/{resource}", headers=headers, json={"permission": permission}
        )

    def walk_sequence(
        self,
        grant: GrantTokens,
        rs_urls: Mapping[str, str],
        owner: str,
        resource: str,
        plain: bool = False,
    ) -> list[httpx.Response]:
        """Drive a whole grant honestly: present the current capability at
        each entry's server in order, switching to the returned state token
        after every non-final step. Stops at the first refusal."""
        token = grant.master
        responses: list[httpx.Response] = []
        for entry in grant.master_capability().sequence:
            response = self.access(
                rs_urls[entry.rs_id],
                owner,
                resource,
                entry.permission,
                token,
                eso_tokens=() if plain else grant.eso.values(),
                pop=not plain,
            )
            responses.append(response)
            if response.status_code != 200:
                break
            body = response.json()
            if "state_token" in body:
                token = body["state_token"]
        return responses

    def query_observer(
        self,
        eso_url: str,
        context: str,
        token: str,
        signer: PrincipalKeys | None = None,
    ) -> httpx.Response:
        """Ask the observer directly. Honest resource servers attach their
        service signature; a client calling this impersonates one."""
        headers = {"x-eso-token": token}
        if signer is not None:
            ts = str(time.time())
            message = context_query_message(token, ts)
            headers["x-rs-signature"] = _b64url(sign_bytes(signer.private_key, signer.alg, message))
            headers["x-rs-timestamp"] = ts
        return self.http.post(f"{eso_url}/{context}", headers=headers)


# -- scenarios -------------------------------------------------------------


def tamper_token(token: str) -> str:
    """Flip one character of the body segment; the signature must notice."""
    head, body, sig = token.split(".")
    last = body[-1]
    flipped = "A" if last != "A" else "B"
    return f"{head}.{body[:-1] + flipped}.{sig}"


@dataclass
class StepOutcome:
    index: int
    op: str
    ok: bool
    detail: str

    def line(self) -> str:
        mark = "ok" if self.ok else "FAIL"
        return f"{mark:4} step {self.index}: {self.op} {self.detail}"


class ScenarioRunner:
    """Execute one scenario document against a running deployment."""

    def __init__(self, deployment: LocalDeployment, http: httpx.Client | None = None) -> None:
        self.deployment = deployment
        self.http = http or deployment.http()
        self.saved: dict[str, Any] = {}
        self._clients: dict[str, ProtocolClient] = {}

    def close(self) -> None:
        self.http.close()

    def principal(self, name: str) -> PrincipalKeys:
        if name in self.deployment.client_keys:
            return self.deployment.client_keys[name]
        if name == self.deployment.outsider_keys.principal_id:
            return self.deployment.outsider_keys
        raise ScenarioMismatch(f"scenario names unknown principal {name!r}")

    def client_for(self, name: str) -> ProtocolClient:
        if name not in self._clients:
            self._clients[name] = ProtocolClient(self.deployment.as_url, self.principal(name), self.http)
        return self._clients[name]

    # A value reference is "saved-name[.field[.sub]]": "s1.master",
    # "s1.eso.<context>", "s1.session", or a bare name for saved state tokens.
    def resolve(self, ref: str) -> str:
        parts = ref.split(".")
        if parts[0] not in self.saved:
            raise ScenarioMismatch(f"scenario references {parts[0]!r} before saving it")
        value = self.saved[parts[0]]
        if isinstance(value, str):
            if len(parts) > 1:
                raise ScenarioMismatch(f"{parts[0]!r} is a plain token; {ref!r} has no fields")
            return value
        assert isinstance(value, GrantTokens)
        if len(parts) == 1 or parts[1] == "master":
            return value.master
        if parts[1] == "session":
            return value.session_id
        if parts[1] == "eso":
            name = parts[2] if len(parts) > 2 else next(iter(value.eso), "")
            if name not in value.eso:
                raise ScenarioMismatch(f"grant {parts[0]!r} holds no observer token {name!r}")
            return value.eso[name]
        raise ScenarioMismatch(f"unknown reference {ref!r}")

    def run(self, scenario: Mapping[str, Any]) -> list[StepOutcome]:
        outcomes: list[StepOutcome] = []
        for index, step in enumerate(scenario.get("steps", []), start=1):
            op = step.get("op", "")
            response = self._execute(step)
            ok, detail = self._check(step.get("expect", {}), response)
            outcomes.append(StepOutcome(index=index, op=op, ok=ok, detail=detail))
            if not ok:
                break
        return outcomes

    def _execute(self, step: Mapping[str, Any]) -> httpx.Response:
        op = step.get("op")
        if op == "authorize":
            client = self.client_for(step.get("client", "B"))
            sign_with = self.principal(step["sign_with"]) if "sign_with" in step else None
            response = client.request_authorization(
                step.get("target_rs", ""),
                step.get("scope", {}),
                sign_with=sign_with,
                claim_client=step.get("claim_client"),
            )
            if response.status_code == 200 and "save" in step:
                body = response.json()
                self.saved[step["save"]] = GrantTokens(
                    session_id=body["session_id"],
                    master=body["access_token"],
                    eso=dict(body.get("eso_tokens", {})),
                    expires_in=int(body.get("expires_in", 0)),
                )
            return response
        if op == "access":
            client = self.client_for(step.get("client", "B"))
            token = self.resolve(step["token"])
            if step.get("mutate") == "tamper":
                token = tamper_token(token)
            pop_spec = step.get("pop", step.get("client", "B"))
            response = client.access(
                self.deployment.rs_urls[step["rs"]],
                step.get("owner", "alice"),
                step.get("resource", "account"),
                step.get("permission", ""),
                token,
                eso_tokens=[self.resolve(ref) for ref in step.get("eso", [])],
                pop=pop_spec != "none",
                pop_with=self.principal(pop_spec) if pop_spec != "none" else None,
                declared_client=step.get("declare_client"),
            )
            if response.status_code == 200 and "save_state" in step:
                state_token = response.json().get("state_token")
                if state_token:
                    self.saved[step["save_state"]] = state_token
            return response
        if op == "read":
            url = self.deployment.rs_urls[step["rs"]]
            return self.http.get(f"{url}/{step.get('owner', 'alice')}/{step.get('resource', 'account')}")
        if op == "eso_query":
            client = self.client_for(step.get("client", "B"))
            signer = step.get("signer", "none")
            return client.query_observer(
                self.deployment.eso_url,
                step.get("context", ""),
                self.resolve(step["token"]),
                signer=None if signer == "none" else self.principal(signer),
            )
        raise ScenarioMismatch(f"unknown scenario op {op!r}")

    @staticmethod
    def _check(expect: Mapping[str, Any], response: httpx.Response) -> tuple[bool, str]:
        wanted_status = expect.get("status")
        if wanted_status is not None and response.status_code != wanted_status:
            return False, f"expected HTTP {wanted_status}, got {response.status_code}: {response.text[:200]}"
        try:
            body = response.json()
        except json.JSONDecodeError:
            body = {}
        checks = dict(expect.get("json", {}))
        if "error" in expect:
            checks["error"] = expect["error"]
        for key, wanted in checks.items():
            if body.get(key) != wanted:
                return False, f"expected {key}={wanted!r}, got {body.get(key)!r}"
        summary = f"-> {response.status_code}"
        if isinstance(body, dict) and "error" in body:
            summary += f" {body['error']}"
        return True, summary


def load_scenario(path: Path | str) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or not isinstance(doc.get("steps"), list):
        raise ScenarioMismatch(f"{path}: a scenario is an object with a steps list")
    return doc


def run_scenario_file(path: Path | str, profile: str | None = None) -> list[StepOutcome]:
    """Load a scenario, bring up the deployment it names, run it, tear down."""
    scenario = load_scenario(path)
    with LocalDeployment(profile=profile or scenario.get("profile", "payments")) as deployment:
        runner = ScenarioRunner(deployment)
        try:
            return runner.run(scenario)
        finally:
            runner.close()


__all__ = [
    "GrantTokens",
    "ProtocolClient",
    "ScenarioRunner",
    "StepOutcome",
    "load_scenario",
    "run_scenario_file",
    "tamper_token",
]
