"""Attribute-based policy engine for the authorization server.

Policies are JSON documents with a fixed field layout::

    {
      "type": "ABAC policy",
      "name": "ApplicationServiceCharge",
      "application": "Payment",
      "rules": {
        "subjectAttribute":   {"ApplicationID": ["B"]},
        "objectAttribute":    {"resourceType": ["balance"], "resourceID": "Alice"},
        "authorization":      "permit",
        "actionAttribute":    {"actions": ["charge"], "amount": "$10",
                               "frequency": "monthly"},
        "environmentcontext": ["used_within_two_months"],
        "Default":            {"authorization": "deny"}
      }
    }

Evaluation is permit-override with a default deny: a request matched by any
permit rule is granted even when a deny rule also matches; a request matched
by nothing is refused. A single matched permit rule supplies the entire
permission sequence for the grant.

Matching directions differ by role. Subject attributes are possessions: every
value a rule requires must be held by the subject. Object attributes, actions,
and qualifiers are allowances: everything the claim asks for must fall inside
what the rule grants, and every object attribute or qualifier the rule pins
down must be named by the claim.
"""

from __future__ import annotations

import datetime
import enum
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .capability import (
    ClientClaim,
    ContextRequirement,
    PermissionEntry,
    PermissionSequence,
)
from .errors import AlreadyRegistered, MalformedPolicy, NotRegistered

POLICY_TYPE = "ABAC policy"

# Claim scope keys with structural meaning; everything else is a qualifier.
_RESERVED_SCOPE_KEYS = {"application", "objectAttribute", "actions"}

FREQUENCY_WINDOWS: dict[str, datetime.timedelta] = {
    "daily": datetime.timedelta(days=1),
    "weekly": datetime.timedelta(days=7),
    "monthly": datetime.timedelta(days=30),
}


class Authorization(enum.Enum):
    PERMIT = "permit"
    DENY = "deny"


@dataclass(frozen=True)
class PolicyRule:
    """One parsed policy document."""

    name: str
    application: str
    subject_attributes: Mapping[str, Any]
    object_attributes: Mapping[str, Any]
    authorization: Authorization
    actions: tuple[str, ...]
    action_qualifiers: Mapping[str, Any] = field(default_factory=dict)
    frequency: str | None = None
    environment_context: tuple[str, ...] = ()
    default_authorization: Authorization = Authorization.DENY

    @classmethod
    def from_json(cls, doc: Any) -> "PolicyRule":
        if not isinstance(doc, dict):
            raise MalformedPolicy("policy document must be an object")
        if doc.get("type") != POLICY_TYPE:
            raise MalformedPolicy(f'policy "type" must be {POLICY_TYPE!r}')
        name = doc.get("name")
        if not isinstance(name, str) or not name:
            raise MalformedPolicy('policy "name" must be a non-empty string')
        rules = doc.get("rules")
        if not isinstance(rules, dict):
            raise MalformedPolicy(f'policy {name!r} is missing its "rules" object')

        authorization = _parse_authorization(rules.get("authorization"), name)
        action_attr = rules.get("actionAttribute")
        if not isinstance(action_attr, dict):
            raise MalformedPolicy(f'policy {name!r} is missing "actionAttribute"')
        actions = action_attr.get("actions")
        if not isinstance(actions, list) or not all(isinstance(a, str) and a for a in actions):
            raise MalformedPolicy(f'policy {name!r}: "actions" must be a list of names')
        frequency = action_attr.get("frequency")
        if frequency is not None:
            if not isinstance(frequency, str) or frequency not in FREQUENCY_WINDOWS:
                raise MalformedPolicy(
                    f"policy {name!r}: unknown frequency {frequency!r}; "
                    f"expected one of {sorted(FREQUENCY_WINDOWS)}"
                )
        qualifiers = {
            k: v for k, v in action_attr.items() if k not in ("actions", "frequency")
        }

        # both spellings of the context key are accepted on read
        env = rules.get("environmentcontext", rules.get("environmentContext", []))
        if not isinstance(env, list) or not all(isinstance(c, str) and c for c in env):
            raise MalformedPolicy(f'policy {name!r}: "environmentcontext" must be a list of names')

        default = Authorization.DENY
        default_doc = rules.get("Default")
        if default_doc is not None:
            if not isinstance(default_doc, dict):
                raise MalformedPolicy(f'policy {name!r}: "Default" must be an object')
            default = _parse_authorization(default_doc.get("authorization"), name)

        subject = rules.get("subjectAttribute", {})
        objekt = rules.get("objectAttribute", {})
        if not isinstance(subject, dict) or not isinstance(objekt, dict):
            raise MalformedPolicy(f"policy {name!r}: attribute blocks must be objects")

        return cls(
            name=name,
            application=doc.get("application", ""),
            subject_attributes=subject,
            object_attributes=objekt,
            authorization=authorization,
            actions=tuple(actions),
            action_qualifiers=qualifiers,
            frequency=frequency,
            environment_context=tuple(env),
            default_authorization=default,
        )

    def to_json(self) -> dict[str, Any]:
        action_attr: dict[str, Any] = {"actions": list(self.actions)}
        action_attr.update(self.action_qualifiers)
        if self.frequency is not None:
            action_attr["frequency"] = self.frequency
        return {
            "type": POLICY_TYPE,
            "name": self.name,
            "application": self.application,
            "rules": {
                "subjectAttribute": dict(self.subject_attributes),
                "objectAttribute": dict(self.object_attributes),
                "authorization": self.authorization.value,
                "actionAttribute": action_attr,
                "environmentcontext": list(self.environment_context),
                "Default": {"authorization": self.default_authorization.value},
            },
        }


def _parse_authorization(value: Any, policy_name: str) -> Authorization:
    if isinstance(value, str):
        try:
            return Authorization(value.lower())
        except ValueError:
            pass
    raise MalformedPolicy(f'policy {policy_name!r}: "authorization" must be permit or deny')


@dataclass(frozen=True)
class SubjectAttributes:
    """A subject's attribute document, as the attribute store keeps it."""

    subject_id: str
    application: str
    attributes: Mapping[str, Any]
    name: str = ""

    @classmethod
    def from_json(cls, doc: Any) -> "SubjectAttributes":
        if not isinstance(doc, dict):
            raise MalformedPolicy("subject attribute document must be an object")
        return cls(
            subject_id=doc.get("subject_id", ""),
            application=doc.get("application", ""),
            attributes=doc.get("subjectAttribute", {}),
            name=doc.get("name", ""),
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "application": self.application,
            "subjectAttribute": dict(self.attributes),
            "name": self.name,
        }


@dataclass(frozen=True)
class GrantResult:
    decision: Authorization
    matched_rule: PolicyRule | None = None
    sequence: PermissionSequence | None = None
    context_names: tuple[str, ...] = ()

    @property
    def permitted(self) -> bool:
        return self.decision is Authorization.PERMIT


def _as_set(value: Any) -> set[str]:
    if isinstance(value, list):
        return {str(v) for v in value}
    return {str(value)}


def _subject_matches(rule: PolicyRule, attrs: SubjectAttributes) -> bool:
    for key, required in rule.subject_attributes.items():
        held = attrs.attributes.get(key)
        if held is None:
            return False
        if not _as_set(required) <= _as_set(held):
            return False
    return True


def _object_matches(rule: PolicyRule, claimed: Mapping[str, Any]) -> bool:
    if not isinstance(claimed, Mapping):
        return False
    for key, allowed in rule.object_attributes.items():
        asked = claimed.get(key)
        if asked is None:
            return False
        if not _as_set(asked) <= _as_set(allowed):
            return False
    # asking for object attributes the rule never mentions falls outside it
    return all(key in rule.object_attributes for key in claimed)


def _actions_match(rule: PolicyRule, requested: Any) -> bool:
    if not isinstance(requested, list) or not requested:
        return False
    return {str(a) for a in requested} <= {_bare_permission(a) for a in rule.actions} | set(
        rule.actions
    )


def _qualifiers_match(rule: PolicyRule, scope: Mapping[str, Any]) -> bool:
    claimed = {k: v for k, v in scope.items() if k not in _RESERVED_SCOPE_KEYS}
    for key, granted in rule.action_qualifiers.items():
        if key not in claimed or str(claimed[key]) != str(granted):
            return False
    return all(key in rule.action_qualifiers for key in claimed)


def rule_matches(rule: PolicyRule, claim: ClientClaim, attrs: SubjectAttributes) -> bool:
    """Whether one rule covers one claim from one subject."""
    scope = claim.requested_scope
    application = scope.get("application")
    if rule.application and application != rule.application:
        return False
    if not _subject_matches(rule, attrs):
        return False
    if not _object_matches(rule, scope.get("objectAttribute", {})):
        return False
    if not _actions_match(rule, scope.get("actions")):
        return False
    return _qualifiers_match(rule, scope)


def _bare_permission(action: str) -> str:
    return action.split(":", 1)[1] if ":" in action else action


def _entry_for_action(
    action: str, claim: ClientClaim, rule: PolicyRule, subject_of_contexts: str
) -> PermissionEntry:
    # action syntax: "permission" binds to the claim's target server,
    # "rs_id:permission" names the server explicitly
    if ":" in action:
        rs_id, permission = action.split(":", 1)
    else:
        rs_id, permission = claim.target_rs, action
    contexts = tuple(
        ContextRequirement(property=name, subject_id=subject_of_contexts, rs_id=rs_id)
        for name in rule.environment_context
    )
    return PermissionEntry(rs_id=rs_id, permission=permission, contexts=contexts)


def _context_subject(rule: PolicyRule, claim: ClientClaim) -> str:
    for source in (rule.object_attributes, claim.requested_scope.get("objectAttribute", {})):
        if isinstance(source, Mapping):
            owner = source.get("resourceID")
            if isinstance(owner, str) and owner:
                return owner
            if isinstance(owner, list) and owner:
                return str(owner[0])
    return claim.client_id


def grant_for(rule: PolicyRule, claim: ClientClaim) -> GrantResult:
    """Assemble the grant a matched permit rule gives: the rule's whole action
    list, in order, as the permission sequence."""
    subject = _context_subject(rule, claim)
    entries = tuple(_entry_for_action(a, claim, rule, subject) for a in rule.actions)
    return GrantResult(
        decision=Authorization.PERMIT,
        matched_rule=rule,
        sequence=PermissionSequence(entries=entries),
        context_names=rule.environment_context,
    )


def evaluate(
    claim: ClientClaim, attrs: SubjectAttributes, policies: Sequence[PolicyRule]
) -> GrantResult:
    """Permit-override evaluation over every available policy."""
    permits = []
    denies = []
    for rule in policies:
        if rule_matches(rule, claim, attrs):
            (permits if rule.authorization is Authorization.PERMIT else denies).append(rule)
    if permits:
        return grant_for(permits[0], claim)
    return GrantResult(decision=Authorization.DENY)


class FrequencyHistory:
    """Last completed grant per (client, rule), for frequency windows."""

    def __init__(self) -> None:
        self._last: dict[tuple[str, str], datetime.datetime] = {}
        self._lock = threading.Lock()

    def record_completed(self, client_id: str, rule_name: str, at: datetime.datetime) -> None:
        with self._lock:
            self._last[(client_id, rule_name)] = at

    def last_completed(self, client_id: str, rule_name: str) -> datetime.datetime | None:
        with self._lock:
            return self._last.get((client_id, rule_name))


def check_frequency(
    client_id: str,
    rule: PolicyRule,
    history: FrequencyHistory,
    now: datetime.datetime,
) -> bool:
    """True iff the rule's frequency window permits a new grant now."""
    if rule.frequency is None:
        return True
    window = FREQUENCY_WINDOWS[rule.frequency]
    last = history.last_completed(client_id, rule.name)
    return last is None or now - last > window


@dataclass(frozen=True)
class EsoRegistryEntry:
    context_name: str
    url: str
    description: str = ""


class EsoRegistry:
    """Maps context names to the observer endpoints that answer for them."""

    def __init__(self, entries: Iterable[EsoRegistryEntry] = ()) -> None:
        self._entries: dict[str, EsoRegistryEntry] = {}
        self._lock = threading.Lock()
        for entry in entries:
            self.register(entry)

    def register(self, entry: EsoRegistryEntry) -> None:
        with self._lock:
            if entry.context_name in self._entries:
                raise AlreadyRegistered(f"context {entry.context_name!r} already registered")
            self._entries[entry.context_name] = entry

    def resolve(self, context_name: str) -> EsoRegistryEntry:
        with self._lock:
            entry = self._entries.get(context_name)
        if entry is None:
            raise NotRegistered(f"no observer registered for context {context_name!r}")
        return entry

    def entries(self) -> list[EsoRegistryEntry]:
        with self._lock:
            return list(self._entries.values())


class PolicyStore:
    """Policy documents from a JSON file.

    With reload=True the file is re-read on every access, which mirrors a
    document database fetch per evaluation; the default parses once.
    """

    def __init__(
        self,
        path: Path | None = None,
        policies: Sequence[PolicyRule] | None = None,
        reload: bool = False,
    ) -> None:
        if (path is None) == (policies is None):
            raise MalformedPolicy("provide exactly one of path or policies")
        self._path = path
        self._reload = reload
        self._cached = list(policies) if policies is not None else None
        if path is not None and not reload:
            self._cached = self._read(path)

    @staticmethod
    def _read(path: Path) -> list[PolicyRule]:
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedPolicy(f"cannot read policy file {path}: {exc}") from exc
        if isinstance(doc, dict):
            doc = doc.get("policies")
        if not isinstance(doc, list):
            raise MalformedPolicy(f"{path} must hold a list of policies")
        return [PolicyRule.from_json(p) for p in doc]

    def policies(self) -> list[PolicyRule]:
        if self._reload and self._path is not None:
            return self._read(self._path)
        assert self._cached is not None
        return list(self._cached)


__all__ = [
    "Authorization",
    "EsoRegistry",
    "EsoRegistryEntry",
    "FREQUENCY_WINDOWS",
    "FrequencyHistory",
    "GrantResult",
    "PolicyRule",
    "PolicyStore",
    "SubjectAttributes",
    "check_frequency",
    "evaluate",
    "grant_for",
    "rule_matches",
]
