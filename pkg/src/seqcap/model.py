"""Executable transition model of the sequence-enforcement core.

This module is a small, self-contained replica of the protocol's essence so
its safety story can be machine-checked rather than trusted:

* a configuration fixes the resource-server count and the permission sequence
  (entries are (server index, permission name) pairs);
* a protocol state is (accepting flag, per-server counters, issued
  capabilities); capabilities are just (sequence, state index) values;
* `step` implements the three transition rules: a grant issuance, a
  mid-sequence request that advances the serving server's counter and mints
  the successor capability, and a final request that resets the session;
* two safety invariants and an effective-progress function `eff` connect the
  distributed states to a single central reference monitor whose counter just
  counts invocations;
* `explore` walks every reachable state up to a depth bound, firing every
  label at every state -- including the replay of every previously issued
  capability at every server -- and asserts, per edge: both invariants are
  preserved, every accepted request consumes exactly the entry the central
  monitor expects next, and the central monitor accepts the mapped label with
  the same effect.

`step` accepts a set of rule relaxations so the explorer can demonstrate that
removing a guard (say, the counter check) makes the checks fail with a
concrete counterexample trace; an exploration that passes with no relaxation
is the machine-checked safety argument at that configuration.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterator

from .errors import ConfigTooLarge, InvariantViolation

MAX_SERVERS = 4
MAX_SEQUENCE = 4
MAX_DEPTH = 20

RELAXATIONS = (
    "skip-counter-check",
    "skip-order-check",
    "skip-accepting-check",
)


class Blocked:
    """Sentinel for a transition whose preconditions do not hold."""

    _instance: "Blocked | None" = None

    def __new__(cls) -> "Blocked":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Blocked"


BLOCKED = Blocked()


@dataclass(frozen=True)
class ModelConfig:
    """A bounded model instance: n servers, one permission sequence."""

    rs_count: int
    sequence: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        if not isinstance(self.rs_count, int) or self.rs_count < 1:
            raise InvariantViolation("rs_count must be a positive integer")
        if self.rs_count > MAX_SERVERS:
            raise ConfigTooLarge(f"at most {MAX_SERVERS} servers supported")
        seq = tuple(tuple(e) for e in self.sequence)
        if not 1 <= len(seq) <= MAX_SEQUENCE:
            raise ConfigTooLarge(f"sequence length must be 1..{MAX_SEQUENCE}")
        for rs, permission in seq:
            if not isinstance(rs, int) or not 0 <= rs < self.rs_count:
                raise InvariantViolation(f"entry names server {rs} outside 0..{self.rs_count - 1}")
            if not isinstance(permission, str) or not permission:
                raise InvariantViolation("entry permissions must be non-empty names")
        object.__setattr__(self, "sequence", seq)

    @property
    def last_index(self) -> int:
        return len(self.sequence) - 1

    def permissions(self) -> tuple[str, ...]:
        return tuple(sorted({p for _, p in self.sequence}))

    @classmethod
    def from_spec(cls, rs_count: int, spec: str) -> "ModelConfig":
        """Parse the CLI sequence syntax: ``RS1:p1,RS2:p2`` (1-based servers)."""
        entries = []
        for chunk in spec.split(","):
            chunk = chunk.strip()
            if ":" not in chunk:
                raise InvariantViolation(f"bad sequence entry {chunk!r}; expected RS<k>:<permission>")
            server, permission = chunk.split(":", 1)
            server = server.strip()
            if not server.upper().startswith("RS"):
                raise InvariantViolation(f"bad server name {server!r}; expected RS<k>")
            try:
                index = int(server[2:]) - 1
            except ValueError:
                raise InvariantViolation(f"bad server name {server!r}; expected RS<k>") from None
            entries.append((index, permission.strip()))
        return cls(rs_count=rs_count, sequence=tuple(entries))


@dataclass(frozen=True)
class ModelCapability:
    """A capability as the model sees it: the shared sequence plus a state."""

    sequence: tuple[tuple[int, str], ...]
    state: int

    def __post_init__(self) -> None:
        if not 0 <= self.state < len(self.sequence):
            raise InvariantViolation("capability state must index the sequence")


@dataclass(frozen=True)
class ProtocolState:
    accepting: bool
    counters: tuple[int, ...]
    capabilities: frozenset[ModelCapability]

    def render(self) -> dict[str, Any]:
        return {
            "accepting": self.accepting,
            "counters": list(self.counters),
            "capabilities": sorted(c.state for c in self.capabilities),
        }


def initial_state(config: ModelConfig) -> ProtocolState:
    return ProtocolState(accepting=False, counters=(0,) * config.rs_count, capabilities=frozenset())


class LabelKind(enum.Enum):
    ISSUE = "issue"
    REQUEST = "request"
    LAST_REQUEST = "last_request"


@dataclass(frozen=True)
class Label:
    kind: LabelKind
    permission: str | None = None
    capability: ModelCapability | None = None
    rs: int | None = None

    def render(self) -> dict[str, Any]:
        if self.kind is LabelKind.ISSUE:
            return {"kind": self.kind.value, "pretty": "issue()"}
        assert self.capability is not None and self.rs is not None
        return {
            "kind": self.kind.value,
            "permission": self.permission,
            "capability_state": self.capability.state,
            "rs": self.rs,
            "pretty": (
                f"{self.kind.value}({self.permission}, "
                f"T(state={self.capability.state}), RS{self.rs + 1})"
            ),
        }


def issue() -> Label:
    return Label(kind=LabelKind.ISSUE)


def request(permission: str, capability: ModelCapability, rs: int) -> Label:
    return Label(kind=LabelKind.REQUEST, permission=permission, capability=capability, rs=rs)


def last_request(permission: str, capability: ModelCapability, rs: int) -> Label:
    return Label(kind=LabelKind.LAST_REQUEST, permission=permission, capability=capability, rs=rs)


def _request_preconditions(
    config: ModelConfig,
    gamma: ProtocolState,
    label: Label,
    relax: frozenset[str],
) -> bool:
    cap = label.capability
    rs = label.rs
    if cap is None or rs is None or not 0 <= rs < config.rs_count:
        return False
    if "skip-accepting-check" not in relax and not gamma.accepting:
        return False
    if cap not in gamma.capabilities:
        return False
    if cap.sequence != config.sequence:
        return False
    if "skip-counter-check" not in relax and cap.state < gamma.counters[rs]:
        return False
    if "skip-order-check" not in relax and config.sequence[cap.state] != (rs, label.permission):
        return False
    if label.kind is LabelKind.LAST_REQUEST:
        return cap.state == config.last_index
    return cap.state < config.last_index


def step(
    config: ModelConfig,
    gamma: ProtocolState,
    label: Label,
    relax: frozenset[str] = frozenset(),
) -> ProtocolState | Blocked:
    """One transition. Returns BLOCKED when preconditions fail."""
    if label.kind is LabelKind.ISSUE:
        if gamma.accepting and "skip-accepting-check" not in relax:
            return BLOCKED
        fresh = ModelCapability(sequence=config.sequence, state=0)
        return ProtocolState(
            accepting=True,
            counters=gamma.counters,
            capabilities=gamma.capabilities | {fresh},
        )
    if not _request_preconditions(config, gamma, label, relax):
        return BLOCKED
    cap = label.capability
    assert cap is not None and label.rs is not None
    if label.kind is LabelKind.REQUEST:
        advanced = cap.state + 1
        counters = list(gamma.counters)
        counters[label.rs] = advanced
        successor = ModelCapability(sequence=config.sequence, state=advanced)
        return ProtocolState(
            accepting=True,
            counters=tuple(counters),
            capabilities=gamma.capabilities | {successor},
        )
    # final entry: the session resets to its initial shape
    return ProtocolState(
        accepting=False,
        counters=(0,) * config.rs_count,
        capabilities=frozenset(),
    )


def _usable_somewhere(
    config: ModelConfig,
    gamma: ProtocolState,
    cap: ModelCapability,
    rs: int,
    relax: frozenset[str],
) -> bool:
    """Whether any request or final-request label with this capability would
    be accepted at server rs (the constructive reading of unusability)."""
    for permission in config.permissions():
        for kind in (LabelKind.REQUEST, LabelKind.LAST_REQUEST):
            label = Label(kind=kind, permission=permission, capability=cap, rs=rs)
            if _request_preconditions(config, gamma, label, relax):
                return True
    return False


def check_inv1(
    config: ModelConfig, gamma: ProtocolState, relax: frozenset[str] = frozenset()
) -> bool:
    """First safety invariant, in two constructive clauses.

    While accepting: (a) wherever a label carrying a capability would fire
    (usability is judged by step's own preconditions, under the rule set in
    force), the target server must be the one its entry names and its state
    must cover that server's counter; (b) the furthest-advanced capability
    never sits behind the counter of the server its entry names. Clause (a)
    is what a relaxed rule set breaks; clause (b) has bite even for
    hand-built states under the full rules, where superseded capabilities
    are already unusable by the counter precondition itself.
    """
    if not gamma.accepting or not gamma.capabilities:
        return True
    live = max(gamma.capabilities, key=lambda c: c.state)
    if live.state < gamma.counters[config.sequence[live.state][0]]:
        return False
    for cap in gamma.capabilities:
        named_rs = config.sequence[cap.state][0]
        for rs in range(config.rs_count):
            if not _usable_somewhere(config, gamma, cap, rs, relax):
                continue
            if rs != named_rs:
                return False
            if cap.state < gamma.counters[rs]:
                return False
    return True


def check_inv2(
    config: ModelConfig, gamma: ProtocolState, relax: frozenset[str] = frozenset()
) -> bool:
    """While not accepting, all counters are at rest and no issued capability
    is accepted anywhere."""
    if gamma.accepting:
        return True
    if any(v != 0 for v in gamma.counters):
        return False
    for cap in gamma.capabilities:
        for rs in range(config.rs_count):
            if _usable_somewhere(config, gamma, cap, rs, relax):
                return False
    return True


def eff(gamma: ProtocolState) -> int:
    """Effective progress: how far the session has advanced."""
    if not gamma.accepting:
        return 0
    return max(gamma.counters)


@dataclass(frozen=True)
class CentralState:
    ctr: int


def central_step(
    config: ModelConfig, state: CentralState, kind: LabelKind
) -> CentralState | Blocked:
    """The central reference monitor: one counter, no distribution.

    A request always ticks the counter; a final request fires only from the
    last index and resets. Issuance does not exist centrally (it maps to
    stutter).
    """
    if kind is LabelKind.REQUEST:
        return CentralState(ctr=state.ctr + 1)
    if kind is LabelKind.LAST_REQUEST:
        if state.ctr != config.last_index:
            return BLOCKED
        return CentralState(ctr=0)
    return state


@dataclass
class Verdict:
    ok: bool
    states: int
    edges: int
    accepted_edges: int
    depth_reached: int
    config: ModelConfig
    mutation: str | None = None
    violation: str | None = None
    counterexample: list[dict[str, Any]] | None = None
    run_orderings: list[list[list[Any]]] = field(default_factory=list)

    def render(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "states": self.states,
            "edges": self.edges,
            "accepted_edges": self.accepted_edges,
            "depth_reached": self.depth_reached,
            "config": {
                "rs_count": self.config.rs_count,
                "sequence": [[rs, p] for rs, p in self.config.sequence],
            },
            "mutation": self.mutation,
            "violation": self.violation,
            "counterexample": self.counterexample,
            "run_orderings": self.run_orderings,
        }


def _labels_for(config: ModelConfig, gamma: ProtocolState) -> Iterator[Label]:
    """Every label, in a deterministic order: issuance, then every
    (capability, server, permission) combination for both request kinds --
    replays of stale capabilities included."""
    yield issue()
    caps = sorted(gamma.capabilities, key=lambda c: c.state)
    permissions = config.permissions()
    for cap in caps:
        for rs in range(config.rs_count):
            for permission in permissions:
                yield request(permission, cap, rs)
                yield last_request(permission, cap, rs)


def _trace_to(
    parents: dict[ProtocolState, tuple[ProtocolState, Label] | None],
    state: ProtocolState,
) -> list[tuple[ProtocolState, Label]]:
    chain: list[tuple[ProtocolState, Label]] = []
    cursor = state
    while True:
        parent = parents[cursor]
        if parent is None:
            break
        prev, label = parent
        chain.append((prev, label))
        cursor = prev
    chain.reverse()
    return chain


def _render_counterexample(
    parents: dict[ProtocolState, tuple[ProtocolState, Label] | None],
    source: ProtocolState,
    label: Label,
    target: ProtocolState | Blocked,
) -> list[dict[str, Any]]:
    steps = [
        {"state": prev.render(), "label": lab.render()}
        for prev, lab in _trace_to(parents, source)
    ]
    steps.append(
        {
            "state": source.render(),
            "label": label.render(),
            "next_state": target.render() if isinstance(target, ProtocolState) else "Blocked",
        }
    )
    return steps


def explore(
    config: ModelConfig,
    depth: int,
    relax: frozenset[str] | set[str] = frozenset(),
) -> Verdict:
    """Exhaustive breadth-first exploration with per-edge safety checks.

    Checks, for every accepted edge from state g to g':
    * both invariants hold at g' (and at the initial state);
    * an accepted (final) request consumes exactly index eff(g), and that
      index's entry is the (server, permission) the label names -- i.e. no
      replay or out-of-order invocation is ever accepted;
    * the central monitor accepts the mapped label and lands on eff(g');
      issuance leaves eff unchanged; and eff never leaves 0..len(sequence)-1.
    """
    if not isinstance(depth, int) or depth < 0:
        raise InvariantViolation("depth must be a non-negative integer")
    if depth > MAX_DEPTH:
        raise ConfigTooLarge(f"depth must be at most {MAX_DEPTH}")
    relax = frozenset(relax)
    unknown = relax - set(RELAXATIONS)
    if unknown:
        raise InvariantViolation(f"unknown relaxations: {sorted(unknown)}")

    start = initial_state(config)
    parents: dict[ProtocolState, tuple[ProtocolState, Label] | None] = {start: None}
    mutation = ",".join(sorted(relax)) or None

    def fail(
        violation: str, source: ProtocolState, label: Label, target: ProtocolState | Blocked,
        states: int, edges: int, accepted: int, level: int,
    ) -> Verdict:
        return Verdict(
            ok=False,
            states=states,
            edges=edges,
            accepted_edges=accepted,
            depth_reached=level,
            config=config,
            mutation=mutation,
            violation=violation,
            counterexample=_render_counterexample(parents, source, label, target),
        )

    # Invariants are fixed by the protocol itself; a relaxed rule set is
    # explored against them, not against a matching relaxation of the checks.
    if not check_inv1(config, start) or not check_inv2(config, start):
        return Verdict(
            ok=False, states=1, edges=0, accepted_edges=0, depth_reached=0,
            config=config, mutation=mutation,
            violation="invariant violated at the initial state",
            counterexample=[{"state": start.render(), "label": "(initial)"}],
        )

    frontier = [start]
    seen = {start}
    edges = 0
    accepted = 0
    completed_runs = False
    level = 0

    while frontier and level < depth:
        level += 1
        next_frontier: list[ProtocolState] = []
        for gamma in frontier:
            progress = eff(gamma)
            for label in _labels_for(config, gamma):
                edges += 1
                after = step(config, gamma, label, relax)
                if after is BLOCKED:
                    continue
                assert isinstance(after, ProtocolState)
                accepted += 1
                is_new = after not in seen
                if is_new:
                    parents[after] = (gamma, label)

                if label.kind is LabelKind.ISSUE:
                    if eff(after) != progress:
                        return fail(
                            "issuance changed effective progress",
                            gamma, label, after, len(seen), edges, accepted, level,
                        )
                else:
                    cap = label.capability
                    assert cap is not None
                    if cap.state != progress:
                        return fail(
                            f"out-of-order invocation: consumed index {cap.state} "
                            f"but effective progress is {progress}",
                            gamma, label, after, len(seen), edges, accepted, level,
                        )
                    if config.sequence[cap.state] != (label.rs, label.permission):
                        return fail(
                            "accepted label does not match the sequence entry",
                            gamma, label, after, len(seen), edges, accepted, level,
                        )
                    central_after = central_step(config, CentralState(progress), label.kind)
                    if central_after is BLOCKED:
                        return fail(
                            "central monitor blocks a label the distributed system accepted",
                            gamma, label, after, len(seen), edges, accepted, level,
                        )
                    assert isinstance(central_after, CentralState)
                    if central_after.ctr != eff(after):
                        return fail(
                            f"central monitor lands on {central_after.ctr} "
                            f"but distributed effect is {eff(after)}",
                            gamma, label, after, len(seen), edges, accepted, level,
                        )
                    if label.kind is LabelKind.REQUEST:
                        if any(a < b for a, b in zip(after.counters, gamma.counters)):
                            return fail(
                                "a session counter rewound",
                                gamma, label, after, len(seen), edges, accepted, level,
                            )
                    else:
                        completed_runs = True
                if not 0 <= eff(after) <= config.last_index:
                    return fail(
                        f"effective progress {eff(after)} escaped 0..{config.last_index}",
                        gamma, label, after, len(seen), edges, accepted, level,
                    )
                if not check_inv1(config, after):
                    return fail(
                        "invariant 1 violated (a capability outruns a counter)",
                        gamma, label, after, len(seen), edges, accepted, level,
                    )
                if not check_inv2(config, after):
                    return fail(
                        "invariant 2 violated (non-accepting state retains progress)",
                        gamma, label, after, len(seen), edges, accepted, level,
                    )
                if is_new:
                    seen.add(after)
                    next_frontier.append(after)
        frontier = next_frontier

    # With the per-edge checks above green, every accepted invocation at a
    # state with effective progress k consumed exactly entry k, so the only
    # complete run-through ordering the trace set can contain is the sequence
    # itself; record it iff some final request actually fired.
    orderings: list[list[list[Any]]] = []
    if completed_runs:
        orderings = [[[rs, p] for rs, p in config.sequence]]

    return Verdict(
        ok=True,
        states=len(seen),
        edges=edges,
        accepted_edges=accepted,
        depth_reached=level,
        config=config,
        mutation=mutation,
        run_orderings=orderings,
    )


def sweep_configs(
    max_servers: int = 3, max_length: int = 3
) -> Iterator[ModelConfig]:
    """Every sequence shape with up to max_length entries over max_servers
    servers: all server assignments crossed with all permission-name patterns
    (repeated entries included)."""
    from itertools import product

    for length in range(1, max_length + 1):
        for servers in product(range(max_servers), repeat=length):
            for perm_pattern in product(range(length), repeat=length):
                sequence = tuple(
                    (servers[i], f"p{perm_pattern[i] + 1}") for i in range(length)
                )
                yield ModelConfig(rs_count=max_servers, sequence=sequence)


__all__ = [
    "BLOCKED",
    "Blocked",
    "CentralState",
    "Label",
    "LabelKind",
    "MAX_DEPTH",
    "MAX_SEQUENCE",
    "MAX_SERVERS",
    "ModelCapability",
    "ModelConfig",
    "ProtocolState",
    "RELAXATIONS",
    "Verdict",
    "central_step",
    "check_inv1",
    "check_inv2",
    "eff",
    "explore",
    "initial_state",
    "issue",
    "last_request",
    "request",
    "step",
    "sweep_configs",
]
