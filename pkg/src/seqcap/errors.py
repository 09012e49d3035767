"""Exception types shared across the package."""

from __future__ import annotations


class SeqCapError(Exception):
    """Base class for all errors raised by this package."""


class InvariantViolation(SeqCapError):
    """A capability or state object was constructed with invalid fields."""


class MalformedEnvelope(SeqCapError):
    """Token bytes could not be parsed back into a capability envelope."""


class KeyMismatch(SeqCapError):
    """The private key does not match the requested signature algorithm."""


class MalformedPolicy(SeqCapError):
    """A policy document is missing required fields or uses unknown values."""


class NotRegistered(SeqCapError):
    """Lookup of an unregistered entry (context name, principal, session)."""


class AlreadyRegistered(SeqCapError):
    """Attempt to register a duplicate entry."""


class ConfigTooLarge(SeqCapError):
    """Model exploration bounds exceeded (servers, sequence length, depth)."""


class DeploymentError(SeqCapError):
    """A local server failed to start or stopped unexpectedly."""


class ScenarioMismatch(SeqCapError):
    """A scripted scenario step got a different outcome than it expected."""


class EsoUnreachable(SeqCapError):
    """The environment state observer could not be reached; treated as an
    inactive context by callers (fail closed)."""


class EsoRejected(SeqCapError):
    """The environment state observer refused the query (bad signature,
    out-of-scope token, stale timestamp)."""
