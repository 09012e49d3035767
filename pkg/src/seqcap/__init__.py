"""seqcap: ordered, context-gated capability authorization.

The package has three layers:

* token layer (`capability`, `keys`) -- capability types, canonical
  serialization, signing, digest binding, and the local certificate authority;
* decision layer (`monitor`, `policy`, `model`) -- the per-resource-server
  sequence monitor, the attribute-based policy engine, and the executable
  transition model with its bounded exhaustive explorer;
* service layer (`servers`, `deploy`, `client`, `bench`, `cli`) -- the three
  HTTP services, local deployment harness, scenario runner, and benchmarks.
"""

from .capability import (
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
from .errors import (
    AlreadyRegistered,
    ConfigTooLarge,
    EsoRejected,
    EsoUnreachable,
    InvariantViolation,
    KeyMismatch,
    MalformedEnvelope,
    MalformedPolicy,
    NotRegistered,
    SeqCapError,
)
from .keys import CredentialAuthority, PrincipalKeys, SignatureAlg, verify_certificate

__version__ = "0.1.0"

__all__ = [
    "AlreadyRegistered",
    "ClientClaim",
    "ConfigTooLarge",
    "ContextRequirement",
    "CredentialAuthority",
    "EsoCapability",
    "EsoRejected",
    "EsoScope",
    "EsoUnreachable",
    "InvariantViolation",
    "KeyMismatch",
    "MalformedEnvelope",
    "MalformedPolicy",
    "MasterCapability",
    "NotRegistered",
    "PermissionEntry",
    "PermissionSequence",
    "PrincipalKeys",
    "SeqCapError",
    "SignatureAlg",
    "SignedEnvelope",
    "StateCapability",
    "bind_hash",
    "canonical_serialize",
    "check_binding",
    "deserialize",
    "sign",
    "verify",
    "verify_certificate",
    "verify_token",
    "__version__",
]
