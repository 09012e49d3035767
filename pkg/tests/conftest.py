"""Shared fixtures: one certificate authority per test session, ECDSA keys for
the usual cast of principals, and a couple of canned sequences."""

from __future__ import annotations

import datetime

import pytest

from seqcap.capability import (
    ContextRequirement,
    MasterCapability,
    PermissionEntry,
    PermissionSequence,
)
from seqcap.keys import CredentialAuthority, SignatureAlg

UTC = datetime.timezone.utc


@pytest.fixture(scope="session")
def ca() -> CredentialAuthority:
    return CredentialAuthority()


@pytest.fixture(scope="session")
def as_keys(ca):
    return ca.issue("authz-server")


@pytest.fixture(scope="session")
def rs_keys(ca):
    return ca.issue("payments-rs")


@pytest.fixture(scope="session")
def rs2_keys(ca):
    return ca.issue("rs2")


@pytest.fixture(scope="session")
def client_keys(ca):
    return ca.issue("B")


@pytest.fixture(scope="session")
def mallory_keys(ca):
    return ca.issue("mallory")


@pytest.fixture(scope="session")
def rsa_as_keys(ca):
    return ca.issue("authz-server", alg=SignatureAlg.RSA3072_SHA256)


@pytest.fixture
def charge_sequence() -> PermissionSequence:
    """One-step sequence: charge at the payments server, gated on login recency."""
    return PermissionSequence(
        entries=(
            PermissionEntry(
                rs_id="payments-rs",
                permission="charge",
                contexts=(
                    ContextRequirement(
                        property="used_within_two_months",
                        subject_id="Alice",
                        rs_id="payments-rs",
                    ),
                ),
            ),
        )
    )


@pytest.fixture
def three_step_sequence() -> PermissionSequence:
    """p1 at rs1, p2 at rs2, p3 at rs3; no context gates."""
    return PermissionSequence(
        entries=tuple(
            PermissionEntry(rs_id=f"rs{i}", permission=f"p{i}") for i in (1, 2, 3)
        )
    )


def make_master(
    sequence: PermissionSequence,
    client_id: str = "B",
    session_id: str = "0123456789abcdef0123456789abcdef",
    iat: int = 1_700_000_000,
    ttl: int = 86_400,
    metadata: dict | None = None,
) -> MasterCapability:
    return MasterCapability(
        sequence=sequence,
        client_id=client_id,
        state=0,
        session_id=session_id,
        issued_at=datetime.datetime.fromtimestamp(iat, tz=UTC),
        expiry=datetime.datetime.fromtimestamp(iat + ttl, tz=UTC),
        metadata=metadata or {},
    )
