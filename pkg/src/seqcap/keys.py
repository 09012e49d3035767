"""Key material and the local certificate authority.

Every principal (authorization server, resource servers, observers, clients)
holds a private key and an X.509 certificate issued by the resource owner's
root. Certificates carry the principal identifier in the subject common name,
so possession of a chain-valid certificate for an identifier is what "known
principal" means everywhere else in the package.
"""

from __future__ import annotations

import datetime
import enum
from dataclasses import dataclass
from pathlib import Path

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.x509.oid import NameOID

from .errors import InvariantViolation, KeyMismatch

PrivateKey = ec.EllipticCurvePrivateKey | rsa.RSAPrivateKey
PublicKey = ec.EllipticCurvePublicKey | rsa.RSAPublicKey


class SignatureAlg(enum.Enum):
    """Supported signature algorithms for capability envelopes."""

    ECDSA_P256_SHA256 = "ECDSA-P256-SHA256"
    RSA3072_SHA256 = "RSA3072-SHA256"


def generate_key(alg: SignatureAlg) -> PrivateKey:
    if alg is SignatureAlg.ECDSA_P256_SHA256:
        return ec.generate_private_key(ec.SECP256R1())
    return rsa.generate_private_key(public_exponent=65537, key_size=3072)


def alg_for_key(key: PrivateKey | PublicKey) -> SignatureAlg:
    if isinstance(key, (ec.EllipticCurvePrivateKey, ec.EllipticCurvePublicKey)):
        return SignatureAlg.ECDSA_P256_SHA256
    return SignatureAlg.RSA3072_SHA256


def sign_bytes(key: PrivateKey, alg: SignatureAlg, data: bytes) -> bytes:
    """Sign raw bytes, checking the key actually matches the declared alg."""
    if alg is SignatureAlg.ECDSA_P256_SHA256:
        if not isinstance(key, ec.EllipticCurvePrivateKey):
            raise KeyMismatch("ECDSA-P256-SHA256 requires an EC P-256 key")
        return key.sign(data, ec.ECDSA(hashes.SHA256()))
    if not isinstance(key, rsa.RSAPrivateKey):
        raise KeyMismatch("RSA3072-SHA256 requires an RSA key")
    return key.sign(data, padding.PKCS1v15(), hashes.SHA256())


def verify_bytes(key: PublicKey, alg: SignatureAlg, signature: bytes, data: bytes) -> bool:
    """Verify raw bytes. Returns False on any mismatch, never raises."""
    try:
        if alg is SignatureAlg.ECDSA_P256_SHA256:
            if not isinstance(key, ec.EllipticCurvePublicKey):
                return False
            key.verify(signature, data, ec.ECDSA(hashes.SHA256()))
        else:
            if not isinstance(key, rsa.RSAPublicKey):
                return False
            key.verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
        return True
    except InvalidSignature:
        return False


@dataclass
class PrincipalKeys:
    """A principal's signing identity: id, private key, issued certificate."""

    principal_id: str
    private_key: PrivateKey
    certificate: x509.Certificate

    def __post_init__(self) -> None:
        if not self.principal_id:
            raise InvariantViolation("principal_id must be non-empty")
        cn = _common_name(self.certificate.subject)
        if cn != self.principal_id:
            raise InvariantViolation(
                f"certificate subject CN {cn!r} does not match principal {self.principal_id!r}"
            )

    @property
    def alg(self) -> SignatureAlg:
        return alg_for_key(self.private_key)

    def certificate_pem(self) -> str:
        return self.certificate.public_bytes(serialization.Encoding.PEM).decode("ascii")


def _common_name(name: x509.Name) -> str:
    attrs = name.get_attributes_for_oid(NameOID.COMMON_NAME)
    return attrs[0].value if attrs else ""


def _build_name(common_name: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])


class CredentialAuthority:
    """The resource owner's root of trust.

    Issues principal certificates for token signing and, separately, TLS
    server certificates for the transport layer. Desk-scale deployments keep
    one authority object per deployment; its root certificate is the trust
    anchor every verifier is configured with.
    """

    def __init__(self, root_id: str = "resource-owner-root") -> None:
        self.root_id = root_id
        self._root_key = ec.generate_private_key(ec.SECP256R1())
        now = datetime.datetime.now(datetime.timezone.utc)
        self.root_certificate = (
            x509.CertificateBuilder()
            .subject_name(_build_name(root_id))
            .issuer_name(_build_name(root_id))
            .public_key(self._root_key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=365))
            .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
            .sign(self._root_key, hashes.SHA256())
        )

    def issue(
        self,
        principal_id: str,
        alg: SignatureAlg = SignatureAlg.ECDSA_P256_SHA256,
        valid_days: int = 365,
    ) -> PrincipalKeys:
        """Issue a fresh key pair and root-signed certificate for a principal."""
        key = generate_key(alg)
        cert = self._issue_cert(principal_id, key.public_key(), valid_days, san=None)
        return PrincipalKeys(principal_id=principal_id, private_key=key, certificate=cert)

    def issue_tls(self, host: str, valid_days: int = 365) -> tuple[rsa.RSAPrivateKey, x509.Certificate]:
        """Issue an RSA-2048 TLS server certificate for a local host name."""
        key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        san = x509.SubjectAlternativeName(
            [x509.DNSName(host), x509.DNSName("localhost"), x509.IPAddress(_ip("127.0.0.1"))]
        )
        cert = self._issue_cert(host, key.public_key(), valid_days, san=san)
        return key, cert

    def _issue_cert(
        self,
        common_name: str,
        public_key: PublicKey,
        valid_days: int,
        san: x509.SubjectAlternativeName | None,
    ) -> x509.Certificate:
        now = datetime.datetime.now(datetime.timezone.utc)
        builder = (
            x509.CertificateBuilder()
            .subject_name(_build_name(common_name))
            .issuer_name(self.root_certificate.subject)
            .public_key(public_key)
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=valid_days))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        )
        if san is not None:
            builder = builder.add_extension(san, critical=False)
        return builder.sign(self._root_key, hashes.SHA256())

    def root_certificate_pem(self) -> str:
        return self.root_certificate.public_bytes(serialization.Encoding.PEM).decode("ascii")


def _ip(text: str):
    import ipaddress

    return ipaddress.ip_address(text)


def verify_certificate(cert: x509.Certificate, root: x509.Certificate) -> bool:
    """Check a certificate chains to the root and is within its validity window.

    Returns False rather than raising so callers can fold the result into
    their accept/deny decision.
    """
    if cert.issuer != root.subject:
        return False
    now = datetime.datetime.now(datetime.timezone.utc)
    if now < cert.not_valid_before_utc or now > cert.not_valid_after_utc:
        return False
    root_pub = root.public_key()
    hash_alg = cert.signature_hash_algorithm
    if hash_alg is None:
        return False
    try:
        if isinstance(root_pub, ec.EllipticCurvePublicKey):
            root_pub.verify(cert.signature, cert.tbs_certificate_bytes, ec.ECDSA(hash_alg))
        elif isinstance(root_pub, rsa.RSAPublicKey):
            root_pub.verify(cert.signature, cert.tbs_certificate_bytes, padding.PKCS1v15(), hash_alg)
        else:
            return False
        return True
    except InvalidSignature:
        return False


def certificate_principal(cert: x509.Certificate) -> str:
    """The principal identifier a certificate was issued to (subject CN)."""
    return _common_name(cert.subject)


def load_certificate_pem(pem: str | bytes) -> x509.Certificate:
    data = pem.encode("ascii") if isinstance(pem, str) else pem
    return x509.load_pem_x509_certificate(data)


def save_private_key(key: PrivateKey, path: Path) -> None:
    path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )


def load_private_key(path: Path) -> PrivateKey:
    key = serialization.load_pem_private_key(path.read_bytes(), password=None)
    if not isinstance(key, (ec.EllipticCurvePrivateKey, rsa.RSAPrivateKey)):
        raise KeyMismatch(f"unsupported key type in {path}")
    return key  # type: ignore[return-value]
