"""Canonical encoding, digests, detached signatures and signed tool manifests."""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import SignatureInvalid, UnknownIssuer

ZERO_DIGEST = "0" * 64


class Uncanonicalizable(ValueError):
    pass


def _check(value: Any, path: str = "$") -> None:
    if value is None or isinstance(value, (bool, str, int)):
        return
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            raise Uncanonicalizable(f"{path}: non-finite float")
        return
    if isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check(v, f"{path}[{i}]")
        return
    if isinstance(value, Mapping):
        for k, v in value.items():
            if not isinstance(k, str):
                raise Uncanonicalizable(f"{path}: non-string key {k!r}")
            _check(v, f"{path}.{k}")
        return
    raise Uncanonicalizable(f"{path}: unsupported type {type(value).__name__}")


def canonicalize(value: Any) -> bytes:
    """Deterministic JSON bytes: sorted keys, UTF-8, no insignificant whitespace."""
    _check(value)
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_value(value: Any) -> str:
    return digest(canonicalize(value))


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        data = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError):
        raise SignatureInvalid("malformed base64") from None
    # reject encodings with stray trailing bits so each value has exactly one spelling
    if b64(data) != text:
        raise SignatureInvalid("non-canonical base64")
    return data


# -- signature schemes -----------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    key_id: str
    public: bytes
    private: bytes | None = field(default=None, repr=False)
    scheme: str = "ed25519"

    def public_only(self) -> KeyPair:
        return replace(self, private=None)

    def to_dict(self) -> dict[str, Any]:
        out = {"key_id": self.key_id, "scheme": self.scheme, "public": b64(self.public)}
        if self.private is not None:
            out["private"] = b64(self.private)
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> KeyPair:
        private = raw.get("private")
        return cls(
            key_id=raw["key_id"],
            public=unb64(raw["public"]),
            private=unb64(private) if private is not None else None,
            scheme=raw.get("scheme", "ed25519"),
        )


class SignatureScheme(Protocol):
    name: str

    def generate(self, key_id: str, seed: bytes) -> KeyPair: ...

    def sign(self, key: KeyPair, data: bytes) -> bytes: ...

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool: ...


class Ed25519Scheme:
    name = "ed25519"

    def generate(self, key_id: str, seed: bytes) -> KeyPair:
        sk = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
        pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(key_id, pk, hashlib.sha256(seed).digest(), self.name)

    def sign(self, key: KeyPair, data: bytes) -> bytes:
        if key.private is None:
            raise ValueError(f"key {key.key_id!r} has no private half")
        return Ed25519PrivateKey.from_private_bytes(key.private).sign(data)

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, data)
        except (InvalidSignature, ValueError):
            return False
        return True


class ToyScheme:
    """HMAC-SHA256 stand-in for tests. Symmetric: the public half is the secret."""

    name = "toy-hmac"

    def generate(self, key_id: str, seed: bytes) -> KeyPair:
        secret = hashlib.sha256(b"toy:" + seed).digest()
        return KeyPair(key_id, secret, secret, self.name)

    def sign(self, key: KeyPair, data: bytes) -> bytes:
        return hmac.new(key.public, data, hashlib.sha256).digest()

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(hmac.new(public, data, hashlib.sha256).digest(), signature)


SCHEMES: dict[str, SignatureScheme] = {s.name: s for s in (Ed25519Scheme(), ToyScheme())}


def scheme_for(key: KeyPair) -> SignatureScheme:
    try:
        return SCHEMES[key.scheme]
    except KeyError:
        raise ValueError(f"unknown signature scheme {key.scheme!r}") from None


def sign_bytes(key: KeyPair, data: bytes) -> bytes:
    return scheme_for(key).sign(key, data)


def verify_bytes(key: KeyPair, data: bytes, signature: bytes) -> bool:
    return scheme_for(key).verify(key.public, data, signature)


# -- manifests -------------------------------------------------------------


@dataclass(frozen=True)
class ManifestTool:
    id: str
    # operation name -> digest of its parameter schema
    operations: Mapping[str, str]


@dataclass(frozen=True)
class SignedManifest:
    server_id: str
    phase: str
    tools: tuple[ManifestTool, ...]
    version: int
    issuer_key_id: str
    server_key: str
    signature: bytes = b""

    def body(self) -> dict[str, Any]:
        return {
            "server_id": self.server_id,
            "phase": self.phase,
            "tools": [
                {"id": t.id, "operations": dict(sorted(t.operations.items()))}
                for t in self.tools
            ],
            "version": self.version,
            "issuer_key_id": self.issuer_key_id,
            "server_key": self.server_key,
        }

    def canonical_body(self) -> bytes:
        return canonicalize(self.body())

    def tool(self, tool_id: str) -> ManifestTool | None:
        return next((t for t in self.tools if t.id == tool_id), None)

    @classmethod
    def from_body(cls, body: Mapping[str, Any], signature: bytes = b"") -> SignedManifest:
        try:
            tools = tuple(
                ManifestTool(t["id"], dict(t["operations"])) for t in body["tools"]
            )
            return cls(
                server_id=body["server_id"],
                phase=body["phase"],
                tools=tools,
                version=int(body["version"]),
                issuer_key_id=body["issuer_key_id"],
                server_key=body["server_key"],
                signature=signature,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SignatureInvalid(f"malformed manifest body: {exc}") from None


def params_digest(params: Mapping[str, str] | None) -> str:
    return digest_value(dict(params) if params is not None else None)


def sign_manifest(manifest: SignedManifest, issuer: KeyPair) -> SignedManifest:
    if manifest.issuer_key_id != issuer.key_id:
        manifest = replace(manifest, issuer_key_id=issuer.key_id)
    return replace(manifest, signature=sign_bytes(issuer, manifest.canonical_body()))


def verify_manifest(manifest: SignedManifest, issuer: KeyPair) -> SignedManifest:
    """Return the manifest if its signature verifies under ``issuer``; raise otherwise."""
    if manifest.issuer_key_id != issuer.key_id:
        raise SignatureInvalid(
            f"manifest issued by {manifest.issuer_key_id!r}, checked against {issuer.key_id!r}"
        )
    if not verify_bytes(issuer, manifest.canonical_body(), manifest.signature):
        raise SignatureInvalid(f"bad signature on manifest for {manifest.server_id!r}")
    return manifest


def verify_with_catalog(manifest: SignedManifest, catalog: Mapping[str, KeyPair]) -> SignedManifest:
    issuer = catalog.get(manifest.issuer_key_id)
    if issuer is None:
        raise UnknownIssuer(f"issuer {manifest.issuer_key_id!r} is not enrolled")
    return verify_manifest(manifest, issuer)


def sig_path(manifest_path: str | Path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.name + ".sig")


def write_manifest(manifest: SignedManifest, path: str | Path) -> None:
    """Write the canonical body to ``path`` and the base64 signature beside it."""
    Path(path).write_bytes(manifest.canonical_body())
    sig_path(path).write_text(b64(manifest.signature), encoding="ascii")


def read_manifest(path: str | Path) -> SignedManifest:
    """Load a manifest file pair; any non-canonical byte is a signature failure."""
    raw = Path(path).read_bytes()
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise SignatureInvalid("manifest body is not valid JSON") from None
    try:
        canonical = canonicalize(body)
    except Uncanonicalizable as exc:
        raise SignatureInvalid(str(exc)) from None
    if canonical != raw:
        raise SignatureInvalid("manifest body is not in canonical form")
    try:
        sig_text = sig_path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError):
        raise SignatureInvalid("missing or unreadable signature file") from None
    return SignedManifest.from_body(body, unb64(sig_text))


def write_key(key: KeyPair, path: str | Path) -> None:
    Path(path).write_text(json.dumps(key.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_key(path: str | Path) -> KeyPair:
    return KeyPair.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
