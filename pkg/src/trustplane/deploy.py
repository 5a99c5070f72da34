"""Assemble a ready-to-use kernel: issuer, one signed server per phase, baseline memory."""

from __future__ import annotations

from typing import Any, Iterable, Mapping

from .crypto import SCHEMES, KeyPair, ManifestTool, SignedManifest, b64, params_digest, sign_manifest
from .kernel import Kernel, KernelConfig, StubServer
from .model import ArchitectureSpec, check_fields

ISSUER_ID = "admin-issuer"

# Pre-deployment organisational state. Keys are referenced by scripts and chains.
BASELINE: tuple[tuple[str, str, Mapping[str, Any]], ...] = (
    ("M2", "host-web-01", {"hostname": "web-01", "owner": "it-ops", "criticality": "high"}),
    ("M2", "host-db-01", {"hostname": "db-01", "owner": "dba", "criticality": "critical"}),
    ("M3", "policy-containment", {"policy": "containment", "rule": "isolate confirmed hosts"}),
    ("M6", "case-000", {"title": "prior phishing case", "status": "closed", "evidence": []}),
    ("M8", "playbook-contain", {"name": "contain", "steps": ["isolate", "reset-creds", "reimage"]}),
    ("M9", "ctrl-ir-4", {"control": "IR-4", "mapping": "incident handling"}),
    ("M10", "rule-001", {"rule_id": "rule-001", "logic": "failed_logins > 20", "severity": "medium"}),
    ("M11", "aar-000", {
        "incident": "INC-000",
        "summary": "credential stuffing contained",
        "lessons": ["enforce MFA on VPN"],
        "raw_forensics": {"memory_image": "mem-000.raw", "pcap": "edge-000.pcap"},
        "host_artifacts": ["C:/Users/svc/AppData/evil.dll"],
    }),
    ("M12", "risk-ransomware", {"risk": "ransomware", "impact": "high"}),
)


def derive_key(label: str, scheme: str = "ed25519") -> KeyPair:
    """Deterministic key pair for ``label``; fixtures and tests only."""
    return SCHEMES[scheme].generate(label, f"trustplane:{label}".encode())


def server_id(phase: str) -> str:
    return f"{phase.lower()}-server"


def build_manifest(
    spec: ArchitectureSpec,
    phase: str,
    issuer: KeyPair,
    server_key: KeyPair,
    version: int = 1,
    tools: Iterable[str] | None = None,
) -> SignedManifest:
    ids = sorted(spec.tools_for(phase)) if tools is None else list(tools)
    mtools = []
    for tid in ids:
        decl = spec.tool(tid)
        ops = {op.name: params_digest(op.params) for op in decl.operations} if decl else {}
        mtools.append(ManifestTool(tid, ops))
    body = SignedManifest(server_id(phase), phase, tuple(mtools), version, issuer.key_id,
                          b64(server_key.public))
    return sign_manifest(body, issuer)


def baseline_records(spec: ArchitectureSpec) -> list[tuple[str, str, Mapping[str, Any]]]:
    """Baseline entries that fit ``spec``'s stores; the rest are skipped."""
    out = []
    for store_id, key, value in BASELINE:
        store = spec.store(store_id)
        if store is not None and not check_fields(value, store.schema):
            out.append((store_id, key, value))
    return out


def deploy(
    spec: ArchitectureSpec,
    config: KernelConfig = KernelConfig(),
    *,
    scheme: str = "ed25519",
    baseline: bool = True,
) -> Kernel:
    kernel = Kernel(spec, config)
    issuer = derive_key(ISSUER_ID, scheme)
    kernel.enroll_issuer(issuer)
    for phase in spec.phases:
        if not spec.tools_for(phase):
            continue
        key = derive_key(server_id(phase), scheme)
        manifest = build_manifest(spec, phase, issuer, key)
        kernel.register_server(manifest, StubServer(manifest.server_id, key))
    if baseline:
        kernel.memory.load_baseline(baseline_records(spec))
    return kernel
