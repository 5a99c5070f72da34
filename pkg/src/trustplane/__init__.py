"""Host-mediated enforcement for phase-scoped multi-agent security operations.

Static analyses (trust-boundary enumeration, coverage matrix) sit next to a
runtime kernel that mediates tool calls, memory access and handoffs, an
attack-chain tracer and a deterministic lifecycle simulator.
"""

from .audit import AuditLog, ChainStatus, verify_audit_chain
from .boundaries import BoundaryCategory, Status, TrustBoundary, enumerate_flat, enumerate_scoped, summarize
from .consensus import ActionProposal, ConsensusConfig, ConsensusVerdict, Vote, run_consensus
from .coverage import CoverageMatrix, Counting, builtin_paper_matrix, check_claims
from .crypto import canonicalize, sign_manifest, verify_manifest
from .deploy import deploy
from .errors import EnforcementError
from .kernel import Client, Envelope, Kernel, KernelConfig, Response
from .memory import MemoryPlane, Provenance
from .model import ArchitectureSpec, builtin_paper_architecture, parse_architecture
from .sim import builtin_soc_lifecycle, run_scenario, simulate
from .tracer import builtin_paper_chains, trace, trace_flat

__version__ = "0.1.0"

__all__ = [
    "ActionProposal", "ArchitectureSpec", "AuditLog", "BoundaryCategory", "ChainStatus", "Client",
    "ConsensusConfig", "ConsensusVerdict", "Counting", "CoverageMatrix", "EnforcementError",
    "Envelope", "Kernel", "KernelConfig", "MemoryPlane", "Provenance", "Response", "Status",
    "TrustBoundary", "Vote", "builtin_paper_architecture", "builtin_paper_chains",
    "builtin_paper_matrix", "builtin_soc_lifecycle", "canonicalize", "check_claims", "deploy",
    "enumerate_flat", "enumerate_scoped", "parse_architecture", "run_consensus", "run_scenario",
    "sign_manifest", "simulate", "summarize", "trace", "trace_flat", "verify_audit_chain",
    "verify_manifest",
]
