"""Batch command line: ``trustplane analyze|trace|simulate|manifest|audit``.

Exit codes: 0 success, 1 a check found a discrepancy, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from . import boundaries as bd
from . import coverage as cov
from .audit import MalformedLog, parse_log, verify_log_bytes
from .crypto import (
    SignedManifest,
    read_key,
    read_manifest,
    verify_manifest,
    write_key,
    write_manifest,
    sign_manifest,
)
from .deploy import build_manifest, derive_key
from .errors import EnforcementError
from .kernel import KernelConfig
from .model import ArchitectureError, ArchitectureSpec, builtin_paper_architecture, fixtures_dir, parse_architecture
from .sim import EscalationStarvation, ScriptError, builtin_soc_lifecycle, load_script, simulate, with_injection
from .tracer import ConfigError, builtin_chain, builtin_paper_chains, load_chains, render_results, trace

OK, DISCREPANCY, USAGE = 0, 1, 2


class InputError(Exception):
    """Bad input file or reference; maps to exit code 2."""


def resolve_path(text: str) -> Path:
    """Existing paths win; otherwise ``fixtures/NAME`` falls back to the fixture directory."""
    p = Path(text)
    if p.exists():
        return p
    if p.parts and p.parts[0] == "fixtures":
        alt = fixtures_dir().joinpath(*p.parts[1:])
        if alt.exists():
            return alt
    raise InputError(f"no such file: {text}")


def load_arch(ref: str) -> ArchitectureSpec:
    if ref in ("builtin:reference", "builtin:"):
        return builtin_paper_architecture()
    if ref.startswith("builtin:"):
        raise InputError(f"unknown builtin architecture {ref!r}")
    try:
        return parse_architecture(resolve_path(ref).read_text(encoding="utf-8"))
    except ArchitectureError as exc:
        raise InputError(f"{ref}: {exc}") from None


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


# -- analyze ---------------------------------------------------------------


def cmd_analyze_boundaries(args: argparse.Namespace) -> int:
    spec = load_arch(args.arch)
    rows = bd.enumerate_scoped(spec) if args.mode == "scoped" else bd.enumerate_flat(spec)
    report = bd.summarize(rows, spec)
    diffs: list[bd.Discrepancy] = []
    if args.diff_fixture:
        try:
            fixture = bd.load_boundary_fixture(resolve_path(args.diff_fixture))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{args.diff_fixture}: malformed boundary fixture: {exc}") from None
        diffs = bd.diff_against_fixture(rows, fixture)
    if args.format == "json":
        doc = json.loads(bd.render_json(report, rows if args.rows else ()))
        doc["mode"] = args.mode
        if args.diff_fixture:
            doc["discrepancies"] = [str(d) for d in diffs]
        _emit(_json(doc))
    elif args.format == "csv":
        _emit(bd.render_csv(report))
    else:
        _emit(bd.render_table(report))
        if args.diff_fixture:
            _emit(f"\n{len(diffs)} discrepancies against {args.diff_fixture}")
            for d in diffs:
                _emit(f"  {d}")
    return DISCREPANCY if diffs else OK


def load_coverage(ref: str) -> cov.CoverageMatrix:
    if ref in ("builtin:coverage", "builtin:reference", "builtin:"):
        return cov.builtin_paper_matrix()
    try:
        return cov.load_matrix(resolve_path(ref))
    except cov.MatrixError as exc:
        raise InputError(f"{ref}: {exc}") from None


def cmd_analyze_coverage(args: argparse.Namespace) -> int:
    matrix = load_coverage(args.matrix)
    claims = check_claims_safe(matrix)
    doc: dict[str, Any] = {
        "primary": {p: cov.principle_load(matrix, p)[0] for p in matrix.principles},
        "secondary": {p: cov.principle_load(matrix, p)[1] for p in matrix.principles},
        "coverage": {v: cov.vector_coverage(matrix, v)[0] for v in matrix.vectors},
        "claims": claims.to_dict(),
    }
    if args.ablate:
        if args.ablate not in matrix.principles:
            raise InputError(f"unknown principle {args.ablate!r}")
        doc["ablation"] = {
            mode.value: [
                {"vector": r.vector, "remaining": r.remaining, "flagged": r.flagged}
                for r in cov.ablation_report(matrix, args.ablate, mode)
            ]
            for mode in cov.Counting
        }
    status = DISCREPANCY if claims.mismatches else OK
    if args.format == "json":
        _emit(_json(doc))
        return status
    _emit(cov.render_table(matrix))
    _emit(f"\nminimum coverage per vector: {claims.min_coverage}")
    for mode, per in claims.ablation.items():
        counts = ", ".join(f"{p}={n}" for p, n in per.items())
        _emit(f"single-layer vectors after removal ({mode.value}): {counts}")
    if args.ablate:
        for mode in cov.Counting:
            flagged = [r.vector for r in cov.ablation_report(matrix, args.ablate, mode) if r.flagged]
            _emit(f"\nwithout {args.ablate} ({mode.value}): {len(flagged)} flagged")
            for v in flagged:
                _emit(f"  {v}")
    return status


def check_claims_safe(matrix: cov.CoverageMatrix) -> cov.ClaimReport:
    try:
        return cov.check_claims(matrix)
    except (KeyError, ValueError) as exc:
        raise InputError(f"matrix: {exc}") from None


# -- trace -----------------------------------------------------------------


def load_chain_ref(ref: str):
    if ref in ("builtin:all", "builtin:reference"):
        return builtin_paper_chains()
    if ref.startswith("builtin:"):
        return [builtin_chain(ref.split(":", 1)[1])]
    return load_chains(resolve_path(ref))


def cmd_trace(args: argparse.Namespace) -> int:
    spec = load_arch(args.arch)
    chains = load_chain_ref(args.chain)
    config = KernelConfig.flat() if args.flat else KernelConfig()
    results = [trace(spec, c, config, args.seed) for c in chains]
    if args.format == "json":
        _emit(_json([r.to_dict() for r in results]))
    else:
        _emit(render_results(results))
    return OK


# -- simulate --------------------------------------------------------------


def _parse_injection(text: str) -> tuple[str, int]:
    chain, sep, tick = text.partition("@")
    if not sep or not chain:
        raise InputError(f"--inject expects CHAIN@TICK, got {text!r}")
    try:
        return chain, int(tick)
    except ValueError:
        raise InputError(f"--inject tick must be an integer, got {tick!r}") from None


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = load_arch(args.arch)
    if args.scenario == "builtin:lifecycle":
        script = builtin_soc_lifecycle()
    elif args.scenario.startswith("builtin:"):
        raise InputError(f"unknown builtin scenario {args.scenario!r}")
    else:
        script = load_script(resolve_path(args.scenario))
    script = replace(script, seed=args.seed)
    for text in args.inject or ():
        chain, tick = _parse_injection(text)
        script = with_injection(script, chain, tick)
    result = simulate(spec, script)
    report = result.report
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "audit.jsonl").write_bytes(result.audit_bytes)
    _emit(report.to_json() if args.format == "json" else report.summary())
    if report.halted or report.audit.get("status") != "Intact":
        return DISCREPANCY
    return OK


# -- manifest / audit ------------------------------------------------------


def cmd_manifest_keygen(args: argparse.Namespace) -> int:
    key = derive_key(args.label or args.key_id, args.scheme)
    key = replace(key, key_id=args.key_id)
    write_key(key, args.out)
    if args.public_out:
        write_key(key.public_only(), args.public_out)
    _emit(f"wrote key {args.key_id} to {args.out}")
    return OK


def _read_key(ref: str):
    try:
        return read_key(resolve_path(ref))
    except (KeyError, ValueError, EnforcementError) as exc:
        raise InputError(f"{ref}: malformed key file: {exc}") from None


def cmd_manifest_sign(args: argparse.Namespace) -> int:
    key = _read_key(args.key)
    path = resolve_path(args.manifest)
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
        manifest = SignedManifest.from_body(body)
    except (json.JSONDecodeError, EnforcementError) as exc:
        raise InputError(f"{args.manifest}: {exc}") from None
    signed = sign_manifest(manifest, key)
    write_manifest(signed, args.out or path)
    _emit(f"signed {signed.server_id} v{signed.version} with {key.key_id}")
    return OK


def cmd_manifest_build(args: argparse.Namespace) -> int:
    spec = load_arch(args.arch)
    if args.phase not in spec.phases:
        raise InputError(f"unknown phase {args.phase!r}")
    issuer = _read_key(args.key)
    server_key = _read_key(args.server_key) if args.server_key else derive_key(f"{args.phase.lower()}-server")
    manifest = build_manifest(spec, args.phase, issuer, server_key, args.version)
    write_manifest(manifest, args.out)
    _emit(f"wrote {manifest.server_id} manifest to {args.out}")
    return OK


def cmd_manifest_verify(args: argparse.Namespace) -> int:
    key = _read_key(args.key)
    path = resolve_path(args.manifest)
    try:
        verify_manifest(read_manifest(path), key)
    except EnforcementError as err:
        _emit(f"{err.code}: {err.message}")
        return DISCREPANCY
    _emit("Verified")
    return OK


def cmd_audit_verify(args: argparse.Namespace) -> int:
    data = resolve_path(args.log).read_bytes()
    status = verify_log_bytes(data, expected_head=args.head, expected_length=args.length)
    if args.format == "json":
        _emit(_json({"intact": status.intact, "broken_at": status.broken_at, "reason": status.reason}))
    elif status:
        try:
            n = len(parse_log(data))
        except MalformedLog:  # pragma: no cover - verify already parsed it
            n = 0
        _emit(f"Intact ({n} records)")
    else:
        _emit(f"Broken at seq {status.broken_at}: {status.reason}")
    return OK if status else DISCREPANCY


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trustplane", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="static analyses").add_subparsers(dest="what", required=True)
    b = analyze.add_parser("boundaries", help="enumerate trust boundaries")
    b.add_argument("--arch", default="builtin:reference")
    b.add_argument("--mode", choices=("flat", "scoped"), default="scoped")
    b.add_argument("--format", choices=("table", "json", "csv"), default="table")
    b.add_argument("--diff-fixture")
    b.add_argument("--rows", action="store_true", help="include every boundary in JSON output")
    b.set_defaults(func=cmd_analyze_boundaries)

    c = analyze.add_parser("coverage", help="vector/principle coverage matrix")
    c.add_argument("--matrix", default="builtin:coverage")
    c.add_argument("--ablate", metavar="P")
    c.add_argument("--format", choices=("table", "json"), default="table")
    c.set_defaults(func=cmd_analyze_coverage)

    t = sub.add_parser("trace", help="replay attack chains")
    t.add_argument("--arch", default="builtin:reference")
    t.add_argument("--chain", default="builtin:all")
    t.add_argument("--flat", action="store_true", help="disable every enforcement stage")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--format", choices=("table", "json"), default="table")
    t.set_defaults(func=cmd_trace)

    s = sub.add_parser("simulate", help="run a scripted lifecycle")
    s.add_argument("--arch", default="builtin:reference")
    s.add_argument("--scenario", default="builtin:lifecycle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject", action="append", metavar="CHAIN@TICK")
    s.add_argument("--out")
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("manifest", help="manifest keys and signatures").add_subparsers(dest="action", required=True)
    kg = m.add_parser("keygen")
    kg.add_argument("--key-id", required=True)
    kg.add_argument("--label", help="derivation label (defaults to the key id)")
    kg.add_argument("--scheme", choices=("ed25519", "toy-hmac"), default="ed25519")
    kg.add_argument("--out", required=True)
    kg.add_argument("--public-out")
    kg.set_defaults(func=cmd_manifest_keygen)
    ms = m.add_parser("sign")
    ms.add_argument("--key", required=True)
    ms.add_argument("--manifest", required=True)
    ms.add_argument("--out")
    ms.set_defaults(func=cmd_manifest_sign)
    mb = m.add_parser("build")
    mb.add_argument("--arch", default="builtin:reference")
    mb.add_argument("--phase", required=True)
    mb.add_argument("--key", required=True, help="issuer key file")
    mb.add_argument("--server-key")
    mb.add_argument("--version", type=int, default=1)
    mb.add_argument("--out", required=True)
    mb.set_defaults(func=cmd_manifest_build)
    mv = m.add_parser("verify")
    mv.add_argument("--key", required=True)
    mv.add_argument("--manifest", required=True)
    mv.set_defaults(func=cmd_manifest_verify)

    a = sub.add_parser("audit", help="audit log checks").add_subparsers(dest="action", required=True)
    av = a.add_parser("verify")
    av.add_argument("--log", required=True)
    av.add_argument("--head", help="expected head hash held elsewhere")
    av.add_argument("--length", type=int, help="expected record count held elsewhere")
    av.add_argument("--format", choices=("table", "json"), default="table")
    av.set_defaults(func=cmd_audit_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except EscalationStarvation as exc:
        _emit(f"EscalationStarvation: {exc}")
        return DISCREPANCY
    except (InputError, ScriptError, ConfigError, ArchitectureError, cov.MatrixError,
            bd.IncompleteEnumeration, OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
