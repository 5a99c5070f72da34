"""Organizational memory behind a single mediating agent.

Every read and write names the requesting phase. Grants from the
architecture decide whether the phase may touch a store at all; write-path
filters decide whether a value is allowed to become persistent. Stores are
append-only and versioned per key, and every outcome, accepted or not, is
written to the audit log.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .audit import AuditLog
from .crypto import canonicalize
from .errors import EnforcementError
from .model import ArchitectureSpec, check_fields

REDACTED_PHASES = frozenset({"Report"})
BASELINE_WRITER = "baseline"


class AccessDenied(EnforcementError):
    code = "AccessDenied"
    default_principles = ("P5",)


class WriteRejected(EnforcementError):
    code = "WriteRejected"
    default_principles = ("P4", "P5")

    @property
    def reason(self) -> RejectReason:
        return RejectReason(self.data["reason"])


class FeedRejected(EnforcementError):
    code = "FeedRejected"

    @property
    def reason(self) -> RejectReason:
        return RejectReason(self.data["reason"])


class UnknownStore(EnforcementError):
    code = "UnknownStore"


class UnknownKey(EnforcementError):
    code = "UnknownKey"


class UnknownFeed(EnforcementError):
    code = "UnknownFeed"


class RejectReason(str, Enum):
    SCHEMA_VIOLATION = "SchemaViolation"
    PROVENANCE_MISMATCH = "ProvenanceMismatch"
    DANGLING_EVIDENCE = "DanglingEvidence"
    RATE_EXCEEDED = "RateExceeded"
    ROUTE_ELIMINATED = "RouteEliminated"


class FilterKind(str, Enum):
    SCHEMA_CONFORMANCE = "SchemaConformance"
    PROVENANCE_AUTHORIZED = "ProvenanceAuthorized"
    EVIDENCE_REFS_RESOLVE = "EvidenceRefsResolve"
    RATE_CEILING = "RateCeiling"


_REASON = {
    FilterKind.SCHEMA_CONFORMANCE: RejectReason.SCHEMA_VIOLATION,
    FilterKind.PROVENANCE_AUTHORIZED: RejectReason.PROVENANCE_MISMATCH,
    FilterKind.EVIDENCE_REFS_RESOLVE: RejectReason.DANGLING_EVIDENCE,
    FilterKind.RATE_CEILING: RejectReason.RATE_EXCEEDED,
}

MANDATORY_FILTERS = frozenset({FilterKind.SCHEMA_CONFORMANCE, FilterKind.PROVENANCE_AUTHORIZED})


@dataclass(frozen=True)
class WriteFilterRule:
    rule_id: str
    kind: FilterKind
    applies_to: frozenset[str] | None = None  # None: every store
    limit: int = 0
    window: int = 0

    def covers(self, store_id: str) -> bool:
        return self.applies_to is None or store_id in self.applies_to


def default_rules(rate_limit: int = 50, rate_window: int = 100) -> tuple[WriteFilterRule, ...]:
    return (
        WriteFilterRule("schema", FilterKind.SCHEMA_CONFORMANCE),
        WriteFilterRule("provenance", FilterKind.PROVENANCE_AUTHORIZED),
        WriteFilterRule("evidence", FilterKind.EVIDENCE_REFS_RESOLVE),
        WriteFilterRule("rate", FilterKind.RATE_CEILING, limit=rate_limit, window=rate_window),
    )


@dataclass(frozen=True)
class Provenance:
    writer: str
    phase: str
    incident: str = ""
    context_refs: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "writer": self.writer,
            "phase": self.phase,
            "incident": self.incident,
            "context_refs": list(self.context_refs),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> Provenance:
        return cls(raw["writer"], raw["phase"], raw.get("incident", ""),
                   tuple(raw.get("context_refs", ())))


@dataclass(frozen=True)
class MemoryRecord:
    store: str
    key: str
    version: int
    value: Mapping[str, Any]
    provenance: Provenance
    tick: int
    tombstone: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "store": self.store,
            "key": self.key,
            "version": self.version,
            "value": self.value,
            "provenance": self.provenance.to_dict(),
            "tick": self.tick,
            "tombstone": self.tombstone,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> MemoryRecord:
        return cls(raw["store"], raw["key"], int(raw["version"]), raw["value"],
                   Provenance.from_dict(raw["provenance"]), int(raw["tick"]),
                   bool(raw.get("tombstone", False)))


@dataclass(frozen=True)
class ReadResult:
    value: Mapping[str, Any]
    version: int
    redacted: tuple[str, ...] = ()


def _copy(value: Any) -> Any:
    return json.loads(canonicalize(value))


def parse_ref(ref: str) -> tuple[str, str] | None:
    store, sep, key = ref.partition("/")
    return (store, key) if sep and store and key else None


@dataclass
class MemoryPlane:
    spec: ArchitectureSpec
    rules: Sequence[WriteFilterRule] = field(default_factory=default_rules)
    audit: AuditLog = field(default_factory=AuditLog)
    enforce: frozenset[str] = frozenset({"P4", "P5"})
    redact_phases: frozenset[str] = REDACTED_PHASES

    def __post_init__(self) -> None:
        kinds = {r.kind for r in self.rules if r.applies_to is None}
        if not MANDATORY_FILTERS <= kinds:
            raise ValueError("schema and provenance filters must apply to every store")
        self.clock = 0
        self._data: dict[tuple[str, str], list[MemoryRecord]] = {}
        self._accepted: deque[tuple[int, str]] = deque()

    # -- helpers -----------------------------------------------------------

    def _tick(self) -> int:
        self.clock += 1
        return self.clock

    def _log(self, kind: str, **fields: Any) -> None:
        self.audit.append({"kind": kind, "tick": self.clock, **fields})

    def _store(self, store_id: str):
        store = self.spec.store(store_id)
        if store is None:
            raise UnknownStore(f"no memory store {store_id!r}")
        return store

    def _latest(self, store_id: str, key: str) -> MemoryRecord | None:
        versions = self._data.get((store_id, key))
        return versions[-1] if versions else None

    def can_read(self, phase: str, store_id: str) -> bool:
        if "P5" not in self.enforce:
            return True
        mode = self.spec.grant(phase, store_id)
        return mode is not None and mode.can_read

    def can_write(self, phase: str, store_id: str) -> bool:
        if "P5" not in self.enforce:
            return True
        mode = self.spec.grant(phase, store_id)
        return mode is not None and mode.can_write

    def resolve(self, ref: str, phase: str) -> bool:
        """Does ``store/key`` name a live record that ``phase`` may read?"""
        parsed = parse_ref(ref)
        if parsed is None or self.spec.store(parsed[0]) is None:
            return False
        rec = self._latest(*parsed)
        return rec is not None and not rec.tombstone and self.can_read(phase, parsed[0])

    def _filter_failure(
        self, store_id: str, value: Any, prov: Provenance, tick: int
    ) -> tuple[WriteFilterRule, str] | None:
        if "P4" not in self.enforce:
            return None
        store = self._store(store_id)
        for rule in self.rules:
            if not rule.covers(store_id):
                continue
            problem = self._check_rule(rule, store, value, prov, tick)
            if problem:
                return rule, problem
        return None

    def _check_rule(self, rule, store, value, prov: Provenance, tick: int) -> str:
        if rule.kind is FilterKind.SCHEMA_CONFORMANCE:
            return "; ".join(check_fields(value, store.schema))
        if rule.kind is FilterKind.PROVENANCE_AUTHORIZED:
            return self._provenance_problem(store.id, prov)
        if rule.kind is FilterKind.EVIDENCE_REFS_RESOLVE:
            missing = [r for r in prov.context_refs if not self.resolve(r, prov.phase)]
            return f"unresolved evidence {', '.join(missing)}" if missing else ""
        if rule.kind is FilterKind.RATE_CEILING:
            recent = sum(
                1 for t, w in self._accepted if w == prov.writer and t > tick - rule.window
            )
            return f"{recent} writes in the last {rule.window} ticks" if recent >= rule.limit else ""
        return ""

    def _provenance_problem(self, store_id: str, prov: Provenance) -> str:
        route = self.spec.route(prov.writer)
        if route is not None:
            if route.store != store_id:
                return f"feed {prov.writer} is routed to {route.store}, not {store_id}"
            return ""
        agent = self.spec.agent(prov.writer)
        if agent is None:
            return f"writer {prov.writer!r} is not a declared agent or feed"
        if agent.phase != prov.phase:
            return f"writer {agent.id} belongs to {agent.phase}, not {prov.phase}"
        mode = self.spec.grant(prov.phase, store_id)
        if mode is None or not mode.can_write:
            return f"{prov.phase} holds no write grant on {store_id}"
        return ""

    def _append(self, store_id: str, key: str, value: Any, prov: Provenance,
                tick: int, tombstone: bool = False) -> MemoryRecord:
        versions = self._data.setdefault((store_id, key), [])
        rec = MemoryRecord(store_id, key, len(versions) + 1, _copy(value), prov, tick, tombstone)
        versions.append(rec)
        return rec

    # -- operations --------------------------------------------------------

    def read(self, phase: str, store_id: str, key: str) -> ReadResult:
        store = self._store(store_id)
        self._tick()
        if not self.can_read(phase, store_id):
            self._log("memory.read", phase=phase, store=store_id, key=key,
                      outcome="AccessDenied", principles=["P5"])
            raise AccessDenied(f"{phase} may not read {store_id}", store=store_id)
        rec = self._latest(store_id, key)
        if rec is None or rec.tombstone:
            self._log("memory.read", phase=phase, store=store_id, key=key, outcome="UnknownKey")
            raise UnknownKey(f"{store_id}/{key} does not exist")
        value = _copy(rec.value)
        redacted: tuple[str, ...] = ()
        if "P5" in self.enforce and phase in self.redact_phases:
            redacted = tuple(sorted(f for f in store.sensitive_fields() if f in value))
            for f in redacted:
                del value[f]
        self._log("memory.read", phase=phase, store=store_id, key=key, outcome="ok",
                  version=rec.version, redacted=list(redacted),
                  principles=["P5"] if redacted else [])
        return ReadResult(value, rec.version, redacted)

    def write(self, phase: str, store_id: str, key: str, value: Any,
              provenance: Provenance) -> int:
        self._store(store_id)
        tick = self._tick()
        base = {"phase": phase, "store": store_id, "key": key, "writer": provenance.writer}
        if not self.can_write(phase, store_id):
            self._log("memory.write", **base, outcome="AccessDenied", principles=["P5"])
            raise AccessDenied(f"{phase} may not write {store_id}", store=store_id)
        failure = self._filter_failure(store_id, value, provenance, tick)
        if failure is not None:
            rule, problem = failure
            reason = _REASON[rule.kind]
            principles = ["P4", "P5"] if "P5" in self.enforce else ["P4"]
            self._log("memory.write", **base, outcome="WriteRejected", reason=reason.value,
                      rule=rule.rule_id, principles=principles)
            raise WriteRejected(f"{rule.rule_id}: {problem}", principles,
                                reason=reason.value, rule=rule.rule_id)
        try:
            rec = self._append(store_id, key, value, provenance, tick)
        except (TypeError, ValueError) as exc:
            # values that cannot be canonically stored never reach the store
            self._log("memory.write", **base, outcome="WriteRejected",
                      reason=RejectReason.SCHEMA_VIOLATION.value, rule="encoding")
            raise WriteRejected(str(exc), reason=RejectReason.SCHEMA_VIOLATION.value,
                                rule="encoding") from None
        self._accepted.append((tick, provenance.writer))
        self._log("memory.write", **base, outcome="ok", version=rec.version,
                  principles=sorted(self.enforce & {"P4", "P5"}))
        return rec.version

    def ingest_feed(self, feed_id: str, item: Any, key: str | None = None) -> int:
        if self.spec.feed(feed_id) is None:
            raise UnknownFeed(f"no feed {feed_id!r}")
        route = self.spec.route(feed_id)
        assert route is not None  # guaranteed by architecture validation
        tick = self._tick()
        key = key or f"{feed_id}-{tick}"
        base = {"feed": feed_id, "store": route.store, "key": key}
        if "P5" in self.enforce and not route.retained:
            self._log("memory.ingest", **base, outcome="FeedRejected",
                      reason=RejectReason.ROUTE_ELIMINATED.value, principles=["P5"])
            raise FeedRejected(
                f"route {feed_id}->{route.store} is eliminated", ["P5"],
                reason=RejectReason.ROUTE_ELIMINATED.value,
                consolidated_via=route.consolidated_via,
            )
        prov = Provenance(feed_id, "", key)
        failure = self._filter_failure(route.store, item, prov, tick)
        if failure is not None:
            rule, problem = failure
            reason = _REASON[rule.kind]
            principles = ["P4", "P5"] if "P5" in self.enforce else ["P4"]
            self._log("memory.ingest", **base, outcome="FeedRejected", reason=reason.value,
                      rule=rule.rule_id, principles=principles)
            raise FeedRejected(f"{rule.rule_id}: {problem}", principles,
                               reason=reason.value, rule=rule.rule_id)
        rec = self._append(route.store, key, item, prov, tick)
        self._accepted.append((tick, feed_id))
        self._log("memory.ingest", **base, outcome="ok", version=rec.version,
                  principles=sorted(self.enforce & {"P4", "P5"}))
        return rec.version

    def history(self, store_id: str, key: str) -> list[MemoryRecord]:
        self._store(store_id)
        versions = self._data.get((store_id, key))
        if not versions:
            raise UnknownKey(f"{store_id}/{key} does not exist")
        return list(versions)

    def keys(self, store_id: str) -> list[str]:
        return sorted(k for (s, k) in self._data if s == store_id)

    def records(self) -> list[MemoryRecord]:
        return [r for (_, _), versions in sorted(self._data.items()) for r in versions]

    def purge(self) -> list[tuple[str, str]]:
        """Re-run the content filters and tombstone latest versions that now fail.

        Nothing is deleted; a tombstone is a new version that hides the key
        from reads while keeping its full history.
        """
        flagged = []
        for (store_id, key), versions in sorted(self._data.items()):
            rec = versions[-1]
            if rec.tombstone:
                continue
            store = self._store(store_id)
            problems = check_fields(rec.value, store.schema)
            missing = [r for r in rec.provenance.context_refs
                       if not self.resolve(r, rec.provenance.phase)]
            if problems or missing:
                tick = self._tick()
                self._append(store_id, key, {}, Provenance("purge", "", rec.provenance.incident),
                             tick, tombstone=True)
                self._log("memory.purge", store=store_id, key=key, version=rec.version,
                          principles=["P4"])
                flagged.append((store_id, key))
        return flagged

    # -- snapshots ---------------------------------------------------------

    def export_snapshot(self) -> str:
        return "".join(canonicalize(r.to_dict()).decode("utf-8") + "\n" for r in self.records())

    def import_snapshot(self, lines: Iterable[str]) -> int:
        """Restore records (pre-deployment state); versions must continue gaplessly."""
        count = 0
        for line in lines:
            if not line.strip():
                continue
            rec = MemoryRecord.from_dict(json.loads(line))
            self._store(rec.store)
            versions = self._data.setdefault((rec.store, rec.key), [])
            if rec.version != len(versions) + 1:
                raise ValueError(f"{rec.store}/{rec.key}: version {rec.version} breaks sequence")
            self.clock = max(self.clock, rec.tick)
            versions.append(replace(rec, value=_copy(rec.value)))
            self._log("memory.import", store=rec.store, key=rec.key, version=rec.version,
                      writer=rec.provenance.writer)
            count += 1
        return count

    def load_baseline(self, records: Iterable[tuple[str, str, Mapping[str, Any]]]) -> None:
        """Seed ``(store, key, value)`` triples as version-1 baseline records."""
        lines = []
        for store_id, key, value in records:
            rec = MemoryRecord(store_id, key, 1, value, Provenance(BASELINE_WRITER, ""), 0)
            lines.append(canonicalize(rec.to_dict()).decode("utf-8"))
        self.import_snapshot(lines)
