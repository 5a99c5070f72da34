"""Hash-chained, append-only audit log.

Each record commits to its sequence number, the previous record's hash and
its canonical event payload. The on-disk form is one canonical JSON object
per line; the loader rejects any line that is not byte-for-byte canonical,
so every single-byte edit to a log file is detectable.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .crypto import ZERO_DIGEST, Uncanonicalizable, canonicalize, digest


def record_hash(seq: int, prev: str, event: Mapping[str, Any]) -> str:
    return digest(canonicalize({"seq": seq, "prev": prev, "event": event}))


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    prev: str
    hash: str
    event: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"seq": self.seq, "prev": self.prev, "hash": self.hash, "event": self.event}

    def to_line(self) -> bytes:
        return canonicalize(self.to_dict()) + b"\n"


@dataclass(frozen=True)
class ChainStatus:
    intact: bool
    broken_at: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.intact

    def __str__(self) -> str:
        return "Intact" if self.intact else f"Broken(at {self.broken_at}): {self.reason}"


class AuditLog:
    """In-memory append-only log; ``append`` is safe to call from several threads."""

    def __init__(self) -> None:
        self._records: list[AuditRecord] = []
        self._lock = threading.Lock()

    def append(self, event: Mapping[str, Any]) -> AuditRecord:
        event = json.loads(canonicalize(event))  # detach from caller-owned objects
        with self._lock:
            seq = len(self._records)
            prev = self._records[-1].hash if self._records else ZERO_DIGEST
            rec = AuditRecord(seq, prev, record_hash(seq, prev, event), event)
            self._records.append(rec)
        return rec

    @property
    def records(self) -> tuple[AuditRecord, ...]:
        return tuple(self._records)

    @property
    def head(self) -> str:
        return self._records[-1].hash if self._records else ZERO_DIGEST

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[AuditRecord]:
        return iter(tuple(self._records))

    def since(self, seq: int) -> tuple[AuditRecord, ...]:
        return tuple(self._records[seq:])

    def to_bytes(self) -> bytes:
        return b"".join(r.to_line() for r in self._records)

    def dump(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())


def verify_audit_chain(records: Sequence[AuditRecord]) -> ChainStatus:
    prev = ZERO_DIGEST
    for i, rec in enumerate(records):
        if rec.seq != i:
            return ChainStatus(False, i, f"sequence number {rec.seq} at position {i}")
        if rec.prev != prev:
            return ChainStatus(False, i, "previous-hash link does not match")
        try:
            expected = record_hash(rec.seq, rec.prev, rec.event)
        except Uncanonicalizable as exc:
            return ChainStatus(False, i, str(exc))
        if rec.hash != expected:
            return ChainStatus(False, i, "record hash does not match its contents")
        prev = rec.hash
    return ChainStatus(True)


class MalformedLog(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


def parse_log(data: bytes) -> list[AuditRecord]:
    """Parse line-delimited records, insisting on canonical bytes per line."""
    if not data:
        return []
    if not data.endswith(b"\n"):
        raise MalformedLog(data.count(b"\n"), "log does not end with a newline")
    out = []
    for i, line in enumerate(data.split(b"\n")[:-1]):
        try:
            raw = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise MalformedLog(i, "not valid JSON") from None
        if not isinstance(raw, dict) or set(raw) != {"seq", "prev", "hash", "event"}:
            raise MalformedLog(i, "record must have exactly seq, prev, hash, event")
        if not isinstance(raw["seq"], int) or not isinstance(raw["event"], dict):
            raise MalformedLog(i, "bad field types")
        try:
            if canonicalize(raw) != line:
                raise MalformedLog(i, "record is not in canonical form")
        except Uncanonicalizable as exc:
            raise MalformedLog(i, str(exc)) from None
        out.append(AuditRecord(raw["seq"], raw["prev"], raw["hash"], raw["event"]))
    return out


def verify_log_bytes(data: bytes, expected_head: str | None = None,
                     expected_length: int | None = None) -> ChainStatus:
    """Verify a serialized log, optionally against an externally held head/length."""
    try:
        records = parse_log(data)
    except MalformedLog as exc:
        return ChainStatus(False, exc.line, exc.reason)
    status = verify_audit_chain(records)
    if not status:
        return status
    if expected_length is not None and len(records) != expected_length:
        return ChainStatus(
            False, min(len(records), expected_length),
            f"expected {expected_length} records, found {len(records)}",
        )
    if expected_head is not None:
        head = records[-1].hash if records else ZERO_DIGEST
        if head != expected_head:
            return ChainStatus(False, len(records), "chain head does not match anchor")
    return status


def verify_log_file(path: str | Path, **anchors: Any) -> ChainStatus:
    return verify_log_bytes(Path(path).read_bytes(), **anchors)


def load_log(path: str | Path) -> list[AuditRecord]:
    return parse_log(Path(path).read_bytes())


def events(records: Iterable[AuditRecord], kind: str | None = None) -> list[Mapping[str, Any]]:
    return [r.event for r in records if kind is None or r.event.get("kind") == kind]
