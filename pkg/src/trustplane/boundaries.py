"""Trust-boundary enumeration for flat and phase-scoped topologies."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

from .model import ArchitectureSpec

HOST_MEDIATED = "HostMediated"


class BoundaryCategory(str, Enum):
    AGENT_TOOL = "agent_tool"
    AGENT_MEMORY = "agent_memory"
    AGENT_AGENT = "agent_agent"
    TOOL_RESPONSE_AGENT = "tool_response_agent"
    FEED_MEMORY = "feed_memory"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    BoundaryCategory.AGENT_TOOL: "Agent -> Tool",
    BoundaryCategory.AGENT_MEMORY: "Agent -> Memory",
    BoundaryCategory.AGENT_AGENT: "Agent <-> Agent",
    BoundaryCategory.TOOL_RESPONSE_AGENT: "Tool Resp. -> Agent",
    BoundaryCategory.FEED_MEMORY: "Ext. Feed -> Memory",
}


class Status(str, Enum):
    RETAINED = "retained"
    ELIMINATED = "eliminated"


class IncompleteEnumeration(ValueError):
    pass


@dataclass(frozen=True)
class TrustBoundary:
    category: BoundaryCategory
    source: str
    destination: str
    status: Status = Status.RETAINED
    mechanisms: frozenset[str] = frozenset()
    id: int | None = None

    @property
    def key(self) -> tuple[BoundaryCategory, str, str]:
        return (self.category, self.source, self.destination)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "category": self.category.value,
            "source": self.source,
            "destination": self.destination,
            "status": self.status.value,
            "mechanisms": sorted(self.mechanisms),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> TrustBoundary:
        return cls(
            category=BoundaryCategory(raw["category"]),
            source=raw["source"],
            destination=raw["destination"],
            status=Status(raw["status"]),
            mechanisms=frozenset(raw.get("mechanisms", ())),
            id=raw.get("id"),
        )


def _pairs(spec: ArchitectureSpec) -> Iterable[tuple[BoundaryCategory, str, str]]:
    """Every flat boundary key, in the row order of the reference enumeration."""
    agents = [a.id for a in spec.agents]
    for a in agents:
        for t in spec.tools:
            yield BoundaryCategory.AGENT_TOOL, a, t.id
    for a in agents:
        for s in spec.memory_stores:
            yield BoundaryCategory.AGENT_MEMORY, a, s.id
    # unordered pairs, forward direction first
    for i, a in enumerate(agents):
        for b in agents[i + 1:]:
            yield BoundaryCategory.AGENT_AGENT, a, b
            yield BoundaryCategory.AGENT_AGENT, b, a
    for t in spec.tools:
        for a in agents:
            yield BoundaryCategory.TOOL_RESPONSE_AGENT, t.id, a
    for f in spec.feeds:
        route = spec.route(f.id)
        if route is not None:
            yield BoundaryCategory.FEED_MEMORY, f.id, route.store


def enumerate_flat(spec: ArchitectureSpec) -> list[TrustBoundary]:
    """Every agent reaches every tool, store and peer; nothing is verified."""
    return [
        TrustBoundary(cat, src, dst, id=i)
        for i, (cat, src, dst) in enumerate(_pairs(spec), start=1)
    ]


def _scoped_status(
    spec: ArchitectureSpec, cat: BoundaryCategory, src: str, dst: str
) -> tuple[Status, frozenset[str]]:
    if cat is BoundaryCategory.AGENT_TOOL or cat is BoundaryCategory.TOOL_RESPONSE_AGENT:
        agent_id, tool_id = (src, dst) if cat is BoundaryCategory.AGENT_TOOL else (dst, src)
        agent = spec.agent(agent_id)
        if agent is not None and tool_id in spec.tools_for(agent.phase):
            return Status.RETAINED, frozenset({"P1", "P3"})
        return Status.ELIMINATED, frozenset({"P2"})
    if cat is BoundaryCategory.AGENT_MEMORY:
        agent = spec.agent(src)
        if agent is not None and spec.grant(agent.phase, dst) is not None:
            return Status.RETAINED, frozenset({"P4", "P5"})
        return Status.ELIMINATED, frozenset({"P5"})
    if cat is BoundaryCategory.AGENT_AGENT:
        a, b = spec.agent(src), spec.agent(dst)
        if a is not None and b is not None and spec.has_handoff(a.phase, b.phase):
            return Status.RETAINED, frozenset({"P1", "P3", HOST_MEDIATED})
        return Status.ELIMINATED, frozenset({"P2", HOST_MEDIATED})
    route = spec.route(src)
    if route is not None and route.retained:
        return Status.RETAINED, frozenset({"P4", "P5"})
    return Status.ELIMINATED, frozenset({"P5"})


def enumerate_scoped(spec: ArchitectureSpec) -> list[TrustBoundary]:
    """The flat enumeration with phase scoping and mediation applied."""
    out = []
    for b in enumerate_flat(spec):
        status, mechanisms = _scoped_status(spec, b.category, b.source, b.destination)
        out.append(TrustBoundary(b.category, b.source, b.destination, status, mechanisms, b.id))
    return out


@dataclass(frozen=True)
class CategoryCount:
    category: BoundaryCategory
    flat: int
    scoped: int

    @property
    def eliminated(self) -> int:
        return self.flat - self.scoped

    @property
    def reduction(self) -> Fraction:
        return Fraction(self.eliminated, self.flat) if self.flat else Fraction(0)


@dataclass(frozen=True)
class BoundaryReport:
    categories: tuple[CategoryCount, ...]

    @property
    def flat_total(self) -> int:
        return sum(c.flat for c in self.categories)

    @property
    def scoped_total(self) -> int:
        return sum(c.scoped for c in self.categories)

    @property
    def eliminated_total(self) -> int:
        return self.flat_total - self.scoped_total

    @property
    def reduction(self) -> Fraction:
        if not self.flat_total:
            return Fraction(0)
        return Fraction(self.eliminated_total, self.flat_total)

    def count(self, category: BoundaryCategory) -> CategoryCount:
        return next(c for c in self.categories if c.category is category)

    def to_dict(self) -> dict[str, Any]:
        def frac(f: Fraction) -> str:
            return f"{f.numerator}/{f.denominator}"

        return {
            "categories": [
                {
                    "category": c.category.value,
                    "flat": c.flat,
                    "scoped": c.scoped,
                    "eliminated": c.eliminated,
                    "reduction": frac(c.reduction),
                    "reduction_percent": percent(c.reduction),
                }
                for c in self.categories
            ],
            "total": {
                "flat": self.flat_total,
                "scoped": self.scoped_total,
                "eliminated": self.eliminated_total,
                # unreduced so that 144/200 stays visible
                "reduction": f"{self.eliminated_total}/{self.flat_total}",
                "reduction_percent": percent(self.reduction),
            },
        }


def percent(f: Fraction) -> int:
    """Round half-up to an integer percentage."""
    scaled = f * 100
    return int(scaled + Fraction(1, 2)) if scaled >= 0 else -int(-scaled + Fraction(1, 2))


def summarize(
    boundaries: Sequence[TrustBoundary], spec: ArchitectureSpec | None = None
) -> BoundaryReport:
    """Count boundaries per category.

    Duplicated keys are always rejected. When ``spec`` is given the key set
    must also equal the flat enumeration of ``spec`` exactly.
    """
    dupes = [k for k, n in Counter(b.key for b in boundaries).items() if n > 1]
    if dupes:
        cat, src, dst = dupes[0]
        raise IncompleteEnumeration(f"duplicate boundary {cat.value} {src}->{dst}")
    if spec is not None:
        expected = {b.key for b in enumerate_flat(spec)}
        got = {b.key for b in boundaries}
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise IncompleteEnumeration(
                f"enumeration mismatch: {len(missing)} missing, {len(extra)} unexpected"
            )
    flat = Counter(b.category for b in boundaries)
    kept = Counter(b.category for b in boundaries if b.status is Status.RETAINED)
    return BoundaryReport(tuple(
        CategoryCount(c, flat[c], kept[c]) for c in BoundaryCategory
    ))


@dataclass(frozen=True)
class Discrepancy:
    row: int | None
    key: tuple[BoundaryCategory, str, str]
    expected: str
    actual: str

    def __str__(self) -> str:
        cat, src, dst = self.key
        row = f"row {self.row}" if self.row is not None else "row ?"
        return f"{row} {cat.value} {src}->{dst}: expected {self.expected}, got {self.actual}"


def _describe(b: TrustBoundary | None) -> str:
    if b is None:
        return "absent"
    return f"{b.status.value} [{', '.join(sorted(b.mechanisms))}]"


def diff_against_fixture(
    boundaries: Sequence[TrustBoundary], fixture: Sequence[TrustBoundary]
) -> list[Discrepancy]:
    """Compare status and mechanism set row by row, matched on boundary key."""
    ours = {b.key: b for b in boundaries}
    theirs = {b.key: b for b in fixture}
    out = []
    for ref in fixture:
        got = ours.get(ref.key)
        if got is None or got.status is not ref.status or got.mechanisms != ref.mechanisms:
            out.append(Discrepancy(ref.id, ref.key, _describe(ref), _describe(got)))
    for b in boundaries:
        if b.key not in theirs:
            out.append(Discrepancy(b.id, b.key, "absent", _describe(b)))
    return out


def load_boundary_fixture(path: str | Path) -> list[TrustBoundary]:
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    return [TrustBoundary.from_dict(r) for r in rows]


# -- rendering -------------------------------------------------------------


def render_table(report: BoundaryReport) -> str:
    lines = [f"{'Boundary Type':<22}{'Flat':>6}{'Scoped':>8}{'Red.':>6}"]
    for c in report.categories:
        lines.append(f"{c.category.label:<22}{c.flat:>6}{c.scoped:>8}{percent(c.reduction):>5}%")
    lines.append(
        f"{'Total':<22}{report.flat_total:>6}{report.scoped_total:>8}"
        f"{percent(report.reduction):>5}%"
    )
    return "\n".join(lines)


def render_csv(report: BoundaryReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "flat", "scoped", "eliminated", "reduction_percent"])
    for c in report.categories:
        w.writerow([c.category.value, c.flat, c.scoped, c.eliminated, percent(c.reduction)])
    w.writerow(["total", report.flat_total, report.scoped_total,
                report.eliminated_total, percent(report.reduction)])
    return buf.getvalue()


def render_json(report: BoundaryReport, boundaries: Sequence[TrustBoundary] = ()) -> str:
    doc = report.to_dict()
    if boundaries:
        doc["boundaries"] = [b.to_dict() for b in boundaries]
    return json.dumps(doc, indent=2, sort_keys=True)
