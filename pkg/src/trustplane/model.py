"""Declarative data model for a phase-scoped multi-agent deployment.

An :class:`ArchitectureSpec` names the agents, tools, memory stores and
external feeds of a deployment together with the scoping tables that the
kernel enforces at runtime: which phase owns which tool, which phase may
read or write which store, which phase handoffs exist, and where every feed
is routed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping

FIXTURES_ENV = "TRUSTPLANE_FIXTURES"

FIELD_KINDS = {
    "str": str,
    "int": int,
    "float": (int, float),
    "bool": bool,
    "list": list,
    "dict": dict,
    "any": object,
}


class ArchitectureError(ValueError):
    """Base class for invalid architecture documents."""


class SchemaError(ArchitectureError):
    """Malformed document: missing keys, wrong types, duplicate ids."""


class DanglingReference(ArchitectureError):
    """An assignment, grant, handoff or route names an undeclared id."""


class PartitionError(ArchitectureError):
    """Tool assignments do not partition the tool set."""


class AccessMode(str, Enum):
    READ = "read"
    WRITE = "write"
    READ_WRITE = "rw"

    @property
    def can_read(self) -> bool:
        return self in (AccessMode.READ, AccessMode.READ_WRITE)

    @property
    def can_write(self) -> bool:
        return self in (AccessMode.WRITE, AccessMode.READ_WRITE)


class ActionClass(str, Enum):
    REVERSIBLE = "reversible"
    IRREVERSIBLE = "irreversible"


class Sensitivity(str, Enum):
    NORMAL = "normal"
    RAW_FORENSIC = "raw_forensic"


@dataclass(frozen=True)
class AgentDecl:
    id: str
    phase: str
    name: str = ""


@dataclass(frozen=True)
class Operation:
    name: str
    action_class: ActionClass = ActionClass.REVERSIBLE
    # field -> kind; None means the operation accepts arbitrary parameters
    params: Mapping[str, str] | None = None


@dataclass(frozen=True)
class ToolDecl:
    id: str
    name: str
    operations: tuple[Operation, ...]

    def operation(self, name: str) -> Operation | None:
        for op in self.operations:
            if op.name == name:
                return op
        return None


@dataclass(frozen=True)
class StoreDecl:
    id: str
    name: str
    schema: Mapping[str, str] = field(default_factory=dict)
    sensitivity: Mapping[str, Sensitivity] = field(default_factory=dict)

    def sensitive_fields(self) -> frozenset[str]:
        return frozenset(
            f for f, tag in self.sensitivity.items() if tag is Sensitivity.RAW_FORENSIC
        )


@dataclass(frozen=True)
class FeedDecl:
    id: str
    name: str = ""


@dataclass(frozen=True)
class FeedRoute:
    feed: str
    store: str
    retained: bool
    consolidated_via: str | None = None


@dataclass(frozen=True)
class ArchitectureSpec:
    agents: tuple[AgentDecl, ...] = ()
    tools: tuple[ToolDecl, ...] = ()
    memory_stores: tuple[StoreDecl, ...] = ()
    feeds: tuple[FeedDecl, ...] = ()
    tool_assignments: Mapping[str, frozenset[str]] = field(default_factory=dict)
    memory_grants: Mapping[str, Mapping[str, AccessMode]] = field(default_factory=dict)
    handoffs: tuple[tuple[str, str], ...] = ()
    feed_routes: tuple[FeedRoute, ...] = ()

    @property
    def phases(self) -> tuple[str, ...]:
        """Declared phases, in order of first appearance among the agents."""
        return tuple(dict.fromkeys(a.phase for a in self.agents))

    def agent(self, agent_id: str) -> AgentDecl | None:
        return next((a for a in self.agents if a.id == agent_id), None)

    def agents_in(self, phase: str) -> tuple[AgentDecl, ...]:
        return tuple(a for a in self.agents if a.phase == phase)

    def tool(self, tool_id: str) -> ToolDecl | None:
        return next((t for t in self.tools if t.id == tool_id), None)

    def store(self, store_id: str) -> StoreDecl | None:
        return next((s for s in self.memory_stores if s.id == store_id), None)

    def feed(self, feed_id: str) -> FeedDecl | None:
        return next((f for f in self.feeds if f.id == feed_id), None)

    def route(self, feed_id: str) -> FeedRoute | None:
        return next((r for r in self.feed_routes if r.feed == feed_id), None)

    def tool_phase(self, tool_id: str) -> str | None:
        for phase, tools in self.tool_assignments.items():
            if tool_id in tools:
                return phase
        return None

    def tools_for(self, phase: str) -> frozenset[str]:
        return frozenset(self.tool_assignments.get(phase, ()))

    def grant(self, phase: str, store_id: str) -> AccessMode | None:
        return self.memory_grants.get(phase, {}).get(store_id)

    def has_handoff(self, src: str, dst: str) -> bool:
        return (src, dst) in self.handoffs


def check_fields(value: Any, schema: Mapping[str, str]) -> list[str]:
    """Return the problems found matching ``value`` against a shallow schema.

    A kind suffixed with ``?`` marks an optional field. Unknown fields,
    missing required fields and kind mismatches are all reported.
    """
    if not isinstance(value, dict):
        return ["value is not an object"]
    problems = []
    for name in value:
        if name not in schema:
            problems.append(f"unexpected field {name!r}")
    for name, kind in schema.items():
        optional = kind.endswith("?")
        base = kind.rstrip("?")
        if name not in value:
            if not optional:
                problems.append(f"missing field {name!r}")
            continue
        expected = FIELD_KINDS[base]
        v = value[name]
        if base in ("int", "float") and isinstance(v, bool):
            problems.append(f"field {name!r} is not {base}")
        elif not isinstance(v, expected):
            problems.append(f"field {name!r} is not {base}")
    return problems


# -- parsing ---------------------------------------------------------------


def _require(doc: Mapping[str, Any], key: str, kind: type, where: str) -> Any:
    if key not in doc:
        raise SchemaError(f"{where}: missing {key!r}")
    value = doc[key]
    if not isinstance(value, kind) or (kind is str and not value):
        raise SchemaError(f"{where}: {key!r} must be a non-empty {kind.__name__}")
    return value


def _unique(ids: Iterable[str], what: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise SchemaError(f"duplicate {what} id {i!r}")
        seen.add(i)


def _check_kind(kind: Any, where: str) -> str:
    if not isinstance(kind, str) or kind.rstrip("?") not in FIELD_KINDS:
        raise SchemaError(f"{where}: unknown field kind {kind!r}")
    return kind


def _parse_operation(raw: Any, where: str) -> Operation:
    if isinstance(raw, str):
        return Operation(raw)
    if not isinstance(raw, dict):
        raise SchemaError(f"{where}: operation must be a string or object")
    name = _require(raw, "name", str, where)
    try:
        action_class = ActionClass(raw.get("class", "reversible"))
    except ValueError:
        raise SchemaError(f"{where}: bad action class {raw.get('class')!r}") from None
    params = raw.get("params")
    if params is not None:
        if not isinstance(params, dict):
            raise SchemaError(f"{where}: params must be an object")
        params = {k: _check_kind(v, where) for k, v in params.items()}
    return Operation(name, action_class, params)


def architecture_from_dict(doc: Mapping[str, Any]) -> ArchitectureSpec:
    """Build and validate an :class:`ArchitectureSpec` from decoded JSON."""
    if not isinstance(doc, dict):
        raise SchemaError("architecture document must be a JSON object")
    for key, kind in (
        ("agents", list), ("tools", list), ("memory_stores", list), ("feeds", list),
        ("tool_assignments", dict), ("memory_grants", dict),
        ("handoffs", list), ("feed_routes", list),
    ):
        if key in doc and not isinstance(doc[key], kind):
            raise SchemaError(f"{key!r} must be a {kind.__name__}")

    agents = []
    for i, raw in enumerate(doc.get("agents", [])):
        where = f"agents[{i}]"
        if not isinstance(raw, dict):
            raise SchemaError(f"{where}: expected object")
        agents.append(AgentDecl(
            _require(raw, "id", str, where),
            _require(raw, "phase", str, where),
            str(raw.get("name", "")),
        ))

    tools = []
    for i, raw in enumerate(doc.get("tools", [])):
        where = f"tools[{i}]"
        if not isinstance(raw, dict):
            raise SchemaError(f"{where}: expected object")
        ops_raw = _require(raw, "operations", list, where)
        if not ops_raw:
            raise SchemaError(f"{where}: operations must be non-empty")
        ops = tuple(_parse_operation(o, where) for o in ops_raw)
        _unique((o.name for o in ops), f"{where} operation")
        tools.append(ToolDecl(_require(raw, "id", str, where), str(raw.get("name", "")), ops))

    stores = []
    for i, raw in enumerate(doc.get("memory_stores", [])):
        where = f"memory_stores[{i}]"
        if not isinstance(raw, dict):
            raise SchemaError(f"{where}: expected object")
        schema = raw.get("schema", {})
        if not isinstance(schema, dict):
            raise SchemaError(f"{where}: schema must be an object")
        schema = {k: _check_kind(v, where) for k, v in schema.items()}
        sens_raw = raw.get("sensitivity", {})
        if not isinstance(sens_raw, dict):
            raise SchemaError(f"{where}: sensitivity must be an object")
        sensitivity = {}
        for fname, tag in sens_raw.items():
            if fname not in schema:
                raise SchemaError(f"{where}: sensitivity names unknown field {fname!r}")
            try:
                sensitivity[fname] = Sensitivity(tag)
            except ValueError:
                raise SchemaError(f"{where}: bad sensitivity {tag!r}") from None
        stores.append(StoreDecl(
            _require(raw, "id", str, where), str(raw.get("name", "")), schema, sensitivity
        ))

    feeds = []
    for i, raw in enumerate(doc.get("feeds", [])):
        where = f"feeds[{i}]"
        if not isinstance(raw, dict):
            raise SchemaError(f"{where}: expected object")
        feeds.append(FeedDecl(_require(raw, "id", str, where), str(raw.get("name", ""))))

    assignments = {}
    for phase, tool_ids in doc.get("tool_assignments", {}).items():
        if not isinstance(tool_ids, list) or not all(isinstance(t, str) for t in tool_ids):
            raise SchemaError(f"tool_assignments[{phase!r}] must be a list of ids")
        assignments[phase] = frozenset(tool_ids)

    grants = {}
    for phase, per_store in doc.get("memory_grants", {}).items():
        if not isinstance(per_store, dict):
            raise SchemaError(f"memory_grants[{phase!r}] must be an object")
        try:
            grants[phase] = {s: AccessMode(m) for s, m in per_store.items()}
        except ValueError as exc:
            raise SchemaError(f"memory_grants[{phase!r}]: {exc}") from None

    handoffs = []
    for i, pair in enumerate(doc.get("handoffs", [])):
        if (not isinstance(pair, list) or len(pair) != 2
                or not all(isinstance(p, str) for p in pair)):
            raise SchemaError(f"handoffs[{i}] must be a [source, destination] pair")
        handoffs.append((pair[0], pair[1]))

    routes = []
    for i, raw in enumerate(doc.get("feed_routes", [])):
        where = f"feed_routes[{i}]"
        if not isinstance(raw, dict):
            raise SchemaError(f"{where}: expected object")
        retained = raw.get("retained")
        if not isinstance(retained, bool):
            raise SchemaError(f"{where}: 'retained' must be a boolean")
        via = raw.get("consolidated_via")
        if via is not None and not isinstance(via, str):
            raise SchemaError(f"{where}: 'consolidated_via' must be a feed id")
        routes.append(FeedRoute(
            _require(raw, "feed", str, where), _require(raw, "store", str, where), retained, via
        ))

    spec = ArchitectureSpec(
        agents=tuple(agents),
        tools=tuple(tools),
        memory_stores=tuple(stores),
        feeds=tuple(feeds),
        tool_assignments=assignments,
        memory_grants=grants,
        handoffs=tuple(handoffs),
        feed_routes=tuple(routes),
    )
    validate(spec)
    return spec


def validate(spec: ArchitectureSpec) -> None:
    """Check every cross-reference invariant; raise on the first violation."""
    _unique((a.id for a in spec.agents), "agent")
    _unique((t.id for t in spec.tools), "tool")
    _unique((s.id for s in spec.memory_stores), "memory store")
    _unique((f.id for f in spec.feeds), "feed")

    phases = set(spec.phases)
    tool_ids = {t.id for t in spec.tools}
    store_ids = {s.id for s in spec.memory_stores}
    feed_ids = {f.id for f in spec.feeds}

    owner: dict[str, str] = {}
    for phase, assigned in spec.tool_assignments.items():
        if phase not in phases:
            raise DanglingReference(f"tool_assignments names undeclared phase {phase!r}")
        for tool_id in sorted(assigned):
            if tool_id not in tool_ids:
                raise DanglingReference(f"tool_assignments[{phase!r}] names unknown tool {tool_id!r}")
            if tool_id in owner:
                raise PartitionError(
                    f"tool {tool_id!r} assigned to both {owner[tool_id]!r} and {phase!r}"
                )
            owner[tool_id] = phase
    unassigned = sorted(tool_ids - owner.keys())
    if unassigned:
        raise PartitionError(f"tools without a phase: {', '.join(unassigned)}")

    for phase, per_store in spec.memory_grants.items():
        if phase not in phases:
            raise DanglingReference(f"memory_grants names undeclared phase {phase!r}")
        for store_id in per_store:
            if store_id not in store_ids:
                raise DanglingReference(f"memory_grants[{phase!r}] names unknown store {store_id!r}")

    for src, dst in spec.handoffs:
        for p in (src, dst):
            if p not in phases:
                raise DanglingReference(f"handoff names undeclared phase {p!r}")
        if src == dst:
            raise SchemaError(f"self-handoff on phase {src!r}")
    _unique((f"{s}->{d}" for s, d in spec.handoffs), "handoff")

    routed = [r.feed for r in spec.feed_routes]
    for r in spec.feed_routes:
        if r.feed not in feed_ids:
            raise DanglingReference(f"feed route names unknown feed {r.feed!r}")
        if r.store not in store_ids:
            raise DanglingReference(f"feed route for {r.feed!r} names unknown store {r.store!r}")
        if r.consolidated_via is not None and r.consolidated_via not in feed_ids:
            raise DanglingReference(
                f"feed route for {r.feed!r} consolidates via unknown feed {r.consolidated_via!r}"
            )
    _unique(routed, "feed route")
    missing = sorted(feed_ids - set(routed))
    if missing:
        raise SchemaError(f"feeds without a route: {', '.join(missing)}")


def parse_architecture(doc: str | bytes) -> ArchitectureSpec:
    try:
        decoded = json.loads(doc)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not valid JSON: {exc}") from None
    return architecture_from_dict(decoded)


def architecture_to_dict(spec: ArchitectureSpec) -> dict[str, Any]:
    order = {t.id: i for i, t in enumerate(spec.tools)}

    def op_dict(op: Operation) -> dict[str, Any]:
        out: dict[str, Any] = {"name": op.name, "class": op.action_class.value}
        if op.params is not None:
            out["params"] = dict(op.params)
        return out

    def route_dict(r: FeedRoute) -> dict[str, Any]:
        out: dict[str, Any] = {"feed": r.feed, "store": r.store, "retained": r.retained}
        if r.consolidated_via is not None:
            out["consolidated_via"] = r.consolidated_via
        return out

    return {
        "agents": [{"id": a.id, "phase": a.phase, "name": a.name} for a in spec.agents],
        "tools": [
            {"id": t.id, "name": t.name, "operations": [op_dict(o) for o in t.operations]}
            for t in spec.tools
        ],
        "memory_stores": [
            {
                "id": s.id,
                "name": s.name,
                "schema": dict(s.schema),
                **({"sensitivity": {k: v.value for k, v in s.sensitivity.items()}}
                   if s.sensitivity else {}),
            }
            for s in spec.memory_stores
        ],
        "feeds": [{"id": f.id, "name": f.name} for f in spec.feeds],
        "tool_assignments": {
            phase: sorted(tools, key=lambda t: order.get(t, len(order)))
            for phase, tools in spec.tool_assignments.items()
        },
        "memory_grants": {
            phase: {s: m.value for s, m in grants.items()}
            for phase, grants in spec.memory_grants.items()
        },
        "handoffs": [[s, d] for s, d in spec.handoffs],
        "feed_routes": [route_dict(r) for r in spec.feed_routes],
    }


def serialize_architecture(spec: ArchitectureSpec) -> str:
    return json.dumps(architecture_to_dict(spec), indent=2) + "\n"


# -- fixtures --------------------------------------------------------------


def fixtures_dir() -> Path:
    override = os.environ.get(FIXTURES_ENV)
    if override:
        return Path(override)
    return Path(__file__).resolve().parent / "fixtures"


def fixture_path(name: str) -> Path:
    return fixtures_dir() / name


@lru_cache(maxsize=None)
def _load_reference_architecture(path: str) -> ArchitectureSpec:
    return parse_architecture(Path(path).read_text(encoding="utf-8"))


def builtin_paper_architecture() -> ArchitectureSpec:
    """The four-phase SOC deployment: A1-A4, T1-T16, M1-M12, E1-E12."""
    return _load_reference_architecture(str(fixture_path("paper_arch.json")))
