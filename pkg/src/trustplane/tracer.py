"""Replay declarative attack chains through a live kernel and report where they stop."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Sequence

from .crypto import b64
from .deploy import deploy, server_id
from .kernel import Client, Envelope, Kernel, KernelConfig, Response
from .model import ActionClass, ArchitectureSpec, fixture_path

EXTERNAL = "External"


class ConfigError(ValueError):
    pass


class Action(str, Enum):
    TOOL_INVOKE = "ToolInvoke"
    MEMORY_WRITE = "MemoryWrite"
    MEMORY_READ = "MemoryRead"
    FORGED_RESPONSE = "ForgedResponse"
    FEED_PUBLISH = "FeedPublish"
    HANDOFF = "Handoff"
    # effects outside the organisation; never dispatched
    EXTERNAL_SINK = "ExternalSink"


_EXTERNAL_ACTIONS = {Action.FORGED_RESPONSE, Action.FEED_PUBLISH, Action.EXTERNAL_SINK}


class StepKind(str, Enum):
    ALLOWED = "Allowed"
    BLOCKED = "Blocked"
    CONSTRAINED = "Constrained"
    SKIPPED = "Skipped"


class Overall(str, Enum):
    INTERCEPTED = "Intercepted"
    CONSTRAINED = "Constrained"
    COMPLETED = "Completed"


@dataclass(frozen=True)
class AttackStep:
    actor: str
    action: Action
    target: str
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"actor": self.actor, "action": self.action.value, "target": self.target,
                "payload": dict(self.payload)}


@dataclass(frozen=True)
class Expected:
    intercept: int | None
    outcome: Overall
    principles: tuple[str, ...]


@dataclass(frozen=True)
class AttackChain:
    id: str
    name: str
    steps: tuple[AttackStep, ...]
    residual_risk: str = ""
    expected: Expected | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "name": self.name, "residual_risk": self.residual_risk,
                               "steps": [s.to_dict() for s in self.steps]}
        if self.expected is not None:
            out["expected"] = {"intercept": self.expected.intercept,
                               "outcome": self.expected.outcome.value,
                               "principles": list(self.expected.principles)}
        return out


def chain_from_dict(raw: Mapping[str, Any]) -> AttackChain:
    try:
        steps = tuple(
            AttackStep(s["actor"], Action(s["action"]), s["target"], dict(s.get("payload", {})))
            for s in raw["steps"]
        )
        exp = raw.get("expected")
        expected = None
        if exp is not None:
            expected = Expected(exp.get("intercept"), Overall(exp["outcome"]),
                                tuple(exp.get("principles", ())))
        chain = AttackChain(raw["id"], raw.get("name", raw["id"]), steps,
                            raw.get("residual_risk", ""), expected)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed chain: {exc}") from None
    if expected is not None and expected.intercept is not None and not 1 <= expected.intercept <= len(steps):
        raise ConfigError(f"{chain.id}: expected step {expected.intercept} out of range")
    return chain


def load_chains(path: str | Path) -> list[AttackChain]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    raws = doc["chains"] if isinstance(doc, Mapping) and "chains" in doc else doc
    if isinstance(raws, Mapping):
        raws = [raws]
    return [chain_from_dict(r) for r in raws]


@lru_cache(maxsize=1)
def _builtin() -> tuple[AttackChain, ...]:
    return tuple(load_chains(fixture_path("attack_chains.json")))


def builtin_paper_chains() -> list[AttackChain]:
    return list(_builtin())


def builtin_chain(chain_id: str) -> AttackChain:
    for c in _builtin():
        if c.id == chain_id:
            return c
    raise ConfigError(f"no builtin chain {chain_id!r}")


@dataclass(frozen=True)
class StepOutcome:
    index: int
    kind: StepKind
    principles: tuple[str, ...] = ()
    note: str = ""
    irreversible: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "kind": self.kind.value, "principles": list(self.principles),
                "note": self.note, "irreversible": self.irreversible}


@dataclass(frozen=True)
class InterceptResult:
    chain_id: str
    steps: tuple[StepOutcome, ...]
    intercept_index: int | None
    overall: Overall
    residual_risk: str = ""

    @property
    def principles(self) -> tuple[str, ...]:
        """Principles reported by the kernel across all steps, in emission order."""
        out: list[str] = []
        for s in self.steps:
            out += [p for p in s.principles if p not in out]
        return tuple(out)

    def first_irreversible(self) -> int | None:
        return next((s.index for s in self.steps if s.irreversible), None)

    def summary(self) -> str:
        ps = ", ".join(self.principles)
        if self.overall is Overall.INTERCEPTED:
            return f"Blocked at step {self.intercept_index} [{ps}]"
        if self.overall is Overall.CONSTRAINED:
            return f"Constrained at step {self.intercept_index} [{ps}]"
        return f"Completed ({len(self.steps)} steps)"

    def to_dict(self) -> dict[str, Any]:
        return {
            "chain": self.chain_id,
            "overall": self.overall.value,
            "intercept": self.intercept_index,
            "principles": list(self.principles),
            "summary": self.summary(),
            "residual_risk": self.residual_risk,
            "steps": [s.to_dict() for s in self.steps],
        }


def check_chain(spec: ArchitectureSpec, chain: AttackChain) -> None:
    """Raise ConfigError if ``chain`` names anything ``spec`` does not declare."""
    if not chain.steps:
        raise ConfigError(f"{chain.id}: chain has no steps")
    for i, step in enumerate(chain.steps, 1):
        where = f"{chain.id} step {i}"
        if step.action in _EXTERNAL_ACTIONS:
            if step.actor != EXTERNAL:
                raise ConfigError(f"{where}: {step.action.value} must be performed by {EXTERNAL}")
        elif spec.agent(step.actor) is None:
            raise ConfigError(f"{where}: unknown agent {step.actor!r}")
        ok = {
            Action.TOOL_INVOKE: spec.tool,
            Action.FORGED_RESPONSE: spec.tool,
            Action.MEMORY_READ: spec.store,
            Action.MEMORY_WRITE: spec.store,
            Action.FEED_PUBLISH: spec.feed,
            Action.HANDOFF: lambda t: t if t in spec.phases else None,
            Action.EXTERNAL_SINK: lambda t: t,
        }[step.action](step.target)
        if not ok:
            raise ConfigError(f"{where}: {step.action.value} target {step.target!r} is not declared")


def sample_value(schema: Mapping[str, str], rng: random.Random) -> dict[str, Any]:
    """A schema-conformant value whose string content comes from ``rng``."""
    out: dict[str, Any] = {}
    for name, kind in sorted(schema.items()):
        if kind.endswith("?"):
            continue
        blob = rng.randbytes(8).hex()
        out[name] = {
            "str": blob,
            "int": rng.randrange(1 << 16),
            "float": rng.randrange(1 << 16) / 16,
            "bool": bool(rng.getrandbits(1)),
            "list": [blob],
            "dict": {"blob": blob},
        }.get(kind, blob)
    return out


class _Replay:
    def __init__(self, kernel: Kernel, chain: AttackChain, rng: random.Random) -> None:
        self.kernel = kernel
        self.chain = chain
        self.rng = rng
        self.clients: dict[str, Client] = {}
        self.last_client: Client | None = None
        self.last_read: Any = None
        self.last_sent: Mapping[str, Any] | None = None

    def client(self, agent: str) -> Client:
        if agent not in self.clients:
            self.clients[agent] = Client(self.kernel, agent, f"trace-{self.chain.id}-{agent}")
        self.last_client = self.clients[agent]
        return self.last_client

    def run(self, step: AttackStep) -> Response | str:
        spec = self.kernel.spec
        p = step.payload
        if step.action is Action.TOOL_INVOKE:
            tool = spec.tool(step.target)
            op = str(p.get("operation") or tool.operations[0].name)
            decl = tool.operation(op)
            args = dict(p.get("args") or sample_value((decl.params if decl else None) or {}, self.rng))
            if p.get("attach_read") and self.last_read is not None:
                args[str(p["attach_read"])] = self.last_read
            resp = self.client(step.actor).invoke(step.target, op, args,
                                                  list(p.get("context_refs", [])), p.get("plan", ""))
            if resp.ok:
                removed = {f for c in resp.constraints for f in c.get("removed", ())}
                self.last_sent = {k: v for k, v in args.items() if k not in removed}
            return resp
        if step.action is Action.MEMORY_READ:
            resp = self.client(step.actor).read(step.target, str(p.get("key", "")))
            if resp.ok:
                self.last_read = resp.result["value"]
            return resp
        if step.action is Action.MEMORY_WRITE:
            value = p.get("value")
            if value is None:
                value = sample_value(spec.store(step.target).schema, self.rng)
            return self.client(step.actor).write(step.target, str(p.get("key", "")), value,
                                                 list(p.get("context_refs", [])))
        if step.action is Action.HANDOFF:
            return self.client(step.actor).handoff(step.target)
        if step.action is Action.FEED_PUBLISH:
            route = spec.route(step.target)
            store = spec.store(route.store) if route else None
            item = sample_value(store.schema if store else {}, self.rng)
            if not p.get("schema_conformant", True):
                item = {"payload": self.rng.randbytes(16).hex()}
            params = {"feed": step.target, "item": item}
            if p.get("key"):
                params["key"] = str(p["key"])
            env = Envelope(0, "", step.target, "feed/ingest", params)
            return self.kernel.dispatch(env)
        if step.action is Action.FORGED_RESPONSE:
            tool = spec.tool(step.target)
            server = str(p.get("server") or server_id(spec.tool_phase(step.target) or ""))
            op = str(p.get("operation") or tool.operations[0].name)
            session = self.last_client.session if self.last_client else f"{server}-wire"
            eid = self.last_client.envelope("tools/invoke", {}).id if self.last_client else 0
            env = Envelope(eid, session, server, "tools/invoke", {
                "tool": step.target, "operation": op, "args": dict(p.get("args", {})),
                "context_refs": list(p.get("context_refs", [])), "plan": str(p.get("plan", "")),
            })
            if p.get("signature", "Forged") == "Valid":
                stub = self.kernel.stubs.get(server)
                if stub is not None:
                    env = env.signed(stub.key)
            else:
                env = Envelope(env.id, env.session, env.origin, env.method, env.params,
                               b64(self.rng.randbytes(64)))
            return self.kernel.dispatch(env)
        # ExternalSink: the effect lands outside the organisation
        received = sorted(self.last_sent or {})
        return f"{step.target} received fields: {', '.join(received) or 'none'}"


def _outcome(index: int, resp: Response | str, irreversible: bool) -> StepOutcome:
    if isinstance(resp, str):
        return StepOutcome(index, StepKind.ALLOWED, (), resp, irreversible)
    if not resp.ok:
        return StepOutcome(index, StepKind.BLOCKED, resp.principles,
                           f"{resp.code}: {resp.error['message']}", irreversible)
    if resp.constraints:
        notes = "; ".join(f"{c['note']} ({', '.join(c.get('removed', []))})" for c in resp.constraints)
        return StepOutcome(index, StepKind.CONSTRAINED, resp.principles, notes, irreversible)
    return StepOutcome(index, StepKind.ALLOWED, (), "", irreversible)


def replay(kernel: Kernel, chain: AttackChain, seed: int = 0) -> InterceptResult:
    """Run ``chain`` through an existing kernel, stopping after the first block."""
    check_chain(kernel.spec, chain)
    rp = _Replay(kernel, chain, random.Random(f"{seed}:{chain.id}"))
    outcomes: list[StepOutcome] = []
    blocked = False
    for i, step in enumerate(chain.steps, 1):
        if blocked:
            outcomes.append(StepOutcome(i, StepKind.SKIPPED))
            continue
        before = len(kernel.executed)
        resp = rp.run(step)
        irreversible = any(a.action_class is ActionClass.IRREVERSIBLE
                           for a in kernel.executed[before:])
        out = _outcome(i, resp, irreversible)
        outcomes.append(out)
        blocked = out.kind is StepKind.BLOCKED
    first = next((o.index for o in outcomes if o.kind is not StepKind.ALLOWED), None)
    kinds = {o.kind for o in outcomes}
    if StepKind.BLOCKED in kinds:
        overall = Overall.INTERCEPTED
    elif StepKind.CONSTRAINED in kinds:
        overall = Overall.CONSTRAINED
    else:
        overall = Overall.COMPLETED
    return InterceptResult(chain.id, tuple(outcomes), first, overall, chain.residual_risk)


def trace(spec: ArchitectureSpec, chain: AttackChain,
          config: KernelConfig = KernelConfig(), seed: int = 0) -> InterceptResult:
    check_chain(spec, chain)
    return replay(deploy(spec, config), chain, seed)


def trace_flat(spec: ArchitectureSpec, chain: AttackChain, seed: int = 0) -> InterceptResult:
    return trace(spec, chain, KernelConfig.flat(), seed)


def render_results(results: Sequence[InterceptResult]) -> str:
    rows = [("Chain", "Outcome", "Intercept", "Principles", "Residual risk")]
    for r in results:
        rows.append((r.chain_id, r.overall.value, str(r.intercept_index or "-"),
                     ", ".join(r.principles) or "-", r.residual_risk))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines + [""] + [f"{r.chain_id}: {r.summary()}" for r in results])
