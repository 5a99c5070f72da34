"""Deterministic replay of a scripted incident-response lifecycle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .audit import verify_audit_chain
from .crypto import canonicalize, digest
from .deploy import deploy
from .kernel import Client, Kernel, KernelConfig, Response
from .model import ArchitectureSpec, fixture_path
from .tracer import AttackChain, ConfigError, builtin_chain, chain_from_dict, check_chain, replay

ACTIONS = ("invoke", "read", "write", "handoff")
TRIGGER_KINDS = ("AutoAnomaly", "ManualAnalyst")


class ScriptError(ValueError):
    pass


class EscalationStarvation(RuntimeError):
    """An escalation needed a human verdict and none was queued."""

    def __init__(self, message: str, report: SimReport):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Trigger:
    tick: int
    kind: str
    payload: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ScriptAction:
    agent: str
    action: str
    target: str
    operation: str = ""
    args: Mapping[str, Any] = field(default_factory=dict)
    key: str = ""
    value: Any = None
    context_refs: tuple[str, ...] = ()
    incident: str = ""

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> ScriptAction:
        return cls(raw["agent"], raw["action"], raw["target"], raw.get("operation", ""),
                   dict(raw.get("args", {})), raw.get("key", ""), raw.get("value"),
                   tuple(raw.get("context_refs", ())), raw.get("incident", ""))

    def to_dict(self) -> dict[str, Any]:
        return {"agent": self.agent, "action": self.action, "target": self.target,
                "operation": self.operation, "args": dict(self.args), "key": self.key,
                "value": self.value, "context_refs": list(self.context_refs),
                "incident": self.incident}


@dataclass(frozen=True)
class Injection:
    tick: int
    chain: str


@dataclass(frozen=True)
class HumanVerdict:
    approve: bool
    reviewer: str = "analyst"


@dataclass(frozen=True)
class ScenarioScript:
    seed: int = 0
    phase_order: tuple[str, ...] = ()
    triggers: tuple[Trigger, ...] = ()
    behaviors: Mapping[str, tuple[ScriptAction, ...]] = field(default_factory=dict)
    injected_attacks: tuple[Injection, ...] = ()
    human_verdicts: tuple[HumanVerdict, ...] = ()
    chains: Mapping[str, AttackChain] = field(default_factory=dict)

    def schedule(self) -> list[tuple[int, ScriptAction]]:
        """Benign actions, one per tick, phases in order, after the last trigger."""
        start = max((t.tick for t in self.triggers), default=0) + 1
        order = list(self.phase_order) + sorted(set(self.behaviors) - set(self.phase_order))
        flat = [a for phase in order for a in self.behaviors.get(phase, ())]
        return [(start + i, a) for i, a in enumerate(flat)]

    def chain(self, chain_id: str) -> AttackChain:
        if chain_id in self.chains:
            return self.chains[chain_id]
        try:
            return builtin_chain(chain_id)
        except ConfigError:
            raise ScriptError(f"unknown attack chain {chain_id!r}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "phase_order": list(self.phase_order),
            "triggers": [{"tick": t.tick, "kind": t.kind, "payload": dict(t.payload)}
                         for t in self.triggers],
            "behaviors": {p: [a.to_dict() for a in acts] for p, acts in self.behaviors.items()},
            "injected_attacks": [{"tick": i.tick, "chain": i.chain} for i in self.injected_attacks],
            "human_verdicts": [{"verdict": "approve" if v.approve else "reject",
                                "reviewer": v.reviewer} for v in self.human_verdicts],
            "chains": [c.to_dict() for c in self.chains.values()],
        }


def script_from_dict(raw: Mapping[str, Any]) -> ScenarioScript:
    try:
        triggers = tuple(Trigger(int(t["tick"]), t["kind"], dict(t.get("payload", {})))
                         for t in raw.get("triggers", ()))
        behaviors = {phase: tuple(ScriptAction.from_dict(a) for a in acts)
                     for phase, acts in raw.get("behaviors", {}).items()}
        injected = tuple(Injection(int(i["tick"]), i["chain"]) for i in raw.get("injected_attacks", ()))
        verdicts = tuple(HumanVerdict(v["verdict"] == "approve", v.get("reviewer", "analyst"))
                         for v in raw.get("human_verdicts", ()))
        chains = {c["id"]: chain_from_dict(c) for c in raw.get("chains", ())}
        script = ScenarioScript(int(raw.get("seed", 0)), tuple(raw.get("phase_order", ())),
                                triggers, behaviors, injected, verdicts, chains)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ScriptError(f"malformed script: {exc}") from None
    ticks = [t.tick for t in script.triggers]
    if ticks != sorted(ticks) or any(t < 0 for t in ticks):
        raise ScriptError("trigger ticks must be non-negative and monotone")
    for t in script.triggers:
        if t.kind not in TRIGGER_KINDS:
            raise ScriptError(f"unknown trigger kind {t.kind!r}")
    inj = [i.tick for i in script.injected_attacks]
    if inj != sorted(inj):
        raise ScriptError("injection ticks must be monotone")
    return script


def load_script(path: str | Path) -> ScenarioScript:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScriptError(f"cannot read script: {exc}") from None
    return script_from_dict(raw)


def builtin_soc_lifecycle() -> ScenarioScript:
    return load_script(fixture_path("soc_lifecycle.json"))


def with_injection(script: ScenarioScript, chain_id: str, tick: int) -> ScenarioScript:
    injected = tuple(sorted((*script.injected_attacks, Injection(tick, chain_id)),
                            key=lambda i: i.tick))
    return replace(script, injected_attacks=injected)


def check_script(spec: ArchitectureSpec, script: ScenarioScript) -> None:
    for phase, acts in script.behaviors.items():
        for a in acts:
            where = f"{phase}: {a.action} {a.target}"
            agent = spec.agent(a.agent)
            if agent is None:
                raise ScriptError(f"{where}: unknown agent {a.agent!r}")
            if a.action not in ACTIONS:
                raise ScriptError(f"{where}: unknown action")
            if a.action == "invoke":
                tool = spec.tool(a.target)
                if tool is None or tool.operation(a.operation) is None:
                    raise ScriptError(f"{where}: unknown tool operation {a.operation!r}")
            elif a.action in ("read", "write") and spec.store(a.target) is None:
                raise ScriptError(f"{where}: unknown store")
            elif a.action == "handoff" and a.target not in spec.phases:
                raise ScriptError(f"{where}: unknown phase")
    for inj in script.injected_attacks:
        try:
            check_chain(spec, script.chain(inj.chain))
        except ConfigError as exc:
            raise ScriptError(str(exc)) from None


@dataclass
class SimReport:
    seed: int
    timeline: list[dict[str, Any]] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    audit: dict[str, Any] = field(default_factory=dict)
    chains: list[dict[str, Any]] = field(default_factory=list)
    escalations: list[dict[str, Any]] = field(default_factory=list)
    halted: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, "timeline": self.timeline, "counts": self.counts,
                "audit": self.audit, "chains": self.chains, "escalations": self.escalations,
                "halted": self.halted}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def summary(self) -> str:
        width = max(len(k) for k in self.counts) if self.counts else 0
        lines = [f"{k.ljust(width)}  {v}" for k, v in sorted(self.counts.items())]
        lines.append(f"audit: {self.audit.get('status')} ({self.audit.get('length')} records)")
        lines += [f"{c['chain']}: {c['summary']}" for c in self.chains]
        if self.halted:
            lines.append(f"halted: {self.halted}")
        return "\n".join(lines)


@dataclass
class SimResult:
    report: SimReport
    kernel: Kernel

    @property
    def audit_bytes(self) -> bytes:
        return self.kernel.audit.to_bytes()


def _entry(tick: int, source: str, actor: str, action: str, target: str, resp: Response) -> dict[str, Any]:
    return {"tick": tick, "source": source, "actor": actor, "action": action, "target": target,
            "outcome": resp.code or "ok", "principles": list(resp.principles),
            "constraints": [dict(c) for c in resp.constraints]}


class _Runner:
    def __init__(self, spec: ArchitectureSpec, script: ScenarioScript, config: KernelConfig):
        self.spec = spec
        self.script = script
        self.kernel = deploy(spec, config)
        self.clients: dict[str, Client] = {}
        self.verdicts = list(script.human_verdicts)
        self.report = SimReport(script.seed)

    def client(self, agent: str) -> Client:
        if agent not in self.clients:
            self.clients[agent] = Client(self.kernel, agent, f"sim-{agent}")
        return self.clients[agent]

    def act(self, tick: int, a: ScriptAction) -> None:
        c = self.client(a.agent)
        if a.action == "invoke":
            resp = c.invoke(a.target, a.operation, a.args, list(a.context_refs))
        elif a.action == "read":
            resp = c.read(a.target, a.key)
        elif a.action == "write":
            resp = c.write(a.target, a.key, a.value, list(a.context_refs), a.incident)
        else:
            resp = c.handoff(a.target)
        self.report.timeline.append(_entry(tick, "script", a.agent, a.action, a.target, resp))

    def inject(self, tick: int, chain_id: str) -> None:
        chain = self.script.chain(chain_id)
        result = replay(self.kernel, chain, self.script.seed)
        self.report.chains.append({"tick": tick, **result.to_dict()})
        for step, out in zip(chain.steps, result.steps):
            self.report.timeline.append({
                "tick": tick, "source": chain.id, "actor": step.actor,
                "action": step.action.value, "target": step.target, "outcome": out.kind.value,
                "principles": list(out.principles), "constraints": [],
            })

    def review(self, tick: int) -> None:
        for idx in self.kernel.pending_escalations():
            if not self.verdicts:
                esc = self.kernel.escalations[idx]
                raise _Starved(f"escalation {idx} ({esc.proposal.tool} by {esc.proposal.proposer}) "
                               f"at tick {tick} has no queued human verdict")
            v = self.verdicts.pop(0)
            self.kernel.review(idx, v.approve, v.reviewer)

    def run(self) -> SimReport:
        k = self.kernel
        events: list[tuple[int, int, Any]] = []
        for t in self.script.triggers:
            events.append((t.tick, 0, t))
        for inj in self.script.injected_attacks:
            events.append((inj.tick, 1, inj))
        for tick, a in self.script.schedule():
            events.append((tick, 2, a))
        # stable sort: at equal ticks triggers first, then injections, then benign work
        events.sort(key=lambda e: (e[0], e[1]))
        try:
            for tick, _, ev in events:
                if isinstance(ev, Trigger):
                    k.audit.append({"kind": "trigger", "tick": tick, "trigger": ev.kind,
                                    "payload": dict(ev.payload)})
                    self.report.timeline.append({"tick": tick, "source": "trigger", "actor": ev.kind,
                                                 "action": "trigger", "target": "", "outcome": "ok",
                                                 "principles": [], "constraints": []})
                elif isinstance(ev, Injection):
                    self.inject(tick, ev.chain)
                else:
                    self.act(tick, ev)
                self.review(tick)
        except _Starved as exc:
            self.report.halted = f"EscalationStarvation: {exc}"
        self.finish()
        return self.report

    def finish(self) -> None:
        k, r = self.kernel, self.report
        events = [rec.event for rec in k.audit]
        consensus = [e for e in events if e.get("kind") == "consensus"]
        writes = [e for e in events if e.get("kind") == "memory.write"]
        r.counts = {
            "invocations": sum(1 for e in events if e.get("kind") == "dispatch"
                               and e.get("method") == "tools/invoke"),
            "executed": len(k.executed),
            "approvals": sum(1 for e in consensus if e["outcome"] == "approved"),
            "escalations": sum(1 for e in consensus if e["outcome"] == "escalated"),
            "blocked": sum(1 for e in r.timeline if e["outcome"] not in ("ok", "Allowed", "Constrained", "Skipped")),
            "memory_writes_accepted": sum(1 for e in writes if e["outcome"] == "ok"),
            "memory_writes_rejected": sum(1 for e in writes if e["outcome"] != "ok"),
            "handoffs": sum(1 for e in events if e.get("kind") == "handoff"),
            "principle_errors": sum(1 for e in r.timeline
                                    if e["source"] == "script" and e["outcome"] != "ok"
                                    and e["principles"]),
        }
        status = verify_audit_chain(k.audit.records)
        r.audit = {"length": len(k.audit), "head": k.audit.head, "status": str(status)}
        r.escalations = [{"ref": e.ref, "tool": e.proposal.tool, "proposer": e.proposal.proposer,
                          "status": e.status, "reviewer": e.reviewer} for e in k.escalations]


class _Starved(Exception):
    pass


def simulate(spec: ArchitectureSpec, script: ScenarioScript,
             config: KernelConfig = KernelConfig()) -> SimResult:
    """Run the script and return both the report and the kernel that produced it."""
    check_script(spec, script)
    runner = _Runner(spec, script, config)
    runner.run()
    return SimResult(runner.report, runner.kernel)


def run_scenario(spec: ArchitectureSpec, script: ScenarioScript,
                 config: KernelConfig = KernelConfig()) -> SimReport:
    """Run the script; raises EscalationStarvation carrying the partial report."""
    result = simulate(spec, script, config)
    if result.report.halted:
        raise EscalationStarvation(result.report.halted, result.report)
    return result.report


def report_digest(report: SimReport) -> str:
    return digest(canonicalize(report.to_dict()))


def unresolved(report: SimReport) -> int:
    return sum(1 for e in report.escalations if e["status"] == "pending")
