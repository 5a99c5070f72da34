"""Host-side mediation kernel.

Every envelope passes a fixed pipeline: origin and signature check (P1),
capability scope (P2), quorum consensus (P3), execution against a stub
server, and verification of the server's signed response. Each stage writes
a checkpoint to the hash-chained audit log, and every envelope ends with a
``dispatch`` record summarising the decision.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .audit import AuditLog
from .consensus import (
    HANDOFF,
    ActionProposal,
    ConsensusConfig,
    ConsensusVerdict,
    ExecutionHistory,
    ValidationContext,
    Validator,
    default_validators,
    run_consensus,
)
from .crypto import (
    KeyPair,
    SignedManifest,
    b64,
    canonicalize,
    params_digest,
    sign_bytes,
    unb64,
    verify_bytes,
    verify_with_catalog,
)
from .errors import (
    BadRequest,
    CapabilityDenied,
    ConsensusEscalated,
    EnforcementError,
    HandoffDenied,
    MethodNotFound,
    OriginMismatch,
    PhaseConflict,
    ReplayDetected,
    ServerUnavailable,
    SessionClosed,
    SignatureInvalid,
    StaleVersion,
    UnknownTool,
)
from .memory import MemoryPlane, Provenance
from .model import ActionClass, ArchitectureSpec

PRINCIPLES = ("P1", "P2", "P3", "P4", "P5")
ALL_PRINCIPLES = frozenset(PRINCIPLES)

METHODS = (
    "session/open",
    "session/close",
    "tools/invoke",
    "tools/list",
    "memory/read",
    "memory/write",
    "phase/handoff",
    "feed/ingest",
)


@dataclass(frozen=True)
class KernelConfig:
    enabled: frozenset[str] = ALL_PRINCIPLES
    consensus: ConsensusConfig = ConsensusConfig()
    rate_limit: int = 10
    history_window: int = 20

    @classmethod
    def flat(cls) -> KernelConfig:
        """Everything switched off: the undefended baseline."""
        return cls(frozenset())

    @classmethod
    def only(cls, *principles: str) -> KernelConfig:
        unknown = set(principles) - ALL_PRINCIPLES
        if unknown:
            raise ValueError(f"unknown principles {sorted(unknown)}")
        return cls(frozenset(principles))

    def on(self, principle: str) -> bool:
        return principle in self.enabled


@dataclass(frozen=True)
class Envelope:
    id: int
    session: str
    origin: str
    method: str
    params: Mapping[str, Any] = field(default_factory=dict)
    sig: str | None = None

    def body(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "session": self.session,
            "origin": self.origin,
            "method": self.method,
            "params": self.params,
        }

    def canonical_body(self) -> bytes:
        return canonicalize(self.body())

    def signed(self, key: KeyPair) -> Envelope:
        return Envelope(self.id, self.session, self.origin, self.method, self.params,
                        b64(sign_bytes(key, self.canonical_body())))

    @property
    def ref(self) -> str:
        return f"{self.session}#{self.id}"

    def to_dict(self) -> dict[str, Any]:
        out = self.body()
        out["sig"] = self.sig
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> Envelope:
        try:
            return cls(int(raw["id"]), str(raw["session"]), str(raw["origin"]),
                       str(raw["method"]), raw.get("params") or {}, raw.get("sig"))
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRequest(f"malformed envelope: {exc}") from None


@dataclass(frozen=True)
class Response:
    id: int
    session: str
    result: Any = None
    error: Mapping[str, Any] | None = None
    constraints: tuple[Mapping[str, Any], ...] = ()

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def code(self) -> str | None:
        return self.error["code"] if self.error else None

    @property
    def principles(self) -> tuple[str, ...]:
        """Principles that fired, blocking error first, then constraints, in order."""
        out: list[str] = []
        sources = [self.error["principles"]] if self.error else []
        sources += [c["principles"] for c in self.constraints]
        for ps in sources:
            out += [p for p in ps if p not in out]
        return tuple(out)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "session": self.session}
        if self.error is not None:
            out["error"] = dict(self.error)
        else:
            out["result"] = self.result
        out["constraints"] = [dict(c) for c in self.constraints]
        return out


@dataclass
class Session:
    id: str
    agent: str
    last_id: int = -1
    open: bool = True


@dataclass(frozen=True)
class Registration:
    manifest: SignedManifest
    server_key: KeyPair

    @property
    def server_id(self) -> str:
        return self.manifest.server_id

    @property
    def phase(self) -> str:
        return self.manifest.phase


@dataclass
class StubServer:
    """Deterministic in-process tool server that signs what it returns.

    ``tamper`` runs after signing, standing in for an attacker on the wire.
    """

    server_id: str
    key: KeyPair
    tamper: Callable[[dict[str, Any]], dict[str, Any]] | None = None

    def execute(self, tool: str, operation: str, args: Mapping[str, Any]) -> tuple[dict[str, Any], bytes]:
        payload = {
            "server": self.server_id,
            "tool": tool,
            "operation": operation,
            "status": "ok",
            "request": params_digest(dict(args)),
        }
        sig = sign_bytes(self.key, canonicalize(payload))
        if self.tamper is not None:
            payload = self.tamper(dict(payload))
        return payload, sig


@dataclass
class Escalation:
    ref: str
    proposal: ActionProposal
    verdict: ConsensusVerdict
    status: str = "pending"
    reviewer: str = ""


@dataclass(frozen=True)
class ExecutedAction:
    ref: str
    proposer: str
    tool: str
    operation: str
    action_class: ActionClass


class Kernel:
    def __init__(
        self,
        spec: ArchitectureSpec,
        config: KernelConfig = KernelConfig(),
        *,
        validators: list[Validator] | None = None,
        audit: AuditLog | None = None,
    ) -> None:
        self.spec = spec
        self.config = config
        self.audit = audit or AuditLog()
        self.validators = validators if validators is not None else default_validators(config.rate_limit)
        self.memory = MemoryPlane(spec, audit=self.audit, enforce=config.enabled & {"P4", "P5"})
        self.history = ExecutionHistory(config.history_window)
        self.catalog: dict[str, KeyPair] = {}
        self.registrations: dict[str, Registration] = {}
        self.tool_server: dict[str, str] = {}
        self.stubs: dict[str, StubServer] = {}
        self.sessions: dict[str, Session] = {}
        self.escalations: list[Escalation] = []
        self.executed: list[ExecutedAction] = []
        self.quarantine: list[dict[str, Any]] = []
        self._lock = threading.RLock()
        self._inbox: queue.Queue[Envelope] = queue.Queue()
        self._handlers = {
            "session/open": self._session_open,
            "session/close": self._session_close,
            "tools/invoke": self._invoke,
            "tools/list": self._list,
            "memory/read": self._memory_read,
            "memory/write": self._memory_write,
            "phase/handoff": self._handoff,
            "feed/ingest": self._feed_ingest,
        }

    # -- catalog and registration -----------------------------------------

    def enroll_issuer(self, key: KeyPair) -> None:
        self.catalog[key.key_id] = key.public_only()
        self.audit.append({"kind": "catalog.enroll", "issuer": key.key_id})

    def register_server(self, manifest: SignedManifest, stub: StubServer | None = None) -> Registration:
        """Admit a server's manifest into the catalog; raises on rejection."""
        event = {"kind": "catalog.register", "server": manifest.server_id,
                 "version": manifest.version, "issuer": manifest.issuer_key_id}
        try:
            self._check_registration(manifest)
        except EnforcementError as err:
            self.audit.append({**event, "outcome": err.code, "principles": list(err.principles)})
            raise
        issuer = self.catalog.get(manifest.issuer_key_id)
        scheme = issuer.scheme if issuer else "ed25519"
        reg = Registration(manifest, KeyPair(manifest.server_id, unb64(manifest.server_key), None, scheme))
        self.registrations[manifest.server_id] = reg
        for t in manifest.tools:
            self.tool_server[t.id] = manifest.server_id
        if stub is not None:
            self.stubs[manifest.server_id] = stub
        self.audit.append({**event, "outcome": "registered",
                           "tools": [t.id for t in manifest.tools]})
        return reg

    def _check_registration(self, manifest: SignedManifest) -> None:
        if self.config.on("P1"):
            verify_with_catalog(manifest, self.catalog)
            prior = self.registrations.get(manifest.server_id)
            if prior is not None and manifest.version <= prior.manifest.version:
                raise StaleVersion(
                    f"version {manifest.version} does not exceed {prior.manifest.version}")
        for t in manifest.tools:
            decl = self.spec.tool(t.id)
            if decl is None:
                raise UnknownTool(f"manifest lists undeclared tool {t.id}")
            if not self.config.on("P2"):
                continue
            owner = self.spec.tool_phase(t.id)
            if owner != manifest.phase:
                raise PhaseConflict(f"{t.id} belongs to {owner}, not {manifest.phase}")
            holder = self.tool_server.get(t.id)
            if holder is not None and holder != manifest.server_id:
                raise PhaseConflict(f"{t.id} is already served by {holder}")
            for op_name, dig in t.operations.items():
                op = decl.operation(op_name)
                if op is None or params_digest(op.params) != dig:
                    raise PhaseConflict(f"{t.id}.{op_name} does not match the declared tool")

    # -- dispatch ----------------------------------------------------------

    def submit(self, envelope: Envelope) -> None:
        """Queue an envelope; safe from any thread."""
        self._inbox.put(envelope)

    def drain(self) -> list[Response]:
        out = []
        while True:
            try:
                env = self._inbox.get_nowait()
            except queue.Empty:
                return out
            out.append(self.dispatch(env))

    def dispatch(self, envelope: Envelope) -> Response:
        with self._lock:
            return self._dispatch(envelope)

    def _log(self, env: Envelope, kind: str, **fields: Any) -> None:
        self.audit.append({"kind": kind, "ref": env.ref, **fields})

    def _checkpoint(self, env: Envelope, stage: str, err: EnforcementError | None = None) -> None:
        if err is None:
            self._log(env, "checkpoint", stage=stage, decision="pass")
        else:
            err.data.setdefault("stage", stage)
            self._log(env, "checkpoint", stage=stage, decision="block", code=err.code,
                      principles=list(err.principles))

    def _block(self, env: Envelope, stage: str, err: EnforcementError) -> None:
        self._checkpoint(env, stage, err)
        raise err

    def _dispatch(self, env: Envelope) -> Response:
        constraints: list[dict[str, Any]] = []
        try:
            handler = self._handlers.get(env.method)
            if handler is None:
                raise MethodNotFound(f"no method {env.method!r}")
            if not isinstance(env.params, Mapping):
                raise BadRequest("params must be an object")
            result = handler(env, constraints)
            resp = Response(env.id, env.session, result=result, constraints=tuple(constraints))
        except EnforcementError as err:
            if env.method == "tools/invoke" and err.data.get("stage") in ("p1", "p2"):
                self._corroborate(env, err)
            resp = Response(env.id, env.session, error=err.to_dict(), constraints=tuple(constraints))
        self._log(env, "dispatch", origin=env.origin, method=env.method,
                  outcome=resp.code or "ok", principles=list(resp.principles))
        return resp

    def _corroborate(self, env: Envelope, err: EnforcementError) -> None:
        """Let the consensus loop weigh in on invocations already blocked upstream.

        Nothing executes and nothing is queued; a failed verdict only adds P3
        to the blocking error.
        """
        if not self.config.on("P3"):
            return
        try:
            proposal = self._proposal(env, env.origin, env.params)
        except EnforcementError:
            return
        verdict = run_consensus(proposal, self.validators, self.config.consensus, self._ctx())
        self._log(env, "consensus.corroborate", fingerprint=proposal.fingerprint(),
                  outcome=verdict.outcome.value, verdict=verdict.to_dict())
        if not verdict.approved and "P3" not in err.principles:
            err.principles = (*err.principles, "P3")

    def _ctx(self) -> ValidationContext:
        return ValidationContext(self.spec, self.history, self.memory.resolve)

    # -- stage 1 -----------------------------------------------------------

    def _authenticate(self, env: Envelope) -> str:
        """Return the acting principal for ``env`` or raise at stage p1."""
        if not self.config.on("P1"):
            return env.origin
        from_server = env.origin in self.registrations
        if from_server:
            # server traffic rides a client session but must carry the server's signature
            self._verify_envelope(env, self.registrations[env.origin].server_key)
        sess = self.sessions.get(env.session)
        if sess is None or not sess.open:
            self._block(env, "p1", SessionClosed(f"session {env.session!r} is not open"))
        assert sess is not None
        if env.id <= sess.last_id:
            self._block(env, "p1", ReplayDetected(f"envelope id {env.id} already seen"))
        if env.origin == sess.agent:
            actor = sess.agent
        elif from_server:
            actor = env.origin
        else:
            self._block(env, "p1", OriginMismatch(
                f"origin {env.origin!r} does not own session {env.session!r}"))
        sess.last_id = env.id
        self._checkpoint(env, "p1")
        return actor

    def _verify_envelope(self, env: Envelope, key: KeyPair) -> None:
        try:
            sig = unb64(env.sig or "")
            good = bool(sig) and verify_bytes(key, env.canonical_body(), sig)
        except SignatureInvalid:
            good = False
        if not good:
            self._block(env, "p1", SignatureInvalid(f"envelope from {env.origin} fails verification"))

    def _phase_of(self, actor: str) -> str:
        agent = self.spec.agent(actor)
        return agent.phase if agent else ""

    # -- methods -----------------------------------------------------------

    def _session_open(self, env: Envelope, constraints: list) -> Any:
        agent = env.params.get("agent", env.origin)
        if self.config.on("P1"):
            if self.spec.agent(env.origin) is None or agent != env.origin:
                self._block(env, "p1", OriginMismatch(f"{env.origin!r} cannot open a session as {agent!r}"))
            if env.session in self.sessions:
                self._block(env, "p1", ReplayDetected(f"session {env.session!r} already exists"))
            self._checkpoint(env, "p1")
        self.sessions[env.session] = Session(env.session, str(agent), env.id)
        return {"session": env.session, "agent": agent}

    def _session_close(self, env: Envelope, constraints: list) -> Any:
        self._authenticate(env)
        sess = self.sessions.get(env.session)
        if sess is not None:
            sess.open = False
        return {"closed": env.session}

    def _list(self, env: Envelope, constraints: list) -> Any:
        actor = self._authenticate(env)
        if self.config.on("P2"):
            phase = self._phase_of(actor)
            tools = [t for t, sid in self.tool_server.items()
                     if self.registrations[sid].phase == phase]
            self._checkpoint(env, "p2")
        else:
            tools = list(self.tool_server)
        return {"tools": sorted(tools)}

    def _proposal(self, env: Envelope, proposer: str, p: Mapping[str, Any]) -> ActionProposal:
        tool_id, op_name = p.get("tool"), p.get("operation")
        args, refs, plan = p.get("args", {}), p.get("context_refs", []), p.get("plan", "")
        if not (isinstance(tool_id, str) and isinstance(op_name, str) and isinstance(args, Mapping)
                and isinstance(refs, list) and all(isinstance(r, str) for r in refs)
                and isinstance(plan, str)):
            raise BadRequest("tools/invoke needs tool, operation, args, context_refs, plan")
        tool = self.spec.tool(tool_id)
        op = tool.operation(op_name) if tool else None
        action_class = op.action_class if op else ActionClass.REVERSIBLE
        return ActionProposal(proposer, tool_id, op_name, dict(args), action_class, tuple(refs), plan)

    def _invoke(self, env: Envelope, constraints: list) -> Any:
        actor = self._authenticate(env)
        proposal = self._proposal(env, actor, env.params)
        tool = self.spec.tool(proposal.tool)
        server_id = self.tool_server.get(proposal.tool)
        if tool is None or server_id is None:
            self._block(env, "p2", UnknownTool(f"{proposal.tool!r} is not registered"))
        assert tool is not None and server_id is not None
        op = tool.operation(proposal.operation)
        if op is None:
            self._block(env, "p2", UnknownTool(f"{proposal.tool} has no {proposal.operation!r}"))
        assert op is not None

        # stage 2: capability scope
        if self.config.on("P2"):
            reg = self.registrations[server_id]
            phase = self._phase_of(actor)
            if not phase:
                self._block(env, "p2", CapabilityDenied(f"{actor!r} is not an agent and cannot invoke tools"))
            mtool = reg.manifest.tool(proposal.tool)
            if reg.phase != phase or proposal.tool not in self.spec.tools_for(phase) or mtool is None:
                self._block(env, "p2", CapabilityDenied(
                    f"{proposal.tool} is outside the {phase} phase"))
            assert mtool is not None
            if proposal.operation not in mtool.operations:
                self._block(env, "p2", CapabilityDenied(
                    f"{proposal.operation!r} is not in the signed manifest"))
            if op.params is not None:
                extra = sorted(set(proposal.params) - set(op.params))
                if extra:
                    narrowed = {k: v for k, v in proposal.params.items() if k in op.params}
                    proposal = ActionProposal(proposal.proposer, proposal.tool, proposal.operation,
                                              narrowed, proposal.action_class,
                                              proposal.context_refs, proposal.plan)
                    constraints.append({"principles": ["P2"], "note": "parameters narrowed to the manifest schema",
                                        "removed": extra})
            self._checkpoint(env, "p2")

        # stage 3: consensus
        if self.config.on("P3"):
            self._consent(env, proposal)

        return self._execute(env, proposal, server_id)

    def _consent(self, env: Envelope, proposal: ActionProposal) -> None:
        verdict = run_consensus(proposal, self.validators, self.config.consensus, self._ctx())
        fp = proposal.fingerprint()
        self._log(env, "consensus", proposer=proposal.proposer, fingerprint=fp,
                  outcome=verdict.outcome.value, verdict=verdict.to_dict())
        if not verdict.approved:
            self.history.record_refusal(fp)
            self.escalations.append(Escalation(env.ref, proposal, verdict))
            reasons = "; ".join(f"{b.validator}: {b.reason}" for b in verdict.rejections())
            self._block(env, "p3", ConsensusEscalated(
                f"{verdict.approvals}/{verdict.n} approvals, {verdict.k} required"
                + (f" ({reasons})" if reasons else ""),
                escalation=len(self.escalations) - 1))
        self._checkpoint(env, "p3")

    def _execute(self, env: Envelope, proposal: ActionProposal, server_id: str) -> Any:
        stub = self.stubs.get(server_id)
        if stub is None:
            raise ServerUnavailable(f"no running server for {server_id}")
        payload, sig = stub.execute(proposal.tool, proposal.operation, proposal.params)
        self.history.record_execution(proposal.proposer)
        self.executed.append(ExecutedAction(env.ref, proposal.proposer, proposal.tool,
                                            proposal.operation, proposal.action_class))
        self._log(env, "execute", proposer=proposal.proposer, tool=proposal.tool,
                  operation=proposal.operation, action_class=proposal.action_class.value)
        if self.config.on("P1"):
            key = self.registrations[server_id].server_key
            if not verify_bytes(key, canonicalize(payload), sig):
                self.quarantine.append({"ref": env.ref, "payload": payload})
                self._log(env, "response", status="quarantined", server=server_id)
                err = SignatureInvalid(f"response from {server_id} fails verification")
                err.data["stage"] = "p1.response"
                raise err
            self._log(env, "response", status="verified", server=server_id)
        else:
            self._log(env, "response", status="unchecked", server=server_id)
        return payload

    def _handoff(self, env: Envelope, constraints: list) -> Any:
        actor = self._authenticate(env)
        target = env.params.get("to")
        if not isinstance(target, str):
            raise BadRequest("phase/handoff needs a target phase")
        phase = self._phase_of(actor)
        if self.config.on("P2"):
            if not self.spec.has_handoff(phase, target):
                self._block(env, "p2", HandoffDenied(f"no declared handoff {phase or actor} -> {target}"))
            self._checkpoint(env, "p2")
        if self.config.on("P3"):
            self._consent(env, ActionProposal(actor, HANDOFF, target, plan=str(env.params.get("plan", ""))))
        self._log(env, "handoff", source=phase, target=target, actor=actor)
        return {"from": phase, "to": target}

    def _memory_read(self, env: Envelope, constraints: list) -> Any:
        actor = self._authenticate(env)
        store, key = env.params.get("store"), env.params.get("key")
        if not isinstance(store, str) or not isinstance(key, str):
            raise BadRequest("memory/read needs store and key")
        res = self.memory.read(self._phase_of(actor), store, key)
        if res.redacted:
            constraints.append({"principles": ["P5"], "note": "sensitive fields redacted",
                                "removed": list(res.redacted)})
        return {"value": res.value, "version": res.version}

    def _memory_write(self, env: Envelope, constraints: list) -> Any:
        actor = self._authenticate(env)
        p = env.params
        store, key = p.get("store"), p.get("key")
        refs, incident = p.get("context_refs", []), p.get("incident", "")
        claimed = p.get("provenance", {})
        if not (isinstance(store, str) and isinstance(key, str) and isinstance(refs, list)
                and all(isinstance(r, str) for r in refs) and isinstance(incident, str)
                and isinstance(claimed, Mapping)):
            raise BadRequest("memory/write needs store, key, value, context_refs")
        phase = self._phase_of(actor)
        prov = Provenance(str(claimed.get("writer", actor)), str(claimed.get("phase", phase)),
                          incident, tuple(refs))
        version = self.memory.write(phase, store, key, p.get("value"), prov)
        return {"store": store, "key": key, "version": version}

    def _feed_ingest(self, env: Envelope, constraints: list) -> Any:
        feed = env.params.get("feed", env.origin)
        key = env.params.get("key")
        if not isinstance(feed, str) or (key is not None and not isinstance(key, str)):
            raise BadRequest("feed/ingest needs feed and optional key")
        if self.config.on("P1"):
            if self.spec.feed(env.origin) is None or feed != env.origin:
                self._block(env, "p1", OriginMismatch(f"{env.origin!r} cannot publish as feed {feed!r}"))
            self._checkpoint(env, "p1")
        version = self.memory.ingest_feed(feed, env.params.get("item"), key)
        route = self.spec.route(feed)
        return {"store": route.store if route else None, "version": version}

    # -- human review ------------------------------------------------------

    def pending_escalations(self) -> list[int]:
        return [i for i, e in enumerate(self.escalations) if e.status == "pending"]

    def review(self, index: int, approve: bool, reviewer: str = "analyst") -> Escalation:
        """Record a human verdict. Nothing executes here: an approval only lets
        the agent propose the same action again."""
        esc = self.escalations[index]
        if esc.status != "pending":
            raise ValueError(f"escalation {index} already reviewed")
        esc.status = "approved" if approve else "rejected"
        esc.reviewer = reviewer
        if approve:
            self.history.refused.discard(esc.proposal.fingerprint())
        self.audit.append({"kind": "review", "ref": esc.ref, "escalation": index,
                           "verdict": esc.status, "reviewer": reviewer})
        return esc


class Client:
    """Convenience wrapper that opens a session and numbers envelopes."""

    def __init__(self, kernel: Kernel, agent: str, session: str | None = None) -> None:
        self.kernel = kernel
        self.agent = agent
        self.session = session or f"{agent}-session"
        self._next = 0
        self.opened = self.call("session/open", {"agent": agent})

    def envelope(self, method: str, params: Mapping[str, Any]) -> Envelope:
        env = Envelope(self._next, self.session, self.agent, method, dict(params))
        self._next += 1
        return env

    def call(self, method: str, params: Mapping[str, Any]) -> Response:
        return self.kernel.dispatch(self.envelope(method, params))

    def invoke(self, tool: str, operation: str, args: Mapping[str, Any] | None = None,
               context_refs: list[str] | None = None, plan: str = "") -> Response:
        return self.call("tools/invoke", {"tool": tool, "operation": operation,
                                          "args": dict(args or {}),
                                          "context_refs": list(context_refs or []), "plan": plan})

    def read(self, store: str, key: str) -> Response:
        return self.call("memory/read", {"store": store, "key": key})

    def write(self, store: str, key: str, value: Any, context_refs: list[str] | None = None,
              incident: str = "") -> Response:
        return self.call("memory/write", {"store": store, "key": key, "value": value,
                                          "context_refs": list(context_refs or []),
                                          "incident": incident})

    def handoff(self, target: str, plan: str = "") -> Response:
        return self.call("phase/handoff", {"to": target, "plan": plan})
