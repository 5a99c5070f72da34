"""Verify-first, execute-later: action proposals and quorum voting."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .crypto import digest_value
from .model import ActionClass, ArchitectureSpec, check_fields

HANDOFF = "phase/handoff"


class Vote(str, Enum):
    APPROVE = "approve"
    REJECT = "reject"
    ABSTAIN = "abstain"


class Outcome(str, Enum):
    APPROVED = "approved"
    ESCALATED = "escalated"


@dataclass(frozen=True)
class ActionProposal:
    proposer: str
    tool: str
    operation: str
    params: Mapping[str, Any] = field(default_factory=dict)
    action_class: ActionClass = ActionClass.REVERSIBLE
    context_refs: tuple[str, ...] = ()
    plan: str = ""

    @property
    def is_handoff(self) -> bool:
        return self.tool == HANDOFF

    def fingerprint(self) -> str:
        return digest_value([self.proposer, self.tool, self.operation, dict(self.params)])

    def to_dict(self) -> dict[str, Any]:
        return {
            "proposer": self.proposer,
            "tool": self.tool,
            "operation": self.operation,
            "params": dict(self.params),
            "class": self.action_class.value,
            "context_refs": list(self.context_refs),
            "plan": self.plan,
        }


@dataclass(frozen=True)
class Ballot:
    validator: str
    vote: Vote
    reason: str = ""


@dataclass(frozen=True)
class ConsensusConfig:
    k_reversible: int = 2
    # None means unanimity among the configured validators
    k_irreversible: int | None = None

    def threshold(self, action_class: ActionClass, n: int) -> int:
        if action_class is ActionClass.IRREVERSIBLE:
            return n if self.k_irreversible is None else self.k_irreversible
        return self.k_reversible


@dataclass(frozen=True)
class ConsensusVerdict:
    votes: tuple[Ballot, ...]
    n: int
    k: int
    outcome: Outcome

    @property
    def approvals(self) -> int:
        return sum(b.vote is Vote.APPROVE for b in self.votes)

    @property
    def approved(self) -> bool:
        return self.outcome is Outcome.APPROVED

    def rejections(self) -> list[Ballot]:
        return [b for b in self.votes if b.vote is Vote.REJECT]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "k": self.k,
            "outcome": self.outcome.value,
            "votes": [
                {"validator": b.validator, "vote": b.vote.value, "reason": b.reason}
                for b in self.votes
            ],
        }


def tally(votes: Sequence[Vote], k: int) -> Outcome:
    """Abstentions count for neither side; anything short of ``k`` escalates."""
    approvals = sum(v is Vote.APPROVE for v in votes)
    return Outcome.APPROVED if approvals >= k else Outcome.ESCALATED


class ExecutionHistory:
    """Behavioural memory the anomaly validator consults.

    The kernel feeds it from the same decisions it writes to the audit log,
    and :meth:`from_events` rebuilds it from audit events alone.
    """

    def __init__(self, window: int = 20) -> None:
        self.recent: deque[str] = deque(maxlen=window)
        self.refused: set[str] = set()

    def record_execution(self, proposer: str) -> None:
        self.recent.append(proposer)

    def record_refusal(self, fingerprint: str) -> None:
        self.refused.add(fingerprint)

    def recent_count(self, proposer: str) -> int:
        return sum(p == proposer for p in self.recent)

    @classmethod
    def from_events(cls, events: Iterable[Mapping[str, Any]], window: int = 20) -> ExecutionHistory:
        h = cls(window)
        for e in events:
            if e.get("kind") == "execute":
                h.record_execution(e["proposer"])
            elif e.get("kind") == "consensus" and e.get("outcome") == Outcome.ESCALATED.value:
                h.record_refusal(e["fingerprint"])
        return h


@dataclass
class ValidationContext:
    spec: ArchitectureSpec
    history: ExecutionHistory = field(default_factory=ExecutionHistory)
    # (ref, proposer phase) -> whether the evidence record exists and is readable
    resolve_evidence: Callable[[str, str], bool] = lambda ref, phase: False


class Validator(Protocol):
    name: str

    def __call__(self, proposal: ActionProposal, ctx: ValidationContext) -> tuple[Vote, str]: ...


class SchemaConformance:
    name = "schema"

    def __call__(self, proposal: ActionProposal, ctx: ValidationContext) -> tuple[Vote, str]:
        if proposal.is_handoff:
            if proposal.operation not in ctx.spec.phases:
                return Vote.REJECT, f"unknown phase {proposal.operation!r}"
            return Vote.APPROVE, "handoff target declared"
        tool = ctx.spec.tool(proposal.tool)
        op = tool.operation(proposal.operation) if tool else None
        if op is None:
            return Vote.REJECT, f"no operation {proposal.tool}.{proposal.operation}"
        if op.params is not None:
            problems = check_fields(dict(proposal.params), op.params)
            if problems:
                return Vote.REJECT, "; ".join(problems)
        return Vote.APPROVE, "parameters conform"


class PhaseAppropriateness:
    name = "phase"

    def __call__(self, proposal: ActionProposal, ctx: ValidationContext) -> tuple[Vote, str]:
        agent = ctx.spec.agent(proposal.proposer)
        if agent is None:
            return Vote.REJECT, f"proposer {proposal.proposer!r} is not a declared agent"
        if proposal.is_handoff:
            if ctx.spec.has_handoff(agent.phase, proposal.operation):
                return Vote.APPROVE, "declared handoff"
            return Vote.REJECT, f"no handoff {agent.phase} -> {proposal.operation}"
        if proposal.tool in ctx.spec.tools_for(agent.phase):
            return Vote.APPROVE, f"{proposal.tool} belongs to {agent.phase}"
        return Vote.REJECT, f"{proposal.tool} is outside the {agent.phase} phase"


class HistoricalAnomaly:
    """Rate ceiling, refused-repeat detection and evidence for irreversible actions."""

    name = "history"

    def __init__(self, rate_limit: int = 10) -> None:
        self.rate_limit = rate_limit

    def __call__(self, proposal: ActionProposal, ctx: ValidationContext) -> tuple[Vote, str]:
        if proposal.fingerprint() in ctx.history.refused:
            return Vote.REJECT, "repeats a previously escalated proposal"
        if ctx.history.recent_count(proposal.proposer) >= self.rate_limit:
            return Vote.REJECT, "rate ceiling reached"
        if proposal.action_class is ActionClass.IRREVERSIBLE:
            if not proposal.context_refs:
                return Vote.REJECT, "irreversible action cites no evidence"
            agent = ctx.spec.agent(proposal.proposer)
            phase = agent.phase if agent else ""
            missing = [r for r in proposal.context_refs if not ctx.resolve_evidence(r, phase)]
            if missing:
                return Vote.REJECT, f"unresolved evidence {', '.join(missing)}"
        return Vote.APPROVE, "consistent with history"


def default_validators(rate_limit: int = 10) -> list[Validator]:
    return [SchemaConformance(), PhaseAppropriateness(), HistoricalAnomaly(rate_limit)]


def run_consensus(
    proposal: ActionProposal,
    validators: Sequence[Validator],
    config: ConsensusConfig = ConsensusConfig(),
    ctx: ValidationContext | None = None,
) -> ConsensusVerdict:
    n = len(validators)
    if n < 1:
        raise ValueError("consensus needs at least one validator")
    k = config.threshold(proposal.action_class, n)
    if not 1 <= k <= n:
        raise ValueError(f"threshold k={k} outside 1..{n}")
    ballots = []
    for v in validators:
        name = getattr(v, "name", type(v).__name__)
        try:
            vote, reason = v(proposal, ctx)  # type: ignore[arg-type]
        except Exception as exc:  # a crashing validator must not approve
            vote, reason = Vote.REJECT, f"validator failure: {type(exc).__name__}: {exc}"
        ballots.append(Ballot(name, Vote(vote), reason))
    return ConsensusVerdict(tuple(ballots), n, k, tally([b.vote for b in ballots], k))
