import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustplane.deploy import deploy
from trustplane.kernel import PRINCIPLES, KernelConfig
from trustplane.tracer import (
    Action,
    AttackChain,
    AttackStep,
    ConfigError,
    Overall,
    StepKind,
    builtin_chain,
    builtin_paper_chains,
    chain_from_dict,
    load_chains,
    render_results,
    replay,
    sample_value,
    trace,
    trace_flat,
)

GOLDEN = {
    "AP-1": (2, Overall.INTERCEPTED, {"P2", "P3"}),
    "AP-2": (1, Overall.INTERCEPTED, {"P4", "P5"}),
    "AP-3": (2, Overall.INTERCEPTED, {"P1", "P3"}),
    "AP-4": (1, Overall.CONSTRAINED, {"P5", "P2"}),
}
SUBSETS = [frozenset(c) for r in range(6) for c in itertools.combinations(PRINCIPLES, r)]


def test_builtin_chain_structure():
    chains = {c.id: c for c in builtin_paper_chains()}
    assert list(chains) == ["AP-1", "AP-2", "AP-3", "AP-4"]
    assert all(len(c.steps) == 4 for c in chains.values())
    step = chains["AP-1"].steps[1]
    assert (step.action, step.target) == (Action.TOOL_INVOKE, "T8")
    assert chains["AP-3"].steps[1].payload["signature"] == "Forged"
    assert "cross-org" in chains["AP-4"].residual_risk
    for c in chains.values():
        assert (c.expected.intercept, c.expected.outcome, set(c.expected.principles)) == GOLDEN[c.id]


@pytest.mark.parametrize("chain_id", sorted(GOLDEN))
def test_golden_outcomes(spec, chain_id):
    res = trace(spec, builtin_chain(chain_id))
    index, overall, principles = GOLDEN[chain_id]
    assert res.intercept_index == index and res.overall is overall
    assert set(res.principles) >= principles


def test_golden_principles_exact(spec):
    got = {c.id: trace(spec, c).principles for c in builtin_paper_chains()}
    assert got == {"AP-1": ("P2", "P3"), "AP-2": ("P4", "P5"),
                   "AP-3": ("P1", "P3"), "AP-4": ("P5", "P2")}


def test_summaries(spec):
    assert trace(spec, builtin_chain("AP-3")).summary() == "Blocked at step 2 [P1, P3]"
    assert trace(spec, builtin_chain("AP-4")).summary() == "Constrained at step 1 [P5, P2]"
    assert trace_flat(spec, builtin_chain("AP-1")).summary() == "Completed (4 steps)"


def test_steps_after_block_are_skipped(spec):
    res = trace(spec, builtin_chain("AP-1"))
    assert [s.kind for s in res.steps] == [StepKind.ALLOWED, StepKind.BLOCKED,
                                           StepKind.SKIPPED, StepKind.SKIPPED]


def test_constrained_chain_continues_degraded(spec):
    res = trace(spec, builtin_chain("AP-4"))
    assert [s.kind for s in res.steps] == [StepKind.CONSTRAINED, StepKind.CONSTRAINED,
                                           StepKind.ALLOWED, StepKind.ALLOWED]
    assert res.steps[2].note == "partner-soc received fields: indicators, tlp"
    flat = trace_flat(spec, builtin_chain("AP-4"))
    assert "incident_data" in flat.steps[2].note


def test_ap1_without_consensus_reports_p2_only(spec):
    res = trace(spec, builtin_chain("AP-1"), KernelConfig.only("P1", "P2", "P4", "P5"))
    assert res.intercept_index == 2 and res.principles == ("P2",)


@pytest.mark.parametrize("chain", builtin_paper_chains(), ids=lambda c: c.id)
def test_flat_baseline_completes(spec, chain):
    res = trace_flat(spec, chain)
    assert res.overall is Overall.COMPLETED and res.intercept_index is None
    assert all(s.kind is StepKind.ALLOWED for s in res.steps)


def test_flat_irreversible_effects(spec):
    got = {c.id: trace_flat(spec, c).first_irreversible() for c in builtin_paper_chains()}
    assert got == {"AP-1": 2, "AP-2": 3, "AP-3": 2, "AP-4": None}


@pytest.mark.parametrize("chain", builtin_paper_chains(), ids=lambda c: c.id)
def test_defense_dominance(spec, chain):
    flat_effect = trace_flat(spec, chain).first_irreversible()
    defended = trace(spec, chain)
    if flat_effect is not None:
        assert defended.intercept_index is not None and defended.intercept_index <= flat_effect
    assert defended.first_irreversible() is None


@pytest.mark.parametrize("chain", builtin_paper_chains(), ids=lambda c: c.id)
def test_more_enforcement_never_delays_intercept(spec, chain):
    far = len(chain.steps) + 1
    index = {s: trace(spec, chain, KernelConfig(s)).intercept_index or far for s in SUBSETS}
    for small, big in itertools.product(SUBSETS, SUBSETS):
        if small < big:
            assert index[big] <= index[small], (sorted(small), sorted(big))


def test_benign_chain_completes(spec):
    chain = AttackChain("benign", "benign", (
        AttackStep("A1", Action.TOOL_INVOKE, "T1", {"args": {"entity": "u1"}}),
        AttackStep("A1", Action.HANDOFF, "Analyze"),
    ))
    res = trace(spec, chain)
    assert res.overall is Overall.COMPLETED and res.intercept_index is None


@pytest.mark.parametrize("raw", [
    {"id": "x", "steps": []},
    {"id": "x", "steps": [{"actor": "A9", "action": "ToolInvoke", "target": "T1"}]},
    {"id": "x", "steps": [{"actor": "A1", "action": "ToolInvoke", "target": "M1"}]},
    {"id": "x", "steps": [{"actor": "A1", "action": "FeedPublish", "target": "E1"}]},
    {"id": "x", "steps": [{"actor": "A1", "action": "Handoff", "target": "Nowhere"}]},
])
def test_bad_chains(spec, raw):
    with pytest.raises(ConfigError):
        trace_flat(spec, chain_from_dict(raw))


@pytest.mark.parametrize("raw", [
    {"steps": []},
    {"id": "x", "steps": [{"actor": "A1", "action": "Teleport", "target": "T1"}]},
    {"id": "x", "steps": [{"actor": "A1", "action": "Handoff", "target": "Analyze"}],
     "expected": {"intercept": 3, "outcome": "Intercepted"}},
])
def test_malformed_chain_documents(raw):
    with pytest.raises(ConfigError):
        chain_from_dict(raw)


def test_unknown_builtin():
    with pytest.raises(ConfigError):
        builtin_chain("AP-9")


def test_chain_file_round_trip(tmp_path):
    path = tmp_path / "chains.json"
    path.write_text(json.dumps({"chains": [c.to_dict() for c in builtin_paper_chains()]}))
    assert load_chains(path) == builtin_paper_chains()


def test_replay_is_seeded(spec):
    chain = builtin_chain("AP-3")
    a = trace(spec, chain, seed=1).to_dict()
    assert a == trace(spec, chain, seed=1).to_dict()
    assert a["summary"] == trace(spec, chain, seed=2).to_dict()["summary"]


def test_replay_shares_kernel(spec):
    kernel = deploy(spec, KernelConfig())
    results = [replay(kernel, c) for c in builtin_paper_chains()]
    assert [r.intercept_index for r in results] == [2, 1, 2, 1]
    assert kernel.executed == [] or all(a.action_class.value == "reversible" for a in kernel.executed)


def test_render_results(spec):
    table = render_results([trace(spec, c) for c in builtin_paper_chains()])
    assert table.splitlines()[0].split()[:2] == ["Chain", "Outcome"]
    assert "AP-4" in table


@settings(max_examples=50)
@given(st.dictionaries(st.sampled_from(["a", "b", "c"]),
                       st.sampled_from(["str", "int", "float", "bool", "list", "dict", "str?"])),
       st.integers())
def test_sample_value_conforms(schema, seed):
    import random
    from trustplane.model import check_fields
    value = sample_value(schema, random.Random(seed))
    assert check_fields(value, schema) == []
