import dataclasses
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustplane.audit import events, verify_audit_chain
from trustplane.deploy import ISSUER_ID, build_manifest, deploy, derive_key, server_id
from trustplane.errors import PhaseConflict, SignatureInvalid, StaleVersion, UnknownIssuer, UnknownTool
from trustplane.kernel import Client, Envelope, Kernel, KernelConfig, Response, StubServer

from .fuzzing import envelope_stream, safety_violations


def trail(kernel, ref):
    return [e for e in events(kernel.audit.records) if e.get("ref") == ref]


# -- registration -----------------------------------------------------------


def fresh_kernel(spec, **kw):
    k = Kernel(spec, KernelConfig(**kw))
    k.enroll_issuer(derive_key(ISSUER_ID))
    return k


def test_register_monitor_server(spec):
    k = fresh_kernel(spec)
    m = build_manifest(spec, "Monitor", derive_key(ISSUER_ID), derive_key("monitor-server"))
    reg = k.register_server(m)
    assert reg.phase == "Monitor" and sorted(k.tool_server) == ["T1", "T2", "T3", "T4"]
    with pytest.raises(StaleVersion):
        k.register_server(m)
    bumped = build_manifest(spec, "Monitor", derive_key(ISSUER_ID), derive_key("monitor-server"), version=2)
    assert k.register_server(bumped).manifest.version == 2


def test_register_rejects_out_of_phase_tool(spec):
    k = fresh_kernel(spec)
    m = build_manifest(spec, "Monitor", derive_key(ISSUER_ID), derive_key("monitor-server"),
                       tools=["T1", "T8"])
    with pytest.raises(PhaseConflict):
        k.register_server(m)
    assert k.audit.records[-1].event["outcome"] == "PhaseConflict"


def test_register_rejects_bad_issuers(spec):
    k = fresh_kernel(spec)
    rogue = build_manifest(spec, "Monitor", derive_key("rogue"), derive_key("monitor-server"))
    with pytest.raises(UnknownIssuer):
        k.register_server(rogue)
    forged = dataclasses.replace(rogue, issuer_key_id=ISSUER_ID)
    with pytest.raises(SignatureInvalid):
        k.register_server(forged)
    bogus = build_manifest(spec, "Monitor", derive_key(ISSUER_ID), derive_key("x"), tools=["T99"])
    with pytest.raises(UnknownTool):
        k.register_server(bogus)


def test_register_catches_tool_already_served(spec):
    k = fresh_kernel(spec)
    issuer = derive_key(ISSUER_ID)
    k.register_server(build_manifest(spec, "Monitor", issuer, derive_key("monitor-server")))
    other = dataclasses.replace(
        build_manifest(spec, "Monitor", issuer, derive_key("shadow")), server_id="shadow-server")
    with pytest.raises(SignatureInvalid):
        k.register_server(other)  # renamed after signing
    from trustplane.crypto import sign_manifest
    with pytest.raises(PhaseConflict):
        k.register_server(sign_manifest(other, issuer))


# -- authorize and dispatch -------------------------------------------------


def test_in_phase_invoke_executes(kernel):
    a1 = Client(kernel, "A1")
    before = len(kernel.audit)
    resp = a1.invoke("T2", "lookup_asset", {"asset": "web-01"})
    assert resp.ok and resp.result["tool"] == "T2" and resp.result["status"] == "ok"
    assert len(kernel.audit) - before >= 2
    kinds = [(e["kind"], e.get("stage")) for e in trail(kernel, "A1-session#1")]
    assert kinds == [("checkpoint", "p1"), ("checkpoint", "p2"), ("consensus", None),
                     ("checkpoint", "p3"), ("execute", None), ("response", None), ("dispatch", None)]


def test_out_of_phase_invoke_is_denied(kernel):
    resp = Client(kernel, "A1").invoke("T8", "modify_access", {"principal": "svc", "change": "grant"})
    assert resp.code == "CapabilityDenied" and resp.principles[0] == "P2"
    assert kernel.executed == [] and kernel.escalations == []


def test_unknown_tool(kernel):
    resp = Client(kernel, "A1").invoke("T99", "op")
    # the error itself names no principle; the corroborating vote adds P3
    assert resp.code == "UnknownTool" and resp.principles == ("P3",)
    k = deploy(kernel.spec, KernelConfig.only("P1", "P2"))
    assert Client(k, "A1").invoke("T99", "op").principles == ()


def test_extra_parameters_are_narrowed(kernel):
    resp = Client(kernel, "A4").invoke("T13", "publish_report", {"title": "t", "body": "b", "secret": 1})
    assert resp.ok and resp.constraints[0]["removed"] == ["secret"]
    assert resp.principles == ("P2",)


def test_tampered_response_is_quarantined(kernel):
    kernel.stubs["monitor-server"].tamper = lambda p: {**p, "status": "rule deleted"}
    resp = Client(kernel, "A1").invoke("T1", "score_entity", {"entity": "u1"})
    assert resp.code == "SignatureInvalid" and resp.error["data"]["stage"] == "p1.response"
    assert len(kernel.quarantine) == 1 and kernel.quarantine[0]["payload"]["status"] == "rule deleted"
    assert [e["status"] for e in trail(kernel, "A1-session#1") if e["kind"] == "response"] == ["quarantined"]


def test_unknown_method_is_audited(kernel):
    a1 = Client(kernel, "A1")
    resp = a1.call("tools/delete", {})
    assert resp.code == "MethodNotFound"
    assert trail(kernel, "A1-session#1")[-1]["outcome"] == "MethodNotFound"


def test_replay_and_closed_sessions(kernel):
    a1 = Client(kernel, "A1")
    env = a1.envelope("tools/list", {})
    assert kernel.dispatch(env).ok
    assert kernel.dispatch(env).code == "ReplayDetected"
    a1.call("session/close", {})
    assert a1.call("tools/list", {}).code == "SessionClosed"


def test_origin_must_own_session(kernel):
    Client(kernel, "A1")
    env = Envelope(5, "A1-session", "A3", "tools/list", {})
    assert kernel.dispatch(env).code == "OriginMismatch"
    assert kernel.dispatch(Envelope(0, "x", "mallory", "session/open", {})).code == "OriginMismatch"


def test_server_envelopes_need_server_signature(kernel):
    Client(kernel, "A3")
    env = Envelope(1, "A3-session", "admin-server", "tools/invoke",
                   {"tool": "T9", "operation": "update_rules", "args": {"rule": "r", "action": "delete"},
                    "context_refs": [], "plan": ""}, sig="AAAA")
    resp = kernel.dispatch(env)
    assert resp.code == "SignatureInvalid" and set(resp.principles) == {"P1", "P3"}
    signed = dataclasses.replace(env, id=2, sig=None).signed(derive_key("admin-server"))
    assert kernel.dispatch(signed).code == "CapabilityDenied"
    assert kernel.executed == []


def test_tools_list_is_phase_scoped(kernel):
    assert Client(kernel, "A2").call("tools/list", {}).result == {"tools": ["T5", "T6", "T7"]}
    flat = deploy(kernel.spec, KernelConfig.flat())
    assert len(Client(flat, "A2").call("tools/list", {}).result["tools"]) == 16


def test_handoff(kernel):
    a1 = Client(kernel, "A1")
    assert a1.handoff("Analyze").result == {"from": "Monitor", "to": "Analyze"}
    denied = a1.handoff("Admin")
    assert denied.code == "HandoffDenied" and denied.principles == ("P2",)


def test_irreversible_without_evidence_escalates(kernel):
    a3 = Client(kernel, "A3")
    resp = a3.invoke("T11", "quarantine_host", {"host": "web-01"})
    assert resp.code == "ConsensusEscalated"
    assert kernel.pending_escalations() == [0] and kernel.executed == []
    ok = a3.invoke("T11", "quarantine_host", {"host": "db-01"}, ["M2/host-db-01"])
    assert ok.ok and kernel.executed[-1].tool == "T11"


def test_review_never_executes(kernel):
    a3 = Client(kernel, "A3")
    a3.invoke("T11", "quarantine_host", {"host": "web-01"})
    n_exec = len(kernel.executed)
    esc = kernel.review(0, approve=True)
    assert esc.status == "approved" and len(kernel.executed) == n_exec
    with pytest.raises(ValueError):
        kernel.review(0, approve=False)
    # after approval the agent may re-propose, this time with evidence
    assert a3.invoke("T11", "quarantine_host", {"host": "web-01"}, ["M2/host-web-01"]).ok


def test_memory_methods_proxy(kernel):
    a4 = Client(kernel, "A4")
    resp = a4.read("M11", "aar-000")
    assert resp.ok and "raw_forensics" not in resp.result["value"]
    assert resp.principles == ("P5",)
    assert a4.read("M2", "host-web-01").code == "AccessDenied"
    w = Client(kernel, "A2").write("M6", "case-9", {"title": "t", "status": "open"}, ["M2/host-web-01"])
    assert w.ok and w.result["version"] == 1


def test_response_dict_shapes():
    r = Response(1, "s", error={"code": "X", "principles": ["P2"]},
                 constraints=({"principles": ["P5", "P2"]},))
    assert r.principles == ("P2", "P5") and r.to_dict()["error"]["code"] == "X"
    env = Envelope(3, "s", "A1", "tools/list", {})
    assert Envelope.from_dict(env.to_dict()) == env


def test_concurrent_submitters_get_gapless_audit(kernel):
    clients = [Client(kernel, a) for a in ("A1", "A2", "A3", "A4")]
    envs = [[c.envelope("tools/list", {}) for _ in range(50)] for c in clients]

    def feed(batch):
        for e in batch:
            kernel.submit(e)

    threads = [threading.Thread(target=feed, args=(b,)) for b in envs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    responses = kernel.drain()
    assert len(responses) == 200
    recs = kernel.audit.records
    assert [r.seq for r in recs] == list(range(len(recs))) and verify_audit_chain(recs)


def test_flat_kernel_executes_anything(spec):
    k = deploy(spec, KernelConfig.flat())
    resp = Client(k, "A1").invoke("T8", "modify_access", {"principal": "svc", "change": "grant"})
    assert resp.ok and k.executed[-1].tool == "T8"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fuzzed_stream_is_safe(spec, seed):
    k = deploy(spec, KernelConfig())
    n = sum(1 for env in envelope_stream(k, random.Random(seed), 1500) if k.dispatch(env) is not None)
    assert set(safety_violations(k, n + 4).values()) == {0}
    assert k.executed  # the stream does reach execution


def test_safety_checker_catches_unscoped_kernel(spec):
    k = deploy(spec, KernelConfig.only("P1"))
    n = sum(1 for env in envelope_stream(k, random.Random(0), 1500) if k.dispatch(env) is not None)
    found = safety_violations(k, n + 4)
    assert found["out_of_phase_executions"] > 0 and found["executions_missing_checkpoints"] > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fuzz_property(seed):
    from trustplane.model import builtin_paper_architecture
    k = deploy(builtin_paper_architecture(), KernelConfig())
    n = sum(1 for env in envelope_stream(k, random.Random(seed), 150) if k.dispatch(env) is not None)
    assert set(safety_violations(k, n + 4).values()) == {0}


def test_stub_signs_before_tamper():
    key = derive_key(server_id("Admin"))
    payload, sig = StubServer("admin-server", key, tamper=lambda p: {**p, "x": 1}).execute("T9", "op", {})
    assert payload["x"] == 1 and sig
