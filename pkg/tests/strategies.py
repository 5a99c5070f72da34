"""Hypothesis strategies for small, valid architectures."""

from __future__ import annotations

from hypothesis import strategies as st

from trustplane.model import architecture_from_dict

KINDS = ["str", "int", "list", "dict", "bool", "str?", "list?"]
MODES = ["read", "write", "rw"]


@st.composite
def architecture_docs(draw, max_agents=4, max_tools=5, max_stores=3, max_feeds=3):
    n_phases = draw(st.integers(1, 3))
    phases = [f"Ph{i}" for i in range(n_phases)]
    n_agents = draw(st.integers(n_phases, max(n_phases, max_agents)))
    agent_phase = phases + [draw(st.sampled_from(phases)) for _ in range(n_agents - n_phases)]
    agents = [{"id": f"A{i + 1}", "phase": p, "name": f"agent {i + 1}"} for i, p in enumerate(agent_phase)]

    n_tools = draw(st.integers(0, max_tools))
    tools, assignments = [], {p: [] for p in phases}
    for i in range(n_tools):
        tid = f"T{i + 1}"
        params = draw(st.one_of(st.none(), st.dictionaries(
            st.sampled_from(["a", "b", "c"]), st.sampled_from(KINDS), max_size=3)))
        op = {"name": f"op{i + 1}", "class": draw(st.sampled_from(["reversible", "irreversible"]))}
        if params is not None:
            op["params"] = params
        tools.append({"id": tid, "name": "", "operations": [op]})
        assignments[draw(st.sampled_from(phases))].append(tid)

    n_stores = draw(st.integers(0, max_stores))
    stores = []
    for i in range(n_stores):
        schema = draw(st.dictionaries(st.sampled_from(["x", "y", "z"]), st.sampled_from(KINDS),
                                      min_size=1, max_size=3))
        stores.append({"id": f"M{i + 1}", "name": "", "schema": schema})
    store_ids = [s["id"] for s in stores]

    grants = {}
    for p in phases:
        chosen = draw(st.lists(st.sampled_from(store_ids), unique=True)) if store_ids else []
        if chosen:
            grants[p] = {s: draw(st.sampled_from(MODES)) for s in chosen}

    n_feeds = draw(st.integers(0, max_feeds)) if store_ids else 0
    feeds = [{"id": f"E{i + 1}", "name": ""} for i in range(n_feeds)]
    routes = []
    for f in feeds:
        r = {"feed": f["id"], "store": draw(st.sampled_from(store_ids)), "retained": draw(st.booleans())}
        routes.append(r)

    pairs = [[a, b] for a in phases for b in phases if a != b]
    handoffs = draw(st.lists(st.sampled_from(pairs), unique_by=tuple)) if pairs else []
    return {
        "agents": agents,
        "tools": tools,
        "memory_stores": stores,
        "feeds": feeds,
        "tool_assignments": {p: ts for p, ts in assignments.items() if ts},
        "memory_grants": grants,
        "handoffs": handoffs,
        "feed_routes": routes,
    }


def architectures(**kw):
    return architecture_docs(**kw).map(architecture_from_dict)
