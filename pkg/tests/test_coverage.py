import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustplane.coverage import (
    Counting,
    Mark,
    MatrixError,
    UnknownPrinciple,
    UnknownVector,
    ablation_report,
    check_claims,
    empty_matrix,
    matrix_from_dict,
    principle_load,
    render_table,
    summary_mismatches,
    vector_coverage,
)
from trustplane.model import fixture_path

RAW = json.loads(fixture_path("table3_matrix.json").read_text())
MARKS = ["primary", "secondary", "none"]


def recount(doc):
    """Independent tally over the raw grid: coverage, primary load and ablation flags."""
    principles, grid = doc["principles"], doc["cells"]
    cover = [sum(m != "none" for m in row) for row in grid]
    primary = [sum(row[j] == "primary" for row in grid) for j in range(len(principles))]
    secondary = [sum(row[j] == "secondary" for row in grid) for j in range(len(principles))]
    abl = {}
    for mode, ok in (("primary", {"primary"}), ("all", {"primary", "secondary"})):
        abl[mode] = {
            p: sum(sum(m in ok for k, m in enumerate(row) if k != j) <= 1 for row in grid)
            for j, p in enumerate(principles)
        }
    return cover, primary, secondary, abl


@st.composite
def matrix_docs(draw):
    n_p = draw(st.integers(1, 6))
    n_v = draw(st.integers(1, 9))
    return {
        "principles": [f"Q{i}" for i in range(n_p)],
        "vectors": [{"id": f"V{i}", "layer": draw(st.sampled_from(["component", "coordination", "protocol"]))}
                    for i in range(n_v)],
        "cells": [[draw(st.sampled_from(MARKS)) for _ in range(n_p)] for _ in range(n_v)],
    }


def test_fixture_shape(matrix):
    assert len(matrix.vectors) == 8 and matrix.principles == ("P1", "P2", "P3", "P4", "P5")
    assert matrix.to_dict() == RAW


def test_published_cells(matrix):
    assert matrix.cell("ConfusedDeputy", "P1") is Mark.SECONDARY
    assert matrix.cell("MessageManipulation", "P3") is Mark.PRIMARY
    assert vector_coverage(matrix, "UnauthorizedAccess") == (2, frozenset({"P1", "P5"}))
    assert vector_coverage(matrix, "ConsensusManipulation") == (3, frozenset({"P1", "P3", "P4"}))


def test_loads_against_recount(matrix):
    _, primary, secondary, _ = recount(RAW)
    loads = [principle_load(matrix, p) for p in matrix.principles]
    assert loads == list(zip(primary, secondary))
    assert secondary == [1, 0, 1, 0, 2]
    # the grid carries four primary marks in the P2 and P3 columns
    assert primary == [3, 4, 4, 3, 3]


def test_stated_summary_disagrees_with_cells(matrix):
    assert RAW["summary"] == {"primary": [3, 3, 3, 3, 3], "secondary": [1, 0, 1, 0, 2]}
    got = [(m.principle, m.kind, m.stated, m.counted) for m in summary_mismatches(matrix)]
    assert got == [("P2", Mark.PRIMARY, 3, 4), ("P3", Mark.PRIMARY, 3, 4)]
    assert len(check_claims(matrix).mismatches) == 2


@settings(max_examples=100, deadline=None)
@given(matrix_docs())
def test_recounted_summary_never_mismatches(doc):
    _, primary, secondary, _ = recount(doc)
    doc = dict(doc, summary={"primary": primary, "secondary": secondary})
    m = matrix_from_dict(doc)
    assert summary_mismatches(m) == []
    assert m.to_dict() == doc


@settings(max_examples=100, deadline=None)
@given(matrix_docs(), st.randoms())
def test_coverage_invariant_under_principle_order(doc, rnd):
    order = list(range(len(doc["principles"])))
    rnd.shuffle(order)
    shuffled = dict(doc, principles=[doc["principles"][j] for j in order],
                    cells=[[row[j] for j in order] for row in doc["cells"]])
    a, b = matrix_from_dict(doc), matrix_from_dict(shuffled)
    assert all(vector_coverage(a, v) == vector_coverage(b, v) for v in a.vectors)


@settings(max_examples=100, deadline=None)
@given(matrix_docs())
def test_ablating_unused_principle_keeps_coverage(doc):
    doc = dict(doc, principles=doc["principles"] + ["Z"],
               cells=[row + ["none"] for row in doc["cells"]])
    m = matrix_from_dict(doc)
    for mode in Counting:
        rows = ablation_report(m, "Z", mode)
        expected = [sum(mode.counts(m.cell(v, p)) for p in m.principles) for v in m.vectors]
        assert [r.remaining for r in rows] == expected


def test_claims_against_recount(matrix):
    report = check_claims(matrix)
    cover, _, _, abl = recount(RAW)
    assert report.min_coverage == min(cover) >= 2
    assert report.every_vector_doubly_covered
    # two columns carry four primaries, so the load bound of three is not met by the cells
    assert report.max_primary == 4 and not report.primary_load_bounded
    assert dict(report.ablation[Counting.PRIMARY_ONLY]) == abl["primary"] == {
        "P1": 2, "P2": 4, "P3": 3, "P4": 2, "P5": 3}
    assert dict(report.ablation[Counting.PRIMARY_AND_SECONDARY]) == abl["all"] == {
        "P1": 2, "P2": 0, "P3": 1, "P4": 1, "P5": 2}
    # the "three single-layer vectors per removal" reading does not hold on this grid
    assert not report.ablation_holds(Counting.PRIMARY_ONLY)
    assert not report.ablation_holds(Counting.PRIMARY_AND_SECONDARY)


def test_ablation_rows(matrix):
    rows = ablation_report(matrix, "P2")
    assert [(r.vector, r.remaining) for r in rows if r.flagged] == [
        ("ContextContamination", 1), ("LateralCompromise", 1),
        ("CovertCoordination", 1), ("ConfusedDeputy", 1)]
    rows = ablation_report(matrix, "P5", Counting.PRIMARY_AND_SECONDARY)
    assert [(r.vector, r.remaining) for r in rows if r.flagged] == [
        ("UnauthorizedAccess", 1), ("AuthenticationBypass", 1)]


@settings(max_examples=300, deadline=None)
@given(matrix_docs())
def test_claims_match_recount(doc):
    m = matrix_from_dict(doc)
    report = check_claims(m)
    cover, primary, secondary, abl = recount(doc)
    assert report.min_coverage == min(cover)
    assert report.max_primary == max(primary)
    assert [principle_load(m, p) for p in m.principles] == list(zip(primary, secondary))
    assert dict(report.ablation[Counting.PRIMARY_ONLY]) == abl["primary"]
    assert dict(report.ablation[Counting.PRIMARY_AND_SECONDARY]) == abl["all"]


@settings(max_examples=200, deadline=None)
@given(matrix_docs())
def test_counting_secondary_never_adds_flags(doc):
    report = check_claims(matrix_from_dict(doc))
    for p, n in report.ablation[Counting.PRIMARY_AND_SECONDARY].items():
        assert n <= report.ablation[Counting.PRIMARY_ONLY][p]


def test_empty_matrix_flags_everything(matrix):
    empty = empty_matrix(matrix)
    assert vector_coverage(empty, "ConfusedDeputy") == (0, frozenset())
    assert all(n == 8 for n in check_claims(empty).ablation[Counting.PRIMARY_ONLY].values())


def test_unknown_ids(matrix):
    with pytest.raises(UnknownVector):
        vector_coverage(matrix, "Nope")
    with pytest.raises(UnknownPrinciple):
        ablation_report(matrix, "P9")


@pytest.mark.parametrize("doc", [
    [],
    {"principles": ["P1"], "vectors": ["V"], "cells": [["maybe"]]},
    {"principles": ["P1"], "vectors": ["V"], "cells": [["none", "none"]]},
    {"principles": ["P1", "P1"], "vectors": [], "cells": []},
    {"principles": ["P1"], "vectors": ["V", "V"], "cells": [["none"], ["none"]]},
    {"principles": ["P1"], "vectors": [{"id": "V", "layer": "cloud"}], "cells": [["none"]]},
    {"principles": ["P1"], "vectors": ["V"], "cells": [["none"]], "summary": {"primary": [1]}},
])
def test_malformed_matrix(doc):
    with pytest.raises(MatrixError):
        matrix_from_dict(doc)


def test_render(matrix):
    lines = render_table(matrix).splitlines()
    assert lines[-4].split() == ["Primary", "3", "4", "4", "3", "3"]
    assert lines[-3].split() == ["Secondary", "1", "0", "1", "0", "2"]
    assert lines[-2:] == ["note: P2 primary stated 3, counted 4", "note: P3 primary stated 3, counted 4"]
    assert sum(line.startswith("[") for line in lines) == 3
    assert Mark.PRIMARY.value == "primary"
