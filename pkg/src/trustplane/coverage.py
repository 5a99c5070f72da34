"""Principle-by-vector coverage matrix and the claims computed over it."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .model import fixture_path


class Mark(str, Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"
    NONE = "none"


class Layer(str, Enum):
    COMPONENT = "component"
    COORDINATION = "coordination"
    PROTOCOL = "protocol"


class Counting(str, Enum):
    PRIMARY_ONLY = "primary"
    PRIMARY_AND_SECONDARY = "all"

    def counts(self, mark: Mark) -> bool:
        if mark is Mark.PRIMARY:
            return True
        return mark is Mark.SECONDARY and self is Counting.PRIMARY_AND_SECONDARY


class MatrixError(ValueError):
    pass


class UnknownVector(KeyError):
    pass


class UnknownPrinciple(KeyError):
    pass


@dataclass(frozen=True)
class CoverageMatrix:
    vectors: tuple[str, ...]
    principles: tuple[str, ...]
    cells: Mapping[tuple[str, str], Mark]
    layers: Mapping[str, Layer]
    # optional stated column totals: principle -> (primary, secondary)
    summary: Mapping[str, tuple[int, int]] | None = None

    def cell(self, vector: str, principle: str) -> Mark:
        return self.cells[(vector, principle)]

    def _check_vector(self, vector: str) -> None:
        if vector not in self.vectors:
            raise UnknownVector(vector)

    def _check_principle(self, principle: str) -> None:
        if principle not in self.principles:
            raise UnknownPrinciple(principle)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "principles": list(self.principles),
            "vectors": [{"id": v, "layer": self.layers[v].value} for v in self.vectors],
            "cells": [[self.cell(v, p).value for p in self.principles] for v in self.vectors],
        }
        if self.summary is not None:
            doc["summary"] = {
                "primary": [self.summary[p][0] for p in self.principles],
                "secondary": [self.summary[p][1] for p in self.principles],
            }
        return doc


def empty_matrix(like: CoverageMatrix) -> CoverageMatrix:
    return CoverageMatrix(
        like.vectors,
        like.principles,
        {k: Mark.NONE for k in like.cells},
        like.layers,
    )


def matrix_from_dict(doc: Any) -> CoverageMatrix:
    if not isinstance(doc, dict):
        raise MatrixError("matrix document must be a JSON object")
    principles = doc.get("principles")
    vectors = doc.get("vectors")
    grid = doc.get("cells")
    if not isinstance(principles, list) or not all(isinstance(p, str) for p in principles):
        raise MatrixError("'principles' must be a list of ids")
    if not isinstance(vectors, list):
        raise MatrixError("'vectors' must be a list")
    if not isinstance(grid, list) or len(grid) != len(vectors):
        raise MatrixError("'cells' must have one row per vector")
    if len(set(principles)) != len(principles):
        raise MatrixError("duplicate principle id")

    ids: list[str] = []
    layers: dict[str, Layer] = {}
    cells: dict[tuple[str, str], Mark] = {}
    for i, (raw, row) in enumerate(zip(vectors, grid)):
        if isinstance(raw, str):
            vid, layer = raw, None
        elif isinstance(raw, dict) and isinstance(raw.get("id"), str):
            vid, layer = raw["id"], raw.get("layer")
        else:
            raise MatrixError(f"vectors[{i}] must be an id or {{id, layer}} object")
        if vid in layers:
            raise MatrixError(f"duplicate vector {vid!r}")
        try:
            layers[vid] = Layer(layer) if layer is not None else Layer.COMPONENT
        except ValueError:
            raise MatrixError(f"vectors[{i}]: unknown layer {layer!r}") from None
        ids.append(vid)
        if not isinstance(row, list) or len(row) != len(principles):
            raise MatrixError(f"cells[{i}] must have one mark per principle")
        for p, mark in zip(principles, row):
            try:
                cells[(vid, p)] = Mark(mark)
            except ValueError:
                raise MatrixError(f"cells[{i}]: unknown mark {mark!r}") from None
    summary = None
    if "summary" in doc:
        raw = doc["summary"]
        rows = [raw.get(k) if isinstance(raw, dict) else None for k in ("primary", "secondary")]
        if not all(isinstance(r, list) and len(r) == len(principles)
                   and all(isinstance(n, int) for n in r) for r in rows):
            raise MatrixError("'summary' must hold primary and secondary counts per principle")
        summary = {p: (a, b) for p, a, b in zip(principles, rows[0], rows[1])}
    return CoverageMatrix(tuple(ids), tuple(principles), cells, layers, summary)


def load_matrix(path: str | Path) -> CoverageMatrix:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MatrixError(f"not valid JSON: {exc}") from None
    return matrix_from_dict(doc)


def builtin_paper_matrix() -> CoverageMatrix:
    return load_matrix(fixture_path("table3_matrix.json"))


def vector_coverage(
    matrix: CoverageMatrix, vector: str
) -> tuple[int, frozenset[str]]:
    """Number of principles with any mark on ``vector``, and which ones."""
    matrix._check_vector(vector)
    covering = frozenset(
        p for p in matrix.principles if matrix.cell(vector, p) is not Mark.NONE
    )
    return len(covering), covering


def principle_load(matrix: CoverageMatrix, principle: str) -> tuple[int, int]:
    matrix._check_principle(principle)
    marks = [matrix.cell(v, principle) for v in matrix.vectors]
    return marks.count(Mark.PRIMARY), marks.count(Mark.SECONDARY)


@dataclass(frozen=True)
class SummaryMismatch:
    principle: str
    kind: Mark
    stated: int
    counted: int


def summary_mismatches(matrix: CoverageMatrix) -> list[SummaryMismatch]:
    """Columns whose counted marks disagree with the matrix's stated totals."""
    if matrix.summary is None:
        return []
    out = []
    for p in matrix.principles:
        counted = principle_load(matrix, p)
        for kind, stated, got in zip((Mark.PRIMARY, Mark.SECONDARY), matrix.summary[p], counted):
            if stated != got:
                out.append(SummaryMismatch(p, kind, stated, got))
    return out


@dataclass(frozen=True)
class AblationRow:
    vector: str
    remaining: int

    @property
    def flagged(self) -> bool:
        # single-layer (or no) protection left
        return self.remaining <= 1


def ablation_report(
    matrix: CoverageMatrix, removed: str, counting: Counting = Counting.PRIMARY_ONLY
) -> list[AblationRow]:
    matrix._check_principle(removed)
    rows = []
    for v in matrix.vectors:
        remaining = sum(
            1 for p in matrix.principles
            if p != removed and counting.counts(matrix.cell(v, p))
        )
        rows.append(AblationRow(v, remaining))
    return rows


@dataclass(frozen=True)
class ClaimReport:
    min_coverage: int
    max_primary: int
    # counting mode -> principle -> number of flagged vectors after removal
    ablation: Mapping[Counting, Mapping[str, int]]
    mismatches: tuple[SummaryMismatch, ...] = ()

    @property
    def every_vector_doubly_covered(self) -> bool:
        return self.min_coverage >= 2

    @property
    def primary_load_bounded(self) -> bool:
        return self.max_primary <= 3

    def ablation_holds(self, counting: Counting, at_least: int = 3) -> bool:
        """Whether removing any one principle flags at least ``at_least`` vectors."""
        return all(n >= at_least for n in self.ablation[counting].values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "min_coverage": self.min_coverage,
            "every_vector_doubly_covered": self.every_vector_doubly_covered,
            "max_primary": self.max_primary,
            "primary_load_bounded": self.primary_load_bounded,
            "ablation": {
                mode.value: {
                    "flagged": dict(per),
                    "removal_leaves_three_single_layer": self.ablation_holds(mode),
                }
                for mode, per in self.ablation.items()
            },
            "summary_mismatches": [
                {"principle": m.principle, "kind": m.kind.value, "stated": m.stated, "counted": m.counted}
                for m in self.mismatches
            ],
        }


def check_claims(matrix: CoverageMatrix) -> ClaimReport:
    coverage = [vector_coverage(matrix, v)[0] for v in matrix.vectors]
    primaries = [principle_load(matrix, p)[0] for p in matrix.principles]
    ablation = {
        mode: {
            p: sum(r.flagged for r in ablation_report(matrix, p, mode))
            for p in matrix.principles
        }
        for mode in Counting
    }
    return ClaimReport(
        min_coverage=min(coverage, default=0),
        max_primary=max(primaries, default=0),
        ablation=ablation,
        mismatches=tuple(summary_mismatches(matrix)),
    )


_GLYPH = {Mark.PRIMARY: "X", Mark.SECONDARY: "o", Mark.NONE: "."}


def render_table(matrix: CoverageMatrix) -> str:
    width = max((len(v) for v in matrix.vectors), default=6) + 2
    head = f"{'Attack Vector':<{width}}" + "".join(f"{p:>4}" for p in matrix.principles)
    lines = [head]
    layer = None
    for v in matrix.vectors:
        if matrix.layers[v] is not layer:
            layer = matrix.layers[v]
            lines.append(f"[{layer.value}]")
        lines.append(
            f"{v:<{width}}" + "".join(f"{_GLYPH[matrix.cell(v, p)]:>4}" for p in matrix.principles)
        )
    loads = [principle_load(matrix, p) for p in matrix.principles]
    lines.append(f"{'Primary':<{width}}" + "".join(f"{pr:>4}" for pr, _ in loads))
    lines.append(f"{'Secondary':<{width}}" + "".join(f"{se:>4}" for _, se in loads))
    for m in summary_mismatches(matrix):
        lines.append(f"note: {m.principle} {m.kind.value} stated {m.stated}, counted {m.counted}")
    return "\n".join(lines)
