"""Stage-usage insights over a classified corpus.

Everything here is pure aggregation.  Labels are unified headwords; use
:func:`project_counts` / :func:`project_matrix` to move results into a
source taxonomy before comparing with published reference numbers.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from itertools import groupby
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classify import CellPrediction, Prediction, aggregate_cells
from .errors import AlignmentError, InsightError
from .ingest import key_sort
from .stats import TestResult, chi_squared_gof
from .taxonomy import UNKNOWN, UnifiedTaxonomy, project

START = "<start>"
END = "<end>"


@dataclass(frozen=True)
class Distribution:
    level: str
    counts: dict[str, float]
    unlabeled: int = 0
    unknown: int = 0

    @property
    def total(self) -> float:
        return float(sum(self.counts.values()))

    @property
    def frequencies(self) -> dict[str, float]:
        t = self.total
        return {k: v / t for k, v in self.counts.items()} if t else {}

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "counts": dict(self.counts),
            "frequencies": self.frequencies,
            "unlabeled": self.unlabeled,
            "unknown": self.unknown,
        }


def stage_frequencies(items: Iterable, level: str = "instruction",
                      stages: Sequence[str] | None = None) -> Distribution:
    """Relative stage frequencies.

    At ``instruction`` level each item is a label (or a :class:`Prediction`);
    at ``cell`` level each item is a label set (or a :class:`CellPrediction`)
    and a stage counts once per cell.  ``None``/``Unknown`` are tallied
    apart from the normalised distribution.
    """
    items = list(items)
    if not items:
        raise InsightError("no predictions to summarise")
    counts: Counter = Counter({s: 0 for s in stages or ()})
    unlabeled = unknown = 0
    if level == "instruction":
        for item in items:
            label = item.label if isinstance(item, Prediction) else item
            if isinstance(item, Prediction) and not item.valid_label and label not in (None, UNKNOWN):
                label = None
            if label is None:
                unlabeled += 1
            elif label == UNKNOWN:
                unknown += 1
            else:
                counts[label] += 1
    elif level == "cell":
        for item in items:
            if isinstance(item, CellPrediction):
                labels = item.labels
                if not labels:
                    unknown += 1 if item.unknown else 0
                    unlabeled += 0 if item.unknown else 1
            else:
                labels = frozenset(item)
                if not labels:
                    unlabeled += 1
            for label in labels:
                counts[label] += 1
    else:
        raise ValueError(f"unknown level {level!r}")
    if stages is not None:
        extra = set(counts) - set(stages)
        if extra:
            raise InsightError(f"labels outside the taxonomy: {sorted(extra)}")
        counts = Counter({s: counts[s] for s in stages})
    else:
        counts = Counter(dict(sorted(counts.items())))
    return Distribution(level, dict(counts), unlabeled, unknown)


# -- sequences -------------------------------------------------------------


@dataclass(frozen=True)
class StageSequence:
    notebook_id: str
    labels: tuple[str, ...]
    collapsed: bool = True


def collapse(labels: Sequence[str]) -> tuple[str, ...]:
    return tuple(k for k, _ in groupby(labels))


def build_sequences(predictions: Iterable[Prediction], *, collapse_runs: bool = True) -> list[StageSequence]:
    """One sequence per notebook in instruction order; instructions without
    a valid stage label are skipped."""
    by_nb: dict[str, list[Prediction]] = {}
    for p in predictions:
        by_nb.setdefault(p.notebook_id, []).append(p)
    out = []
    for nb_id in sorted(by_nb):
        preds = sorted(by_nb[nb_id], key=lambda p: key_sort(p.key))
        labels = tuple(p.label for p in preds if p.valid_label)
        out.append(StageSequence(nb_id, collapse(labels) if collapse_runs else labels, collapse_runs))
    return out


@dataclass(frozen=True)
class TransitionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray = field(repr=False)
    collapsed: bool = True
    short_sequences: int = 0

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def probabilities(self) -> np.ndarray:
        sup = self.support
        probs = np.zeros(self.counts.shape, dtype=np.float64)
        rows = sup > 0
        probs[rows] = self.counts[rows] / sup[rows, None]
        return probs

    def prob(self, a: str, b: str) -> float:
        return float(self.probabilities[self.labels.index(a), self.labels.index(b)])

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "collapsed": self.collapsed,
            "counts": self.counts.tolist(),
            "probabilities": self.probabilities.tolist(),
            "support": self.support.tolist(),
            "short_sequences": self.short_sequences,
        }


def transition_matrix(
    sequences: Sequence[StageSequence],
    labels: Sequence[str] | None = None,
    *,
    collapse_runs: bool = True,
    start_end: bool = False,
) -> TransitionMatrix:
    """Pooled first-order transition counts and probabilities."""
    if not sequences:
        raise InsightError("no sequences given")
    seqs = []
    for s in sequences:
        if collapse_runs:
            seqs.append(collapse(s.labels))
        elif s.collapsed and len(collapse(s.labels)) != len(s.labels):
            raise InsightError("sequence was built with runs collapsed")
        else:
            seqs.append(tuple(s.labels))
    states = list(labels) if labels is not None else sorted({l for s in seqs for l in s})
    unknown = {l for s in seqs for l in s} - set(states)
    if unknown:
        raise InsightError(f"sequence labels outside the legend: {sorted(unknown)}")
    if start_end:
        states = [START, *states, END]
    index = {l: i for i, l in enumerate(states)}
    counts = np.zeros((len(states), len(states)), dtype=np.int64)
    short = 0
    for seq in seqs:
        if len(seq) < 2:
            short += 1
            continue
        path = (START, *seq, END) if start_end else seq
        for a, b in zip(path, path[1:]):
            counts[index[a], index[b]] += 1
    return TransitionMatrix(tuple(states), counts, collapse_runs, short)


@dataclass(frozen=True)
class Pattern:
    stages: tuple[str, ...]
    support: int
    notebooks: int


@dataclass(frozen=True)
class PatternReport:
    n: int
    min_support: int
    patterns: tuple[Pattern, ...]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "min_support": self.min_support,
            "patterns": [
                {"stages": list(p.stages), "support": p.support, "notebooks": p.notebooks}
                for p in self.patterns
            ],
        }


def frequent_patterns(sequences: Sequence[StageSequence], n: int = 2, min_support: int = 1) -> PatternReport:
    """Contiguous stage n-grams, ranked by support then lexicographically."""
    if n < 2:
        raise InsightError("pattern length must be at least 2")
    support: Counter = Counter()
    coverage: Counter = Counter()
    for seq in sequences:
        grams = [tuple(seq.labels[i:i + n]) for i in range(len(seq.labels) - n + 1)]
        support.update(grams)
        coverage.update(set(grams))
    ranked = sorted(
        (Pattern(g, c, coverage[g]) for g, c in support.items() if c >= min_support),
        key=lambda p: (-p.support, p.stages),
    )
    return PatternReport(n, min_support, tuple(ranked))


# -- projection ------------------------------------------------------------


def project_counts(
    counts: Mapping[str, float], tax: UnifiedTaxonomy, target: str
) -> tuple[dict[str, float], dict[str, float]]:
    """Move unified-group counts onto a source taxonomy.

    A group with several members on the target side splits its count
    equally among them.  Groups with no target member are returned
    separately as ``unmapped``.
    """
    source = tax.source(target)
    out = {s: 0.0 for s in source.headwords}
    unmapped: dict[str, float] = {}
    for label, value in counts.items():
        members = sorted(project(tax, label, target))
        if not members:
            unmapped[label] = unmapped.get(label, 0.0) + value
            continue
        share = value / len(members)
        for m in members:
            out[m] += share
    return out, unmapped


def project_matrix(tm: TransitionMatrix, tax: UnifiedTaxonomy, target: str) -> tuple[TransitionMatrix, float]:
    """Project transition counts cell by cell with the same equal split.
    Returns the projected count matrix and the mass that had no target."""
    source = tax.source(target)
    pseudo = [l for l in tm.labels if l in (START, END)]
    states = [START] * (START in pseudo) + list(source.headwords) + [END] * (END in pseudo)
    index = {l: i for i, l in enumerate(states)}

    def targets(label):
        return [label] if label in (START, END) else sorted(project(tax, label, target))

    out = np.zeros((len(states), len(states)), dtype=np.float64)
    lost = 0.0
    for i, a in enumerate(tm.labels):
        for j, b in enumerate(tm.labels):
            c = tm.counts[i, j]
            if not c:
                continue
            ta, tb = targets(a), targets(b)
            if not ta or not tb:
                lost += float(c)
                continue
            share = c / (len(ta) * len(tb))
            for x in ta:
                for y in tb:
                    out[index[x], index[y]] += share
    return TransitionMatrix(tuple(states), out, tm.collapsed, tm.short_sequences), lost


# -- report ----------------------------------------------------------------


@dataclass
class InsightReport:
    taxonomy_version: str
    instruction_frequencies: Distribution
    cell_frequencies: Distribution
    transitions: dict[str, TransitionMatrix]
    patterns: list[PatternReport]
    comparisons: list[TestResult] = field(default_factory=list)
    descriptive: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def per_stage(self) -> dict[str, dict[str, float]]:
        stages = list(self.instruction_frequencies.counts)
        stages += [s for s in self.cell_frequencies.counts if s not in stages]
        return {
            s: {
                "instructions": self.instruction_frequencies.counts.get(s, 0),
                "cells": self.cell_frequencies.counts.get(s, 0),
            }
            for s in stages
        }

    def to_dict(self) -> dict:
        return {
            "taxonomy_version": self.taxonomy_version,
            "frequencies": {
                "instruction": self.instruction_frequencies.to_dict(),
                "cell": self.cell_frequencies.to_dict(),
            },
            "per_stage": self.per_stage(),
            "transitions": {k: v.to_dict() for k, v in self.transitions.items()},
            "patterns": [p.to_dict() for p in self.patterns],
            "comparisons": [c.to_dict() for c in self.comparisons],
            "descriptive": self.descriptive,
            "notes": list(self.notes),
        }


def build_insights(
    predictions: Sequence[Prediction],
    tax: UnifiedTaxonomy,
    *,
    pattern_lengths: Sequence[int] = (2, 3),
    min_support: int = 1,
    start_end: bool = False,
) -> InsightReport:
    predictions = list(predictions)
    stages = list(tax.headwords)
    inst = stage_frequencies(predictions, "instruction", stages)
    cells = stage_frequencies(aggregate_cells(predictions).values(), "cell", stages)
    transitions = {}
    for name, flag in (("collapsed", True), ("raw", False)):
        seqs = build_sequences(predictions, collapse_runs=flag)
        transitions[name] = transition_matrix(seqs, stages, collapse_runs=flag, start_end=start_end)
    seqs = build_sequences(predictions)
    patterns = [frequent_patterns(seqs, n, min_support) for n in pattern_lengths]
    return InsightReport(tax.version, inst, cells, transitions, patterns)


def _gof_dropping_structural_zeros(name: str, observed, expected, cells: Sequence[str]) -> TestResult:
    o = np.asarray(observed, dtype=np.float64).ravel()
    e = np.asarray(expected, dtype=np.float64).ravel()
    keep = (o > 0) | (e > 0)
    dropped = [c for c, k in zip(cells, keep) if not k]
    res = chi_squared_gof(o[keep], e[keep], cell_names=[c for c, k in zip(cells, keep) if k])
    details = {**res.details, "structural_zero_cells": len(dropped)}
    return TestResult(name, res.statistic, res.p_value, res.dof, res.method, None, None, details, res.flags)


def _aligned(name: str, ref_labels: Sequence[str], expected: Sequence[str]) -> None:
    missing = sorted(set(expected) - set(ref_labels))
    extra = sorted(set(ref_labels) - set(expected))
    if missing or extra:
        raise AlignmentError(
            f"{name}: reference categories do not match the taxonomy"
            f" (missing {missing}, unexpected {extra})"
        )


def compare_insights(report: InsightReport, reference: Mapping, tax: UnifiedTaxonomy) -> list[TestResult]:
    """Chi-squared goodness of fit of observed insights against a reference.

    ``reference`` names the source taxonomy it is expressed in and may hold
    ``frequencies`` (per level) and ``transitions`` (``labels`` plus a
    ``matrix`` of counts or probabilities, ``collapsed`` selecting the
    variant).  Other keys are carried into ``report.descriptive``; the
    caller decides whether to append the results to ``report.comparisons``.
    """
    target = reference.get("taxonomy")
    if target is None:
        raise AlignmentError("reference distribution does not name its taxonomy")
    source = tax.source(target)
    stages = list(source.headwords)
    results = []

    for level, ref in sorted((reference.get("frequencies") or {}).items()):
        dist = {"instruction": report.instruction_frequencies, "cell": report.cell_frequencies}.get(level)
        if dist is None:
            raise AlignmentError(f"unknown frequency level {level!r} in reference")
        _aligned(f"frequencies.{level}", list(ref), stages)
        observed, unmapped = project_counts(dist.counts, tax, target)
        if any(unmapped.values()):
            report.notes.append(f"{level} frequencies: {sum(unmapped.values()):g} counts have no {target} stage")
        results.append(_gof_dropping_structural_zeros(
            f"frequencies.{level}",
            [observed[s] for s in stages],
            [float(ref[s]) for s in stages],
            stages,
        ))

    trans = reference.get("transitions")
    if trans is not None:
        labels = list(trans["labels"])
        _aligned("transitions", labels, stages)
        variant = "collapsed" if trans.get("collapsed", True) else "raw"
        observed, lost = project_matrix(report.transitions[variant], tax, target)
        if lost:
            report.notes.append(f"transitions: {lost:g} counts have no {target} stage")
        order = [observed.labels.index(l) for l in labels]
        obs = observed.counts[np.ix_(order, order)]
        exp = np.asarray(trans["matrix"], dtype=np.float64)
        if exp.shape != (len(labels), len(labels)):
            raise AlignmentError(f"transitions: reference matrix shape {exp.shape} does not match labels")
        cells = [f"{a}->{b}" for a in labels for b in labels]
        results.append(_gof_dropping_structural_zeros(f"transitions.{variant}", obs, exp, cells))

    report.descriptive.update(
        {k: v for k, v in reference.items() if k not in ("taxonomy", "frequencies", "transitions")}
    )
    return results


# -- plot-ready output -----------------------------------------------------


def matrix_tsv(row_labels: Sequence[str], col_labels: Sequence[str], matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["", *col_labels])
    for label, row in zip(row_labels, np.asarray(matrix).tolist()):
        w.writerow([label, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def transitions_tsv(tm: TransitionMatrix, *, probabilities: bool = True) -> str:
    return matrix_tsv(tm.labels, tm.labels, tm.probabilities if probabilities else tm.counts)


def patterns_tsv(report: PatternReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["pattern", "support", "notebooks"])
    for p in report.patterns:
        w.writerow([" > ".join(p.stages), p.support, p.notebooks])
    return buf.getvalue()
