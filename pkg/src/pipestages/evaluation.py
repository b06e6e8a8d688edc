"""Align predictions with ground truth and run the metric/test battery."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .classify import Prediction
from .errors import AlignmentError, IngestError
from .stats import (
    ALPHA,
    BinaryOutcomeVector,
    ConfusionMatrix,
    binarize,
    cochran_q,
    mcc,
    mcc_degenerate,
    mcnemar,
    per_class_f1,
    posthoc_mcnemar,
)
from .taxonomy import UNKNOWN, UnifiedTaxonomy, project

CellKey = tuple[str, int]


def load_instruction_truth(path: str | Path, tax: UnifiedTaxonomy, source: str) -> dict[str, str | None]:
    """Read a ``key,stage`` table of source-taxonomy labels.

    Blank stages mark unlabeled instructions.  Stage names are resolved
    through the source taxonomy, so aliases are accepted.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: ground-truth file not found")
    src = tax.source(source)
    out: dict[str, str | None] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"key", "stage"} <= set(reader.fieldnames):
            raise IngestError(f"{path}: expected 'key' and 'stage' columns")
        for row in reader:
            key, stage = row["key"].strip(), (row["stage"] or "").strip()
            if key in out:
                raise IngestError(f"{path}: duplicate key {key}")
            out[key] = src.stage(stage).headword if stage else None
    return out


def unified_label(pred: Prediction, tax: UnifiedTaxonomy) -> str | None:
    """A prediction's label in the unified space.

    Labels produced in a source taxonomy (the rule-based backend) are lifted
    to their group; a source stage removed during unification becomes None.
    """
    if pred.status != "ok":
        return None
    if pred.label in (None, UNKNOWN):
        return pred.label
    if pred.taxonomy in (tax.taxonomy_a.name, tax.taxonomy_b.name):
        group = tax.group_of(pred.label, pred.taxonomy)
        return group.headword if group else None
    return tax.group(pred.label).headword


def cell_label_sets(preds: Sequence[Prediction], tax: UnifiedTaxonomy, target: str) -> dict[CellKey, frozenset]:
    """Per-cell union of predicted stages, projected down to ``target``."""
    out: dict[CellKey, set] = {}
    for p in preds:
        labels = out.setdefault(p.cell_key, set())
        label = unified_label(p, tax)
        if label not in (None, UNKNOWN):
            labels |= project(tax, label, target)
    return {k: frozenset(v) for k, v in sorted(out.items())}


def summarize(values: Sequence[float]) -> dict:
    if not values:
        return {"count": 0}
    ordered = sorted(values)
    p95 = ordered[min(len(ordered) - 1, int(round(0.95 * (len(ordered) - 1))))]
    return {
        "count": len(values),
        "mean": statistics.fmean(values),
        "median": statistics.median(values),
        "p95": p95,
        "min": ordered[0],
        "max": ordered[-1],
    }


@dataclass
class EvaluationReport:
    level: str
    items: int
    excluded_unlabeled: int
    treatments: dict[str, dict] = field(default_factory=dict)
    tests: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "items": self.items,
            "excluded_unlabeled": self.excluded_unlabeled,
            "treatments": self.treatments,
            "tests": self.tests,
            "warnings": self.warnings,
        }


def _paired_tests(vectors: list[BinaryOutcomeVector], alpha: float) -> list[dict]:
    if len(vectors) < 2:
        return []
    if len(vectors) == 2:
        return [mcnemar(*vectors).to_dict()]
    q = cochran_q(vectors)
    out = [q.to_dict()]
    if q.significant(alpha):
        out += [r.to_dict() for r in posthoc_mcnemar(vectors)]
    return out


def _check_keys(name: str, have, want) -> None:
    missing = sorted(set(want) - set(have), key=str)
    if missing:
        shown = ", ".join(map(str, missing[:10]))
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        raise AlignmentError(f"treatment {name!r} has no prediction for {len(missing)} item(s): {shown}{more}")


def _timing(preds: Sequence[Prediction]) -> dict:
    return {
        "duration_ms": summarize([p.duration_ms for p in preds]),
        "perplexity": summarize([p.perplexity for p in preds if p.perplexity is not None]),
        "status": {s: sum(1 for p in preds if p.status == s) for s in sorted({p.status for p in preds})},
    }


def evaluate_instructions(
    treatments: Mapping[str, Sequence[Prediction]],
    truth: Mapping[str, str | None],
    tax: UnifiedTaxonomy,
    source: str,
    *,
    alpha: float = ALPHA,
) -> EvaluationReport:
    """Instruction-level comparison in the unified space.

    Truth labels (source stages) are lifted to their unified group, which
    makes ``pred == group(truth)`` the same test as ``truth ∈ y'(pred)``.
    """
    labeled = {k: v for k, v in truth.items() if v is not None}
    truth_u: dict[str, str | None] = {}
    for k, stage in labeled.items():
        group = tax.group_of(stage, source)
        truth_u[k] = group.headword if group else None
    dropped = [k for k, v in truth_u.items() if v is None]
    for k in dropped:
        del truth_u[k]
    report = EvaluationReport("instruction", len(truth_u), len(truth) - len(labeled))
    if dropped:
        report.warnings.append(f"{len(dropped)} truth labels belong to removed stages and were excluded")
    classes = list(tax.headwords)
    vectors = []
    for name in sorted(treatments):
        preds = {p.key: p for p in treatments[name]}
        _check_keys(name, preds, truth_u)
        pred_u = {k: unified_label(preds[k], tax) for k in truth_u}
        cm = ConfusionMatrix.from_pairs(((truth_u[k], pred_u[k]) for k in sorted(truth_u)), classes)
        vec = binarize(pred_u, truth_u, "instruction", name=name)
        vectors.append(vec)
        f1 = per_class_f1(cm, classes)
        if cm.total and mcc_degenerate(cm):
            report.warnings.append(f"{name}: MCC is degenerate (a marginal is constant)")
        if f1.zero_support:
            report.warnings.append(f"{name}: zero-support classes {list(f1.zero_support)}")
        report.treatments[name] = {
            "mcc": mcc(cm) if cm.total else None,
            "f1": f1.to_dict(),
            "confusion": cm.to_dict(),
            "outcomes": vec.summary(),
            **_timing([preds[k] for k in truth_u]),
        }
    report.tests = _paired_tests(vectors, alpha)
    return report


def evaluate_cells(
    treatments: Mapping[str, Mapping[CellKey, frozenset]],
    truth: Mapping[CellKey, frozenset | None],
    *,
    alpha: float = ALPHA,
    containment: bool = False,
    timing: Mapping[str, Sequence[Prediction]] | None = None,
) -> EvaluationReport:
    """Cell-level multi-label comparison in a source taxonomy.

    Tests use exact set equality, or ``predicted ⊇ truth`` with
    ``containment``; both outcome summaries are always reported.
    """
    labeled = {k: v for k, v in truth.items() if v}
    report = EvaluationReport("cell", len(labeled), len(truth) - len(labeled))
    vectors = []
    for name in sorted(treatments):
        sets = treatments[name]
        _check_keys(name, sets, labeled)
        pred = {k: sets[k] for k in labeled}
        exact = binarize(pred, labeled, "cell-set", name=name)
        superset = binarize(pred, labeled, "cell-set", containment=True, name=name)
        vectors.append(superset if containment else exact)
        entry = {"outcomes": exact.summary(), "outcomes_containment": superset.summary()}
        if timing and name in timing:
            cell_preds = [p for p in timing[name] if p.cell_key in labeled]
            entry.update(_timing(cell_preds))
        report.treatments[name] = entry
    report.tests = _paired_tests(vectors, alpha)
    return report
