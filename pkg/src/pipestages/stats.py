"""Agreement metrics and paired hypothesis tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .errors import AlignmentError, MetricError, StatTestError
from .taxonomy import UNKNOWN

ALPHA = 0.05
EXACT_THRESHOLD = 25
NONE_LABEL = "None"


@dataclass(frozen=True)
class BinaryOutcomeVector:
    keys: tuple
    outcomes: tuple[bool, ...]
    name: str = ""
    jaccard: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.keys) != len(self.outcomes):
            raise AlignmentError("keys and outcomes differ in length")
        if len(set(self.keys)) != len(self.keys):
            raise AlignmentError("duplicate item keys in outcome vector")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def valid(self) -> int:
        return sum(self.outcomes)

    @property
    def rate(self) -> float:
        return self.valid / len(self) if self.keys else 0.0

    def as_dict(self) -> dict:
        return dict(zip(self.keys, self.outcomes))

    def summary(self) -> dict:
        out = {"name": self.name, "items": len(self), "valid": self.valid,
               "invalid": len(self) - self.valid, "valid_rate": self.rate}
        if self.jaccard is not None:
            out["mean_jaccard"] = float(np.mean(self.jaccard)) if self.jaccard else 0.0
        return out


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def binarize(
    predictions: Mapping[Hashable, object],
    truth: Mapping[Hashable, object],
    mode: str = "instruction",
    *,
    containment: bool = False,
    name: str = "",
) -> BinaryOutcomeVector:
    """Valid/invalid outcome per item.

    ``instruction`` mode compares single labels; ``None`` and ``Unknown``
    predictions are always invalid.  ``cell-set`` mode compares label sets
    for equality, or ``predicted ⊇ truth`` when ``containment`` is set.
    """
    if set(predictions) != set(truth):
        missing = sorted(map(str, set(truth) - set(predictions)))[:5]
        extra = sorted(map(str, set(predictions) - set(truth)))[:5]
        raise AlignmentError(f"item keys differ (missing {missing}, unexpected {extra})")
    keys = tuple(sorted(truth, key=str))
    if mode == "instruction":
        outcomes = tuple(
            predictions[k] not in (None, UNKNOWN) and predictions[k] == truth[k] for k in keys
        )
        return BinaryOutcomeVector(keys, outcomes, name)
    if mode == "cell-set":
        outcomes, jac = [], []
        for k in keys:
            p, t = frozenset(predictions[k]), frozenset(truth[k])
            outcomes.append(p >= t if containment else p == t)
            jac.append(jaccard(p, t))
        return BinaryOutcomeVector(keys, tuple(outcomes), name, tuple(jac))
    raise ValueError(f"unknown binarize mode {mode!r}")


def outcome_matrix(vectors: Sequence[BinaryOutcomeVector]) -> np.ndarray:
    """Stack aligned vectors into an items × treatments 0/1 matrix."""
    if not vectors:
        raise StatTestError("no treatments given")
    keys = vectors[0].keys
    for v in vectors[1:]:
        if v.keys != keys:
            raise AlignmentError(f"treatment {v.name!r} is not aligned with {vectors[0].name!r}")
    return np.array([v.outcomes for v in vectors], dtype=np.int64).T.reshape(len(keys), len(vectors))


# -- confusion matrices ----------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    labels: tuple[str, ...]
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.labels)
        if counts.shape != (n, n):
            raise MetricError(f"confusion matrix must be {n}x{n}, got {counts.shape}")
        if (counts < 0).any():
            raise MetricError("confusion counts must be non-negative")
        if len(set(self.labels)) != n:
            raise MetricError("duplicate class labels")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_pairs(
        cls,
        pairs: Iterable[tuple[str, str | None]],
        labels: Sequence[str],
        *,
        invalid_columns: bool = True,
    ) -> ConfusionMatrix:
        """Tally (truth, prediction) pairs.  ``None``/``Unknown`` predictions
        get their own row-columns, or are dropped when ``invalid_columns``
        is off."""
        legend = list(labels)
        if invalid_columns:
            legend += [l for l in (NONE_LABEL, UNKNOWN) if l not in legend]
        index = {l: i for i, l in enumerate(legend)}
        m = np.zeros((len(legend), len(legend)), dtype=np.int64)
        for truth, pred in pairs:
            pred = NONE_LABEL if pred is None else pred
            if truth not in index or truth in (NONE_LABEL, UNKNOWN):
                raise MetricError(f"ground-truth label {truth!r} not in class legend")
            if pred not in index:
                if not invalid_columns and pred in (NONE_LABEL, UNKNOWN):
                    continue
                raise MetricError(f"predicted label {pred!r} not in class legend")
            m[index[truth], index[pred]] += 1
        return cls(tuple(legend), m)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> dict[str, int]:
        return dict(zip(self.labels, self.counts.sum(axis=1).tolist()))

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "counts": self.counts.tolist()}


def _mcc_parts(cm: ConfusionMatrix) -> tuple[int, int]:
    """Numerator and squared denominator, in exact integer arithmetic."""
    if cm.total == 0:
        raise MetricError("MCC of an empty confusion matrix is undefined")
    c = [[int(v) for v in row] for row in cm.counts.tolist()]
    s = sum(map(sum, c))
    correct = sum(c[i][i] for i in range(len(c)))
    t = [sum(row) for row in c]
    p = [sum(col) for col in zip(*c)]
    num = correct * s - sum(a * b for a, b in zip(t, p))
    den_sq = (s * s - sum(x * x for x in p)) * (s * s - sum(x * x for x in t))
    return num, den_sq


def mcc(cm: ConfusionMatrix) -> float:
    """Multiclass Matthews correlation; 0.0 when it is degenerate."""
    num, den_sq = _mcc_parts(cm)
    if den_sq == 0:
        return 0.0
    return max(-1.0, min(1.0, num / math.sqrt(den_sq)))


def mcc_degenerate(cm: ConfusionMatrix) -> bool:
    return _mcc_parts(cm)[1] == 0


@dataclass(frozen=True)
class F1Report:
    f1: dict[str, float]
    precision: dict[str, float]
    recall: dict[str, float]
    support: dict[str, int]
    accuracy: float
    zero_support: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "classes": {
                l: {"f1": self.f1[l], "precision": self.precision[l],
                    "recall": self.recall[l], "support": self.support[l]}
                for l in self.f1
            },
            "zero_support": list(self.zero_support),
        }


def per_class_f1(cm: ConfusionMatrix, classes: Sequence[str] | None = None) -> F1Report:
    """Per-class F1 plus overall accuracy.

    Undefined precision or recall counts as 0.  Classes that appear in
    neither truth nor prediction are flagged in ``zero_support``.
    """
    if cm.total == 0:
        raise MetricError("F1 of an empty confusion matrix is undefined")
    c = cm.counts
    tp = np.diag(c)
    truth = c.sum(axis=1)
    pred = c.sum(axis=0)
    f1, prec, rec, sup, zero = {}, {}, {}, {}, []
    for i, label in enumerate(cm.labels):
        if classes is not None and label not in classes:
            continue
        p = tp[i] / pred[i] if pred[i] else 0.0
        r = tp[i] / truth[i] if truth[i] else 0.0
        f1[label] = float(2 * tp[i] / (truth[i] + pred[i])) if truth[i] + pred[i] else 0.0
        prec[label], rec[label], sup[label] = float(p), float(r), int(truth[i])
        if truth[i] == 0 and pred[i] == 0:
            zero.append(label)
    return F1Report(f1, prec, rec, sup, float(tp.sum() / cm.total), tuple(zero))


# -- hypothesis tests ------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    name: str
    statistic: float
    p_value: float
    dof: int | None = None
    method: str = ""
    correction: str | None = None
    p_adjusted: float | None = None
    details: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise StatTestError(f"{self.name}: p-value {self.p_value} outside [0, 1]")

    def significant(self, alpha: float = ALPHA) -> bool:
        p = self.p_adjusted if self.p_adjusted is not None else self.p_value
        return p < alpha

    def to_dict(self) -> dict:
        return {
            "name": self.name, "statistic": self.statistic, "dof": self.dof,
            "p_value": self.p_value, "p_adjusted": self.p_adjusted, "method": self.method,
            "correction": self.correction, "details": self.details, "flags": list(self.flags),
        }


def mcnemar_counts(b: int, c: int, *, name: str = "mcnemar") -> TestResult:
    """McNemar's test from its two discordant counts.

    Exact two-sided binomial below ``EXACT_THRESHOLD`` discordant pairs,
    otherwise the chi-square form without continuity correction.
    """
    if b < 0 or c < 0:
        raise StatTestError("discordant counts must be non-negative")
    n = b + c
    details = {"b": int(b), "c": int(c)}
    if n == 0:
        return TestResult(name, 0.0, 1.0, None, "exact", details=details, flags=("no-discordance",))
    if n < EXACT_THRESHOLD:
        p = min(1.0, 2.0 * float(sps.binom.cdf(min(b, c), n, 0.5)))
        return TestResult(name, float(min(b, c)), p, None, "exact", details=details)
    stat = (b - c) ** 2 / n
    return TestResult(name, float(stat), float(sps.chi2.sf(stat, 1)), 1, "asymptotic", details=details)


def discordant_counts(a, b) -> tuple[int, int]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    return int(np.sum(a & ~b)), int(np.sum(~a & b))


def mcnemar(a: BinaryOutcomeVector, b: BinaryOutcomeVector) -> TestResult:
    if a.keys != b.keys:
        raise AlignmentError(f"outcome vectors {a.name!r} and {b.name!r} are not aligned")
    n01, n10 = discordant_counts(a.outcomes, b.outcomes)
    name = f"mcnemar({a.name},{b.name})" if a.name or b.name else "mcnemar"
    return mcnemar_counts(n01, n10, name=name)


def _as_binary_matrix(matrix) -> np.ndarray:
    if isinstance(matrix, (list, tuple)) and matrix and isinstance(matrix[0], BinaryOutcomeVector):
        matrix = outcome_matrix(matrix)
    x = np.asarray(matrix)
    if x.ndim != 2:
        raise StatTestError("expected an items x treatments matrix")
    if not np.isin(x, (0, 1)).all():
        raise StatTestError("outcome matrix must be binary")
    return x.astype(np.int64)


def cochran_q(matrix) -> TestResult:
    """Cochran's Q over an items × treatments binary matrix (or a list of
    aligned :class:`BinaryOutcomeVector`)."""
    x = _as_binary_matrix(matrix)
    n_items, k = x.shape
    if k < 2:
        raise StatTestError("Cochran's Q needs at least two treatments")
    col = x.sum(axis=0)
    row = x.sum(axis=1)
    total = row.sum()
    den = k * total - np.sum(row**2)
    details = {"items": int(n_items), "treatments": int(k), "column_totals": col.tolist()}
    if den == 0:
        return TestResult("cochran_q", 0.0, 1.0, k - 1, "asymptotic", details=details,
                          flags=("no-informative-rows",))
    q = (k - 1) * (k * np.sum(col**2) - total**2) / den
    q = float(q)
    return TestResult("cochran_q", q, float(sps.chi2.sf(q, k - 1)), k - 1, "asymptotic", details=details)


def holm(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, in input order."""
    m = len(p_values)
    order = sorted(range(m), key=lambda i: p_values[i])
    adjusted = [0.0] * m
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p_values[i]))
        adjusted[i] = running
    return adjusted


def posthoc_mcnemar(matrix, names: Sequence[str] | None = None) -> list[TestResult]:
    """Every pairwise McNemar test, Holm-corrected."""
    x = _as_binary_matrix(matrix)
    k = x.shape[1]
    if names is None:
        if isinstance(matrix, (list, tuple)) and matrix and isinstance(matrix[0], BinaryOutcomeVector):
            names = [v.name or str(i) for i, v in enumerate(matrix)]
        else:
            names = [str(i) for i in range(k)]
    raw = []
    for i, j in combinations(range(k), 2):
        b, c = discordant_counts(x[:, i], x[:, j])
        raw.append(mcnemar_counts(b, c, name=f"mcnemar({names[i]},{names[j]})"))
    adjusted = holm([r.p_value for r in raw])
    return [
        TestResult(r.name, r.statistic, r.p_value, r.dof, r.method, "holm", adj, r.details, r.flags)
        for r, adj in zip(raw, adjusted)
    ]


def chi_squared_gof(observed, expected, *, cell_names: Sequence[str] | None = None) -> TestResult:
    """Pearson goodness of fit.  Inputs are flattened; ``expected`` may be
    counts or proportions and is rescaled to the observed total."""
    o = np.asarray(observed, dtype=np.float64).ravel()
    e = np.asarray(expected, dtype=np.float64).ravel()
    if o.shape != e.shape:
        raise StatTestError(f"observed has {o.size} cells, expected has {e.size}")
    if o.size < 2:
        raise StatTestError("goodness of fit needs at least two cells")
    if (o < 0).any() or (e < 0).any():
        raise StatTestError("counts must be non-negative")
    if o.sum() <= 0 or e.sum() <= 0:
        raise StatTestError("observed and expected totals must be positive")
    e = e * (o.sum() / e.sum())
    zero = np.flatnonzero(e <= 0)
    if zero.size:
        i = int(zero[0])
        cell = cell_names[i] if cell_names is not None else str(i)
        raise StatTestError(f"expected count is zero in cell {cell}")
    stat = float(np.sum((o - e) ** 2 / e))
    dof = o.size - 1
    low = int(np.sum(e < 5))
    flags = ("low-expected-counts",) if low else ()
    return TestResult("chi_squared_gof", stat, float(sps.chi2.sf(stat, dof)), dof, "asymptotic",
                      details={"cells": int(o.size), "low_expected_cells": low}, flags=flags)


def fleiss_kappa(counts) -> float:
    """Fleiss' kappa from an items × categories table of rating counts."""
    x = np.asarray(counts, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise StatTestError("expected a non-empty items x categories table")
    if (x < 0).any():
        raise StatTestError("rating counts must be non-negative")
    raters = x.sum(axis=1)
    n = raters[0]
    if not np.all(raters == n):
        raise StatTestError("every item needs the same number of raters")
    if n < 2:
        raise StatTestError("Fleiss' kappa needs at least two raters per item")
    p_j = x.sum(axis=0) / (x.shape[0] * n)
    p_i = (np.sum(x * x, axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_e = float(np.sum(p_j**2))
    if p_e == 1.0:
        # one category used by everyone: agreement is trivially perfect
        return 1.0
    return float((p_bar - p_e) / (1.0 - p_e))
