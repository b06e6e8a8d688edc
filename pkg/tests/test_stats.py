import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.metrics import f1_score, matthews_corrcoef
from statsmodels.stats.contingency_tables import cochrans_q as sm_cochrans_q
from statsmodels.stats.contingency_tables import mcnemar as sm_mcnemar
from statsmodels.stats.inter_rater import fleiss_kappa as sm_fleiss

from oracles import chi2_direct, cochran_q_direct, f1_direct, fleiss_direct, mcc_direct, mcnemar_exact_fraction
from pipestages.errors import AlignmentError, MetricError, StatTestError
from pipestages.stats import (
    BinaryOutcomeVector,
    ConfusionMatrix,
    binarize,
    chi_squared_gof,
    cochran_q,
    fleiss_kappa,
    holm,
    mcc,
    mcc_degenerate,
    mcnemar,
    mcnemar_counts,
    outcome_matrix,
    per_class_f1,
    posthoc_mcnemar,
)
from pipestages.taxonomy import UNKNOWN

LABELS = ("A", "B", "C")


def cm(counts, labels=None):
    counts = np.asarray(counts)
    return ConfusionMatrix(labels or tuple("ABCDEFG"[: len(counts)]), counts)


def vec(outcomes, name=""):
    return BinaryOutcomeVector(tuple(range(len(outcomes))), tuple(bool(x) for x in outcomes), name)


square = st.integers(2, 5).flatmap(lambda k: arrays(np.int64, (k, k), elements=st.integers(0, 12)))
binary_matrix = st.tuples(st.integers(1, 40), st.integers(2, 6)).flatmap(
    lambda s: arrays(np.int64, s, elements=st.integers(0, 1)))


# -- binarize --------------------------------------------------------------


def test_identical_labels_all_valid():
    truth = {1: "A", 2: "B", 3: "C"}
    v = binarize(dict(truth), truth)
    assert v.outcomes == (True, True, True)


def test_cell_set_partial_match():
    v = binarize({"c": {"A"}}, {"c": {"A", "B"}}, "cell-set")
    assert v.outcomes == (False,) and v.jaccard == (0.5,)
    assert binarize({"c": {"A", "B", "C"}}, {"c": {"A", "B"}}, "cell-set", containment=True).outcomes == (True,)


def test_unknown_and_none_invalid():
    v = binarize({1: UNKNOWN, 2: None, 3: "A"}, {1: UNKNOWN, 2: None, 3: "A"})
    assert v.outcomes == (False, False, True)


def test_key_mismatch():
    with pytest.raises(AlignmentError):
        binarize({1: "A"}, {2: "A"})
    with pytest.raises(AlignmentError):
        outcome_matrix([vec([1, 0]), BinaryOutcomeVector(("x", "y"), (True, False))])


# -- MCC and F1 ------------------------------------------------------------


def test_mcc_fixed_points():
    assert mcc(cm([[5, 0], [0, 5]])) == 1.0
    assert mcc(cm([[0, 5], [5, 0]])) == -1.0
    degenerate = cm([[5, 0], [5, 0]])
    assert mcc(degenerate) == 0.0 and mcc_degenerate(degenerate)
    with pytest.raises(MetricError):
        mcc(cm([[0, 0], [0, 0]]))


@pytest.mark.filterwarnings("ignore:A single label")
@given(square)
def test_mcc_matches_direct_and_sklearn(m):
    if m.sum() == 0:
        return
    got = mcc(cm(m))
    assert -1.0 <= got <= 1.0
    assert got == pytest.approx(mcc_direct(m.tolist()), abs=1e-9)
    y_true = [i for i in range(len(m)) for j in range(len(m)) for _ in range(m[i, j])]
    y_pred = [j for i in range(len(m)) for j in range(len(m)) for _ in range(m[i, j])]
    assert got == pytest.approx(matthews_corrcoef(y_true, y_pred), abs=1e-9)


@given(square)
def test_f1_matches_direct_and_sklearn(m):
    if m.sum() == 0:
        return
    report = per_class_f1(cm(m))
    k = len(m)
    y_true = [i for i in range(k) for j in range(k) for _ in range(m[i, j])]
    y_pred = [j for i in range(k) for j in range(k) for _ in range(m[i, j])]
    sk = f1_score(y_true, y_pred, labels=list(range(k)), average=None, zero_division=0)
    for i, label in enumerate(cm(m).labels):
        assert report.f1[label] == pytest.approx(f1_direct(m.tolist(), i), abs=1e-9)
        assert report.f1[label] == pytest.approx(sk[i], abs=1e-9)
        assert 0.0 <= report.f1[label] <= 1.0
    assert report.accuracy == pytest.approx(np.trace(m) / m.sum())
    assert sum(report.support.values()) == m.sum()


def test_f1_perfect_and_zero_support():
    r = per_class_f1(cm([[3, 0, 0], [0, 4, 0], [0, 0, 0]]))
    assert r.f1 == {"A": 1.0, "B": 1.0, "C": 0.0}
    assert r.accuracy == 1.0 and r.zero_support == ("C",)


def test_weak_prediction_class_f1():
    # 29 correct, 71 false alarms, 71 misses for the target class
    r = per_class_f1(cm([[29, 71], [71, 0]], ("Prediction", "Other")))
    assert r.f1["Prediction"] == pytest.approx(0.29, abs=0.005)


def test_from_pairs_bookkeeping():
    pairs = [("A", "A"), ("A", "B"), ("B", None), ("C", UNKNOWN), ("C", "C")]
    m = ConfusionMatrix.from_pairs(pairs, LABELS)
    assert m.labels == ("A", "B", "C", "None", UNKNOWN)
    assert m.total == len(pairs)
    assert m.support() == {"A": 2, "B": 1, "C": 2, "None": 0, UNKNOWN: 0}
    dropped = ConfusionMatrix.from_pairs(pairs, LABELS, invalid_columns=False)
    assert dropped.total == 3
    with pytest.raises(MetricError):
        ConfusionMatrix.from_pairs([("Z", "A")], LABELS)


# -- McNemar ---------------------------------------------------------------


def test_mcnemar_exact_fixed_point():
    r = mcnemar_counts(2, 8)
    assert r.method == "exact"
    assert r.p_value == pytest.approx(112 / 1024, abs=1e-12)
    assert Fraction(112, 1024) == mcnemar_exact_fraction(2, 8)


def test_mcnemar_asymptotic_fixed_point():
    r = mcnemar_counts(30, 10)
    assert (r.statistic, r.dof, r.method) == (10.0, 1, "asymptotic")


def test_mcnemar_identical_vectors():
    r = mcnemar(vec([1, 0, 1]), vec([1, 0, 1]))
    assert r.p_value == 1.0 and r.statistic == 0.0 and "no-discordance" in r.flags


@given(st.integers(0, 60), st.integers(0, 60))
def test_mcnemar_matches_references(b, c):
    r = mcnemar_counts(b, c)
    assert 0.0 <= r.p_value <= 1.0
    if b + c == 0:
        return
    table = [[5, b], [c, 7]]
    if b + c < 25:
        assert r.p_value == pytest.approx(float(mcnemar_exact_fraction(b, c)), abs=1e-9)
        assert r.p_value == pytest.approx(sm_mcnemar(table, exact=True).pvalue, abs=1e-9)
    else:
        ref = sm_mcnemar(table, exact=False, correction=False)
        assert r.statistic == pytest.approx(ref.statistic, abs=1e-9)
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-9)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60), st.integers(0, 20), st.booleans())
def test_concordant_items_never_matter(pairs, extra, value):
    a = [p for p, _ in pairs]
    b = [q for _, q in pairs]
    base = mcnemar(vec(a), vec(b))
    grown = mcnemar(vec(a + [value] * extra), vec(b + [value] * extra))
    assert (base.statistic, base.p_value) == (grown.statistic, grown.p_value)


# -- Cochran's Q -----------------------------------------------------------


def test_cochran_identical_treatments():
    r = cochran_q([[1, 1, 1], [0, 0, 0], [1, 1, 1]])
    assert (r.statistic, r.p_value) == (0.0, 1.0)


def test_cochran_needs_two_treatments():
    with pytest.raises(StatTestError):
        cochran_q([[1], [0]])
    with pytest.raises(StatTestError):
        cochran_q([[2, 0]])


@given(binary_matrix)
def test_cochran_matches_references(x):
    r = cochran_q(x)
    assert r.dof == x.shape[1] - 1
    assert r.statistic == pytest.approx(cochran_q_direct(x.tolist()), abs=1e-9)
    if not np.all(x == x[:, :1]):
        ref = sm_cochrans_q(x, return_object=True)
        assert r.statistic == pytest.approx(ref.statistic, abs=1e-9)
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-9)


@given(arrays(np.int64, st.tuples(st.integers(1, 50), st.just(2)), elements=st.integers(0, 1)))
def test_cochran_two_treatments_is_mcnemar(x):
    b = int(np.sum((x[:, 0] == 1) & (x[:, 1] == 0)))
    c = int(np.sum((x[:, 0] == 0) & (x[:, 1] == 1)))
    expected = 0.0 if b + c == 0 else (b - c) ** 2 / (b + c)
    assert cochran_q(x).statistic == pytest.approx(expected, abs=1e-9)


def test_cochran_accepts_vectors():
    r = cochran_q([vec([1, 0, 1, 1]), vec([0, 0, 1, 0]), vec([1, 1, 1, 0])])
    assert r.details["column_totals"] == [3, 1, 3]


# -- post hoc and Holm -----------------------------------------------------


def test_holm_by_hand():
    p = [0.01, 0.04, 0.03]
    # sorted: 0.01*3=0.03, 0.03*2=0.06, 0.04*1=0.04 -> monotone max 0.06
    assert holm(p) == pytest.approx([0.03, 0.06, 0.06])


def test_posthoc_count_and_identical():
    x = np.array([[1, 1, 1], [0, 0, 0], [1, 1, 1]])
    results = posthoc_mcnemar(x, ["r", "s", "t"])
    assert len(results) == 3
    assert all(r.p_adjusted == 1.0 and r.correction == "holm" for r in results)
    assert [r.name for r in results] == ["mcnemar(r,s)", "mcnemar(r,t)", "mcnemar(s,t)"]


def test_posthoc_one_deviant():
    good = [1] * 30 + [0] * 10
    deviant = [0] * 30 + [1] * 10
    x = np.array([good, good[:-2] + [1, 1], deviant]).T
    results = posthoc_mcnemar(x, ["g1", "g2", "bad"])
    raw = [r.p_value for r in results]
    order = sorted(range(3), key=lambda i: raw[i])
    expected = [0.0] * 3
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (3 - rank) * raw[i]))
        expected[i] = running
    assert [r.p_adjusted for r in results] == pytest.approx(expected)
    assert not results[0].significant()
    assert results[1].significant() and results[2].significant()


# -- goodness of fit -------------------------------------------------------


def test_gof_fixed_points():
    r = chi_squared_gof([10, 20, 30], [20, 20, 20])
    assert (r.statistic, r.dof) == (10.0, 2)
    same = chi_squared_gof([4, 5, 6], [4, 5, 6])
    assert (same.statistic, same.p_value) == (0.0, 1.0)
    assert chi_squared_gof(np.ones((3, 3)) * 7, np.ones((3, 3))).dof == 8


def test_gof_zero_expected_names_cell():
    with pytest.raises(StatTestError, match="A->B"):
        chi_squared_gof([1, 2], [3, 0], cell_names=["A->A", "A->B"])


def test_gof_low_expected_flag():
    assert "low-expected-counts" in chi_squared_gof([1, 2, 3], [1, 1, 1]).flags


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(1, 50)), min_size=2, max_size=12),
       st.floats(0.01, 100))
def test_gof_matches_direct_and_scaling(cells, scale):
    obs = [o for o, _ in cells]
    exp = [e for _, e in cells]
    if sum(obs) == 0:
        return
    r = chi_squared_gof(obs, exp)
    assert r.statistic == pytest.approx(chi2_direct(obs, exp), abs=1e-9, rel=1e-9)
    scaled = chi_squared_gof(obs, [e * scale for e in exp])
    assert scaled.statistic == pytest.approx(r.statistic, rel=1e-9, abs=1e-9)
    assert 0.0 <= r.p_value <= 1.0


# -- Fleiss' kappa ---------------------------------------------------------


def test_fleiss_unanimous():
    assert fleiss_kappa([[3, 0, 0], [0, 3, 0], [0, 0, 3]]) == 1.0
    assert fleiss_kappa([[3, 0], [3, 0]]) == 1.0


def test_fleiss_unequal_raters():
    with pytest.raises(StatTestError):
        fleiss_kappa([[3, 0], [1, 1]])


@given(st.integers(2, 6).flatmap(lambda k: st.integers(2, 5).flatmap(
    lambda n: st.lists(st.lists(st.integers(0, n), min_size=k, max_size=k), min_size=1, max_size=15).map(
        lambda rows: [_complete(r, n) for r in rows]))))
def test_fleiss_matches_references(table):
    got = fleiss_kappa(table)
    assert got == pytest.approx(fleiss_direct(table), abs=1e-9)
    if not math.isclose(sum(x * x for x in _pj(table)), 1.0):
        assert got == pytest.approx(sm_fleiss(np.array(table)), abs=1e-9)


def _complete(row, n):
    # trim or pad a random row so it holds exactly n ratings
    out, left = [], n
    for x in row[:-1]:
        take = min(x, left)
        out.append(take)
        left -= take
    return out + [left]


def _pj(table):
    n = sum(table[0])
    return [sum(r[j] for r in table) / (len(table) * n) for j in range(len(table[0]))]
