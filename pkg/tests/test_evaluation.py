import random

import pytest
from hypothesis import given, strategies as st

from pipestages.classify import FAILED, OK, Prediction
from pipestages.errors import AlignmentError, IngestError
from pipestages.evaluation import (
    cell_label_sets,
    evaluate_cells,
    evaluate_instructions,
    load_instruction_truth,
    summarize,
    unified_label,
)
from pipestages.taxonomy import UNKNOWN, project


def p(key, label, taxonomy="v1", status=OK, duration=1.0):
    return Prediction(key, label, taxonomy, duration_ms=duration, status=status)


def test_truth_file(tmp_path, bundled):
    path = tmp_path / "t.csv"
    path.write_text("key,stage\nn:0:0,Preparation\nn:0:1,\nn:1:0,Training\n")
    truth = load_instruction_truth(path, bundled[2], "dspipelines")
    assert truth == {"n:0:0": "Preparation", "n:0:1": None, "n:1:0": "Training"}
    path.write_text("key,stage\nn:0:0,Preparation\nn:0:0,Training\n")
    with pytest.raises(IngestError, match="duplicate"):
        load_instruction_truth(path, bundled[2], "dspipelines")
    with pytest.raises(IngestError):
        load_instruction_truth(tmp_path / "missing.csv", bundled[2], "dspipelines")


def test_unified_label_lifts_source_labels(bundled):
    u = bundled[2]
    assert unified_label(p("n:0:0", "Training", "dspipelines"), u) == "Modeling"
    assert unified_label(p("n:0:0", "Modelling", "daswow"), u) == "Modeling"
    assert unified_label(p("n:0:0", "data exploration"), u) == "Data Exploration"
    assert unified_label(p("n:0:0", UNKNOWN), u) == UNKNOWN
    assert unified_label(p("n:0:0", "Modeling", status=FAILED), u) is None


@given(st.data())
def test_unified_test_equals_membership(bundled, data):
    # validity in the unified space is the same as truth being among the
    # prediction's source-side members
    u = bundled[2]
    src = bundled[0]
    truth = data.draw(st.sampled_from(src.headwords))
    label = data.draw(st.sampled_from(list(u.headwords) + [UNKNOWN]))
    report = evaluate_instructions({"t": [p("n:0:0", label)]}, {"n:0:0": truth}, u, "dspipelines")
    valid = report.treatments["t"]["outcomes"]["valid"] == 1
    members = project(u, label, "dspipelines") if label != UNKNOWN else set()
    assert valid == (truth in members)


def _treatments(keys, truth_u, rng, rates):
    out = {}
    heads = sorted(set(truth_u.values()))
    for name, rate in rates.items():
        out[name] = [p(k, truth_u[k] if rng.random() < rate else rng.choice(heads + [UNKNOWN]),
                       duration=rng.uniform(1, 9)) for k in keys]
    return out


def test_two_treatments_use_mcnemar(bundled):
    u = bundled[2]
    rng = random.Random(5)
    keys = [f"n:{i}:0" for i in range(60)]
    stages = ["Acquisition", "Preparation", "Modeling", "Evaluation"]
    truth = {k: rng.choice(stages) for k in keys}
    truth["n:0:0"] = None
    lifted = {k: u.group_of(v, "dspipelines").headword for k, v in truth.items() if v}
    treats = _treatments([k for k in keys if truth[k]], lifted, rng, {"a": 0.9, "b": 0.5})
    report = evaluate_instructions(treats, truth, u, "dspipelines")
    assert (report.items, report.excluded_unlabeled) == (59, 1)
    (test,) = report.tests
    assert test["name"] == "mcnemar(a,b)"
    a = report.treatments["a"]
    assert -1 <= a["mcc"] <= 1 and a["confusion"]["labels"][-2:] == ["None", UNKNOWN]
    assert a["duration_ms"]["count"] == 59
    assert report.treatments["a"]["outcomes"]["valid"] > report.treatments["b"]["outcomes"]["valid"]


def test_three_treatments_use_cochran_then_posthoc(bundled):
    u = bundled[2]
    rng = random.Random(9)
    keys = [f"n:{i}:0" for i in range(80)]
    truth = {k: rng.choice(["Acquisition", "Evaluation"]) for k in keys}
    lifted = {k: u.group_of(v, "dspipelines").headword for k, v in truth.items()}
    treats = _treatments(keys, lifted, rng, {"r1": 0.95, "r2": 0.9, "r3": 0.3})
    report = evaluate_instructions(treats, truth, u, "dspipelines")
    names = [t["name"] for t in report.tests]
    assert names[0] == "cochran_q" and len(names) == 4
    assert all(t["correction"] == "holm" for t in report.tests[1:])


def test_insignificant_q_has_no_posthoc(bundled):
    u = bundled[2]
    keys = [f"n:{i}:0" for i in range(10)]
    truth = {k: "Acquisition" for k in keys}
    treats = {n: [p(k, "Acquisition") for k in keys] for n in ("x", "y", "z")}
    report = evaluate_instructions(treats, truth, u, "dspipelines")
    assert [t["name"] for t in report.tests] == ["cochran_q"]


def test_missing_prediction_is_alignment_error(bundled):
    with pytest.raises(AlignmentError, match="n:1:0"):
        evaluate_instructions({"t": [p("n:0:0", "Modeling")]},
                              {"n:0:0": "Modeling", "n:1:0": "Training"}, bundled[2], "dspipelines")


def test_cell_sets_project_down(bundled):
    u = bundled[2]
    preds = [p("n:0:0", "Modeling"), p("n:0:1", "Interpretation"), p("n:0:2", UNKNOWN), p("n:1:0", None)]
    sets = cell_label_sets(preds, u, "daswow")
    assert sets == {("n", 0): frozenset({"Modelling"}), ("n", 1): frozenset()}
    assert cell_label_sets(preds, u, "dspipelines")[("n", 0)] == {"Modeling", "Training", "Interpretation"}


def test_cell_evaluation_reports_both_variants():
    truth = {("n", 0): frozenset({"A"}), ("n", 1): frozenset({"A", "B"}), ("n", 2): frozenset()}
    treats = {"t": {("n", 0): frozenset({"A", "C"}), ("n", 1): frozenset({"A", "B"}), ("n", 2): frozenset({"A"})},
              "s": {("n", 0): frozenset({"A"}), ("n", 1): frozenset({"A"}), ("n", 2): frozenset()}}
    report = evaluate_cells(treats, truth)
    assert (report.items, report.excluded_unlabeled) == (2, 1)
    t = report.treatments["t"]
    assert t["outcomes"]["valid"] == 1 and t["outcomes_containment"]["valid"] == 2
    # treatments are tested in name order: s, then t
    assert report.tests[0]["details"] == {"b": 1, "c": 1}
    contained = evaluate_cells(treats, truth, containment=True)
    assert contained.tests[0]["details"] == {"b": 0, "c": 1}


def test_summarize():
    assert summarize([]) == {"count": 0}
    s = summarize([float(i) for i in range(1, 101)])
    assert (s["median"], s["min"], s["max"], s["p95"]) == (50.5, 1.0, 100.0, 95.0)
