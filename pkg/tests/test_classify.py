import math
import random

import httpx
import pytest
from hypothesis import given, strategies as st

import fake_model
from oracles import rule_label_by_tokens
from pipestages.classify import (
    CONTEXT_OVERFLOW,
    FAILED,
    OK,
    TRUNCATED,
    ClassifierConfig,
    Prediction,
    PromptTemplate,
    RuleClassifier,
    SLMClassifier,
    aggregate_cell,
    aggregate_cells,
    classify_all,
    classify_rule_based,
    dumps_predictions,
    load_template,
    normalize_label,
    perplexity,
    read_predictions,
    render_prompt,
)
from pipestages.errors import AggregationError, ConfigError, PerplexityError, TemplateError
from pipestages.inference import EndpointConfig, InferenceClient
from pipestages.ingest import Cell, extract_instructions, extract_notebook, load_corpus, load_static_mapping
from pipestages.taxonomy import UNKNOWN, data_path

TEMPLATE = load_template(data_path("templates/zero-shot.txt"))


@pytest.fixture(scope="module")
def mapping(bundled):
    return load_static_mapping(data_path("stages.csv"), bundled[0])


@pytest.fixture(scope="module")
def corpus(fixtures):
    return load_corpus(fixtures / "corpus")


def instr(source, key=("nb", 0, 0)):
    (u, *_) = extract_instructions(Cell(key[1], "code", source, (), key[0]))
    return u


def pred(key, label, status=OK):
    return Prediction(key=key, label=label, taxonomy="v1", status=status)


# -- configuration ---------------------------------------------------------


def test_slm_decoding_is_fixed():
    ep = EndpointConfig(model="m")
    with pytest.raises(ConfigError):
        ClassifierConfig("slm", temperature=0.2, endpoint=ep)
    with pytest.raises(ConfigError):
        ClassifierConfig("slm", top_p=0.9, endpoint=ep)
    with pytest.raises(ConfigError):
        ClassifierConfig("slm")
    with pytest.raises(ConfigError):
        ClassifierConfig("neural")


def test_config_hash_ignores_auth_and_mode():
    a = ClassifierConfig("slm", endpoint=EndpointConfig(model="m", auth_env="A"))
    b = ClassifierConfig("slm", endpoint=EndpointConfig(model="m", auth_env=None))
    c = ClassifierConfig("slm", endpoint=EndpointConfig(model="other"))
    assert a.config_hash() == b.config_hash() != c.config_hash()


# -- templates -------------------------------------------------------------


def test_template_without_notebook_rejected():
    with pytest.raises(TemplateError, match="notebook"):
        PromptTemplate("t", "1", "$instruction $taxonomy")


def test_template_duplicate_placeholder_rejected():
    with pytest.raises(TemplateError):
        PromptTemplate("t", "1", "$instruction $notebook $taxonomy ${instruction}")


def test_template_unknown_placeholder_rejected():
    with pytest.raises(TemplateError, match="unknown"):
        PromptTemplate("t", "1", "$instruction $notebook $taxonomy $extra")


def test_bundled_templates_load():
    for name in ("zero-shot", "role"):
        t = load_template(data_path(f"templates/{name}.txt"))
        assert t.id == name


def test_missing_front_matter(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("$instruction $notebook $taxonomy")
    with pytest.raises(TemplateError, match="front matter"):
        load_template(p)


def test_render_contains_each_headword_once(bundled, corpus):
    u = bundled[2]
    nb = corpus[0]
    target = extract_notebook(nb)[3]
    text = render_prompt(TEMPLATE, target, nb, u)
    assert text == render_prompt(TEMPLATE, target, nb, u)
    for g in u.groups:
        assert text.count(f"- {g.headword}:") == 1
        assert g.definition in text
    assert nb.code() in text
    assert fake_model.instruction_of(text) == target.source


# -- normalisation ---------------------------------------------------------


def test_normalize_examples(bundled):
    from pipestages.taxonomy import MutationSpec, mutate

    u = mutate(bundled[2], MutationSpec("Modeling", "Model Training"))
    assert normalize_label("  model training.", u) == "Model Training"
    assert normalize_label("I think this is data cleaning", u) == UNKNOWN
    assert normalize_label("EDA", u) == "Data Exploration"
    assert normalize_label('"Evaluation"', u) == "Evaluation"
    assert normalize_label("", u) == UNKNOWN


@given(st.text(max_size=30))
def test_normalize_idempotent(bundled, text):
    u = bundled[2]
    label = normalize_label(text, u)
    assert label == UNKNOWN or normalize_label(label, u) == label
    assert label in set(u.headwords) | {UNKNOWN}


@given(st.sampled_from(["Acquisition", "Data Exploration", "Helper Functions", "Save Results"]),
       st.sampled_from(["", " ", "\n", "."]), st.sampled_from(["", "'", '"', "*"]), st.booleans())
def test_headword_survives_decoration(bundled, head, pad, quote, lower):
    word = head.lower() if lower else head
    assert normalize_label(f"{pad}{quote}{word}{quote}{pad}", bundled[2]) == head


# -- perplexity ------------------------------------------------------------


def test_perplexity_points():
    assert perplexity([0, 0]) == 1.0
    assert perplexity([-math.log(2), -math.log(2)]) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(PerplexityError):
        perplexity([])
    with pytest.raises(ValueError):
        perplexity([0.1])


@given(st.lists(st.floats(-20, 0), min_size=1, max_size=20))
def test_perplexity_at_least_one(lps):
    p = perplexity(lps)
    assert p >= 1.0
    if all(lp == 0 for lp in lps):
        assert p == 1.0


# -- rule-based backend ----------------------------------------------------


def test_dropna(mapping):
    p = classify_rule_based(instr("df = df.dropna()"), mapping)
    assert p.label == "Preparation"
    assert p.matches == ("dropna=Preparation",)
    assert p.duration_ms >= 0


def test_no_call_is_none(mapping):
    p = classify_rule_based(instr("x = 1"), mapping)
    assert p.label is None and p.status == OK


def test_fit_matches_token_scan(mapping):
    i = instr("model.fit(X, y)")
    assert classify_rule_based(i, mapping).label == rule_label_by_tokens(i.source, mapping.entries, mapping.legend)


def test_first_call_wins(mapping):
    p = classify_rule_based(instr("pd.read_csv(p).dropna()"), mapping)
    assert p.label == "Acquisition"
    assert len(p.matches) == 2


def test_rule_agrees_with_token_scan_on_corpus(mapping, corpus):
    n = 0
    for nb in corpus:
        for u in extract_notebook(nb):
            expected = rule_label_by_tokens(u.source, mapping.entries, mapping.legend)
            assert classify_rule_based(u, mapping).label == expected, u.source
            n += 1
    assert n > 100


# -- SLM backend -----------------------------------------------------------


def slm(bundled, handler=fake_model.handler, *, window=None, max_tokens=None, sleeps=None):
    ep = EndpointConfig(base_url="http://fake", model="fake-1", auth_env=None)
    client = InferenceClient(ep, transport=httpx.MockTransport(handler))
    cfg = ClassifierConfig("slm", endpoint=ep, context_window=window, max_tokens=max_tokens)
    sleep = sleeps.append if sleeps is not None else (lambda s: None)
    return SLMClassifier(client, TEMPLATE, bundled[2], cfg, sleep=sleep)


def test_slm_labels_and_perplexity(bundled, corpus):
    clf = slm(bundled)
    nb = corpus[0]
    units = extract_notebook(nb)
    p = clf.classify(units[0], nb)
    assert p.status == OK
    assert p.label in bundled[2].headwords or p.label == UNKNOWN
    assert p.perplexity == pytest.approx(perplexity(p.logprobs))
    assert p.duration_ms > 0


def test_max_tokens_default_and_floor(bundled):
    clf = slm(bundled)
    longest = max(len(fake_model._tokens(h)) for h in bundled[2].headwords)
    assert clf.decoding.max_tokens == longest + 2
    with pytest.raises(ConfigError):
        slm(bundled, max_tokens=longest - 1)


def test_logprobs_zero_give_perplexity_one(bundled, corpus):
    def handler(request):
        if request.url.path == "/tokenize":
            return fake_model.handler(request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "Prediction"}, "finish_reason": "stop",
                                                       "logprobs": {"content": [{"token": "P", "logprob": 0.0},
                                                                                {"token": "r", "logprob": 0.0}]}}]})

    nb = corpus[0]
    p = slm(bundled, handler).classify(extract_notebook(nb)[0], nb)
    assert p.label == "Prediction" and p.perplexity == 1.0


def test_missing_logprobs_leave_perplexity_absent(bundled, corpus):
    def handler(request):
        if request.url.path == "/tokenize":
            return httpx.Response(404)
        return httpx.Response(200, json={"choices": [{"message": {"content": "Modeling"}, "finish_reason": "stop"}]})

    nb = corpus[0]
    p = slm(bundled, handler).classify(extract_notebook(nb)[0], nb)
    assert p.label == "Modeling"
    assert p.logprobs is None and p.perplexity is None


def test_endpoint_down_gives_failed_with_retries(bundled, corpus):
    calls = []

    def handler(request):
        if request.url.path == "/tokenize":
            return fake_model.handler(request)
        calls.append(1)
        raise httpx.ConnectError("refused")

    sleeps = []
    nb = corpus[0]
    p = slm(bundled, handler, sleeps=sleeps).classify(extract_notebook(nb)[0], nb)
    assert p.status == FAILED and p.attempts == 3 and p.label is None
    assert "ConnectError" in p.error
    assert len(calls) == 3
    assert sleeps == [0.5, 1.0]


def test_transient_error_recovers(bundled, corpus):
    state = {"n": 0}

    def handler(request):
        if request.url.path != "/tokenize":
            state["n"] += 1
            if state["n"] == 1:
                return httpx.Response(503, text="busy")
        return fake_model.handler(request)

    nb = corpus[0]
    p = slm(bundled, handler).classify(extract_notebook(nb)[0], nb)
    assert p.status == OK and p.attempts == 2


def test_truncated_output(bundled, corpus):
    def handler(request):
        if request.url.path == "/tokenize":
            return fake_model.handler(request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "Data Pre"}, "finish_reason": "length"}]})

    nb = corpus[0]
    p = slm(bundled, handler).classify(extract_notebook(nb)[0], nb)
    assert p.status == TRUNCATED and p.label == UNKNOWN and not p.valid_label


def test_context_overflow(bundled, corpus):
    nb = corpus[0]
    p = slm(bundled, window=50).classify(extract_notebook(nb)[0], nb)
    assert p.status == CONTEXT_OVERFLOW and p.attempts == 0


def test_parallel_matches_serial(bundled, corpus):
    clf = slm(bundled)
    work = [(u, nb) for nb in corpus[:2] for u in extract_notebook(nb)]
    serial = classify_all(clf, work)
    parallel = classify_all(clf, work, parallelism=4)
    assert dumps_predictions(serial.values()) == dumps_predictions(parallel.values())


def test_backends_share_contract(bundled, mapping, corpus):
    nb = corpus[0]
    u = extract_notebook(nb)[0]
    for clf in (RuleClassifier(mapping), slm(bundled)):
        p = clf.classify(u, nb)
        assert isinstance(p, Prediction) and p.key == u.key and p.config_hash


# -- serialisation ---------------------------------------------------------


def test_predictions_roundtrip(tmp_path):
    preds = [Prediction("nb:1:0", "Modeling", "v1", "raw", 2.5, "h", (-0.1, -0.2), 1.16, OK, 1, ("fit=Modeling",)),
             Prediction("nb:0:3", None, "v1", status=FAILED, attempts=3, error="x")]
    path = tmp_path / "p.jsonl"
    path.write_text(dumps_predictions(preds))
    back = read_predictions(path)
    assert [p.key for p in back] == ["nb:0:3", "nb:1:0"]
    assert sorted(back, key=lambda p: p.key) == sorted(preds, key=lambda p: p.key)


def test_partial_final_line(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(dumps_predictions([pred("nb:0:0", "Modeling")]) + '{"key": "nb:0')
    with pytest.raises(ConfigError):
        read_predictions(path)
    assert len(read_predictions(path, tolerate_partial=True)) == 1


# -- aggregation -----------------------------------------------------------


def test_aggregate_examples():
    assert aggregate_cell([pred("n:0:0", "A"), pred("n:0:1", "A"), pred("n:0:2", "B")]).labels == {"A", "B"}
    assert aggregate_cell([pred("n:0:0", None), pred("n:0:1", None)]).labels == frozenset()
    with pytest.raises(AggregationError):
        aggregate_cell([pred("n:0:0", "A"), pred("n:1:0", "A")])
    with pytest.raises(AggregationError):
        aggregate_cell([])


def test_unknown_and_failed_are_counted_not_labels():
    cp = aggregate_cell([pred("n:0:0", UNKNOWN), pred("n:0:1", None, FAILED), pred("n:0:2", "A")])
    assert cp.labels == {"A"}
    assert (cp.unknown, cp.failed, cp.unlabeled) == (1, 1, 0)


def test_seven_instruction_cell_matches_distinct_filter():
    rng = random.Random(7)
    labels = [rng.choice(["A", "B", "C", None, UNKNOWN]) for _ in range(7)]
    preds = [pred(f"n:2:{i}", lab) for i, lab in enumerate(labels)]
    expected = set()
    for lab in labels:
        if lab is not None and lab != UNKNOWN and lab not in expected:
            expected.add(lab)
    assert aggregate_cell(preds).labels == expected


@given(st.lists(st.sampled_from(["A", "B", "C", None, UNKNOWN]), min_size=1, max_size=7), st.randoms())
def test_aggregate_order_invariant(labels, rnd):
    preds = [pred(f"n:0:{i}", lab) for i, lab in enumerate(labels)]
    shuffled = preds[:]
    rnd.shuffle(shuffled)
    assert aggregate_cell(preds) == aggregate_cell(shuffled)


def test_aggregate_cells_groups_by_cell():
    preds = [pred(k, lab) for k, lab in [("n:0:0", "A"), ("n:1:0", "B"), ("n:0:1", "C"), ("m:0:0", None)]]
    cells = aggregate_cells(preds)
    assert list(cells) == [("m", 0), ("n", 0), ("n", 1)]
    assert cells[("n", 0)].labels == {"A", "C"}
