"""Regenerate the test fixtures under tests/fixtures.

    python3 scripts/make_fixtures.py

Everything is deterministic: notebooks are written from the literal cell
sources below, tables come from seeded generators, and the replay cassette
is recorded against the fake model in tests/fake_model.py.
"""

from __future__ import annotations

import csv
import json
import random
import shutil
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
FIX = ROOT / "tests" / "fixtures"
sys.path.insert(0, str(ROOT / "tests"))
sys.path.insert(0, str(ROOT / "src"))

import yaml  # noqa: E402

from pipestages.classify import ClassifierConfig, RuleClassifier, SLMClassifier, load_template  # noqa: E402
from pipestages.cli import cmd_unify, load_config  # noqa: E402
from pipestages.inference import EndpointConfig, InferenceClient  # noqa: E402
from pipestages.ingest import extract_notebook, load_corpus, load_static_mapping  # noqa: E402
from pipestages.taxonomy import data_path, load_taxonomy, load_unified  # noqa: E402

DASWOW_STAGE_COLUMNS = [
    "helper_functions", "load_data", "data_preprocessing", "data_exploration", "modelling",
    "evaluation", "prediction", "result_visualization", "save_results", "comment_only",
]
DASWOW_META_COLUMNS = [
    "filename", "cell_number", "cell_type", "text", "execution_count", "linesofcode",
    "num_words", "num_chars", "num_comments", "has_import", "has_def", "has_class",
    "num_calls", "num_assignments", "num_prints", "has_plot", "has_magic",
    "markdown_before", "markdown_after", "source_repo", "kernel", "split",
]

# -- corpus ----------------------------------------------------------------

MD, CODE = "markdown", "code"

NOTEBOOKS: dict[str, list[tuple[str, str]]] = {
    "nb01_titanic": [
        (MD, "# Titanic survival\nA quick baseline."),
        (CODE, "import pandas as pd\nimport numpy as np\n%matplotlib inline"),
        (CODE, "df = pd.read_csv('train.csv')\ndf.head()"),
        (CODE, "df.info(); df.describe()"),
        (CODE, "# fill gaps\ndf['Age'] = df['Age'].fillna(df['Age'].mean())\ndf = df.dropna(subset=['Embarked'])"),
        (CODE, "X = pd.get_dummies(df[['Pclass', 'Sex', 'Age']])\ny = df['Survived']"),
        (MD, "## Model"),
        (CODE, "from sklearn.model_selection import train_test_split\nX_train, X_test, y_train, y_test = train_test_split(\n    X, y, test_size=0.2, random_state=0\n)"),
        (CODE, "from sklearn.ensemble import RandomForestClassifier\nclf = RandomForestClassifier(n_estimators=100)\nclf.fit(X_train, y_train)"),
        (CODE, "pred = clf.predict(X_test)\nfrom sklearn.metrics import accuracy_score\nprint(f\"accuracy: {accuracy_score(y_test, pred):.3f}\")"),
        (CODE, "for name, imp in zip(X.columns, clf.feature_importances_):\n    print(name, round(imp, 3))"),
        (CODE, "df.to_csv('clean.csv', index=False)"),
    ],
    "nb02_housing": [
        (MD, "# House prices"),
        (CODE, "!pip install seaborn\nimport seaborn as sns\nimport matplotlib.pyplot as plt"),
        (CODE, "houses = pd.read_csv('houses.csv')\nprint(houses.shape)"),
        (CODE, "def clean(frame):\n    \"\"\"Drop sparse columns.\"\"\"\n    frame = frame.drop(columns=['Alley'])\n    return frame.fillna(0)"),
        (CODE, "houses = clean(houses)\nhouses['Price'] = houses['Price'].astype(float)"),
        (CODE, "sns.heatmap(houses.corr())\nplt.title('Correlation')\nplt.show()"),
        (CODE, "if houses['Price'].skew() > 1:\n    houses['Price'] = np.log1p(houses['Price'])\nelif houses['Price'].skew() < -1:\n    houses['Price'] = houses['Price'] ** 2\nelse:\n    pass"),
        (CODE, "from sklearn.linear_model import LinearRegression\nmodel = LinearRegression()\nmodel.fit(houses[['Area']], houses['Price'])"),
        (CODE, "from sklearn.metrics import mean_squared_error\nrmse = np.sqrt(mean_squared_error(houses['Price'], model.predict(houses[['Area']])))\nrmse"),
        (MD, "Residuals below."),
        (CODE, "fig, ax = plt.subplots()\nax.scatter(houses['Area'], houses['Price'])\nplt.savefig('scatter.png')"),
        (CODE, "houses.price.describe?"),
    ],
    "nb03_mnist": [
        (MD, "# Digits"),
        (CODE, "%%time\nfrom tensorflow import keras\n(x_train, y_train), (x_test, y_test) = keras.datasets.mnist.load_data()"),
        (CODE, "x_train = x_train.reshape(-1, 784).astype('float32') / 255\nx_test = x_test.reshape(-1, 784).astype('float32') / 255"),
        (CODE, "model = keras.Sequential()\nmodel.add(keras.layers.Dense(128, activation='relu'))\nmodel.add(keras.layers.Dense(10, activation='softmax'))"),
        (CODE, "model.compile(optimizer='adam', loss='sparse_categorical_crossentropy', metrics=['accuracy'])"),
        (CODE, "history = model.fit(x_train, y_train, epochs=2,\n                    validation_split=0.1)"),
        (CODE, "loss, acc = model.evaluate(x_test, y_test)\nprint('test accuracy', acc)"),
        (CODE, "with open('history.json', 'w') as fh:\n    json.dump(history.history, fh)"),
        (CODE, "try:\n    model.save('mnist.h5')\nexcept OSError as err:\n    print('could not save', err)\nelse:\n    print('saved')\nfinally:\n    print('done')"),
        (CODE, "probs = model.predict(x_test[:5])\nprobs.argmax(axis=1)"),
        (CODE, "def broken(:\n    return 1"),
    ],
    "nb04_sales": [
        (MD, "# Sales report"),
        (CODE, "%%bash\nls -la data/\nhead -n 3 data/sales.csv"),
        (CODE, "sales = pd.read_json('sales.json')\nregions = pd.read_csv('regions.csv')"),
        (CODE, "sales = sales.merge(regions, on='region_id'); sales = sales.drop_duplicates()"),
        (CODE, "monthly = sales.groupby('month')['amount'].sum()\nmonthly.plot(kind='bar')"),
        (CODE, "@cache\ndef region_total(region):\n    return sales[sales.region == region].amount.sum()"),
        (CODE, "class Summary:\n    \"\"\"Per-region numbers.\"\"\"\n\n    def __init__(self, frame):\n        self.frame = frame\n\n    def top(self, n=3):\n        return self.frame.nlargest(n, 'amount')"),
        (CODE, "summary = Summary(sales)\nsummary.top()"),
        (CODE, "while monthly.max() > 1e6:\n    monthly = monthly / 10"),
        (CODE, "sales['amount'].hist(bins=20)\nplt.xlabel('amount (€)')\nplt.show()"),
        (CODE, "sales.to_pickle('sales.pkl')\n# TODO: upload"),
    ],
    "kaggle/nb05_text": [
        (MD, "# Review sentiment"),
        (CODE, "import re\nreviews = pd.read_csv('reviews.csv')"),
        (CODE, "# label balance\nreviews['label'].value_counts()"),
        (CODE, "def tokenize(text):\n    return re.findall(r'\\w+', text.lower())\n\nreviews['tokens'] = reviews['text'].apply(tokenize)"),
        (CODE, "match reviews['label'].nunique():\n    case 2:\n        task = 'binary'\n    case _:\n        task = 'multiclass'"),
        (CODE, "from sklearn.feature_extraction.text import TfidfVectorizer\nvec = TfidfVectorizer(max_features=5000)\nX = vec.fit_transform(reviews['text'])"),
        (CODE, "from sklearn.linear_model import LogisticRegression\nlr = LogisticRegression(max_iter=200)\nlr.fit(X, reviews['label'])"),
        (CODE, "from sklearn.metrics import classification_report\nprint(classification_report(reviews['label'], lr.predict(X)))"),
        (CODE, "scores = cross_val_score(lr, X, reviews['label'], cv=5); scores.mean()"),
        (CODE, "lr.predict_proba(vec.transform(['great movie', 'awful plot']))"),
        (CODE, "import pickle\npickle.dump(lr, open('model.pkl', 'wb'))"),
    ],
}


def write_notebook(path: Path, cells: list[tuple[str, str]]) -> None:
    payload = {
        "nbformat": 4,
        "nbformat_minor": 5,
        "metadata": {"kernelspec": {"name": "python3", "display_name": "Python 3", "language": "python"}},
        "cells": [],
    }
    for i, (kind, source) in enumerate(cells):
        lines = source.splitlines(keepends=True)
        cell = {"cell_type": kind, "id": f"c{i:02d}", "metadata": {}, "source": lines}
        if kind == CODE:
            cell.update(execution_count=None, outputs=[])
        payload["cells"].append(cell)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def make_corpus() -> None:
    corpus = FIX / "corpus"
    shutil.rmtree(corpus, ignore_errors=True)
    for nb_id, cells in NOTEBOOKS.items():
        write_notebook(corpus / f"{nb_id}.ipynb", cells)
    n_code = sum(1 for cells in NOTEBOOKS.values() for k, _ in cells if k == CODE)
    assert n_code == 50, n_code


# -- DASWOW-style tables ---------------------------------------------------

_SNIPPETS = {
    "helper_functions": "def helper_{i}(x):\nreturn x * {i}",
    "load_data": "df_{i} = pd.read_csv('part_{i}.csv')",
    "data_preprocessing": "df_{i} = df_{i}.dropna()",
    "data_exploration": "df_{i}.describe()",
    "modelling": "model_{i}.fit(X_{i}, y_{i})",
    "evaluation": "accuracy_score(y_{i}, p_{i})",
    "prediction": "p_{i} = model_{i}.predict(X_{i})",
    "result_visualization": "plt.plot(h_{i})",
    "save_results": "df_{i}.to_csv('out_{i}.csv')",
    "comment_only": "# note {i}",
}


def make_daswow_table() -> None:
    """1918 rows x 32 columns in the published test-split layout."""
    rng = random.Random(1918)
    rows = []
    for i in range(1918):
        k = rng.choices([0, 1, 2, 3], weights=[3, 70, 22, 5])[0]
        stages = set(rng.sample(DASWOW_STAGE_COLUMNS, k))
        text = "\n".join(_SNIPPETS[s].format(i=i) for s in DASWOW_STAGE_COLUMNS if s in stages)
        row = {s: int(s in stages) for s in DASWOW_STAGE_COLUMNS}
        row.update(
            filename=f"notebook_{rng.randrange(470):03d}.ipynb",
            cell_number=rng.randrange(60),
            cell_type="code",
            text=text,
            execution_count=rng.randrange(1, 200),
            linesofcode=text.count("\n") + 1 if text else 0,
            num_words=len(text.split()),
            num_chars=len(text),
            num_comments=text.count("#"),
            has_import=0,
            has_def=int("def " in text),
            has_class=0,
            num_calls=text.count("("),
            num_assignments=text.count(" = "),
            num_prints=0,
            has_plot=int("plt." in text),
            has_magic=0,
            markdown_before=rng.randrange(2),
            markdown_after=rng.randrange(2),
            source_repo=f"repo_{rng.randrange(100):02d}",
            kernel="python3",
            split="test",
        )
        rows.append(row)
    columns = DASWOW_META_COLUMNS[:4] + DASWOW_STAGE_COLUMNS + DASWOW_META_COLUMNS[4:]
    assert len(columns) == 32
    with open(FIX / "daswow_test_features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# the daswow stage each fixture cell is "annotated" with, keyed by (notebook, cell)
def _cell_truth(source: str) -> set[str]:
    s = source
    out = set()
    rules = [
        ("load_data", ("read_csv", "read_json", "load_data")),
        ("data_preprocessing", ("fillna", "dropna", "get_dummies", "drop(", "astype", "reshape", "merge",
                                "train_test_split", "log1p", "apply(", "fit_transform", "drop_duplicates")),
        ("data_exploration", ("head()", "describe", "info()", "value_counts", "corr()", ".shape", "nunique")),
        ("modelling", (".fit(", "Sequential", "Dense", "compile(")),
        ("evaluation", ("accuracy_score", "mean_squared_error", "evaluate(", "classification_report",
                        "cross_val_score")),
        ("prediction", (".predict(", "predict_proba")),
        ("result_visualization", ("plt.", "heatmap", ".plot(", "hist(", "scatter")),
        ("save_results", ("to_csv", "to_pickle", "json.dump", ".save(", "pickle.dump")),
        ("helper_functions", ("def ", "class ")),
    ]
    for stage, needles in rules:
        if any(n in s for n in needles):
            out.add(stage)
    if not out and s.lstrip().startswith("#"):
        out.add("comment_only")
    return out


def make_daswow_cells() -> None:
    """Label table for the fixture corpus, with indentation stripped."""
    rows = []
    for nb_id, cells in NOTEBOOKS.items():
        for i, (kind, source) in enumerate(cells):
            if kind != CODE:
                continue
            stages = _cell_truth(source)
            text = "\n".join(line.strip() for line in source.splitlines())
            rows.append({"filename": Path(nb_id).name + ".ipynb", "cell_number": i, "text": text,
                         **{s: int(s in stages) for s in DASWOW_STAGE_COLUMNS}})
    # exercise the join fallbacks
    rows[3]["cell_number"] = 99                      # wrong index, same notebook
    rows[12]["filename"] = "renamed_copy.ipynb"      # notebook renamed
    rows.append({"filename": "nb01_titanic.ipynb", "cell_number": 40,
                 "text": "this_cell_does_not_exist()", **{s: 0 for s in DASWOW_STAGE_COLUMNS}})
    rows[-1]["load_data"] = 1
    with open(FIX / "daswow_cells.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["filename", "cell_number", "text", *DASWOW_STAGE_COLUMNS],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- instruction ground truth ----------------------------------------------


def make_instruction_truth() -> None:
    """dspipelines labels per instruction: the static mapping's answer with
    seeded disagreement, and unlabeled where the mapping is silent."""
    dsp = load_taxonomy(data_path("dspipelines.yaml"))
    mapping = load_static_mapping(data_path("stages.csv"), dsp)
    rule = RuleClassifier(mapping)
    rng = random.Random(63)
    rows = []
    for nb in load_corpus(FIX / "corpus"):
        for instr in extract_notebook(nb):
            label = rule.classify(instr).label
            if label is not None and rng.random() < 0.15:
                label = rng.choice(dsp.headwords)
            rows.append((instr.key, label or ""))
    with open(FIX / "instruction_truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "stage"])
        w.writerows(rows)


def make_reference() -> None:
    """A synthetic reference distribution in the daswow taxonomy."""
    daswow = load_taxonomy(data_path("daswow.yaml"))
    stages = list(daswow.headwords)
    rng = random.Random(7)
    matrix = [[0 if a == b else rng.randrange(1, 40) for b in stages] for a in stages]
    ref = {
        "taxonomy": "daswow",
        "frequencies": {
            "instruction": {s: rng.randrange(20, 400) for s in stages},
            "cell": {s: rng.randrange(10, 200) for s in stages},
        },
        "transitions": {"collapsed": True, "labels": stages, "matrix": matrix},
        "notes": "synthetic numbers for tests; not taken from any study",
    }
    (FIX / "reference_daswow.yaml").write_text(yaml.safe_dump(ref, sort_keys=False), encoding="utf-8")


# -- replay cassette -------------------------------------------------------


def make_replay() -> None:
    from fake_model import transport

    replay = FIX / "replay"
    shutil.rmtree(replay, ignore_errors=True)
    replay.mkdir(parents=True)
    cfg = load_config(None, [], str(replay))
    cmd_unify(cfg)
    for extra in replay.glob("*.manifest.json"):
        extra.unlink()
    unified = load_unified(replay / "unified.yaml")
    cassette = replay / "cassette.jsonl"
    endpoint = EndpointConfig(base_url="http://fake-model.invalid", model="fake-slm-1",
                              mode="record", cassette=str(cassette), auth_env=None)
    client = InferenceClient(endpoint, transport=transport())
    template = load_template(data_path("templates") / "zero-shot.txt")
    ccfg = ClassifierConfig("slm", taxonomy_version=unified.version, template_id=template.id,
                            endpoint=endpoint, context_window=8192)
    clf = SLMClassifier(client, template, unified, ccfg)
    for nb in load_corpus(FIX / "corpus"):
        for instr in extract_notebook(nb):
            clf.classify(instr, nb)
    config = {
        "unified": "unified.yaml",
        "classify": {
            "corpus": "../corpus",
            "backend": "slm",
            "template": "zero-shot",
            "context_window": 8192,
            "endpoint": {
                "base_url": "http://fake-model.invalid",
                "model": "fake-slm-1",
                "mode": "replay",
                "cassette": "cassette.jsonl",
                "auth_env": None,
            },
        },
    }
    (replay / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")


if __name__ == "__main__":
    make_corpus()
    make_daswow_table()
    make_daswow_cells()
    make_instruction_truth()
    make_reference()
    make_replay()
    print("fixtures written to", FIX)
