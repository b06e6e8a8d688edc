"""Command-line entry point.

Every subcommand reads one YAML config (plus ``--set key.path=value``
overrides), writes its artifacts atomically into the output directory, and
finishes with a ``<command>.manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import __version__
from .classify import (
    ClassifierConfig,
    Prediction,
    RuleClassifier,
    SLMClassifier,
    classify_all,
    dumps_predictions,
    load_template,
    read_predictions,
)
from .errors import ConfigError, IngestError, PipeStagesError
from .evaluation import cell_label_sets, evaluate_cells, evaluate_instructions, load_instruction_truth
from .inference import EndpointConfig, InferenceClient
from .ingest import (
    IngestReport,
    extract_notebook,
    load_cell_labels,
    load_corpus,
    load_static_mapping,
    rejoin_cell_labels,
)
from .insights import build_insights, compare_insights, patterns_tsv, transitions_tsv
from .taxonomy import (
    MutationSpec,
    UnifiedTaxonomy,
    CrossMapping,
    data_path,
    dump_unified,
    load_cross_mapping,
    load_synonyms,
    load_taxonomy,
    load_unified,
    mutate,
    unify,
)

log = logging.getLogger("pipestages")

COMMANDS = ("unify", "mutate", "classify", "evaluate", "insights", "report")


# -- config ----------------------------------------------------------------


class Config:
    """Parsed run configuration; relative paths resolve against ``base``."""

    def __init__(self, data: Mapping, base: Path, output_dir: Path):
        self.data = dict(data)
        self.base = base
        self.output_dir = output_dir

    def section(self, name: str) -> dict:
        value = self.data.get(name) or {}
        if not isinstance(value, Mapping):
            raise ConfigError(f"config section {name!r} must be a mapping")
        return dict(value)

    def path(self, value: str | None, *, bundled_suffix: str | None = None, required: str = "") -> Path | None:
        if value is None:
            if required:
                raise ConfigError(f"config is missing {required}")
            return None
        p = Path(value)
        if not p.is_absolute():
            p = self.base / p
        if not p.exists() and bundled_suffix is not None:
            bundled = data_path(str(value) + bundled_suffix)
            if bundled.exists():
                return bundled
            bundled = data_path(str(value))
            if bundled.exists():
                return bundled
        return p

    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _set_path(data: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = node[part] = {}
        node = child
    node[parts[-1]] = value


def load_config(path: str | None, overrides: Sequence[str] = (), output_dir: str | None = None) -> Config:
    data: dict = {}
    base = Path.cwd()
    if path:
        p = Path(path)
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {p} must be a mapping")
        base = p.resolve().parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        _set_path(data, key.strip(), value)
    out = output_dir or data.get("output_dir") or "out"
    out_path = Path(out)
    if not out_path.is_absolute():
        out_path = (Path.cwd() if output_dir else base) / out_path
    return Config(data, base, out_path)


# -- artifacts -------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def corpus_hash(notebooks) -> str:
    h = hashlib.sha256()
    for nb in sorted(notebooks, key=lambda n: n.id):
        h.update(nb.id.encode("utf-8") + b"\0")
        h.update(_sha256_file(Path(nb.path)).encode("ascii") if nb.path else b"")
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(
    cfg: Config,
    command: str,
    outputs: Sequence[Path],
    *,
    corpus: str | None = None,
    taxonomy: str | None = None,
    classifier: str | None = None,
    extra: Mapping | None = None,
) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "corpus_hash": corpus,
        "taxonomy_version": taxonomy,
        "classifier_config_hash": classifier,
        "tool_version": __version__,
        "timestamp": _timestamp(),
        "outputs": {
            os.path.relpath(p, cfg.output_dir): _sha256_file(p) for p in sorted(outputs)
        },
        **(extra or {}),
    }
    path = cfg.output_dir / f"{command}.manifest.json"
    write_atomic(path, dumps_json(manifest))
    return path


# -- shared loaders --------------------------------------------------------


def _taxonomies(cfg: Config):
    section = cfg.section("taxonomies")
    a = load_taxonomy(cfg.path(section.get("a", "dspipelines"), bundled_suffix=".yaml"))
    b = load_taxonomy(cfg.path(section.get("b", "daswow"), bundled_suffix=".yaml"))
    return a, b


def _unified(cfg: Config) -> UnifiedTaxonomy:
    value = cfg.data.get("unified")
    if value is None:
        produced = cfg.output_dir / "unified.yaml"
        if produced.is_file():
            return load_unified(produced)
        raise ConfigError("config is missing 'unified' (run 'unify' first or point at a taxonomy file)")
    return load_unified(cfg.path(value))


# -- commands --------------------------------------------------------------


def cmd_unify(cfg: Config) -> Path:
    tax_a, tax_b = _taxonomies(cfg)
    section = cfg.section("unify")
    mapping_ref = cfg.data.get("mapping", "cross_mapping")
    if mapping_ref is None:
        mapping = CrossMapping(tax_a.name, tax_b.name, frozenset())
    else:
        mapping = load_cross_mapping(cfg.path(mapping_ref, bundled_suffix=".yaml"), tax_a, tax_b)
    unified = unify(
        tax_a,
        tax_b,
        mapping,
        headwords=section.get("headwords"),
        definitions=section.get("definitions"),
        remove=section.get("remove"),
        version=str(section.get("version", "v1")),
    )
    out = cfg.output_dir / "unified.yaml"
    write_atomic(out, dump_unified(unified))
    write_manifest(cfg, "unify", [out], taxonomy=unified.version)
    log.info("unified %d + %d stages into %d groups", len(tax_a), len(tax_b), len(unified))
    return out


def _safe(version: str) -> str:
    return version.replace("+", "_").replace("#", "-")


def cmd_mutate(cfg: Config) -> list[Path]:
    base = _unified(cfg)
    section = cfg.section("mutate")
    synonyms = load_synonyms(cfg.path(section.get("synonyms", "synonyms"), bundled_suffix=".yaml"))
    folded = {k.casefold(): [s.casefold() for s in v] for k, v in synonyms.items()}
    specs = section.get("mutations") or []
    if not isinstance(specs, list):
        raise ConfigError("mutate.mutations must be a list")
    chains: dict[str, UnifiedTaxonomy] = {}
    produced: list[UnifiedTaxonomy] = []
    for i, spec in enumerate(specs):
        if not isinstance(spec, Mapping) or "target" not in spec or "replacement" not in spec:
            raise ConfigError(f"mutation {i} needs 'target' and 'replacement'")
        target = str(spec["target"])
        try:
            group = base.group_by_id(target)
        except PipeStagesError:
            group = base.group(target)
        replacement = str(spec["replacement"])
        allowed = folded.get(group.headword.casefold(), [])
        if replacement.casefold() not in allowed:
            raise ConfigError(
                f"{replacement!r} is not a listed synonym of {group.headword!r}"
            )
        current = chains.get(group.id, base)
        step = mutate(current, MutationSpec(current.group_by_id(group.id).headword, replacement,
                                            spec.get("index")))
        chains[group.id] = step
        produced.append(step)
    outs = []
    for tax in produced:
        outs.append(cfg.output_dir / "mutations" / f"unified-{_safe(tax.version)}.yaml")
    # validate everything before writing anything
    for path, tax in zip(outs, produced):
        write_atomic(path, dump_unified(tax))
    write_manifest(cfg, "mutate", outs, taxonomy=base.version,
                   extra={"versions": [t.version for t in produced]})
    return outs


def _classifier(cfg: Config, section: dict):
    backend = section.get("backend", "rule")
    if backend == "rule":
        tax_a, tax_b = _taxonomies(cfg)
        source = section.get("mapping_taxonomy", tax_a.name)
        tax = tax_a if source == tax_a.name else tax_b if source == tax_b.name else None
        if tax is None:
            raise ConfigError(f"unknown mapping taxonomy {source!r}")
        mapping = load_static_mapping(
            cfg.path(section.get("static_mapping", "stages.csv"), bundled_suffix=""),
            tax,
            section.get("legend"),
        )
        ccfg = ClassifierConfig("rule", taxonomy_version=tax.name)
        return RuleClassifier(mapping, ccfg), tax.name
    if backend != "slm":
        raise ConfigError(f"unknown backend {backend!r}")
    unified = _unified(cfg)
    ep = dict(section.get("endpoint") or {})
    if ep.get("cassette"):
        ep["cassette"] = str(cfg.path(ep["cassette"]))
    try:
        endpoint = EndpointConfig(**ep)
    except TypeError as exc:
        raise ConfigError(f"bad endpoint config: {exc}") from exc
    template_ref = str(section.get("template", "zero-shot"))
    template_path = cfg.path(template_ref)
    if not template_path.is_file():
        template_path = data_path("templates") / f"{template_ref}.txt"
    template = load_template(template_path)
    decoding = section.get("decoding") or {}
    ccfg = ClassifierConfig(
        "slm",
        taxonomy_version=unified.version,
        template_id=template.id,
        temperature=float(decoding.get("temperature", 0.0)),
        top_p=float(decoding.get("top_p", 1.0)),
        max_tokens=decoding.get("max_tokens"),
        endpoint=endpoint,
        context_window=section.get("context_window"),
    )
    client = InferenceClient(endpoint)
    clf = SLMClassifier(client, template, unified, ccfg,
                        attempts=int(section.get("attempts", 3)),
                        backoff_s=float(section.get("backoff_s", 0.5)))
    return clf, unified.version


def cmd_classify(cfg: Config) -> Path:
    section = cfg.section("classify")
    corpus_dir = cfg.path(section.get("corpus"), required="classify.corpus")
    notebooks = load_corpus(corpus_dir)
    report = IngestReport()
    work = []
    for nb in notebooks:
        for instr in extract_notebook(nb, report):
            work.append((instr, nb))
    if not work:
        log.warning("corpus %s yields no instructions", corpus_dir)

    classifier, tax_version = _classifier(cfg, section)
    out = cfg.output_dir / section.get("output", "predictions.jsonl")
    journal = out.with_name(out.name + ".partial")
    wanted = {instr.key for instr, _ in work}
    done: dict[str, Prediction] = {}
    if section.get("resume", True):
        for path in (out, journal):
            if path.is_file():
                for p in read_predictions(path, tolerate_partial=True):
                    if p.config_hash == classifier.config_hash and p.key in wanted:
                        done[p.key] = p
        if done:
            log.info("resuming: %d of %d instructions already classified", len(done), len(wanted))
    todo = [(i, nb) for i, nb in work if i.key not in done]

    journal.parent.mkdir(parents=True, exist_ok=True)
    with journal.open("a", encoding="utf-8") as fh:
        def record(pred: Prediction) -> None:
            fh.write(json.dumps(pred.to_record(), sort_keys=True, ensure_ascii=False) + "\n")
            fh.flush()

        fresh = classify_all(classifier, todo, parallelism=int(section.get("parallelism", 1)),
                             on_result=record)
    done.update(fresh)
    write_atomic(out, dumps_predictions(done.values()))
    journal.unlink(missing_ok=True)
    ingest_out = cfg.output_dir / "ingest_report.json"
    write_atomic(ingest_out, dumps_json(report.to_dict()))
    statuses: dict[str, int] = {}
    for p in done.values():
        statuses[p.status] = statuses.get(p.status, 0) + 1
    write_manifest(
        cfg, "classify", [out, ingest_out],
        corpus=corpus_hash(notebooks), taxonomy=tax_version, classifier=classifier.config_hash,
        extra={"classifier": classifier.config.to_dict(), "instructions": len(work), "status": statuses},
    )
    return out


def cmd_evaluate(cfg: Config) -> Path:
    section = cfg.section("evaluate")
    unified = _unified(cfg)
    level = section.get("level", "instruction")
    source = section.get("source")
    if source is None:
        raise ConfigError("config is missing evaluate.source (the ground-truth taxonomy)")
    truth_path = cfg.path(section.get("truth"), required="evaluate.truth")
    if not truth_path.is_file():
        raise IngestError(f"{truth_path}: ground-truth file not found")
    pred_files = section.get("predictions") or {}
    if not isinstance(pred_files, Mapping) or not pred_files:
        raise ConfigError("evaluate.predictions must map treatment names to prediction files")
    treatments = {name: read_predictions(cfg.path(p)) for name, p in pred_files.items()}
    alpha = float(section.get("alpha", 0.05))

    if level == "instruction":
        truth = load_instruction_truth(truth_path, unified, source)
        report = evaluate_instructions(treatments, truth, unified, source, alpha=alpha)
    elif level == "cell":
        notebooks = load_corpus(cfg.path(section.get("corpus"), required="evaluate.corpus"))
        src = unified.source(source)

        def joined(path):
            return rejoin_cell_labels(load_cell_labels(path, src), notebooks)

        joins = joined(truth_path)
        truth = {}
        for j in joins:
            if j.notebook_id is not None:
                truth[(j.notebook_id, j.cell_index)] = j.record.labels
        unmatched = sum(1 for j in joins if j.notebook_id is None)
        sets = {}
        for name, preds in treatments.items():
            cells = cell_label_sets(preds, unified, source)
            sets[name] = {k: cells.get(k, frozenset()) for k in truth}
        for name, path in (section.get("reference_tables") or {}).items():
            ref = {(j.notebook_id, j.cell_index): j.record.labels
                   for j in joined(cfg.path(path)) if j.notebook_id is not None}
            sets[name] = {k: ref.get(k, frozenset()) for k in truth}
        report = evaluate_cells(sets, truth, alpha=alpha,
                                containment=bool(section.get("containment", False)),
                                timing=treatments)
        if unmatched:
            report.warnings.append(f"{unmatched} label records could not be joined to the corpus")
        methods: dict[str, int] = {}
        for j in joins:
            methods[j.method] = methods.get(j.method, 0) + 1
        report.treatments.setdefault("_join", {})["methods"] = methods
    else:
        raise ConfigError(f"evaluate.level must be 'instruction' or 'cell', got {level!r}")
    out = cfg.output_dir / section.get("output", "evaluation.json")
    write_atomic(out, dumps_json(report.to_dict()))
    write_manifest(cfg, "evaluate", [out], taxonomy=unified.version)
    return out


def cmd_insights(cfg: Config) -> Path:
    section = cfg.section("insights")
    unified = _unified(cfg)
    preds = read_predictions(cfg.path(section.get("predictions"), required="insights.predictions"))
    lengths = tuple(int(n) for n in section.get("pattern_lengths", (2, 3)))
    report = build_insights(
        preds, unified,
        pattern_lengths=lengths,
        min_support=int(section.get("min_support", 1)),
        start_end=bool(section.get("start_end", False)),
    )
    refs = section.get("reference") or []
    if isinstance(refs, str):
        refs = [refs]
    for ref in refs:
        with open(cfg.path(ref), encoding="utf-8") as fh:
            reference = yaml.safe_load(fh) or {}
        report.comparisons.extend(compare_insights(report, reference, unified))
    outs = [cfg.output_dir / "insights.json"]
    write_atomic(outs[0], dumps_json(report.to_dict()))
    for name, tm in report.transitions.items():
        path = cfg.output_dir / f"transitions_{name}.tsv"
        write_atomic(path, transitions_tsv(tm))
        outs.append(path)
    for pr in report.patterns:
        path = cfg.output_dir / f"patterns_{pr.n}.tsv"
        write_atomic(path, patterns_tsv(pr))
        outs.append(path)
    write_manifest(cfg, "insights", outs, taxonomy=unified.version)
    return outs[0]


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_report(cfg: Config) -> Path:
    section = cfg.section("report")
    lines = ["# Run report", ""]
    ev = section.get("evaluation", "evaluation.json")
    ev_path = cfg.path(ev) if Path(cfg.path(ev)).is_file() else cfg.output_dir / ev
    if ev_path.is_file():
        data = json.loads(ev_path.read_text(encoding="utf-8"))
        lines += [f"## Evaluation ({data['level']} level)", "",
                  f"Items: {data['items']}; unlabeled excluded: {data['excluded_unlabeled']}", "",
                  "| treatment | valid | invalid | MCC | accuracy |", "|---|---|---|---|---|"]
        for name, t in sorted(data["treatments"].items()):
            if name.startswith("_"):
                continue
            o = t["outcomes"]
            acc = t.get("f1", {}).get("accuracy", "")
            lines.append(f"| {name} | {o['valid']} | {o['invalid']} | {_fmt(t.get('mcc', ''))} | {_fmt(acc)} |")
        if data["tests"]:
            lines += ["", "| test | statistic | dof | p | p (adj.) | method |", "|---|---|---|---|---|---|"]
            for t in data["tests"]:
                lines.append(
                    f"| {t['name']} | {_fmt(t['statistic'])} | {t['dof'] if t['dof'] is not None else ''} "
                    f"| {_fmt(t['p_value'])} | {_fmt(t['p_adjusted']) if t['p_adjusted'] is not None else ''} "
                    f"| {t['method']} |"
                )
        for w in data["warnings"]:
            lines.append(f"- warning: {w}")
        lines.append("")
    ins = section.get("insights", "insights.json")
    ins_path = cfg.path(ins) if Path(cfg.path(ins)).is_file() else cfg.output_dir / ins
    if ins_path.is_file():
        data = json.loads(ins_path.read_text(encoding="utf-8"))
        lines += [f"## Insights (taxonomy {data['taxonomy_version']})", "",
                  "| stage | instructions | cells |", "|---|---|---|"]
        for stage, row in data["per_stage"].items():
            lines.append(f"| {stage} | {_fmt(row['instructions'])} | {_fmt(row['cells'])} |")
        if data["comparisons"]:
            lines += ["", "| comparison | chi2 | dof | p |", "|---|---|---|---|"]
            for c in data["comparisons"]:
                lines.append(f"| {c['name']} | {_fmt(c['statistic'])} | {c['dof']} | {_fmt(c['p_value'])} |")
        lines.append("")
    if len(lines) == 2:
        raise ConfigError("nothing to report: no evaluation or insights artifact found")
    out = cfg.output_dir / section.get("output", "report.md")
    write_atomic(out, "\n".join(lines).rstrip() + "\n")
    write_manifest(cfg, "report", [out])
    return out


HANDLERS = {
    "unify": cmd_unify,
    "mutate": cmd_mutate,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "insights": cmd_insights,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pipestages", description="Stage extraction and analysis for notebook corpora.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.removeprefix("cmd_"))
        p.add_argument("-c", "--config", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted key); repeatable")
        p.add_argument("-o", "--output-dir", help="directory for artifacts (default: config output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.output_dir)
        result = HANDLERS[args.command](cfg)
    except PipeStagesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for path in result if isinstance(result, list) else [result]:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
