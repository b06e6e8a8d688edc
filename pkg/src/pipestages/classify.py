"""Instruction classifiers and cell-level aggregation.

Two interchangeable backends turn an :class:`~pipestages.ingest.Instruction`
into a :class:`Prediction`: :class:`RuleClassifier` looks called names up
in a static mapping, :class:`SLMClassifier` prompts a language model
through :class:`~pipestages.inference.InferenceClient`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import yaml

from .errors import AggregationError, ConfigError, PerplexityError, TemplateError, TransportError
from .inference import Decoding, EndpointConfig, InferenceClient
from .ingest import Instruction, Notebook, StaticMapping, key_sort, parse_key
from .taxonomy import UNKNOWN, UnifiedTaxonomy

log = logging.getLogger(__name__)

BACKENDS = ("rule", "slm")
PLACEHOLDERS = ("instruction", "notebook", "taxonomy")

OK = "ok"
FAILED = "failed"
TRUNCATED = "truncated"
CONTEXT_OVERFLOW = "context_overflow"


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    backend: str
    taxonomy_version: str = ""
    template_id: str = ""
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int | None = None
    endpoint: EndpointConfig | None = None
    context_window: int | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "slm":
            if self.temperature != 0 or self.top_p != 1:
                raise ConfigError("SLM runs require temperature=0 and top_p=1")
            if self.endpoint is None:
                raise ConfigError("SLM backend needs an endpoint")
            if self.max_tokens is not None and self.max_tokens < 1:
                raise ConfigError("max_tokens must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.endpoint is not None:
            # the auth variable and record/replay mode never change a completion
            out["endpoint"] = {"base_url": self.endpoint.base_url, "model": self.endpoint.model}
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def max_output_tokens(tax: UnifiedTaxonomy, count_tokens: Callable[[str], int]) -> int:
    """Output budget: the longest headword in tokens, plus two."""
    return max(count_tokens(h) for h in tax.headwords) + 2


# -- prompts ---------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    version: str
    body: str
    technique: str = "zero-shot"

    def __post_init__(self):
        seen: dict[str, int] = {}
        for m in string.Template.pattern.finditer(self.body):
            if m.group("escaped"):
                continue
            name = m.group("named") or m.group("braced")
            if name is None:
                raise TemplateError(f"template {self.id}: stray '$' at offset {m.start()}")
            if name not in PLACEHOLDERS:
                raise TemplateError(f"template {self.id}: unknown placeholder ${name}")
            seen[name] = seen.get(name, 0) + 1
        for name in PLACEHOLDERS:
            if seen.get(name, 0) != 1:
                raise TemplateError(
                    f"template {self.id}: placeholder ${{{name}}} must appear exactly once"
                    f" (found {seen.get(name, 0)})"
                )


def load_template(path: str | Path) -> PromptTemplate:
    """Read a template file: a YAML front-matter block, then the body."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TemplateError(f"{path}: {exc}") from exc
    m = re.match(r"^---\n(.*?)\n---\n", text, re.S)
    if not m:
        raise TemplateError(f"{path}: missing front matter")
    meta = yaml.safe_load(m.group(1)) or {}
    try:
        return PromptTemplate(
            id=str(meta["id"]),
            version=str(meta["version"]),
            body=text[m.end():],
            technique=str(meta.get("technique", "zero-shot")),
        )
    except KeyError as exc:
        raise TemplateError(f"{path}: front matter lacks {exc}") from exc


def render_taxonomy(tax: UnifiedTaxonomy) -> str:
    return "\n".join(
        f"- {g.headword}: {g.definition}" if g.definition else f"- {g.headword}"
        for g in tax.groups
    )


def render_prompt(
    template: PromptTemplate, instr: Instruction, notebook: Notebook, tax: UnifiedTaxonomy
) -> str:
    return string.Template(template.body).substitute(
        instruction=instr.source,
        notebook=notebook.code(),
        taxonomy=render_taxonomy(tax),
    )


# -- predictions -----------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    key: str
    label: str | None
    taxonomy: str
    raw: str = ""
    duration_ms: float = 0.0
    config_hash: str = ""
    logprobs: tuple[float, ...] | None = None
    perplexity: float | None = None
    status: str = OK
    attempts: int = 1
    matches: tuple[str, ...] = ()
    error: str | None = None

    @property
    def notebook_id(self) -> str:
        return parse_key(self.key)[0]

    @property
    def cell_index(self) -> int:
        return parse_key(self.key)[1]

    @property
    def cell_key(self) -> tuple[str, int]:
        nb, cell, _ = parse_key(self.key)
        return nb, cell

    @property
    def valid_label(self) -> bool:
        return self.status == OK and self.label not in (None, UNKNOWN)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["logprobs"] = list(self.logprobs) if self.logprobs is not None else None
        rec["matches"] = list(self.matches)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> Prediction:
        rec = dict(rec)
        if rec.get("logprobs") is not None:
            rec["logprobs"] = tuple(rec["logprobs"])
        rec["matches"] = tuple(rec.get("matches") or ())
        return cls(**rec)


def dumps_predictions(preds: Iterable[Prediction]) -> str:
    ordered = sorted(preds, key=lambda p: key_sort(p.key))
    return "".join(json.dumps(p.to_record(), sort_keys=True, ensure_ascii=False) + "\n" for p in ordered)


def read_predictions(path: str | Path, *, tolerate_partial: bool = False) -> list[Prediction]:
    """Load a prediction file.  With ``tolerate_partial`` a malformed final
    line (an interrupted write) is dropped instead of raising."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(Prediction.from_record(json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            if tolerate_partial and lineno == len(lines):
                log.warning("%s: dropping truncated final record", path)
                break
            raise ConfigError(f"{path}:{lineno}: bad prediction record: {exc}") from exc
    return out


def perplexity(logprobs: Sequence[float]) -> float:
    """exp of the mean negative log-probability."""
    if len(logprobs) == 0:
        raise PerplexityError("perplexity of an empty token sequence is undefined")
    if any(lp > 0 for lp in logprobs):
        raise ValueError("log-probabilities must be <= 0")
    return math.exp(-math.fsum(logprobs) / len(logprobs))


_EDGE = " \t\r\n.,;:!?\"'`*“”‘’"


def _norm(text: str) -> str:
    return " ".join(text.strip(_EDGE).split()).casefold()


def normalize_label(raw: str, tax: UnifiedTaxonomy) -> str:
    """Map raw model text onto a group headword, or ``Unknown``.

    Only exact matches after trimming edge punctuation, quotes and case
    count; first against headwords, then against aliases.
    """
    text = _norm(raw)
    if not text:
        return UNKNOWN
    for group in tax.groups:
        if _norm(group.headword) == text:
            return group.headword
    for group in tax.groups:
        if any(_norm(a) == text for a in group.aliases):
            return group.headword
    return UNKNOWN


# -- backends --------------------------------------------------------------


class RuleClassifier:
    """Static-mapping lookup over the instruction's called names.

    The first mapped call in source order wins; every match is kept in
    ``Prediction.matches``.
    """

    def __init__(self, mapping: StaticMapping, config: ClassifierConfig | None = None):
        self.mapping = mapping
        self.config = config or ClassifierConfig("rule", taxonomy_version=mapping.taxonomy)
        self.config_hash = self.config.config_hash()

    def classify(self, instr: Instruction, notebook: Notebook | None = None) -> Prediction:
        start = time.perf_counter()
        matches = tuple(n for n in instr.calls if n in self.mapping.entries)
        label = self.mapping.stage_for(matches[0]) if matches else None
        elapsed = (time.perf_counter() - start) * 1000.0
        return Prediction(
            key=instr.key,
            label=label,
            taxonomy=self.mapping.taxonomy,
            raw=matches[0] if matches else "",
            duration_ms=round(elapsed, 4),
            config_hash=self.config_hash,
            matches=tuple(f"{n}={self.mapping.stage_for(n)}" for n in matches),
        )


def classify_rule_based(instr: Instruction, mapping: StaticMapping) -> Prediction:
    return RuleClassifier(mapping).classify(instr)


class SLMClassifier:
    """Prompt a model once per instruction with the whole notebook as context."""

    def __init__(
        self,
        client: InferenceClient,
        template: PromptTemplate,
        tax: UnifiedTaxonomy,
        config: ClassifierConfig,
        *,
        attempts: int = 3,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.client = client
        self.template = template
        self.tax = tax
        self.attempts = attempts
        self.backoff_s = backoff_s
        self._sleep = sleep
        longest = max(client.count_tokens(h) for h in tax.headwords)
        max_tokens = config.max_tokens if config.max_tokens is not None else longest + 2
        if max_tokens < longest:
            raise ConfigError(
                f"max_tokens={max_tokens} is below the longest headword ({longest} tokens)"
            )
        self.config = ClassifierConfig(
            **{**config.__dict__, "max_tokens": max_tokens, "template_id": template.id,
               "taxonomy_version": tax.version}
        )
        self.config_hash = self.config.config_hash()
        self.decoding = Decoding(
            temperature=self.config.temperature, top_p=self.config.top_p, max_tokens=max_tokens
        )

    def _failed(self, key: str, status: str, attempts: int, error: str) -> Prediction:
        return Prediction(
            key=key, label=None, taxonomy=self.tax.version, config_hash=self.config_hash,
            status=status, attempts=attempts, error=error,
        )

    def classify(self, instr: Instruction, notebook: Notebook) -> Prediction:
        prompt = render_prompt(self.template, instr, notebook, self.tax)
        window = self.config.context_window
        if window is not None:
            needed = self.client.count_tokens(prompt) + self.decoding.max_tokens
            if needed > window:
                return self._failed(
                    instr.key, CONTEXT_OVERFLOW, 0,
                    f"prompt needs {needed} tokens, context window is {window}",
                )
        for attempt in range(1, self.attempts + 1):
            try:
                resp = self.client.complete(prompt, self.decoding)
                break
            except TransportError as exc:
                if attempt == self.attempts:
                    return self._failed(instr.key, FAILED, attempt, str(exc))
                self._sleep(self.backoff_s * 2 ** (attempt - 1))
        ppl = perplexity(resp.logprobs) if resp.logprobs else None
        if resp.finish_reason == "length":
            label, status = UNKNOWN, TRUNCATED
        else:
            label, status = normalize_label(resp.text, self.tax), OK
        return Prediction(
            key=instr.key,
            label=label,
            taxonomy=self.tax.version,
            raw=resp.text,
            duration_ms=resp.duration_ms,
            config_hash=self.config_hash,
            logprobs=resp.logprobs,
            perplexity=ppl,
            status=status,
            attempts=attempt,
        )


def classify_slm(
    instr: Instruction,
    notebook: Notebook,
    cfg: ClassifierConfig,
    *,
    tax: UnifiedTaxonomy,
    template: PromptTemplate,
    client: InferenceClient | None = None,
) -> Prediction:
    client = client or InferenceClient(cfg.endpoint)
    return SLMClassifier(client, template, tax, cfg).classify(instr, notebook)


def classify_all(
    classifier,
    work: Sequence[tuple[Instruction, Notebook]],
    *,
    parallelism: int = 1,
    on_result: Callable[[Prediction], None] | None = None,
) -> dict[str, Prediction]:
    """Classify many instructions; results are keyed so completion order
    never matters.  ``on_result`` is called from the calling thread."""
    results: dict[str, Prediction] = {}
    if parallelism <= 1:
        for instr, nb in work:
            pred = classifier.classify(instr, nb)
            results[pred.key] = pred
            if on_result:
                on_result(pred)
        return results
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(classifier.classify, instr, nb) for instr, nb in work]
        for fut in futures:
            pred = fut.result()
            results[pred.key] = pred
            if on_result:
                on_result(pred)
    return results


# -- cell aggregation ------------------------------------------------------


@dataclass(frozen=True)
class CellPrediction:
    notebook_id: str
    cell_index: int
    labels: frozenset[str]
    instructions: int = 0
    unknown: int = 0
    failed: int = 0
    unlabeled: int = 0
    extra: dict = field(default_factory=dict, compare=False)


def aggregate_cell(preds: Sequence[Prediction]) -> CellPrediction:
    """Union of the valid instruction labels of one cell."""
    if not preds:
        raise AggregationError("cannot aggregate an empty prediction list")
    refs = {p.cell_key for p in preds}
    if len(refs) > 1:
        raise AggregationError(f"predictions span several cells: {sorted(refs)}")
    nb_id, cell = refs.pop()
    return CellPrediction(
        notebook_id=nb_id,
        cell_index=cell,
        labels=frozenset(p.label for p in preds if p.valid_label),
        instructions=len(preds),
        unknown=sum(1 for p in preds if p.status == OK and p.label == UNKNOWN),
        failed=sum(1 for p in preds if p.status != OK),
        unlabeled=sum(1 for p in preds if p.status == OK and p.label is None),
    )


def aggregate_cells(preds: Iterable[Prediction]) -> dict[tuple[str, int], CellPrediction]:
    by_cell: dict[tuple[str, int], list[Prediction]] = {}
    for p in preds:
        by_cell.setdefault(p.cell_key, []).append(p)
    return {k: aggregate_cell(v) for k, v in sorted(by_cell.items())}
