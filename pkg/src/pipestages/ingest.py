"""Notebook loading, ground-truth tables and statement-level decomposition."""

from __future__ import annotations

import ast
import csv
import io
import json
import logging
import re
import tokenize
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import IngestError, IntegrityError, LegendError
from .taxonomy import StageTaxonomy

log = logging.getLogger(__name__)

CELL_KINDS = ("code", "markdown", "raw")

# Cell magics whose body is still Python; any other %%magic makes the
# whole cell foreign source.
PYTHON_CELL_MAGICS = frozenset({"time", "timeit", "capture", "prun", "python", "python3", "debug"})

_SIGIL = re.compile(r"^(?P<indent>[ \t]*)(?P<sigil>%%|%|!|\?)")
_HELP_SUFFIX = re.compile(r"^[ \t]*[\w.\[\]]+\?\??[ \t]*$")

SIMPLE = "simple"
HEADER = "header"


@dataclass(frozen=True)
class Cell:
    index: int
    kind: str
    source: str
    excluded_lines: tuple[tuple[int, str], ...] = ()
    notebook_id: str = ""


@dataclass(frozen=True)
class Notebook:
    id: str
    cells: tuple[Cell, ...]
    path: str = ""

    @property
    def code_cells(self) -> tuple[Cell, ...]:
        return tuple(c for c in self.cells if c.kind == "code")

    def code(self) -> str:
        """All code cells concatenated, each under a ``# [cell i]`` marker."""
        return "\n\n".join(f"# [cell {c.index}]\n{c.source}" for c in self.code_cells)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "cells": [
                {
                    "index": c.index,
                    "kind": c.kind,
                    "source": c.source,
                    "excluded_lines": [list(e) for e in c.excluded_lines],
                }
                for c in self.cells
            ],
        }


@dataclass(frozen=True)
class Instruction:
    notebook_id: str
    cell_index: int
    ordinal: int
    lines: tuple[int, int]
    source: str
    kind: str
    # (line, col) character positions within the sanitised cell, end exclusive
    start: tuple[int, int] = (0, 0)
    end: tuple[int, int] = (0, 0)
    calls: tuple[str, ...] = ()

    @property
    def key(self) -> str:
        return instruction_key(self.notebook_id, self.cell_index, self.ordinal)


def instruction_key(notebook_id: str, cell_index: int, ordinal: int) -> str:
    return f"{notebook_id}:{cell_index}:{ordinal}"


def parse_key(key: str) -> tuple[str, int, int]:
    notebook_id, cell, ordinal = key.rsplit(":", 2)
    return notebook_id, int(cell), int(ordinal)


def key_sort(key: str) -> tuple[str, int, int]:
    return parse_key(key)


@dataclass
class NotebookReport:
    cells: int = 0
    code_cells: int = 0
    instructions: int = 0
    excluded_lines: int = 0
    unparseable: list[dict] = field(default_factory=list)


@dataclass
class IngestReport:
    notebooks: dict[str, NotebookReport] = field(default_factory=dict)

    def for_notebook(self, notebook_id: str) -> NotebookReport:
        return self.notebooks.setdefault(notebook_id, NotebookReport())

    @property
    def unparseable(self) -> list[dict]:
        return [u for nb in self.notebooks.values() for u in nb.unparseable]

    def to_dict(self) -> dict:
        out = {}
        for nb_id in sorted(self.notebooks):
            rep = self.notebooks[nb_id]
            out[nb_id] = {
                "cells": rep.cells,
                "code_cells": rep.code_cells,
                "instructions": rep.instructions,
                "excluded_lines": rep.excluded_lines,
                "unparseable": rep.unparseable,
            }
        return {
            "notebooks": out,
            "totals": {
                "notebooks": len(out),
                "instructions": sum(r["instructions"] for r in out.values()),
                "unparseable_cells": sum(len(r["unparseable"]) for r in out.values()),
            },
        }


# -- notebooks -------------------------------------------------------------


def notebook_id_for(path: str | Path, root: str | Path | None = None) -> str:
    path = Path(path)
    if root is not None:
        try:
            return path.relative_to(root).with_suffix("").as_posix()
        except ValueError:
            pass
    return path.stem


def load_notebook(path: str | Path, root: str | Path | None = None) -> Notebook:
    """Read a version-4 notebook document."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestError(f"{path}: cannot read notebook: {exc}") from exc
    if not isinstance(data, dict) or data.get("nbformat") != 4:
        found = data.get("nbformat") if isinstance(data, dict) else None
        raise IngestError(f"{path}: unsupported nbformat {found!r} (need 4)")
    raw_cells = data.get("cells", [])
    if not isinstance(raw_cells, list):
        raise IngestError(f"{path}: 'cells' must be a list")
    nb_id = notebook_id_for(path, root)
    cells = []
    for i, raw in enumerate(raw_cells):
        kind = raw.get("cell_type") if isinstance(raw, dict) else None
        if kind not in CELL_KINDS:
            raise IngestError(f"{path}: cell {i} has unsupported type {kind!r}")
        source = raw.get("source", "")
        if isinstance(source, list):
            source = "".join(source)
        if not isinstance(source, str):
            raise IngestError(f"{path}: cell {i} source is not text")
        excluded = sanitize_cell(source)[1] if kind == "code" else ()
        cells.append(Cell(i, kind, source, tuple(excluded), nb_id))
    return Notebook(nb_id, tuple(cells), str(path))


def load_corpus(root: str | Path) -> list[Notebook]:
    """Every ``*.ipynb`` below ``root``, ordered by notebook id."""
    root = Path(root)
    if root.is_file():
        return [load_notebook(root)]
    if not root.is_dir():
        raise IngestError(f"{root}: corpus directory not found")
    paths = sorted(p for p in root.rglob("*.ipynb") if ".ipynb_checkpoints" not in p.parts)
    notebooks = [load_notebook(p, root) for p in paths]
    return sorted(notebooks, key=lambda nb: nb.id)


# -- sanitising ------------------------------------------------------------


def _exclusion_reason(line: str) -> str | None:
    m = _SIGIL.match(line)
    if m:
        return {"%%": "magic", "%": "magic", "!": "shell", "?": "help"}[m.group("sigil")]
    if _HELP_SUFFIX.match(line):
        return "help"
    return None


def sanitize_cell(source: str) -> tuple[str, list[tuple[int, str]]]:
    """Blank out IPython-only lines so the rest parses as Python.

    Returns the code and the excluded ``(line number, reason)`` pairs
    (1-based).  Line numbering is preserved: an excluded line becomes an
    empty line, or ``pass`` at the same indentation when it is indented
    (so an enclosing block stays syntactically valid).
    """
    lines = source.split("\n")
    first = next((ln for ln in lines if ln.strip()), "")
    m = re.match(r"^\s*%%(\w+)", first)
    if m and m.group(1) not in PYTHON_CELL_MAGICS:
        excluded = [(i, "cell-magic") for i, ln in enumerate(lines, 1) if ln.strip()]
        return "\n".join("" for _ in lines), excluded

    out = []
    excluded = []
    for i, line in enumerate(lines, 1):
        reason = _exclusion_reason(line)
        if reason is None:
            out.append(line)
            continue
        excluded.append((i, reason))
        indent = line[: len(line) - len(line.lstrip(" \t"))]
        out.append(f"{indent}pass" if indent else "")
    return "\n".join(out), excluded


# -- instruction extraction ------------------------------------------------


_COMPOUND = (
    ast.FunctionDef,
    ast.AsyncFunctionDef,
    ast.ClassDef,
    ast.If,
    ast.For,
    ast.AsyncFor,
    ast.While,
    ast.With,
    ast.AsyncWith,
    ast.Try,
    ast.Match,
) + ((ast.TryStar,) if hasattr(ast, "TryStar") else ())


class _Source:
    """Token stream and byte/char conversion for one sanitised cell."""

    def __init__(self, code: str):
        self.code = code
        self.lines = code.splitlines(keepends=True) or [""]
        self.tokens = [
            t
            for t in tokenize.generate_tokens(io.StringIO(code).readline)
            if t.type not in (tokenize.NL, tokenize.NEWLINE, tokenize.INDENT, tokenize.DEDENT,
                              tokenize.COMMENT, tokenize.ENDMARKER)
        ]

    def char_col(self, lineno: int, byte_col: int) -> int:
        line = self.lines[lineno - 1] if lineno - 1 < len(self.lines) else ""
        return len(line.encode("utf-8")[:byte_col].decode("utf-8", errors="replace"))

    def start(self, node) -> tuple[int, int]:
        return node.lineno, self.char_col(node.lineno, node.col_offset)

    def end(self, node) -> tuple[int, int]:
        return node.end_lineno, self.char_col(node.end_lineno, node.end_col_offset)

    def token_before(self, pos: tuple[int, int]):
        found = None
        for tok in self.tokens:
            if tok.start >= pos:
                break
            found = tok
        return found

    def last_colon_before(self, pos: tuple[int, int]):
        found = None
        for tok in self.tokens:
            if tok.start >= pos:
                break
            if tok.type == tokenize.OP and tok.string == ":":
                found = tok
        return found

    def keyword_between(self, word: str, lo: tuple[int, int], hi: tuple[int, int]):
        for tok in self.tokens:
            if tok.start >= hi:
                break
            if tok.start >= lo and tok.type == tokenize.NAME and tok.string == word:
                return tok
        return None

    def text(self, start: tuple[int, int], end: tuple[int, int]) -> str:
        (l1, c1), (l2, c2) = start, end
        if l1 == l2:
            return self.lines[l1 - 1][c1:c2]
        parts = [self.lines[l1 - 1][c1:]]
        parts.extend(self.lines[l1:l2 - 1])
        parts.append(self.lines[l2 - 1][:c2])
        return "".join(parts)


def _call_names(nodes: Iterable[ast.AST | None]) -> tuple[str, ...]:
    found = []
    for root in nodes:
        if root is None:
            continue
        for node in ast.walk(root):
            if not isinstance(node, ast.Call):
                continue
            func = node.func
            if isinstance(func, ast.Name):
                found.append(((func.lineno, func.col_offset), func.id))
            elif isinstance(func, ast.Attribute):
                col = func.end_col_offset - len(func.attr.encode("utf-8"))
                found.append(((func.end_lineno, col), func.attr))
    found.sort()
    return tuple(name for _, name in found)


def _header_parts(node) -> list:
    if isinstance(node, (ast.For, ast.AsyncFor)):
        return [node.target, node.iter]
    if isinstance(node, (ast.If, ast.While)):
        return [node.test]
    if isinstance(node, (ast.With, ast.AsyncWith)):
        return [i.context_expr for i in node.items] + [i.optional_vars for i in node.items]
    if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
        return [*node.decorator_list, node.args, node.returns]
    if isinstance(node, ast.ClassDef):
        return [*node.decorator_list, *node.bases, *node.keywords]
    if isinstance(node, ast.ExceptHandler):
        return [node.type]
    if isinstance(node, ast.Match):
        return [node.subject]
    if isinstance(node, ast.match_case):
        return [node.pattern, node.guard]
    return []


class _Extractor:
    def __init__(self, src: _Source, excluded_lines: set[int]):
        self.src = src
        self.excluded = excluded_lines
        self.units: list[tuple[tuple[int, int], tuple[int, int], str, tuple[str, ...]]] = []

    def header(self, start, body_start, parts):
        colon = self.src.last_colon_before(body_start)
        self.units.append((start, colon.end, HEADER, _call_names(parts)))

    def clause(self, word, lo, body):
        # bare `else:` / `finally:` clauses have no node of their own
        body_start = self.src.start(body[0])
        tok = self.src.keyword_between(word, lo, body_start)
        self.header(tok.start, body_start, [])
        self.block(body)

    def block(self, stmts):
        for stmt in stmts:
            self.statement(stmt)

    def statement(self, node):
        src = self.src
        if not isinstance(node, _COMPOUND):
            if isinstance(node, ast.Pass) and node.lineno in self.excluded:
                return  # placeholder for an excluded line
            self.units.append((src.start(node), src.end(node), SIMPLE, _call_names([node])))
            return

        start = src.start(node)
        for deco in getattr(node, "decorator_list", ()):
            at = src.token_before(src.start(deco))
            start = min(start, at.start)

        if isinstance(node, ast.Match):
            self.header(start, src.start(node.cases[0].pattern), _header_parts(node))
            for case in node.cases:
                pattern_start = src.start(case.pattern)
                case_tok = src.token_before(pattern_start)
                self.header(case_tok.start, src.start(case.body[0]), _header_parts(case))
                self.block(case.body)
            return

        self.header(start, src.start(node.body[0]), _header_parts(node))
        self.block(node.body)
        last = src.end(node.body[-1])

        if isinstance(node, ast.Try) or type(node).__name__ == "TryStar":
            for handler in node.handlers:
                self.header(src.start(handler), src.start(handler.body[0]), _header_parts(handler))
                self.block(handler.body)
                last = src.end(handler.body[-1])
            if node.orelse:
                self.clause("else", last, node.orelse)
                last = src.end(node.orelse[-1])
            if node.finalbody:
                self.clause("finally", last, node.finalbody)
            return

        orelse = getattr(node, "orelse", None)
        if not orelse:
            return
        if isinstance(node, ast.If) and len(orelse) == 1 and isinstance(orelse[0], ast.If):
            first = src.start(orelse[0])
            tok = next((t for t in src.tokens if t.start == first), None)
            if tok is not None and tok.string == "elif":
                self.statement(orelse[0])
                return
        self.clause("else", last, orelse)


def extract_instructions(
    cell: Cell, report: IngestReport | None = None, notebook_id: str | None = None
) -> list[Instruction]:
    """Split a code cell into statement-level instructions.

    Every simple statement is one unit; a compound statement contributes
    its header (through the closing colon, decorators included) and each
    clause header (``elif``, ``else``, ``except``, ``finally``, ``case``)
    as units of their own, then its body statements recursively.

    An unparseable cell yields no instructions and is recorded on
    ``report``.
    """
    if cell.kind != "code":
        return []
    nb_id = notebook_id if notebook_id is not None else cell.notebook_id
    code, excluded = sanitize_cell(cell.source)
    try:
        tree = ast.parse(code)
        src = _Source(code)
    except (SyntaxError, ValueError, tokenize.TokenError) as exc:
        if report is not None:
            report.for_notebook(nb_id).unparseable.append(
                {"cell": cell.index, "error": f"{type(exc).__name__}: {exc}"}
            )
        return []
    extractor = _Extractor(src, {line for line, _ in excluded})
    extractor.block(tree.body)
    units = sorted(extractor.units)
    return [
        Instruction(
            notebook_id=nb_id,
            cell_index=cell.index,
            ordinal=i,
            lines=(start[0], end[0]),
            source=src.text(start, end),
            kind=kind,
            start=start,
            end=end,
            calls=calls,
        )
        for i, (start, end, kind, calls) in enumerate(units)
    ]


def extract_notebook(notebook: Notebook, report: IngestReport | None = None) -> list[Instruction]:
    out = []
    rep = report.for_notebook(notebook.id) if report is not None else None
    for cell in notebook.cells:
        if rep is not None:
            rep.cells += 1
        if cell.kind != "code":
            continue
        instructions = extract_instructions(cell, report, notebook.id)
        out.extend(instructions)
        if rep is not None:
            rep.code_cells += 1
            rep.instructions += len(instructions)
            rep.excluded_lines += len(cell.excluded_lines)
    return out


# -- static mapping --------------------------------------------------------


@dataclass(frozen=True)
class StaticMapping:
    entries: Mapping[str, str]
    legend: Mapping[str, str]
    taxonomy: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def stage_for(self, name: str) -> str | None:
        code = self.entries.get(name)
        return None if code is None else self.legend[code]


def default_legend(taxonomy: StageTaxonomy) -> dict[str, str]:
    """Stage codes 1..n in taxonomy order."""
    return {str(i): s.headword for i, s in enumerate(taxonomy.stages, start=1)}


def _sniff(text: str):
    try:
        return csv.Sniffer().sniff(text[:4096], delimiters=",;\t|")
    except csv.Error:
        return csv.excel


def load_static_mapping(
    path: str | Path,
    taxonomy: StageTaxonomy,
    legend: Mapping[str | int, str] | None = None,
) -> StaticMapping:
    """Read a delimited ``name, stage code`` file.

    Codes resolve through ``legend`` (default: 1-based taxonomy order).
    """
    path = Path(path)
    legend = {str(k): taxonomy.stage(v).headword for k, v in (legend or default_legend(taxonomy)).items()}
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    if not text.strip():
        log.warning("%s: empty static mapping", path)
        return StaticMapping({}, legend, taxonomy.name)
    rows = list(csv.reader(io.StringIO(text), _sniff(text)))
    header = [h.strip().casefold() for h in rows[0]]
    name_col = next((header.index(h) for h in ("name", "function", "api") if h in header), None)
    code_col = next((header.index(h) for h in ("stage", "code", "stage_code") if h in header), None)
    if name_col is None or code_col is None:
        raise IngestError(f"{path}: expected 'name' and 'stage' columns, got {rows[0]}")
    entries: dict[str, str] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        try:
            name, code = row[name_col].strip(), row[code_col].strip()
        except IndexError:
            raise IngestError(f"{path}:{lineno}: short row {row}") from None
        if not name:
            raise IntegrityError(f"{path}:{lineno}: empty name")
        if code.endswith(".0"):
            code = code[:-2]
        if code not in legend:
            raise LegendError(f"{path}:{lineno}: unknown stage code {code!r} for {name!r}")
        if name in entries and entries[name] != code:
            raise IntegrityError(
                f"{path}:{lineno}: {name!r} mapped to both {entries[name]!r} and {code!r}"
            )
        entries[name] = code
    return StaticMapping(entries, legend, taxonomy.name)


# -- cell label tables -----------------------------------------------------


@dataclass(frozen=True)
class CellLabelRecord:
    notebook_id: str
    cell_index: int | None
    labels: frozenset[str]
    text: str
    row: int
    metadata: Mapping[str, str] = field(default_factory=dict, compare=False)

    @property
    def unlabeled(self) -> bool:
        return not self.labels


def _binary(value: str) -> bool | None:
    v = value.strip()
    if v in ("0", "0.0", "False", "false"):
        return False
    if v in ("1", "1.0", "True", "true"):
        return True
    return None


def load_cell_labels(
    path: str | Path,
    taxonomy: StageTaxonomy,
    *,
    filename_column: str = "filename",
    index_column: str = "cell_number",
    text_column: str = "text",
) -> list[CellLabelRecord]:
    """Read a multi-label cell table: one 0/1 column per taxonomy stage."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text), dialect=_sniff(text))
    columns = reader.fieldnames or []
    stage_cols: dict[str, str] = {}
    for col in columns:
        stage = taxonomy.find(col)
        if stage is not None:
            if stage.headword in stage_cols:
                raise IngestError(f"{path}: two columns for stage {stage.headword!r}")
            stage_cols[stage.headword] = col
    missing = [s.headword for s in taxonomy.stages if s.headword not in stage_cols]
    if missing:
        raise IngestError(f"{path}: no column for stages {missing}")
    if filename_column not in columns:
        raise IngestError(f"{path}: missing metadata column {filename_column!r}")
    meta_cols = [c for c in columns if c not in stage_cols.values()]

    records = []
    for row_no, row in enumerate(reader):
        labels = set()
        for headword, col in stage_cols.items():
            flag = _binary(row.get(col) or "")
            if flag is None:
                raise IngestError(
                    f"{path}: row {row_no} column {col!r} is not binary: {row.get(col)!r}"
                )
            if flag:
                labels.add(headword)
        raw_index = (row.get(index_column) or "").strip()
        try:
            cell_index = int(float(raw_index)) if raw_index else None
        except ValueError:
            raise IngestError(f"{path}: row {row_no} has bad cell index {raw_index!r}") from None
        records.append(
            CellLabelRecord(
                notebook_id=Path(row[filename_column]).stem,
                cell_index=cell_index,
                labels=frozenset(labels),
                text=row.get(text_column) or "",
                row=row_no,
                metadata={c: row.get(c) or "" for c in meta_cols},
            )
        )
    return records


def normalize_whitespace(text: str) -> str:
    return re.sub(r"\s+", "", text)


@dataclass(frozen=True)
class JoinResult:
    record: CellLabelRecord
    notebook_id: str | None
    cell_index: int | None
    method: str  # "key" | "text-local" | "text-global" | "unmatched"


def rejoin_cell_labels(
    records: Sequence[CellLabelRecord], notebooks: Sequence[Notebook]
) -> list[JoinResult]:
    """Attach label records to corpus cells.

    The (notebook, cell index) key is tried first and confirmed by a
    whitespace-insensitive text comparison, then a text match inside the
    same notebook, then a unique text match anywhere in the corpus.
    """
    by_id = {nb.id: nb for nb in notebooks}
    by_stem: dict[str, list[Notebook]] = {}
    for nb in notebooks:
        by_stem.setdefault(Path(nb.id).name, []).append(nb)
    global_text: dict[str, list[tuple[str, int]]] = {}
    for nb in notebooks:
        for cell in nb.code_cells:
            global_text.setdefault(normalize_whitespace(cell.source), []).append((nb.id, cell.index))

    results = []
    for rec in records:
        norm = normalize_whitespace(rec.text)
        candidates = [by_id[rec.notebook_id]] if rec.notebook_id in by_id else by_stem.get(rec.notebook_id, [])
        result = None
        for nb in candidates:
            if rec.cell_index is not None and 0 <= rec.cell_index < len(nb.cells):
                cell = nb.cells[rec.cell_index]
                if cell.kind == "code" and normalize_whitespace(cell.source) == norm:
                    result = JoinResult(rec, nb.id, cell.index, "key")
                    break
        if result is None:
            for nb in candidates:
                hits = [c for c in nb.code_cells if normalize_whitespace(c.source) == norm]
                if len(hits) == 1:
                    result = JoinResult(rec, nb.id, hits[0].index, "text-local")
                    break
        if result is None:
            hits = global_text.get(norm, [])
            if len(hits) == 1:
                result = JoinResult(rec, hits[0][0], hits[0][1], "text-global")
        results.append(result or JoinResult(rec, None, None, "unmatched"))
    return results
