"""Stage taxonomies and their unification.

Two source taxonomies ``A`` and ``B`` are linked by expert cross-mappings
``f: A -> P(B)`` and ``g: B -> P(A)``.  Their union ``y`` forms a bipartite
graph whose connected components become the groups of the unified
taxonomy; each group is then named by a headword rule.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import yaml

from .errors import (
    LabelResolutionError,
    MappingIntegrityError,
    MutationError,
    PolicyError,
)

UNKNOWN = "Unknown"
MAX_MUTATIONS_PER_HEADWORD = 3

SIDE_A = "A"
SIDE_B = "B"


def _fold(text: str) -> str:
    return " ".join(text.split()).casefold()


@dataclass(frozen=True)
class Stage:
    headword: str
    definition: str = ""
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.headword or not self.headword.strip():
            raise MappingIntegrityError("stage headword must be non-empty")


@dataclass(frozen=True)
class StageTaxonomy:
    name: str
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise MappingIntegrityError(f"taxonomy {self.name!r} has no stages")
        seen: dict[str, str] = {}
        for stage in self.stages:
            key = _fold(stage.headword)
            if key == _fold(UNKNOWN):
                raise MappingIntegrityError(f"{UNKNOWN!r} is a reserved label")
            if key in seen:
                raise MappingIntegrityError(
                    f"duplicate headword {stage.headword!r} in taxonomy {self.name!r}"
                )
            seen[key] = stage.headword

    @property
    def headwords(self) -> tuple[str, ...]:
        return tuple(s.headword for s in self.stages)

    def __len__(self) -> int:
        return len(self.stages)

    def __contains__(self, headword: object) -> bool:
        return isinstance(headword, str) and self.find(headword) is not None

    def find(self, name: str) -> Stage | None:
        """Case-insensitive lookup by headword, then by alias."""
        key = _fold(name)
        for stage in self.stages:
            if _fold(stage.headword) == key:
                return stage
        for stage in self.stages:
            if any(_fold(a) == key for a in stage.aliases):
                return stage
        return None

    def stage(self, name: str) -> Stage:
        found = self.find(name)
        if found is None:
            raise MappingIntegrityError(f"unknown stage {name!r} in taxonomy {self.name!r}")
        return found

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stages": [
                {"headword": s.headword, "definition": s.definition, "aliases": list(s.aliases)}
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> StageTaxonomy:
        try:
            stages = tuple(
                Stage(
                    headword=str(rec["headword"]),
                    definition=str(rec.get("definition", "") or ""),
                    aliases=tuple(str(a) for a in rec.get("aliases", ()) or ()),
                )
                for rec in data["stages"]
            )
            return cls(name=str(data["name"]), stages=stages)
        except (KeyError, TypeError) as exc:
            raise MappingIntegrityError(f"malformed taxonomy record: {exc}") from exc


@dataclass(frozen=True)
class CrossMapping:
    source_a: str
    source_b: str
    pairs: frozenset[tuple[str, str]]


def build_cross_mapping(
    tax_a: StageTaxonomy,
    tax_b: StageTaxonomy,
    map_a: Mapping[str, Iterable[str]],
    map_b: Mapping[str, Iterable[str]],
) -> CrossMapping:
    """Union of both directed mappings: ``(a, b)`` is kept when ``b in f(a)``
    or ``a in g(b)``.  Stage names are canonicalised to their headwords."""
    pairs: set[tuple[str, str]] = set()
    for a, targets in map_a.items():
        a_name = tax_a.stage(a).headword
        for b in targets:
            pairs.add((a_name, tax_b.stage(b).headword))
    for b, targets in map_b.items():
        b_name = tax_b.stage(b).headword
        for a in targets:
            pairs.add((tax_a.stage(a).headword, b_name))
    return CrossMapping(tax_a.name, tax_b.name, frozenset(pairs))


@dataclass(frozen=True)
class UnifiedGroup:
    id: str
    headword: str
    members_a: tuple[str, ...]
    members_b: tuple[str, ...]
    definition: str = ""
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.members_a and not self.members_b:
            raise MappingIntegrityError(f"group {self.id} has no members")
        if not self.headword or not self.headword.strip():
            raise MappingIntegrityError(f"group {self.id} has an empty headword")

    @property
    def is_singleton(self) -> bool:
        return len(self.members_a) + len(self.members_b) == 1


@dataclass(frozen=True)
class ProvenanceEntry:
    taxonomy: str
    stage: str
    decision: str  # "kept" | "removed"
    reason: str = ""


@dataclass(frozen=True)
class MutationRecord:
    group_id: str
    index: int
    old: str
    new: str


@dataclass(frozen=True)
class MutationSpec:
    target: str
    replacement: str
    index: int | None = None

    def __post_init__(self):
        if _fold(self.target) == _fold(self.replacement):
            raise MutationError(f"replacement for {self.target!r} must differ from it")
        if self.index is not None and not 1 <= self.index <= MAX_MUTATIONS_PER_HEADWORD:
            raise PolicyError(
                f"mutation index {self.index} outside 1..{MAX_MUTATIONS_PER_HEADWORD}"
            )


@dataclass(frozen=True)
class UnifiedTaxonomy:
    taxonomy_a: StageTaxonomy
    taxonomy_b: StageTaxonomy
    groups: tuple[UnifiedGroup, ...]
    provenance: tuple[ProvenanceEntry, ...] = ()
    version: str = "v1"
    mutations: tuple[MutationRecord, ...] = ()
    _by_headword: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.taxonomy_a.name == self.taxonomy_b.name:
            raise MappingIntegrityError("source taxonomies must have distinct names")
        index: dict[str, UnifiedGroup] = {}
        for group in self.groups:
            key = _fold(group.headword)
            if key in index:
                raise MappingIntegrityError(f"duplicate group headword {group.headword!r}")
            index[key] = group
        removed = {
            (p.taxonomy, p.stage) for p in self.provenance if p.decision == "removed"
        }
        for side, tax in ((SIDE_A, self.taxonomy_a), (SIDE_B, self.taxonomy_b)):
            seen: Counter = Counter()
            for group in self.groups:
                for name in group.members_a if side == SIDE_A else group.members_b:
                    seen[tax.stage(name).headword] += 1
            for name, count in seen.items():
                if count > 1:
                    raise MappingIntegrityError(f"stage {tax.name}:{name} is in {count} groups")
            for stage in tax.stages:
                if not seen[stage.headword] and (tax.name, stage.headword) not in removed:
                    raise MappingIntegrityError(
                        f"stage {tax.name}:{stage.headword} is neither grouped nor removed"
                    )
        object.__setattr__(self, "_by_headword", index)

    @property
    def headwords(self) -> tuple[str, ...]:
        return tuple(g.headword for g in self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def group(self, label: str) -> UnifiedGroup:
        found = self._by_headword.get(_fold(label))
        if found is None:
            raise LabelResolutionError(f"no unified group named {label!r}")
        return found

    def group_by_id(self, group_id: str) -> UnifiedGroup:
        for group in self.groups:
            if group.id == group_id:
                return group
        raise LabelResolutionError(f"no unified group with id {group_id!r}")

    def side_of(self, target: StageTaxonomy | str) -> str:
        name = target if isinstance(target, str) else target.name
        if name == self.taxonomy_a.name:
            return SIDE_A
        if name == self.taxonomy_b.name:
            return SIDE_B
        raise LabelResolutionError(
            f"{name!r} is not a source taxonomy of this unification"
            f" ({self.taxonomy_a.name!r}, {self.taxonomy_b.name!r})"
        )

    def source(self, target: StageTaxonomy | str) -> StageTaxonomy:
        return self.taxonomy_a if self.side_of(target) == SIDE_A else self.taxonomy_b

    def group_of(self, stage: str, target: StageTaxonomy | str) -> UnifiedGroup | None:
        """The group holding a source stage, or None if it was removed."""
        side = self.side_of(target)
        name = self.source(target).stage(stage).headword
        for group in self.groups:
            if name in (group.members_a if side == SIDE_A else group.members_b):
                return group
        return None

    def mutation_count(self, group_id: str) -> int:
        return sum(1 for m in self.mutations if m.group_id == group_id)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "taxonomy_a": self.taxonomy_a.to_dict(),
            "taxonomy_b": self.taxonomy_b.to_dict(),
            "groups": [
                {
                    "id": g.id,
                    "headword": g.headword,
                    "definition": g.definition,
                    "aliases": list(g.aliases),
                    "members_a": list(g.members_a),
                    "members_b": list(g.members_b),
                }
                for g in self.groups
            ],
            "provenance": [
                {"taxonomy": p.taxonomy, "stage": p.stage, "decision": p.decision, "reason": p.reason}
                for p in self.provenance
            ],
            "mutations": [
                {"group_id": m.group_id, "index": m.index, "old": m.old, "new": m.new}
                for m in self.mutations
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> UnifiedTaxonomy:
        try:
            return cls(
                taxonomy_a=StageTaxonomy.from_dict(data["taxonomy_a"]),
                taxonomy_b=StageTaxonomy.from_dict(data["taxonomy_b"]),
                groups=tuple(
                    UnifiedGroup(
                        id=str(g["id"]),
                        headword=str(g["headword"]),
                        members_a=tuple(g.get("members_a", ()) or ()),
                        members_b=tuple(g.get("members_b", ()) or ()),
                        definition=str(g.get("definition", "") or ""),
                        aliases=tuple(g.get("aliases", ()) or ()),
                    )
                    for g in data["groups"]
                ),
                provenance=tuple(ProvenanceEntry(**p) for p in data.get("provenance", ()) or ()),
                version=str(data.get("version", "v1")),
                mutations=tuple(MutationRecord(**m) for m in data.get("mutations", ()) or ()),
            )
        except (KeyError, TypeError) as exc:
            raise MappingIntegrityError(f"malformed unified taxonomy: {exc}") from exc


HeadwordRule = Callable[[Sequence[Stage], Sequence[Stage]], str]


def most_frequent_headword(members_a: Sequence[Stage], members_b: Sequence[Stage]) -> str:
    """Most frequent (case-folded) member headword; ties go to the
    lexicographically smallest.  The first spelling seen is returned."""
    counts: Counter = Counter()
    spelling: dict[str, str] = {}
    for stage in (*members_a, *members_b):
        key = _fold(stage.headword)
        counts[key] += 1
        spelling.setdefault(key, stage.headword)
    best = min(counts, key=lambda k: (-counts[k], k))
    return spelling[best]


def connected_components(
    tax_a: StageTaxonomy, tax_b: StageTaxonomy, pairs: Iterable[tuple[str, str]]
) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """Components of the bipartite graph (A ∪ B, pairs) by breadth-first search.

    Components are ordered by their first member in A-then-B order and
    members keep their taxonomy order.
    """
    adjacency: dict[tuple[str, str], set[tuple[str, str]]] = {}
    for stage in tax_a.stages:
        adjacency[(SIDE_A, stage.headword)] = set()
    for stage in tax_b.stages:
        adjacency[(SIDE_B, stage.headword)] = set()
    for a, b in pairs:
        node_a, node_b = (SIDE_A, a), (SIDE_B, b)
        if node_a not in adjacency or node_b not in adjacency:
            raise MappingIntegrityError(f"pair ({a!r}, {b!r}) references an unknown stage")
        adjacency[node_a].add(node_b)
        adjacency[node_b].add(node_a)

    order = {node: i for i, node in enumerate(adjacency)}
    visited: set[tuple[str, str]] = set()
    components = []
    for start in adjacency:
        if start in visited:
            continue
        visited.add(start)
        queue = deque([start])
        members = []
        while queue:
            node = queue.popleft()
            members.append(node)
            for nxt in adjacency[node]:
                if nxt not in visited:
                    visited.add(nxt)
                    queue.append(nxt)
        members.sort(key=order.__getitem__)
        components.append(
            (
                tuple(name for side, name in members if side == SIDE_A),
                tuple(name for side, name in members if side == SIDE_B),
            )
        )
    return components


def _resolve_ref(ref: str, tax_a: StageTaxonomy, tax_b: StageTaxonomy) -> tuple[str, str]:
    """Parse ``"<taxonomy>:<stage>"`` into (side, canonical headword)."""
    tax_name, sep, stage = ref.partition(":")
    if not sep:
        raise MappingIntegrityError(f"stage reference {ref!r} must look like 'taxonomy:stage'")
    if tax_name in (tax_a.name, SIDE_A):
        return SIDE_A, tax_a.stage(stage).headword
    if tax_name in (tax_b.name, SIDE_B):
        return SIDE_B, tax_b.stage(stage).headword
    raise MappingIntegrityError(f"unknown taxonomy in reference {ref!r}")


def unify(
    tax_a: StageTaxonomy,
    tax_b: StageTaxonomy,
    mapping: CrossMapping,
    headword_rule: HeadwordRule = most_frequent_headword,
    *,
    headwords: Mapping[str, str] | None = None,
    definitions: Mapping[str, str] | None = None,
    remove: Mapping[str, str] | None = None,
    version: str = "v1",
) -> UnifiedTaxonomy:
    """Merge two taxonomies into connected-component groups.

    ``headwords`` and ``definitions`` override the rule for the group that
    contains a referenced stage (``"taxonomy:stage"``); a headword override
    may be a fresh term.  ``remove`` maps unmatched stage references to a
    reason; every unmatched stage not listed is kept as a singleton and the
    decision is logged in the provenance either way.
    """
    if mapping.source_a != tax_a.name or mapping.source_b != tax_b.name:
        raise MappingIntegrityError(
            f"mapping links {mapping.source_a!r}/{mapping.source_b!r},"
            f" not {tax_a.name!r}/{tax_b.name!r}"
        )
    components = connected_components(tax_a, tax_b, mapping.pairs)

    def lookup(overrides):
        resolved: dict[tuple[str, str], str] = {}
        for ref, value in (overrides or {}).items():
            resolved[_resolve_ref(ref, tax_a, tax_b)] = value
        return resolved

    headword_over = lookup(headwords)
    definition_over = lookup(definitions)
    removals = lookup(remove)

    drafts = []
    provenance = []
    for members_a, members_b in components:
        nodes = [(SIDE_A, n) for n in members_a] + [(SIDE_B, n) for n in members_b]
        if len(nodes) == 1:
            side, name = nodes[0]
            tax_name = tax_a.name if side == SIDE_A else tax_b.name
            if nodes[0] in removals:
                provenance.append(ProvenanceEntry(tax_name, name, "removed", removals.pop(nodes[0])))
                continue
            provenance.append(ProvenanceEntry(tax_name, name, "kept", "unmatched"))
        elif any(node in removals for node in nodes):
            bad = next(node for node in nodes if node in removals)
            raise MappingIntegrityError(f"cannot remove matched stage {bad[1]!r}")

        stages_a = [tax_a.stage(n) for n in members_a]
        stages_b = [tax_b.stage(n) for n in members_b]
        overridden = [headword_over[n] for n in nodes if n in headword_over]
        if len(set(overridden)) > 1:
            raise MappingIntegrityError(f"conflicting headword overrides {sorted(set(overridden))}")
        headword = overridden[0] if overridden else headword_rule(stages_a, stages_b)
        defined = [definition_over[n] for n in nodes if n in definition_over]
        if defined:
            definition = defined[0]
        else:
            parts = []
            for stage in (*stages_a, *stages_b):
                if stage.definition and stage.definition not in parts:
                    parts.append(stage.definition)
            definition = " ".join(parts)
        aliases = []
        for stage in (*stages_a, *stages_b):
            for alias in stage.aliases:
                if alias not in aliases:
                    aliases.append(alias)
        drafts.append(
            {
                "headword": headword,
                "fixed": bool(overridden),
                "members_a": members_a,
                "members_b": members_b,
                "definition": definition,
                "aliases": tuple(aliases),
            }
        )
    if removals:
        leftover = sorted(name for _, name in removals)
        raise MappingIntegrityError(f"cannot remove unknown or matched stages {leftover}")

    _qualify_collisions(drafts, tax_a.name, tax_b.name)
    groups = tuple(
        UnifiedGroup(
            id=f"G{i:02d}",
            headword=d["headword"],
            members_a=d["members_a"],
            members_b=d["members_b"],
            definition=d["definition"],
            aliases=tuple(a for a in d["aliases"] if _fold(a) != _fold(d["headword"])),
        )
        for i, d in enumerate(drafts, start=1)
    )
    return UnifiedTaxonomy(tax_a, tax_b, groups, tuple(provenance), version)


def _qualify_collisions(drafts: list[dict], name_a: str, name_b: str) -> None:
    # Single-source groups whose rule-chosen headword clashes with another
    # group are suffixed with their taxonomy name, e.g. "Prediction (daswow)".
    by_key: dict[str, list[dict]] = {}
    for d in drafts:
        by_key.setdefault(_fold(d["headword"]), []).append(d)
    for clash in by_key.values():
        if len(clash) < 2:
            continue
        for d in clash:
            if d["fixed"]:
                continue
            if d["members_a"] and not d["members_b"]:
                d["headword"] = f"{d['headword']} ({name_a})"
            elif d["members_b"] and not d["members_a"]:
                d["headword"] = f"{d['headword']} ({name_b})"
    keys = Counter(_fold(d["headword"]) for d in drafts)
    dupes = sorted(k for k, n in keys.items() if n > 1)
    if dupes:
        raise MappingIntegrityError(f"headword collision {dupes}; supply a headword override")


def project(tax: UnifiedTaxonomy, label: str, target: StageTaxonomy | str) -> frozenset[str]:
    """Source-taxonomy stages behind a unified label.

    An empty set means the group has no counterpart in ``target``.
    """
    group = tax.group(label)
    side = tax.side_of(target)
    return frozenset(group.members_a if side == SIDE_A else group.members_b)


def mutate(tax: UnifiedTaxonomy, spec: MutationSpec) -> UnifiedTaxonomy:
    """Replace one group headword by a synonym, keeping the group structure."""
    group = tax.group(spec.target)
    done = tax.mutation_count(group.id)
    index = done + 1
    if index > MAX_MUTATIONS_PER_HEADWORD:
        raise PolicyError(
            f"headword of group {group.id} already mutated {done} times"
            f" (limit {MAX_MUTATIONS_PER_HEADWORD})"
        )
    if spec.index is not None and spec.index != index:
        raise PolicyError(
            f"mutation index {spec.index} for group {group.id} does not follow its chain (next is {index})"
        )
    key = _fold(spec.replacement)
    for other in tax.groups:
        if other.id != group.id and _fold(other.headword) == key:
            raise MutationError(f"replacement {spec.replacement!r} collides with group {other.id}")
    if key == _fold(UNKNOWN):
        raise MutationError(f"{UNKNOWN!r} is a reserved label")
    groups = tuple(
        replace(g, headword=spec.replacement) if g.id == group.id else g for g in tax.groups
    )
    record = MutationRecord(group.id, index, group.headword, spec.replacement)
    base = tax.version.split("+", 1)[0]
    chain = (*tax.mutations, record)
    version = base + "".join(f"+{m.group_id}#{m.index}" for m in chain)
    return replace(tax, groups=groups, mutations=chain, version=version)


# -- files -----------------------------------------------------------------


def _read_yaml(path: str | Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise MappingIntegrityError(f"{path}: malformed document: {exc}") from exc
    except OSError as exc:
        raise MappingIntegrityError(f"{path}: {exc}") from exc


def dump_yaml(data) -> str:
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True, default_flow_style=False, width=100)


def load_taxonomy(path: str | Path) -> StageTaxonomy:
    data = _read_yaml(path)
    if not isinstance(data, Mapping):
        raise MappingIntegrityError(f"{path}: expected a taxonomy mapping")
    return StageTaxonomy.from_dict(data)


def load_unified(path: str | Path) -> UnifiedTaxonomy:
    data = _read_yaml(path)
    if not isinstance(data, Mapping):
        raise MappingIntegrityError(f"{path}: expected a unified taxonomy mapping")
    return UnifiedTaxonomy.from_dict(data)


def dump_unified(tax: UnifiedTaxonomy) -> str:
    return dump_yaml(tax.to_dict())


def load_cross_mapping(path: str | Path, tax_a: StageTaxonomy, tax_b: StageTaxonomy) -> CrossMapping:
    """Read ``{f: {a: [b, ...]}, g: {b: [a, ...]}}``."""
    data = _read_yaml(path)
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise MappingIntegrityError(f"{path}: expected a mapping with 'f' and 'g' keys")
    unknown = set(data) - {"f", "g"}
    if unknown:
        raise MappingIntegrityError(f"{path}: unexpected keys {sorted(unknown)}")
    f = data.get("f") or {}
    g = data.get("g") or {}
    for side, part in (("f", f), ("g", g)):
        if not isinstance(part, Mapping) or not all(
            isinstance(v, (list, tuple)) or v is None for v in part.values()
        ):
            raise MappingIntegrityError(f"{path}: '{side}' must map stages to lists of stages")
    f = {k: v or [] for k, v in f.items()}
    g = {k: v or [] for k, v in g.items()}
    return build_cross_mapping(tax_a, tax_b, f, g)


def load_synonyms(path: str | Path) -> dict[str, list[str]]:
    data = _read_yaml(path) or {}
    if not isinstance(data, Mapping) or not all(isinstance(v, list) for v in data.values()):
        raise MappingIntegrityError(f"{path}: synonyms must map headwords to lists")
    return {str(k): [str(s) for s in v] for k, v in data.items()}


def data_path(name: str) -> Path:
    """Path of a file bundled in the package's data directory."""
    return Path(__file__).with_name("data") / name
