"""Relation inventories and the generation targets built from them.

A :class:`TargetMap` fixes, for every relation, the exact token sequence the
decoder has to produce. Six constructions are supported:

* ``identity``               the relation name itself
* ``random_bijection``       another relation's name (fixed-point free)
* ``unique_meaningless``     one rare string per relation
* ``tokenwise_meaningless``  every word replaced through one shared word map,
                             so names sharing words still share replacements
* ``synonym_decorrelated``   a replacement phrase that breaks shared patterns
* ``augmented``              name plus ``l`` extra phrases joined by ", "
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("identity", "random_bijection", "unique_meaningless", "tokenwise_meaningless",
         "synonym_decorrelated", "augmented")
PHRASE_SEP = ", "
SEP_TOKEN = ","
NO_RELATION = -1  # returned by matching when the label space has no explicit negative label


class LabelSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class RelationLabel:
    id: int
    name: str
    is_no_relation: bool = False


class LabelSpace:
    def __init__(self, labels: Sequence[RelationLabel]):
        self.labels = list(labels)
        names = [l.name for l in self.labels]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise LabelSpaceError(f"duplicate relation names: {dup}")
        if len({l.id for l in self.labels}) != len(self.labels):
            raise LabelSpaceError("duplicate relation ids")
        if sum(l.is_no_relation for l in self.labels) > 1:
            raise LabelSpaceError("more than one no-relation label")
        self._by_name = {l.name: l for l in self.labels}
        self._by_id = {l.id: l for l in self.labels}

    @classmethod
    def from_names(cls, names: Iterable[str], no_relation: str | None = None) -> "LabelSpace":
        names = list(names)
        if no_relation is not None and no_relation not in names:
            raise LabelSpaceError(f"no-relation label {no_relation!r} is not among the names")
        return cls([RelationLabel(i, n, n == no_relation) for i, n in enumerate(names)])

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.labels]

    @property
    def ids(self) -> list[int]:
        return [l.id for l in self.labels]

    @property
    def no_relation_id(self) -> int:
        for l in self.labels:
            if l.is_no_relation:
                return l.id
        return NO_RELATION

    def by_name(self, name: str) -> RelationLabel:
        try:
            return self._by_name[name]
        except KeyError:
            raise LabelSpaceError(f"unknown relation {name!r}") from None

    def by_id(self, rid: int) -> RelationLabel:
        try:
            return self._by_id[rid]
        except KeyError:
            raise LabelSpaceError(f"unknown relation id {rid}") from None

    def resolve(self, relation) -> int:
        """Map a relation given by name or id to its id."""
        if isinstance(relation, str):
            return self.by_name(relation).id
        return self.by_id(int(relation)).id

    def to_json(self) -> list[dict]:
        return [{"id": l.id, "name": l.name, "no_relation": l.is_no_relation} for l in self.labels]

    @classmethod
    def from_json(cls, rows: Sequence[Mapping]) -> "LabelSpace":
        return cls([RelationLabel(int(r["id"]), str(r["name"]), bool(r.get("no_relation", False)))
                    for r in rows])


# -- tokenization ---------------------------------------------------------------

def normalize_tokens(tokens: Iterable[str]) -> tuple[str, ...]:
    out = []
    for t in tokens:
        out.extend(str(t).split())
    return tuple(out)


def phrases_to_tokens(phrases: Sequence[str]) -> tuple[str, ...]:
    toks: list[str] = []
    for i, ph in enumerate(phrases):
        if i:
            toks.append(SEP_TOKEN)
        toks.extend(ph.split())
    return tuple(toks)


def target_tokens(text: str, kind: str) -> tuple[str, ...]:
    """Token sequence of a rendered target string.

    Only augmented targets carry phrase structure; meaningless tokens such as
    ``",,,,"`` must survive untouched, so other kinds split on whitespace only.
    """
    if kind == "augmented":
        return phrases_to_tokens([p.strip() for p in text.split(PHRASE_SEP)])
    return tuple(text.split())


def render_tokens(tokens: Sequence[str]) -> str:
    return " ".join(tokens).replace(f" {SEP_TOKEN} ", PHRASE_SEP)


# -- target maps ----------------------------------------------------------------

@dataclass(frozen=True)
class TargetMap:
    kind: str
    labels: LabelSpace
    texts: Mapping[int, str]
    seed: int | None = None
    l: int = 0
    permutation: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LabelSpaceError(f"unknown transform kind {self.kind!r}")
        missing = [l.name for l in self.labels if l.id not in self.texts]
        if missing:
            raise LabelSpaceError(f"no target for relations: {missing}")
        seen: dict[tuple, int] = {}
        for rid in self.labels.ids:
            toks = self.tokens(rid)
            if not toks:
                raise LabelSpaceError(f"empty target for {self.labels.by_id(rid).name!r}")
            if toks in seen:
                a, b = self.labels.by_id(seen[toks]).name, self.labels.by_id(rid).name
                raise LabelSpaceError(f"duplicate target {self.texts[rid]!r} for {a!r} and {b!r}")
            seen[toks] = rid
        object.__setattr__(self, "_lookup", seen)

    def tokens(self, rid: int) -> tuple[str, ...]:
        return target_tokens(self.texts[rid], self.kind)

    def text(self, rid: int) -> str:
        return self.texts[rid]

    def by_name(self) -> dict[str, str]:
        return {l.name: self.texts[l.id] for l in self.labels}

    def vocabulary(self) -> list[str]:
        """Every token some target needs, in first-use order."""
        out: dict[str, None] = {}
        for rid in self.labels.ids:
            for t in self.tokens(rid):
                out.setdefault(t)
        return list(out)

    def match(self, decoded: Sequence[str]) -> int:
        return match_decoded(decoded, self)

    def to_json(self) -> dict:
        return {
            "relations": self.labels.to_json(),
            "transform": {"kind": self.kind, "seed": self.seed, "l": self.l},
            "targets": self.by_name(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "TargetMap":
        labels = LabelSpace.from_json(obj["relations"])
        tr = obj.get("transform", {})
        kind = tr.get("kind", "identity")
        targets = obj.get("targets") or {l.name: l.name for l in labels}
        texts = {labels.by_name(n).id: t for n, t in targets.items()}
        perm = {}
        if kind == "random_bijection":
            perm = {rid: labels.by_name(texts[rid]).id for rid in labels.ids}
        return cls(kind, labels, texts, seed=tr.get("seed"), l=int(tr.get("l") or 0),
                   permutation=perm)


def default_alphabet() -> list[str]:
    """Rare strings used for meaningless targets (the pilot table's column first)."""
    data = resources.files("relalab").joinpath("data/meaningless_alphabet.json").read_text("utf-8")
    return json.loads(data)


def _draw(alphabet: Sequence[str], n: int, seed: int | None) -> list[str]:
    alphabet = list(alphabet)
    if len(set(alphabet)) != len(alphabet):
        raise LabelSpaceError("replacement alphabet contains duplicates")
    if any(not a or len(a.split()) != 1 for a in alphabet):
        raise LabelSpaceError("replacement strings must be single non-empty tokens")
    if n > len(alphabet):
        raise LabelSpaceError(f"alphabet exhausted: need {n} strings, have {len(alphabet)}")
    if seed is None:
        return alphabet[:n]
    order = np.random.default_rng(seed).permutation(len(alphabet))
    return [alphabet[i] for i in order[:n]]


def random_derangement(n: int, seed: int) -> list[int]:
    """Uniform permutation of range(n) with no fixed points (rejection sampling)."""
    if n < 2:
        raise LabelSpaceError("a fixed-point-free bijection needs at least two relations")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return [int(i) for i in perm]


def build_transform(labels: LabelSpace, kind: str, seed: int | None = None,
                    aux: Mapping | None = None, l: int = 0) -> TargetMap:
    """Build the target map for one transform kind.

    ``aux`` carries the kind-specific side input:

    * ``alphabet``: list of replacement strings (meaningless kinds); ``"default"``
      or absent means :func:`default_alphabet`. With ``seed=None`` strings are
      taken in list order, otherwise from a seeded shuffle.
    * ``permutation``: explicit ``name -> name`` map (random_bijection); without
      it a seeded derangement is drawn.
    * ``replacements``: ``name -> phrase`` (synonym_decorrelated); names absent
      from the map keep their own name.
    * ``lexicon``: ``name -> [phrases]`` (augmented); the first ``l`` are used.
      The no-relation label may have no entry and then keeps its bare name.
    """
    aux = dict(aux or {})
    ids, names = labels.ids, labels.names
    texts: dict[int, str] = {}
    perm: dict[int, int] = {}

    if kind == "identity":
        texts = {l_.id: " ".join(l_.name.split()) for l_ in labels}

    elif kind == "random_bijection":
        if aux.get("permutation"):
            mapping = aux["permutation"]
            if set(mapping) != set(names) or sorted(mapping.values()) != sorted(names):
                raise LabelSpaceError("explicit permutation is not a bijection over the relation names")
            perm = {labels.by_name(a).id: labels.by_name(b).id for a, b in mapping.items()}
        else:
            if seed is None:
                raise LabelSpaceError("random_bijection needs a seed or an explicit permutation")
            order = random_derangement(len(ids), seed)
            perm = {ids[i]: ids[j] for i, j in enumerate(order)}
        fixed = [labels.by_id(a).name for a, b in perm.items() if a == b]
        if fixed:
            raise LabelSpaceError(f"bijection has fixed points: {fixed}")
        texts = {a: labels.by_id(b).name for a, b in perm.items()}

    elif kind == "unique_meaningless":
        alphabet = aux.get("alphabet")
        if alphabet in (None, "default"):
            alphabet = default_alphabet()
        drawn = _draw(alphabet, len(ids), seed)
        texts = dict(zip(ids, drawn))

    elif kind == "tokenwise_meaningless":
        alphabet = aux.get("alphabet")
        if alphabet in (None, "default"):
            alphabet = default_alphabet()
        vocab: dict[str, None] = {}
        for n in names:
            for t in n.split():
                vocab.setdefault(t)
        drawn = _draw(alphabet, len(vocab), seed)
        word_map = dict(zip(vocab, drawn))
        texts = {l_.id: " ".join(word_map[t] for t in l_.name.split()) for l_ in labels}

    elif kind == "synonym_decorrelated":
        repl = aux.get("replacements")
        if not repl:
            raise LabelSpaceError("synonym_decorrelated needs replacement phrases")
        unknown = set(repl) - set(names)
        if unknown:
            raise LabelSpaceError(f"replacements for unknown relations: {sorted(unknown)}")
        for l_ in labels:
            r = repl.get(l_.name, l_.name)
            if isinstance(r, (list, tuple)):
                if not r:
                    raise LabelSpaceError(f"missing synonyms for {l_.name!r}")
                r = r[0]
            texts[l_.id] = " ".join(r.split())

    elif kind == "augmented":
        if l < 0:
            raise LabelSpaceError("l must be non-negative")
        lex = aux.get("lexicon") or {}
        for l_ in labels:
            extra = list(lex.get(l_.name, []))[:l]
            # the negative label is not augmented unless the lexicon says so
            if len(extra) < l and not (l_.is_no_relation and not extra):
                raise LabelSpaceError(f"missing synonyms for {l_.name!r}: need {l}, have {len(extra)}")
            phrases = [" ".join(p.split()) for p in [l_.name] + extra]
            if len(set(phrases)) != len(phrases):
                raise LabelSpaceError(f"repeated phrase in augmented target for {l_.name!r}")
            texts[l_.id] = PHRASE_SEP.join(phrases)
    else:
        raise LabelSpaceError(f"unknown transform kind {kind!r}")

    return TargetMap(kind, labels, texts, seed=seed, l=l if kind == "augmented" else 0,
                     permutation=perm)


def invert_permutation(perm: Mapping[int, int]) -> dict[int, int]:
    return {b: a for a, b in perm.items()}


def match_decoded(decoded: Sequence[str], tmap: TargetMap) -> int:
    """Relation whose full target equals ``decoded`` exactly; otherwise the
    no-relation id (:data:`NO_RELATION` when the label space has none)."""
    return tmap._lookup.get(normalize_tokens(decoded), tmap.labels.no_relation_id)


# -- files ------------------------------------------------------------------------

def save_labelspace(tmap: TargetMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tmap.to_json(), ensure_ascii=False, indent=1) + "\n",
                          encoding="utf-8")


def load_labelspace(path: str | Path) -> TargetMap:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise LabelSpaceError(f"{path}: invalid JSON ({e})") from None
    if "relations" not in obj:
        raise LabelSpaceError(f"{path}: missing 'relations'")
    return TargetMap.from_json(obj)


# -- fixtures ---------------------------------------------------------------------

@dataclass
class FixtureReport:
    source: str
    kind: str
    checked: int
    mismatches: list[tuple[str, str, str]]   # (relation, expected, actual)

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def lines(self) -> list[str]:
        head = f"{'PASS' if self.passed else 'FAIL'} {self.source} [{self.kind}] {self.checked} relations"
        return [head] + [f"  {r}: expected {e!r}, got {a!r}" for r, e, a in self.mismatches]


def load_fixture(path: str | Path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        obj["relations"], obj["columns"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise LabelSpaceError(f"cannot parse fixture {path}: {e}") from None
    for col in obj["columns"]:
        if "kind" not in col or "expected" not in col:
            raise LabelSpaceError(f"cannot parse fixture {path}: column without kind/expected")
    return obj


def validate_fixtures(tmap: TargetMap, expected: Mapping[str, str], source: str = "") -> FixtureReport:
    """Compare a target map against ``relation -> expected target`` strings."""
    actual = tmap.by_name()
    bad = []
    for rel, exp in expected.items():
        got = actual.get(rel, "<missing relation>")
        if got != exp:
            bad.append((rel, exp, got))
    return FixtureReport(source, tmap.kind, len(expected), bad)


def fixture_columns(fixture: Mapping, kind: str | None = None):
    """Yield ``(column, TargetMap)`` for each fixture column (optionally one kind)."""
    labels = LabelSpace.from_names(fixture["relations"], fixture.get("no_relation"))
    for col in fixture["columns"]:
        if kind is not None and col["kind"] != kind:
            continue
        tmap = build_transform(labels, col["kind"], seed=col.get("seed"), aux=col.get("aux"),
                               l=int(col.get("l", 0)))
        yield col, tmap


def check_fixture_file(path: str | Path, kind: str | None = None) -> list[FixtureReport]:
    fixture = load_fixture(path)
    reports = []
    for col, tmap in fixture_columns(fixture, kind):
        label = f"{fixture.get('dataset', Path(path).stem)}:{col.get('name', col['kind'])}"
        reports.append(validate_fixtures(tmap, col["expected"], label))
    return reports


def shipped_fixture(name: str) -> Path:
    return Path(str(resources.files("relalab").joinpath(f"data/fixtures/{name}")))
