"""Relation-extraction instances: loading, entity markers, vocabulary,
low-resource sampling and a templated synthetic corpus."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labels import LabelSpace, LabelSpaceError
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

log = logging.getLogger(__name__)

HEAD_MARK, TAIL_MARK = "@", "#"
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", HEAD_MARK, TAIL_MARK)
MAX_SRC_LEN = 256


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class REInstance:
    tokens: tuple[str, ...]
    head: tuple[int, int]          # inclusive token span
    tail: tuple[int, int]
    relation: int
    text: str | None = None        # raw surface string, when it differs from " ".join(tokens)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "head", tuple(int(i) for i in self.head))
        object.__setattr__(self, "tail", tuple(int(i) for i in self.tail))
        n = len(self.tokens)
        for nm, (s, e) in (("head", self.head), ("tail", self.tail)):
            if not 0 <= s <= e < n:
                raise CorpusError(f"{nm} span {(s, e)} out of bounds for {n} tokens")
        (hs, he), (ts, te) = self.head, self.tail
        if hs <= te and ts <= he:
            raise CorpusError(f"overlapping spans head={self.head} tail={self.tail}")

    def head_text(self) -> str:
        return " ".join(self.tokens[self.head[0]:self.head[1] + 1])

    def tail_text(self) -> str:
        return " ".join(self.tokens[self.tail[0]:self.tail[1] + 1])

    def surface_text(self) -> str:
        return self.text if self.text is not None else " ".join(self.tokens)

    def to_json(self, labels: LabelSpace | None = None) -> dict:
        rel = labels.by_id(self.relation).name if labels is not None else self.relation
        row = {"tokens": list(self.tokens), "head": list(self.head), "tail": list(self.tail),
               "relation": rel}
        if self.text is not None:
            row["text"] = self.text
        return row


@dataclass(frozen=True)
class MarkedInstance:
    tokens: tuple[str, ...]
    source: REInstance
    marker_positions: tuple[int, ...]   # indices of the four inserted markers, ascending

    def strip(self) -> tuple[str, ...]:
        drop = set(self.marker_positions)
        return tuple(t for i, t in enumerate(self.tokens) if i not in drop)


def insert_entity_markers(inst: REInstance) -> MarkedInstance:
    """Wrap the head span in '@' and the tail span in '#'.

    The later span is marked first so the earlier span's indices stay valid.
    """
    toks = list(inst.tokens)
    spans = sorted([(inst.head, HEAD_MARK), (inst.tail, TAIL_MARK)], key=lambda x: -x[0][0])
    for (s, e), mark in spans:
        toks.insert(e + 1, mark)
        toks.insert(s, mark)
    (s1, e1), (s2, e2) = sorted([inst.head, inst.tail])
    # first span shifts by 1 inside, second span by 2 before and 3 inside
    positions = (s1, e1 + 2, s2 + 2, e2 + 4)
    return MarkedInstance(tuple(toks), inst, positions)


def truncation_cuts_marker(marked: MarkedInstance, max_len: int = MAX_SRC_LEN) -> bool:
    return any(p >= max_len for p in marked.marker_positions)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise CorpusError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], extra: Iterable[str] = ()) -> "Vocabulary":
        words = set()
        for seq in sequences:
            words.update(seq)
        words.update(extra)
        words -= set(SPECIALS)
        return cls(list(SPECIALS) + sorted(words))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.itos, ensure_ascii=False, indent=0) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def encode_instance(marked: MarkedInstance, vocab: Vocabulary, max_len: int = MAX_SRC_LEN) -> list[int]:
    """Source ids, out-of-vocabulary words mapped to <unk>, cut to ``max_len``."""
    return vocab.encode(marked.tokens[:max_len])


# -- files -----------------------------------------------------------------------------

def parse_instance(row: Mapping, labels: LabelSpace) -> REInstance:
    try:
        tokens, head, tail, rel = row["tokens"], row["head"], row["tail"], row["relation"]
    except (KeyError, TypeError) as e:
        raise CorpusError(f"missing field {e}") from None
    try:
        rid = labels.resolve(rel)
    except LabelSpaceError:
        raise CorpusError(f"relation {rel!r} is not in the label space") from None
    return REInstance(tuple(tokens), tuple(head), tuple(tail), rid, row.get("text"))


def load_jsonl(path: str | Path, labels: LabelSpace) -> list[REInstance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_instance(json.loads(line), labels))
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{n}: malformed JSON ({e.msg})") from None
            except CorpusError as e:
                raise CorpusError(f"{path}:{n}: {e}") from None
    return out


def write_jsonl(instances: Iterable[REInstance], path: str | Path, labels: LabelSpace) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_json(labels), ensure_ascii=False) + "\n")


# -- sampling ----------------------------------------------------------------------------

def sample_low_resource(train: Sequence[REInstance], n: int, seed: int,
                        labels: LabelSpace | None = None) -> list[REInstance]:
    """``min(n, class size)`` instances per relation, uniformly without
    replacement; the subset keeps the original order."""
    if n < 1:
        raise ValueError("n must be at least 1")
    by_rel: dict[int, list[int]] = {}
    for i, inst in enumerate(train):
        by_rel.setdefault(inst.relation, []).append(i)
    if labels is not None:
        for l in labels:
            if l.id not in by_rel:
                log.warning("relation %r has no training instances; taking none", l.name)
    rng = np.random.default_rng(seed)
    picked: list[int] = []
    for rel in sorted(by_rel):
        idx = by_rel[rel]
        take = rng.choice(len(idx), size=min(n, len(idx)), replace=False)
        picked.extend(idx[j] for j in take)
    return [train[i] for i in sorted(picked)]


def holdout_split(train: Sequence[REInstance], fraction: float = 0.1, seed: int = 0):
    """Carve a dev split out of train for datasets that ship without one."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(train))
    k = max(1, int(round(fraction * len(train))))
    dev_idx = set(order[:k].tolist())
    return ([x for i, x in enumerate(train) if i not in dev_idx],
            [x for i, x in enumerate(train) if i in dev_idx])


# -- synthetic corpus --------------------------------------------------------------------

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr",
           "gl", "kr", "pl", "st", "tr", "zh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


def _pseudo_words(n: int, rng: np.random.Generator, taken: set[str], syllables=(2, 3)) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticSpec:
    relations: list[dict]
    sizes: dict = field(default_factory=lambda: {"train": 40, "dev": 10, "test": 20})
    synonym_cue_rate: float = 0.5
    filler_vocab: int = 120
    entity_vocab: int = 200
    filler_range: tuple[int, int] = (1, 4)

    def __post_init__(self):
        if len(self.relations) < 2:
            raise CorpusError("a synthetic spec needs at least two relations")
        for r in self.relations:
            if "name" not in r or not r.get("cue_templates"):
                raise CorpusError(f"relation entry needs a name and cue_templates: {r}")
            for t in r["cue_templates"]:
                if not all(k in t for k in ("{head}", "{tail}", "{cue}")):
                    raise CorpusError(f"template lacks a {{head}}/{{tail}}/{{cue}} slot: {t!r}")

    @classmethod
    def from_json(cls, obj: Mapping) -> "SyntheticSpec":
        kw = {k: obj[k] for k in ("sizes", "synonym_cue_rate", "filler_vocab", "entity_vocab")
              if k in obj}
        if "filler_range" in obj:
            kw["filler_range"] = tuple(obj["filler_range"])
        return cls(relations=list(obj["relations"]), **kw)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "SyntheticSpec":
        if path is None:
            text = resources.files("relalab").joinpath("data/synthetic_spec.json").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_json(json.loads(text))

    def to_json(self) -> dict:
        return {"relations": self.relations, "sizes": self.sizes,
                "synonym_cue_rate": self.synonym_cue_rate, "filler_vocab": self.filler_vocab,
                "entity_vocab": self.entity_vocab, "filler_range": list(self.filler_range)}

    def labelspace(self) -> LabelSpace:
        neg = [r["name"] for r in self.relations if r.get("no_relation")]
        return LabelSpace.from_names([r["name"] for r in self.relations], neg[0] if neg else None)

    def lexicon(self) -> dict[str, list[str]]:
        return {r["name"]: list(r.get("synonyms", [])) for r in self.relations}

    def cue_phrases(self, name: str) -> list[str]:
        rel = next(r for r in self.relations if r["name"] == name)
        return [name] + list(rel.get("synonyms", []))


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int) -> dict[str, list[REInstance]]:
    """Templated sentences whose relation is given away by one cue phrase.

    Each sentence is ``filler + template + filler``; the template's ``{cue}``
    slot holds the relation name or, with probability ``synonym_cue_rate``, one
    of its synonyms. Splits are disjoint and class-balanced.
    """
    rng = np.random.default_rng(seed)
    labels = spec.labelspace()
    reserved = set()
    for r in spec.relations:
        for ph in [r["name"]] + list(r.get("synonyms", [])):
            reserved.update(ph.split())
        for t in r["cue_templates"]:
            reserved.update(w for w in t.split() if not w.startswith("{"))
    fillers = _pseudo_words(spec.filler_vocab, rng, set(reserved), (2, 2))
    entities = [w.capitalize() for w in
                _pseudo_words(spec.entity_vocab, rng, set(reserved) | set(fillers), (2, 3))]
    lo, hi = spec.filler_range

    def sentence(rel: Mapping) -> REInstance:
        syns = list(rel.get("synonyms", []))
        if syns and rng.random() < spec.synonym_cue_rate:
            cue = syns[int(rng.integers(len(syns)))]
        else:
            cue = rel["name"]
        template = rel["cue_templates"][int(rng.integers(len(rel["cue_templates"])))]
        head = [entities[int(rng.integers(len(entities)))] for _ in range(int(rng.integers(1, 3)))]
        tail = [entities[int(rng.integers(len(entities)))] for _ in range(int(rng.integers(1, 3)))]
        toks: list[str] = [fillers[int(rng.integers(len(fillers)))]
                           for _ in range(int(rng.integers(lo, hi + 1)))]
        hspan = tspan = None
        for piece in template.split():
            if piece == "{head}":
                hspan = (len(toks), len(toks) + len(head) - 1)
                toks.extend(head)
            elif piece == "{tail}":
                tspan = (len(toks), len(toks) + len(tail) - 1)
                toks.extend(tail)
            elif piece == "{cue}":
                toks.extend(cue.split())
            else:
                toks.append(piece)
        toks += [fillers[int(rng.integers(len(fillers)))] for _ in range(int(rng.integers(lo, hi + 1)))]
        return REInstance(tuple(toks), hspan, tspan, labels.by_name(rel["name"]).id)

    seen: set = set()
    splits: dict[str, list[REInstance]] = {}
    for split in ("train", "dev", "test"):
        per_rel = int(spec.sizes.get(split, 0))
        out = []
        for rel in spec.relations:
            made = 0
            while made < per_rel:
                inst = sentence(rel)
                key = (inst.tokens, inst.head, inst.tail)
                if key in seen:
                    continue
                seen.add(key)
                out.append(inst)
                made += 1
        order = rng.permutation(len(out))
        splits[split] = [out[i] for i in order]
    return splits


def cue_oracle(inst: REInstance, spec: SyntheticSpec) -> int | None:
    """Relation whose cue phrase occurs in the sentence (None when not unique)."""
    hits = set()
    toks = list(inst.tokens)
    labels = spec.labelspace()
    for r in spec.relations:
        for ph in spec.cue_phrases(r["name"]):
            p = ph.split()
            if any(toks[i:i + len(p)] == p for i in range(len(toks) - len(p) + 1)):
                hits.add(labels.by_name(r["name"]).id)
    return hits.pop() if len(hits) == 1 else None
