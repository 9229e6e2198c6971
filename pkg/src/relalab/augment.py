"""Label augmentation: prompt files for an external generator, TF-IDF phrase
mining over what it generated, and synonym-lexicon lookup.

Nothing here runs a language model. Prompts go out as JSON lines, generations
come back as JSON lines ``{relation, text}``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

METHODS = ("paraphrase", "inquiry", "synonym")
PARAPHRASE_RUNS = 10
INQUIRY_RUNS = 50

STOPWORDS = frozenset("""
a about above after again against all also am an and any are as at be because been before
being below between both but by can could did do does doing down during each few for from
further had has have having he her here hers herself him himself his how i if in into is it
its itself just me more most my myself no nor not now of off on once only or other our ours
ourselves out over own same she should so some such than that the their theirs them
themselves then there these they this those through to too under until up very was we were
what when where which while who whom why will with would you your yours yourself yourselves
""".split())

_WORD = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


class AugmentError(ValueError):
    pass


@dataclass
class AugmentationConfig:
    method: str = "synonym"
    l: int = 2
    candidate_pool: int = 50
    stopwords: frozenset = field(default=STOPWORDS)
    override_path: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise AugmentError(f"unknown augmentation method {self.method!r}")
        if not 0 <= self.l <= self.candidate_pool:
            raise AugmentError(f"l={self.l} must lie in [0, candidate_pool={self.candidate_pool}]")


# -- prompts -----------------------------------------------------------------------

def default_prefixes() -> list[str]:
    text = resources.files("relalab").joinpath("data/paraphrase_prefixes.json").read_text("utf-8")
    return json.loads(text)


def build_paraphrase_prompts(names: Sequence[str], prefixes: Sequence[str] | None = None,
                             runs: int = PARAPHRASE_RUNS) -> list[dict]:
    prefixes = list(prefixes) if prefixes is not None else default_prefixes()
    for i, p in enumerate(prefixes):
        if "{name}" not in p:
            raise AugmentError(f"prefix {i} has no {{name}} placeholder: {p!r}")
    rows = []
    for name in names:
        for pi, prefix in enumerate(prefixes):
            prompt = prefix.replace("{name}", name)
            for run in range(runs):
                rows.append({"relation": name, "prompt": prompt, "prefix_idx": pi, "run_idx": run})
    return rows


def inquiry_prompt(text: str, head: str, tail: str) -> str:
    return f"{text}. The relation between {head} and {tail} is :"


def build_inquiry_prompts(instances, labels, runs: int = INQUIRY_RUNS) -> list[dict]:
    """One prompt per *training* instance; the generator is expected to sample
    it ``runs`` times."""
    rows = []
    if not instances:
        log.warning("no training instances; the inquiry prompt file will be empty")
    for i, inst in enumerate(instances):
        if inst.head is None or inst.tail is None:
            raise AugmentError(f"instance {i} lacks entity spans")
        rows.append({"relation": labels.by_id(inst.relation).name,
                     "prompt": inquiry_prompt(inst.surface_text(), inst.head_text(), inst.tail_text()),
                     "prefix_idx": None, "run_idx": None, "instance": i, "runs": runs})
    return rows


def write_jsonl(rows: Iterable[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def load_generations(path: str | Path) -> dict[str, list[str]]:
    """Generation file -> ``relation -> [documents]`` in file order."""
    corpus: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                corpus.setdefault(str(row["relation"]), []).append(str(row["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise AugmentError(f"{path}:{n}: malformed generation line ({e})") from None
    return corpus


# -- TF-IDF -----------------------------------------------------------------------

def candidate_phrases(text: str, stopwords=STOPWORDS) -> list[str]:
    """Unigrams and adjacent bigrams made only of non-stopwords."""
    words = _WORD.findall(text.lower())
    keep = [w not in stopwords for w in words]
    out = [w for w, k in zip(words, keep) if k]
    out += [f"{a} {b}" for a, b, ka, kb in zip(words, words[1:], keep, keep[1:]) if ka and kb]
    return out


def phrase_counts(docs: Sequence[str], stopwords=STOPWORDS) -> Counter:
    # bigrams never span two generated documents
    c: Counter = Counter()
    for d in docs:
        c.update(candidate_phrases(d, stopwords))
    return c


def tfidf_table(corpus: Mapping[str, Sequence[str]], stopwords=STOPWORDS) -> dict[str, dict[str, float]]:
    """Score every candidate phrase of every relation.

    Each relation's documents form one pseudo-document; tf is the raw count,
    idf = ln((1 + N) / (1 + df)) + 1 with N the number of pseudo-documents.
    """
    counts = {rel: phrase_counts(docs, stopwords) for rel, docs in corpus.items()}
    n = len(counts)
    df: Counter = Counter()
    for c in counts.values():
        df.update(c.keys())
    idf = {p: math.log((1 + n) / (1 + d)) + 1.0 for p, d in df.items()}
    return {rel: {p: tf * idf[p] for p, tf in c.items()} for rel, c in counts.items()}


def tfidf_rank(corpus: Mapping[str, Sequence[str]], relation: str, stopwords=STOPWORDS,
               pool: int = 50, table: Mapping | None = None) -> list[tuple[str, float]]:
    """Top ``pool`` phrases for ``relation``, score descending, ties by phrase."""
    if not corpus.get(relation):
        raise AugmentError(f"no generated documents for relation {relation!r}")
    scores = (table or tfidf_table(corpus, stopwords))[relation]
    if not scores:
        raise AugmentError(f"no candidate phrases for relation {relation!r}")
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:pool]


# -- selection ----------------------------------------------------------------------

def _is_name_fragment(phrase: str, name: str) -> bool:
    p, n = phrase.split(), name.lower().split()
    return any(n[i:i + len(p)] == p for i in range(len(n) - len(p) + 1))


def select_augmentations(ranked: Sequence[tuple[str, float]], name: str, l: int,
                         override: Sequence[str] | None = None) -> list[str]:
    """Exactly ``l`` phrases for ``name``.

    Pinned ``override`` phrases come first; the rest are filled from ``ranked``
    after dropping phrases that merely repeat a contiguous piece of the name.
    """
    if l == 0:
        return []
    chosen: list[str] = []
    for p in list(override or []):
        p = " ".join(p.split())
        if p and p not in chosen:
            chosen.append(p)
    for phrase, _ in ranked:
        if len(chosen) >= l:
            break
        phrase = " ".join(phrase.split())
        if phrase in chosen or _is_name_fragment(phrase.lower(), name):
            continue
        chosen.append(phrase)
    if len(chosen) < l:
        raise AugmentError(f"only {len(chosen)} usable phrases for {name!r}, need l={l}")
    return chosen[:l]


def load_lexicon(path: str | Path | None = None) -> dict[str, list[str]]:
    if path is None:
        text = resources.files("relalab").joinpath("data/lexicon.json").read_text("utf-8")
        src = "built-in lexicon"
    else:
        text, src = Path(path).read_text(encoding="utf-8"), str(path)
    try:
        lex = json.loads(text)
    except json.JSONDecodeError as e:
        raise AugmentError(f"malformed lexicon {src}: {e}") from None
    if not isinstance(lex, dict) or not all(
            isinstance(v, list) and all(isinstance(s, str) for s in v) for v in lex.values()):
        raise AugmentError(f"malformed lexicon {src}: expected {{name: [synonyms]}}")
    return lex


def synonym_lookup(lexicon: Mapping[str, Sequence[str]], name: str) -> list[str]:
    """Stored synonyms for ``name`` (case-insensitive); [] with a warning if absent."""
    key = name.strip().lower()
    for k, v in lexicon.items():
        if k.strip().lower() == key:
            return list(v)
    log.warning("no synonyms for relation %r", name)
    return []


def load_overrides(path: str | Path | None) -> dict[str, list[str]]:
    if path is None:
        return {}
    return load_lexicon(path)


def augment_relations(names: Sequence[str], config: AugmentationConfig, *,
                      corpus: Mapping[str, Sequence[str]] | None = None,
                      lexicon: Mapping[str, Sequence[str]] | None = None,
                      skip: Sequence[str] = ()) -> dict[str, list[str]]:
    """``name -> l phrases`` for every relation, ready for an augmented target map.

    Relations in ``skip`` (typically the no-relation label) get no phrases.
    """
    overrides = load_overrides(config.override_path)
    out: dict[str, list[str]] = {}
    table = None
    if config.method != "synonym":
        if corpus is None:
            raise AugmentError(f"method {config.method!r} needs a generation corpus")
        table = tfidf_table(corpus, config.stopwords)
    elif lexicon is None:
        lexicon = load_lexicon()
    for name in names:
        if name in skip or config.l == 0:
            out[name] = []
            continue
        if config.method == "synonym":
            syns = synonym_lookup(lexicon, name)
            ranked = [(s, float(len(syns) - i)) for i, s in enumerate(syns)]
        elif name in overrides and len(overrides[name]) >= config.l:
            ranked = []
        else:
            ranked = tfidf_rank(corpus, name, config.stopwords, config.candidate_pool, table)
        out[name] = select_augmentations(ranked, name, config.l, overrides.get(name))
    return out
