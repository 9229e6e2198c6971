import json
import logging
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relalab.augment import (STOPWORDS, AugmentationConfig, AugmentError, augment_relations,
                             build_inquiry_prompts, build_paraphrase_prompts, load_generations,
                             load_lexicon, select_augmentations, synonym_lookup, tfidf_rank,
                             tfidf_table, write_jsonl)
from relalab.corpus import REInstance
from relalab.labels import LabelSpace


# -- brute-force oracle ------------------------------------------------------------

def oracle_rank(corpus, relation, stopwords, pool=50):
    """Re-derives the ranking with plain loops and string scans."""
    def phrases(doc):
        # the random corpora below use plain lowercase words, so whitespace splitting suffices
        words = doc.split()
        out = [w for w in words if w not in stopwords]
        for i in range(len(words) - 1):
            if words[i] not in stopwords and words[i + 1] not in stopwords:
                out.append(words[i] + " " + words[i + 1])
        return out

    per_rel = {}
    for rel, docs in corpus.items():
        bag = []
        for d in docs:
            bag.extend(phrases(d))
        per_rel[rel] = bag
    n = len(per_rel)
    scores = {}
    for p in set(per_rel[relation]):
        tf = per_rel[relation].count(p)
        df = sum(1 for bag in per_rel.values() if p in bag)
        scores[p] = tf * (math.log((1 + n) / (1 + df)) + 1)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:pool]


VOCAB = ["born", "place", "city", "the", "of", "in", "hometown", "native", "death", "died",
         "a", "is", "team", "club", "work", "study", "degree", "and", "birth", "date"]


@st.composite
def toy_corpora(draw):
    rng = random.Random(draw(st.integers(0, 2**32)))
    n_rel = rng.randint(1, 4)
    corpus = {}
    for r in range(n_rel):
        docs = []
        for _ in range(rng.randint(1, 10)):
            docs.append(" ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 20))))
        corpus[f"rel{r}"] = docs
    return corpus


@settings(max_examples=50, deadline=None)
@given(toy_corpora())
def test_tfidf_matches_bruteforce(corpus):
    for rel in corpus:
        try:
            got = tfidf_rank(corpus, rel, STOPWORDS, 50)
        except AugmentError:
            assert oracle_rank(corpus, rel, STOPWORDS) == []
            continue
        assert got == oracle_rank(corpus, rel, STOPWORDS)


def test_tfidf_three_doc_hand_case():
    corpus = {"a": ["alpha beta beta"], "b": ["beta gamma"], "c": ["gamma delta"]}
    table = tfidf_table(corpus)
    idf1, idf2 = math.log(4 / 2) + 1, math.log(4 / 3) + 1
    assert table["a"]["alpha"] == pytest.approx(idf1, abs=0, rel=1e-15)
    assert table["a"]["beta"] == pytest.approx(2 * idf2, rel=1e-15)
    assert table["a"]["alpha beta"] == pytest.approx(idf1, rel=1e-15)


def test_idf_dominance():
    corpus = {"r": ["unique shared"], "s": ["shared"], "t": ["shared"]}
    ranked = tfidf_rank(corpus, "r")
    assert ranked[0][0] in ("unique", "unique shared")
    assert [p for p, _ in ranked].index("unique") < [p for p, _ in ranked].index("shared")


def test_identical_docs_rank_by_tf_then_lexicographic():
    doc = "zeta alpha alpha beta"
    ranked = tfidf_rank({"x": [doc], "y": [doc]}, "x")
    assert [p for p, _ in ranked] == ["alpha", "alpha alpha", "alpha beta", "beta", "zeta", "zeta alpha"]


def test_bigrams_do_not_cross_documents():
    ranked = dict(tfidf_rank({"x": ["alpha", "beta"]}, "x"))
    assert "alpha beta" not in ranked


def test_empty_relation_errors():
    with pytest.raises(AugmentError):
        tfidf_rank({"x": ["a"]}, "y")


# -- selection ----------------------------------------------------------------------

def test_select_filters_name_fragments_and_counts():
    ranked = [("place", 9.0), ("birth", 8.0), ("birthplace", 7.0), ("born in", 6.0), ("hometown", 5.0)]
    assert select_augmentations(ranked, "place of birth", 2) == ["birthplace", "born in"]
    assert select_augmentations(ranked, "place of birth", 0) == []
    with pytest.raises(AugmentError):
        select_augmentations(ranked, "place of birth", 4)


def test_override_wins():
    ranked = [("birthplace", 7.0), ("hometown", 5.0)]
    assert select_augmentations(ranked, "place of birth", 2, ["native land"]) == ["native land", "birthplace"]


def test_synonym_method_google_place_of_birth():
    out = augment_relations(["place of birth"], AugmentationConfig("synonym", l=2))
    assert out["place of birth"] == ["birthplace", "born in a place"]


def test_synonym_lookup(caplog):
    lex = load_lexicon()
    assert synonym_lookup(lex, "institution")[:2] == ["organization", "team"]
    assert synonym_lookup(lex, "INSTITUTION")[:2] == ["organization", "team"]
    with caplog.at_level(logging.WARNING):
        assert synonym_lookup(lex, "no such relation") == []
    assert "no such relation" in caplog.text


def test_malformed_lexicon(tmp_path):
    p = tmp_path / "lex.json"
    p.write_text('{"a": "not a list"}')
    with pytest.raises(AugmentError):
        load_lexicon(p)
    p.write_text("{oops")
    with pytest.raises(AugmentError):
        load_lexicon(p)


def test_override_file_in_mined_pipeline(tmp_path):
    ov = tmp_path / "ov.json"
    ov.write_text(json.dumps({"title": ["job title"]}))
    corpus = {"title": ["the role of chief", "chief officer role"], "age": ["years old", "old age"]}
    out = augment_relations(["title", "age"], AugmentationConfig("paraphrase", l=2, override_path=str(ov)),
                            corpus=corpus)
    assert out["title"][0] == "job title" and len(out["title"]) == 2
    assert len(out["age"]) == 2


@settings(max_examples=30, deadline=None)
@given(toy_corpora(), st.integers(0, 4))
def test_selection_exact_length_or_error(corpus, l):
    for rel in corpus:
        try:
            ranked = tfidf_rank(corpus, rel)
        except AugmentError:
            continue
        try:
            out = select_augmentations(ranked, rel, l)
        except AugmentError:
            continue
        assert len(out) == l


def test_config_bounds():
    with pytest.raises(AugmentError):
        AugmentationConfig("synonym", l=51)
    with pytest.raises(AugmentError):
        AugmentationConfig("dictionary")


# -- prompts ---------------------------------------------------------------------------

def test_paraphrase_prompts():
    rows = build_paraphrase_prompts(["title"])
    assert rows[0]["prompt"] == "Please explain title in this way: "
    assert (rows[0]["prefix_idx"], rows[0]["run_idx"]) == (0, 0)
    assert len(rows) == 50
    names = [f"r{i}" for i in range(42)]
    assert len(build_paraphrase_prompts(names)) == 2100
    assert build_paraphrase_prompts(names) == build_paraphrase_prompts(names)
    with pytest.raises(AugmentError):
        build_paraphrase_prompts(["x"], ["no placeholder"])


def test_inquiry_prompt_verbatim():
    text = "Mr.Scheider played the police chief of a resort town menaced by a shark"
    toks = ["Mr.", "Scheider", "played", "the", "police", "chief", "of", "a", "resort", "town",
            "menaced", "by", "a", "shark"]
    inst = REInstance(toks, (1, 1), (4, 5), 0, text=text)
    rows = build_inquiry_prompts([inst], LabelSpace.from_names(["title"]))
    assert rows[0]["prompt"] == ("Mr.Scheider played the police chief of a resort town menaced by a shark. "
                                 "The relation between Scheider and police chief is :")
    assert rows[0]["runs"] == 50 and rows[0]["relation"] == "title"


def test_inquiry_empty_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert build_inquiry_prompts([], LabelSpace.from_names(["title"])) == []
    assert caplog.records


def test_generation_roundtrip(tmp_path):
    p = tmp_path / "gen.jsonl"
    write_jsonl([{"relation": "a", "text": "x y"}, {"relation": "b", "text": "z"},
                 {"relation": "a", "text": "w"}], p)
    assert load_generations(p) == {"a": ["x y", "w"], "b": ["z"]}
    p.write_text('{"relation": "a"}\n')
    with pytest.raises(AugmentError, match=":1:"):
        load_generations(p)
