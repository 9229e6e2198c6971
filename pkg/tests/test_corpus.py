import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from relalab.corpus import (SPECIALS, CorpusError, REInstance, SyntheticSpec, Vocabulary,
                            cue_oracle, encode_instance, generate_synthetic_corpus, holdout_split,
                            insert_entity_markers, load_jsonl, sample_low_resource,
                            truncation_cuts_marker, write_jsonl)
from relalab.labels import LabelSpace
from relalab.model import UNK_ID

SCHEIDER = "Mr.Scheider played the police chief of a resort town menaced by a shark".split()


def test_scheider_markers():
    m = insert_entity_markers(REInstance(SCHEIDER, (0, 0), (3, 4), 0))
    assert " ".join(m.tokens).startswith("@ Mr.Scheider @ played the # police chief # of")
    assert m.strip() == tuple(SCHEIDER)


def test_tail_before_head():
    m = insert_entity_markers(REInstance(SCHEIDER, (3, 4), (0, 0), 0))
    assert " ".join(m.tokens).startswith("# Mr.Scheider # played the @ police chief @ of")


@st.composite
def instances(draw):
    n = draw(st.integers(2, 30))
    s1 = draw(st.integers(0, n - 2))
    e1 = draw(st.integers(s1, n - 2))
    s2 = draw(st.integers(e1 + 1, n - 1))
    e2 = draw(st.integers(s2, n - 1))
    spans = [(s1, e1), (s2, e2)]
    if draw(st.booleans()):
        spans.reverse()
    return REInstance([f"w{i}" for i in range(n)], spans[0], spans[1], 0)


@given(instances())
def test_markers_reversible_and_positioned(inst):
    m = insert_entity_markers(inst)
    assert m.strip() == inst.tokens
    assert Counter(m.tokens)["@"] == 2 and Counter(m.tokens)["#"] == 2
    assert [i for i, t in enumerate(m.tokens) if t in "@#"] == list(m.marker_positions)
    h0, h1 = [i for i, t in enumerate(m.tokens) if t == "@"]
    assert m.tokens[h0 + 1:h1] == inst.tokens[inst.head[0]:inst.head[1] + 1]
    t0, t1 = [i for i, t in enumerate(m.tokens) if t == "#"]
    assert m.tokens[t0 + 1:t1] == inst.tokens[inst.tail[0]:inst.tail[1] + 1]


def test_overlapping_spans_rejected():
    with pytest.raises(CorpusError):
        REInstance(SCHEIDER, (0, 2), (2, 3), 0)
    with pytest.raises(CorpusError):
        REInstance(SCHEIDER, (0, 0), (3, 40), 0)


def test_vocab_and_encoding():
    vocab = Vocabulary.build([["b", "a"], ["c"]])
    assert tuple(vocab.itos[:len(SPECIALS)]) == SPECIALS
    assert vocab.encode(["a", "zzz"]) == [vocab.stoi["a"], UNK_ID]
    assert vocab.decode(vocab.encode(["a", "b"])) == ["a", "b"]
    long = REInstance([f"t{i}" for i in range(300)], (0, 0), (298, 299), 0)
    m = insert_entity_markers(long)
    assert len(encode_instance(m, vocab)) == 256
    assert truncation_cuts_marker(m)
    short = insert_entity_markers(REInstance(["a", "b", "c"], (0, 0), (2, 2), 0))
    assert not truncation_cuts_marker(short)


def test_vocab_roundtrip(tmp_path):
    v = Vocabulary.build([["x", "y"]])
    v.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json").itos == v.itos


def test_load_jsonl(tmp_path):
    labels = LabelSpace.from_names(["title", "age"])
    p = tmp_path / "d.jsonl"
    p.write_text("")
    assert load_jsonl(p, labels) == []
    rows = [{"tokens": ["a", "b", "c"], "head": [0, 0], "tail": [2, 2], "relation": r}
            for r in ("title", "age", "title")]
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    got = load_jsonl(p, labels)
    assert [x.relation for x in got] == [0, 1, 0]
    write_jsonl(got, tmp_path / "e.jsonl", labels)
    assert load_jsonl(tmp_path / "e.jsonl", labels) == got
    p.write_text(json.dumps(rows[0]) + "\n" + json.dumps({**rows[0], "relation": "spouse"}) + "\n")
    with pytest.raises(CorpusError, match="spouse") as e:
        load_jsonl(p, labels)
    assert ":2:" in str(e.value)
    p.write_text("{bad\n")
    with pytest.raises(CorpusError, match=":1:"):
        load_jsonl(p, labels)


def _pool(sizes):
    return [REInstance(["a", "b"], (0, 0), (1, 1), rel) for rel, k in enumerate(sizes) for _ in range(k)]


def test_low_resource_counts():
    pool = _pool([10, 10, 10, 10, 10])
    assert len(sample_low_resource(pool, 8, 0)) == 40
    assert Counter(x.relation for x in sample_low_resource(_pool([3, 20]), 8, 0)) == {0: 3, 1: 8}
    assert sample_low_resource(pool, 8, 5) == sample_low_resource(pool, 8, 5)
    with pytest.raises(ValueError):
        sample_low_resource(pool, 0, 0)


def test_low_resource_uniform_selection():
    pool = [REInstance(["a", str(i)], (0, 0), (1, 1), 0) for i in range(10)]
    hits = Counter()
    for seed in range(2000):
        hits.update(x.tokens[1] for x in sample_low_resource(pool, 3, seed))
    # each of 10 items is picked with probability 0.3; 2000 draws -> 600 +/- ~20.5 (sd)
    assert all(abs(c - 600) < 5 * 20.5 for c in hits.values())


def test_holdout_split():
    pool = _pool([50, 50])
    train, dev = holdout_split(pool, 0.1, seed=0)
    assert len(dev) == 10 and len(train) == 90


def test_synthetic_corpus():
    spec = SyntheticSpec.load()
    a = generate_synthetic_corpus(spec, 0)
    assert [len(a[k]) for k in ("train", "dev", "test")] == [200, 50, 100]
    assert Counter(x.relation for x in a["train"]) == {i: 40 for i in range(5)}
    keys = [{(x.tokens, x.head, x.tail) for x in a[k]} for k in ("train", "dev", "test")]
    assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
    for split in a.values():
        assert all(cue_oracle(x, spec) == x.relation for x in split)
    b = generate_synthetic_corpus(spec, 0)
    labels = spec.labelspace()
    assert [x.to_json(labels) for x in a["train"]] == [x.to_json(labels) for x in b["train"]]
    with pytest.raises(CorpusError):
        SyntheticSpec.from_json({"relations": spec.relations[:1]})
