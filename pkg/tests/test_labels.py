import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relalab.labels import (KINDS, NO_RELATION, LabelSpace, LabelSpaceError, TargetMap,
                            build_transform, check_fixture_file, fixture_columns,
                            invert_permutation, load_fixture, load_labelspace, match_decoded,
                            save_labelspace, shipped_fixture)

GOOGLE = ["date of birth", "education degree", "institution", "place of birth", "place of death"]
LEX = {"date of birth": ["birthday", "time of birth"], "education degree": ["study", "graduate"],
       "institution": ["organization", "team"], "place of birth": ["birthplace", "born in a place"],
       "place of death": ["deathplace", "dead in a place"]}


def google():
    return LabelSpace.from_names(GOOGLE)


def test_identity_verbatim():
    tm = build_transform(google(), "identity")
    assert tm.by_name()["place of birth"] == "place of birth"


def test_tokenwise_shares_prefix():
    fx = load_fixture(shipped_fixture("googlere_variants.json"))
    col, tm = next(fixture_columns(fx, "tokenwise_meaningless"))
    assert tm.by_name()["place of birth"] == ")+ cffffcc û"
    assert tm.by_name()["place of death"] == ")+ cffffcc ]["


def test_pilot_columns():
    fx = load_fixture(shipped_fixture("tacred_pilot.json"))
    maps = {c["kind"]: tm for c, tm in fixture_columns(fx)}
    assert maps["unique_meaningless"].by_name()["date of birth"] == "cffff"
    assert maps["random_bijection"].by_name()["date of birth"] == "religion"


def test_augmented_target_string():
    tm = build_transform(google(), "augmented", aux={"lexicon": LEX}, l=2)
    assert tm.by_name()["place of birth"] == "place of birth, birthplace, born in a place"


def test_match_rules():
    tm = build_transform(google(), "augmented", aux={"lexicon": LEX}, l=2)
    rid = google().by_name("place of birth").id
    full = "place of birth , birthplace , born in a place".split()
    assert match_decoded(full, tm) == rid
    assert match_decoded("place of birth".split(), tm) == NO_RELATION
    assert match_decoded([], tm) == NO_RELATION
    assert match_decoded(["  place", "of  birth ", ",", "birthplace", ",", "born in a place"], tm) == rid


def test_match_uses_no_relation_label_when_present():
    labels = LabelSpace.from_names(["a b", "c", "none"], "none")
    tm = build_transform(labels, "identity")
    assert match_decoded(["zzz"], tm) == labels.by_name("none").id


def test_l0_equals_identity():
    a = build_transform(google(), "augmented", aux={"lexicon": LEX}, l=0)
    b = build_transform(google(), "identity")
    assert all(a.tokens(i) == b.tokens(i) for i in google().ids)


def test_errors():
    with pytest.raises(LabelSpaceError):
        build_transform(google(), "augmented", aux={"lexicon": {}}, l=1)
    with pytest.raises(LabelSpaceError):
        build_transform(google(), "unique_meaningless", aux={"alphabet": ["x", "y"]})
    with pytest.raises(LabelSpaceError):
        build_transform(google(), "unique_meaningless", aux={"alphabet": ["x", "x", "y", "z", "w"]})
    with pytest.raises(LabelSpaceError):
        build_transform(google(), "synonym_decorrelated", aux={})
    with pytest.raises(LabelSpaceError):
        LabelSpace.from_names(["a", "a"])
    with pytest.raises(LabelSpaceError):
        TargetMap("identity", google(), {i: "same" for i in google().ids})


def test_fixture_files_all_pass():
    for name in ("tacred_pilot.json", "tacred_variants.json", "googlere_variants.json",
                 "scierc_variants.json"):
        for rep in check_fixture_file(shipped_fixture(name)):
            assert rep.passed, rep.lines()


def test_google_synonym_fixture():
    fx = load_fixture(shipped_fixture("googlere_variants.json"))
    col, tm = next(fixture_columns(fx, "augmented"))
    assert tm.by_name()["date of birth"] == "date of birth, birthday, time of birth"


def test_altered_fixture_fails_with_diff(tmp_path):
    fx = json.loads(shipped_fixture("googlere_variants.json").read_text())
    col = next(c for c in fx["columns"] if c["kind"] == "unique_meaningless")
    col["expected"]["institution"] = "WRONG"
    p = tmp_path / "f.json"
    p.write_text(json.dumps(fx))
    reps = check_fixture_file(p, "unique_meaningless")
    assert not reps[0].passed
    text = "\n".join(reps[0].lines())
    assert "WRONG" in text and "<?" in text


def test_fixture_parse_failure(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(LabelSpaceError):
        load_fixture(p)


def test_labelspace_file_roundtrip(tmp_path):
    labels = LabelSpace.from_names(GOOGLE + ["no relation"], "no relation")
    tm = build_transform(labels, "random_bijection", seed=4)
    save_labelspace(tm, tmp_path / "ls.json")
    back = load_labelspace(tmp_path / "ls.json")
    assert back.by_name() == tm.by_name() and back.permutation == tm.permutation
    obj = json.loads((tmp_path / "ls.json").read_text())
    assert set(obj) == {"relations", "transform", "targets"}
    assert obj["relations"][-1] == {"id": 5, "name": "no relation", "no_relation": True}


# -- properties ---------------------------------------------------------------------

WORDS = ["place", "of", "birth", "death", "date", "member", "city", "country", "org", "per",
         "title", "spouse", "parent", "child", "age", "origin", "religion", "founded", "by"]


@st.composite
def label_sets(draw):
    # names are random 1-3 word phrases; drawing a seed keeps hypothesis examples small
    n = draw(st.integers(2, 100))
    rng = random.Random(draw(st.integers(0, 2**32)))
    names: list[str] = []
    while len(names) < n:
        name = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 3)))
        if rng.random() < 0.3:
            name += f" {len(names)}"
        if name not in names:
            names.append(name)
    return LabelSpace.from_names(names)


def _build(labels, kind, seed):
    alphabet = [f"z{i}q" for i in range(2000)]
    aux = {"alphabet": alphabet}
    if kind == "synonym_decorrelated":
        aux["replacements"] = {n: f"syn {i}" for i, n in enumerate(labels.names)}
    if kind == "augmented":
        aux["lexicon"] = {n: [f"alt {i} a", f"alt {i} b"] for i, n in enumerate(labels.names)}
    return build_transform(labels, kind, seed=seed, aux=aux, l=2)


@settings(max_examples=40, deadline=None)
@given(label_sets(), st.sampled_from(KINDS), st.integers(0, 10_000))
def test_targets_unique_and_match_roundtrip(labels, kind, seed):
    tm = _build(labels, kind, seed)
    toks = [tm.tokens(i) for i in labels.ids]
    assert len(set(toks)) == len(toks)
    for i in labels.ids:
        assert match_decoded(list(tm.tokens(i)), tm) == i


@settings(max_examples=40, deadline=None)
@given(label_sets(), st.integers(0, 10_000))
def test_bijection_properties(labels, seed):
    tm = build_transform(labels, "random_bijection", seed=seed)
    perm = tm.permutation
    assert sorted(perm.values()) == sorted(labels.ids)
    assert all(a != b for a, b in perm.items())
    inv = invert_permutation(perm)
    assert all(inv[perm[a]] == a for a in perm)
    assert build_transform(labels, "random_bijection", seed=seed).by_name() == tm.by_name()


@settings(max_examples=40, deadline=None)
@given(label_sets(), st.integers(0, 10_000))
def test_tokenwise_consistency(labels, seed):
    tm = _build(labels, "tokenwise_meaningless", seed)
    mapping: dict[str, str] = {}
    for l in labels:
        src, dst = l.name.split(), tm.text(l.id).split()
        assert len(src) == len(dst)
        for s, d in zip(src, dst):
            assert mapping.setdefault(s, d) == d
    assert len(set(mapping.values())) == len(mapping)
