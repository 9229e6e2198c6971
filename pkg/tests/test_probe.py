import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relalab.model import TraceBundle
from relalab.probe import (ProbeError, analyze, cosine_matrix, cross_attention_cross_entropy,
                           cross_entropy, entropy, hidden_state_cosine_matrix,
                           mean_self_attention_excl_bos, pca_project)


def causal_rows(rng, heads, t):
    w = rng.random((heads, t, t)) * np.tril(np.ones((t, t)))
    return w / w.sum(-1, keepdims=True)


def fake_trace(rng, t=4, src=6, d=5, layers=2, heads=2):
    cross = rng.random((heads, t, src))
    return TraceBundle(
        self_attention=[causal_rows(rng, heads, t) for _ in range(layers)],
        cross_attention=[cross / cross.sum(-1, keepdims=True) for _ in range(layers)],
        decoder_hidden=[rng.normal(size=(t, d)) for _ in range(layers)],
        encoder_hidden=rng.normal(size=(src, d)),
        generated=list(range(t)))


# -- self-attention -------------------------------------------------------------------

def test_bos_excluded_and_renormalized():
    w = np.array([[[1.0, 0, 0], [0.5, 0.5, 0], [0.2, 0.2, 0.6]]])
    tr = TraceBundle([w], [np.ones((1, 3, 2)) / 2], [np.ones((3, 2))], np.ones((2, 2)))
    out = mean_self_attention_excl_bos([tr])
    np.testing.assert_allclose(out.matrix, [[0, 0], [1, 0], [0.25, 0.75]], atol=1e-15)
    assert out.flagged == [0]


def test_single_trace_averaging_is_identity_on_heads():
    rng = np.random.default_rng(0)
    tr = fake_trace(rng, heads=1)
    out = mean_self_attention_excl_bos([tr])
    rest = tr.self_attention[-1][0][:, 1:]
    ok = rest.sum(1) > 0
    np.testing.assert_allclose(out.matrix[ok], rest[ok] / rest[ok].sum(1, keepdims=True), atol=1e-15)


def test_rows_sum_to_one_except_flagged():
    rng = np.random.default_rng(1)
    out = mean_self_attention_excl_bos([fake_trace(rng) for _ in range(5)])
    for i, row in enumerate(out.matrix):
        assert abs(row.sum() - (0.0 if i in out.flagged else 1.0)) < 1e-9


def test_truncation_to_shortest():
    rng = np.random.default_rng(2)
    out = mean_self_attention_excl_bos([fake_trace(rng, t=4), fake_trace(rng, t=6)])
    assert out.matrix.shape == (4, 3) and out.dropped_steps == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_instance_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    traces = [fake_trace(rng) for _ in range(n)]
    perm = rng.permutation(n)
    a = mean_self_attention_excl_bos(traces).matrix
    b = mean_self_attention_excl_bos([traces[i] for i in perm]).matrix
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- entropy ----------------------------------------------------------------------------

def test_uniform_entropy_is_ln_k():
    for k in (1, 2, 5, 17):
        assert entropy(np.full(k, 1 / k)) == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_hand_case():
    p = np.array([0.5, 0.25, 0.25])
    q = np.array([0.25, 0.5, 0.25])
    want = -(0.5 * math.log(0.25) + 0.25 * math.log(0.5) + 0.25 * math.log(0.25))
    assert cross_entropy(p, q) == pytest.approx(want, abs=1e-12)
    assert cross_entropy(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    with pytest.raises(ProbeError):
        cross_entropy(p, q[:2])


def test_cross_attention_diagonal_is_entropy():
    rng = np.random.default_rng(3)
    tr = fake_trace(rng)
    out = cross_attention_cross_entropy([tr])
    p = tr.cross_attention[-1].mean(axis=0)
    for i in range(out.steps):
        assert abs(out.matrix[i, i] - entropy(p[i])) < 1e-9
        for j in range(out.steps):
            assert out.matrix[i, j] == pytest.approx(cross_entropy(p[i], p[j]), abs=1e-12)


def test_cross_attention_source_mismatch():
    rng = np.random.default_rng(4)
    tr = fake_trace(rng)
    tr.encoder_hidden = tr.encoder_hidden[:-1]
    with pytest.raises(ProbeError):
        cross_attention_cross_entropy([tr])


# -- cosine -----------------------------------------------------------------------------

def test_cosine_cases():
    m, zero = cosine_matrix(np.array([[1.0, 0], [2.0, 0], [0, 3.0], [-1.0, 0], [0, 0]]))
    assert m[0, 1] == pytest.approx(1.0) and m[0, 2] == 0.0 and m[0, 3] == pytest.approx(-1.0)
    assert zero == [4] and m[4, 4] == 0.0 and not m[4].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_symmetric_unit_diagonal(seed):
    rng = np.random.default_rng(seed)
    out = hidden_state_cosine_matrix([fake_trace(rng) for _ in range(3)])
    np.testing.assert_array_equal(out.matrix, out.matrix.T)
    np.testing.assert_allclose(np.diag(out.matrix), 1.0, atol=1e-12)
    assert np.abs(out.matrix).max() <= 1.0


# -- PCA --------------------------------------------------------------------------------

def oracle_pca(x, k):
    xc = x - x.mean(0)
    vals, vecs = np.linalg.eigh(np.cov(xc, rowvar=False))
    top = vecs[:, np.argsort(vals)[::-1][:k]]
    return xc @ top


def test_pca_matches_eigh_oracle_up_to_sign():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.normal(size=(10, 4))
        got = pca_project(x, components=2).coords
        want = oracle_pca(x, 2)
        for c in range(2):
            sign = np.sign(got[:, c] @ want[:, c])
            np.testing.assert_allclose(got[:, c], sign * want[:, c], atol=1e-10)


def test_pca_collinear():
    t = np.arange(6, dtype=float)
    x = np.stack([t, 2 * t, -t], axis=1)
    res = pca_project(x, components=2)
    assert res.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)
    assert abs(res.explained_variance_ratio[1]) < 1e-12
    np.testing.assert_allclose(np.abs(res.components[0]), np.array([1, 2, 1]) / math.sqrt(6), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pca_orthonormal_and_reconstruction_improves(seed):
    x = np.random.default_rng(seed).normal(size=(12, 5))
    full = pca_project(x, components=3)
    np.testing.assert_allclose(full.components @ full.components.T, np.eye(3), atol=1e-9)
    assert np.all(np.diff(full.explained_variance_ratio) <= 1e-15)
    errs = []
    for k in (1, 2, 3):
        r = pca_project(x, components=k)
        recon = r.coords @ r.components + r.mean
        errs.append(((x - recon) ** 2).sum())
    assert errs[0] >= errs[1] >= errs[2]


def test_pca_sign_rule_and_errors():
    x = np.random.default_rng(6).normal(size=(8, 3))
    res = pca_project(x)
    for c in res.components:
        assert c[np.argmax(np.abs(c))] > 0
    with pytest.raises(ProbeError):
        pca_project(x[:1])
    with pytest.raises(ProbeError):
        pca_project(x, components=4)


# -- report -----------------------------------------------------------------------------

def test_analyze_writes_artifacts(tmp_path):
    rng = np.random.default_rng(7)
    traces = [fake_trace(rng, layers=3) for _ in range(4)]
    rep = analyze(traces, [0, 1, 0, 1])
    paths = rep.write(tmp_path)
    assert {p.name for p in paths} == {"analysis.json", "self_attention.csv", "cross_entropy.csv",
                                       "cosine.csv", "pca_encoder.csv", "pca_decoder-first.csv",
                                       "pca_decoder-middle.csv", "pca_decoder-last.csv"}
    rows = list(csv.reader(open(tmp_path / "pca_encoder.csv")))
    assert rows[0] == ["instance_id", "label_id", "pc1", "pc2"] and len(rows) == 5
    first = {p.name: p.read_bytes() for p in paths}
    rep.write(tmp_path)
    assert first == {p.name: p.read_bytes() for p in paths}
    with pytest.raises(ProbeError):
        analyze(traces, [0])
