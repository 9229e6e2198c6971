"""Statistics over decode traces: attention averages, cross-attention
cross-entropy, hidden-state cosine similarity and PCA projections.

Decodes of different length are aligned by truncating to the shortest one;
how many steps that dropped is reported alongside each matrix.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import TraceBundle

EPS = 1e-12
DEGENERATE_MASS = 1e-12
PCA_LAYERS = ("encoder", "decoder-first", "decoder-middle", "decoder-last")


class ProbeError(ValueError):
    pass


@dataclass
class StepMatrix:
    matrix: np.ndarray
    flagged: list[int]  # rows (or, for cosine, steps) that could not be normalized
    steps: int
    dropped_steps: int  # steps discarded across instances by truncation


def _common_steps(traces: Sequence[TraceBundle]) -> tuple[int, int]:
    if not traces:
        raise ProbeError("no traces to analyse")
    lens = [t.n_steps for t in traces]
    t = min(lens)
    return t, sum(n - t for n in lens)


def mean_self_attention_excl_bos(traces: Sequence[TraceBundle], layer: int = -1) -> StepMatrix:
    """Head- and instance-averaged decoder self-attention, BOS column removed.

    Row ``i`` is the distribution of step ``i`` over the earlier generated
    tokens, renormalized to one. A row whose whole mass sat on BOS stays zero
    and is listed in ``flagged``.
    """
    t, dropped = _common_steps(traces)
    avg = np.mean([tr.self_attention[layer][:, :t, :t].mean(axis=0) for tr in traces], axis=0)
    rest = avg[:, 1:].copy()
    mass = rest.sum(axis=1)
    flagged = [i for i in range(t) if mass[i] <= DEGENERATE_MASS]
    ok = mass > DEGENERATE_MASS
    rest[ok] /= mass[ok, None]
    rest[~ok] = 0.0
    return StepMatrix(rest, flagged, t, dropped)


def cross_entropy(p: np.ndarray, q: np.ndarray, eps: float = EPS) -> float:
    """``-sum p ln q`` with q clamped at ``eps``."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ProbeError(f"distributions over different supports: {p.shape} vs {q.shape}")
    return float(-(p * np.log(np.maximum(q, eps))).sum())


def entropy(p: np.ndarray, eps: float = EPS) -> float:
    return cross_entropy(p, p, eps)


def cross_attention_cross_entropy(traces: Sequence[TraceBundle], layer: int = -1,
                                  eps: float = EPS) -> StepMatrix:
    """Mean over instances of ``H[i, j] = H(p_i, p_j)``, with ``p_i`` the
    head-averaged cross-attention of step ``i`` over that instance's source."""
    t, dropped = _common_steps(traces)
    acc = np.zeros((t, t))
    for n, tr in enumerate(traces):
        w = tr.cross_attention[layer]
        if w.shape[-1] != tr.encoder_hidden.shape[0]:
            raise ProbeError(f"trace {n}: cross-attention covers {w.shape[-1]} source positions, "
                             f"encoder has {tr.encoder_hidden.shape[0]}")
        p = w[:, :t, :].mean(axis=0)
        acc += -(p @ np.log(np.maximum(p, eps)).T)
    return StepMatrix(acc / len(traces), [], t, dropped)


def cosine_matrix(vectors: np.ndarray) -> tuple[np.ndarray, list[int]]:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    zero = [i for i, n in enumerate(norms) if n == 0.0]
    u = np.divide(v, norms[:, None], out=np.zeros_like(v), where=norms[:, None] > 0)
    m = u @ u.T
    m = np.clip((m + m.T) / 2, -1.0, 1.0)
    ok = norms > 0
    m[np.diag_indices_from(m)] = np.where(ok, 1.0, 0.0)
    return m, zero


def hidden_state_cosine_matrix(traces: Sequence[TraceBundle], layer: int = -1) -> StepMatrix:
    """Cosine similarity between decoding steps of the instance-averaged
    hidden state; zero vectors give zero rows and are flagged."""
    t, dropped = _common_steps(traces)
    avg = np.mean([tr.decoder_hidden[layer][:t] for tr in traces], axis=0)
    m, zero = cosine_matrix(avg)
    return StepMatrix(m, zero, t, dropped)


@dataclass
class PCAResult:
    coords: np.ndarray  # [N, k]
    components: np.ndarray  # [k, D], orthonormal rows
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    label_ids: list[int] = field(default_factory=list)


def pca_project(vectors: np.ndarray, label_ids: Sequence[int] | None = None,
                components: int = 2) -> PCAResult:
    """Exact PCA via the eigendecomposition of the sample covariance.

    Each component is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ProbeError("expected a 2-D array of vectors")
    n, d = x.shape
    if n < 2 or n < components:
        raise ProbeError(f"{n} vectors is too few for {components} components")
    if components > d:
        raise ProbeError(f"cannot extract {components} components from {d} dimensions")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order].T[:components].copy()
    for c in vecs:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    total = vals.sum()
    ratio = vals[:components] / total if total > 0 else np.zeros(components)
    labels = list(label_ids) if label_ids is not None else []
    return PCAResult(xc @ vecs.T, vecs, ratio, mean, labels)


def layer_vectors(traces: Sequence[TraceBundle], which: str) -> np.ndarray:
    """Per-instance mean hidden state at an encoder or decoder layer."""
    if not traces:
        raise ProbeError("no traces to analyse")
    if which == "encoder":
        return np.stack([tr.encoder_hidden.mean(axis=0) for tr in traces])
    n_layers = len(traces[0].decoder_hidden)
    idx = {"decoder-first": 0, "decoder-middle": (n_layers - 1) // 2,
           "decoder-last": n_layers - 1}.get(which)
    if idx is None:
        raise ProbeError(f"unknown layer {which!r}; choose from {', '.join(PCA_LAYERS)}")
    return np.stack([tr.decoder_hidden[idx].mean(axis=0) for tr in traces])


@dataclass
class AnalysisReport:
    self_attention: StepMatrix
    cross_entropy: StepMatrix
    cosine: StepMatrix
    pca: dict[str, PCAResult]
    layer: int
    n_instances: int
    eps: float = EPS

    def to_json(self) -> dict:
        def sm(s: StepMatrix):
            return {"matrix": s.matrix.tolist(), "flagged": s.flagged, "steps": s.steps,
                    "dropped_steps": s.dropped_steps}
        return {
            "n_instances": self.n_instances, "layer": self.layer, "eps": self.eps,
            "head_average": "before entropy",
            "self_attention_excl_bos": sm(self.self_attention),
            "cross_attention_cross_entropy": sm(self.cross_entropy),
            "hidden_cosine": sm(self.cosine),
            "pca": {k: {"explained_variance_ratio": v.explained_variance_ratio.tolist(),
                        "components": v.components.tolist(),
                        "coords": v.coords.tolist(), "label_ids": v.label_ids}
                    for k, v in self.pca.items()},
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "analysis.json"]
        written[0].write_text(json.dumps(self.to_json(), indent=1) + "\n")
        for name, s in (("self_attention", self.self_attention),
                        ("cross_entropy", self.cross_entropy), ("cosine", self.cosine)):
            path = out / f"{name}.csv"
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                for row in s.matrix:
                    w.writerow([repr(float(v)) for v in row])
            written.append(path)
        for layer, res in self.pca.items():
            path = out / f"pca_{layer}.csv"
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["instance_id", "label_id"] + [f"pc{i + 1}" for i in range(res.coords.shape[1])])
                for i, row in enumerate(res.coords):
                    lab = res.label_ids[i] if res.label_ids else ""
                    w.writerow([i, lab] + [repr(float(v)) for v in row])
            written.append(path)
        return written


def analyze(traces: Sequence[TraceBundle], label_ids: Sequence[int], layer: int = -1,
            pca_layers: Sequence[str] = PCA_LAYERS, components: int = 2) -> AnalysisReport:
    if len(label_ids) != len(traces):
        raise ProbeError("one label id per trace is required")
    pca = {name: pca_project(layer_vectors(traces, name), label_ids, components)
           for name in pca_layers}
    return AnalysisReport(mean_self_attention_excl_bos(traces, layer),
                          cross_attention_cross_entropy(traces, layer),
                          hidden_state_cosine_matrix(traces, layer), pca, layer, len(traces))
