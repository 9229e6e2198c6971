"""Encoder-decoder transformer that reads a marked sentence and writes a label.

Pre-norm residual blocks, fixed sinusoidal positions, optional tied
input/output embeddings. All weights live in one ordered ``name -> Tensor``
mapping so checkpoints and optimizers can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 64
    max_src_len: int = 256
    max_tgt_len: int = 32
    dropout_rate: float = 0.1
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size <= EOS_ID:
            raise ValueError("vocab_size must cover the special tokens")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.n_enc_layers, self.n_dec_layers, self.d_ffn, self.max_src_len,
               self.max_tgt_len) < 1:
            raise ValueError("layer counts, d_ffn and length limits must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


@dataclass
class TraceBundle:
    """Attention maps and hidden states from one greedy decode.

    Decoder positions are ``[BOS] + generated[:-1]``, so the step axis has one
    entry per generated token (EOS included when it was produced).
    """
    self_attention: list[np.ndarray]      # per decoder layer, [heads, T_dec, T_dec]
    cross_attention: list[np.ndarray]     # per decoder layer, [heads, T_dec, T_src]
    decoder_hidden: list[np.ndarray]      # per decoder layer, [T_dec, d_model]; last is post-norm
    encoder_hidden: np.ndarray            # [T_src, d_model]
    generated: list[int] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.decoder_hidden[0].shape[0]


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and shape, derived from the config alone."""
    d, f = cfg.d_model, cfg.d_ffn
    shapes: dict[str, tuple] = {"embed": (cfg.vocab_size, d)}

    def attn(prefix):
        for w in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{w}"] = (d, d)
            shapes[f"{prefix}.b{w}"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.n_enc_layers):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        norm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    norm("enc.ln_f")
    for i in range(cfg.n_dec_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    norm("dec.ln_f")
    if not cfg.tie_embeddings:
        shapes["out_proj"] = (d, cfg.vocab_size)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            data = _xavier(rng, shape[0], shape[1])
        elif leaf == "g":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns ``(ids, is_pad)``."""
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    if width == 0:
        raise ValueError("all sequences are empty")
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    is_pad = np.ones((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        is_pad[i, :len(s)] = False
    return ids, is_pad


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` is True where a key is disallowed for a query.
    """
    dk = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = T.softmax_rows(scores * (1.0 / math.sqrt(dk)), mask)
    return T.matmul(weights, v), weights


def multi_head_attention(xq: Tensor, xkv: Tensor, p: Mapping[str, Tensor], prefix: str,
                         n_heads: int, mask: np.ndarray | None = None):
    """Project, split heads, attend, merge, project.

    ``xq`` is [B, Tq, d], ``xkv`` is [B, Tk, d]; ``mask`` broadcasts to
    [B, heads, Tq, Tk]. Returns the output and the weights [B, heads, Tq, Tk].
    """
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    dh = d // n_heads

    def split(x, n):
        return T.transpose(T.reshape(x, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = split(xq @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"], tq)
    k = split(xkv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"], tk)
    v = split(xkv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"], tk)
    ctx, weights = scaled_dot_attention(q, k, v, mask)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    return merged @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"], weights


class Seq2SeqTransformer:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        expected = param_shapes(config)
        missing = [n for n in expected if n not in self.params]
        if missing:
            raise KeyError(f"missing parameters: {', '.join(missing)}")
        for n, shape in expected.items():
            if self.params[n].shape != shape:
                raise ValueError(f"parameter {n} has shape {self.params[n].shape}, expected {shape}")
        self._pos = sinusoidal_positions(max(config.max_src_len, config.max_tgt_len + 1),
                                         config.d_model)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def frozen(self) -> dict[str, Tensor]:
        """Graph-free views of the weights (shares memory, records nothing)."""
        return {k: Tensor(v.data) for k, v in self.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"missing tensor {k}")
            v.data = np.array(state[k], dtype=np.float64)

    # -- building blocks --------------------------------------------------
    def _embed(self, p, ids: np.ndarray, rng) -> Tensor:
        cfg = self.config
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
        x = T.embedding(p["embed"], ids) * math.sqrt(cfg.d_model)
        x = x + self._pos[: ids.shape[1]]
        return T.dropout(x, cfg.dropout_rate, rng)

    def _ffn(self, p, x, prefix, rng):
        h = T.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return T.dropout(h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"], self.config.dropout_rate, rng)

    @staticmethod
    def _norm(p, x, prefix):
        return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    def _encode(self, p, src: np.ndarray, src_pad: np.ndarray, rng=None) -> Tensor:
        cfg = self.config
        if src.shape[1] > cfg.max_src_len:
            raise ValueError(f"source length {src.shape[1]} exceeds max_src_len={cfg.max_src_len}")
        x = self._embed(p, src, rng)
        mask = src_pad[:, None, None, :]
        for i in range(cfg.n_enc_layers):
            xn = self._norm(p, x, f"enc.{i}.ln1")
            h, _ = multi_head_attention(xn, xn, p, f"enc.{i}.self", cfg.n_heads, mask)
            x = x + T.dropout(h, cfg.dropout_rate, rng)
            x = x + self._ffn(p, self._norm(p, x, f"enc.{i}.ln2"), f"enc.{i}.ffn", rng)
        return self._norm(p, x, "enc.ln_f")

    def _decode(self, p, memory: Tensor, src_pad: np.ndarray, dec_in: np.ndarray,
                rng=None, capture: bool = False):
        cfg = self.config
        t = dec_in.shape[1]
        y = self._embed(p, dec_in, rng)
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)[None, None]
        cross_mask = src_pad[:, None, None, :]
        self_maps, cross_maps, hidden = [], [], []
        for i in range(cfg.n_dec_layers):
            yn = self._norm(p, y, f"dec.{i}.ln1")
            h, w_self = multi_head_attention(yn, yn, p, f"dec.{i}.self", cfg.n_heads, causal)
            y = y + T.dropout(h, cfg.dropout_rate, rng)
            h, w_cross = multi_head_attention(self._norm(p, y, f"dec.{i}.ln2"), memory, p,
                                              f"dec.{i}.cross", cfg.n_heads, cross_mask)
            y = y + T.dropout(h, cfg.dropout_rate, rng)
            y = y + self._ffn(p, self._norm(p, y, f"dec.{i}.ln3"), f"dec.{i}.ffn", rng)
            if capture:
                self_maps.append(w_self.data)
                cross_maps.append(w_cross.data)
                hidden.append(y.data)
        y = self._norm(p, y, "dec.ln_f")
        if capture:
            hidden[-1] = y.data
        out_w = T.transpose(p["embed"], (1, 0)) if cfg.tie_embeddings else p["out_proj"]
        logits = y @ out_w
        return logits, (self_maps, cross_maps, hidden)

    # -- public API ---------------------------------------------------------
    def encode(self, src_ids: Sequence[int]) -> np.ndarray:
        """Encoder states [T_src, d_model] for one unpadded source sequence."""
        src, pad = pad_batch([list(src_ids)])
        return self._encode(self.frozen(), src, pad).data[0]

    def forward_loss(self, src_batch: Sequence[Sequence[int]], tgt_batch: Sequence[Sequence[int]],
                     rng: np.random.Generator | None = None, params=None):
        """Teacher-forced loss. Targets are content ids without BOS/EOS.

        Returns ``(loss, logits)``; pass ``rng`` to enable dropout.
        """
        cfg = self.config
        if len(src_batch) != len(tgt_batch):
            raise ValueError("source and target batches differ in size")
        for y in tgt_batch:
            if len(y) + 1 > cfg.max_tgt_len:
                raise ValueError(f"target of length {len(y)} (+EOS) exceeds max_tgt_len={cfg.max_tgt_len}")
        p = self.params if params is None else params
        src, src_pad = pad_batch(src_batch)
        dec_in, _ = pad_batch([[BOS_ID] + list(y) for y in tgt_batch])
        labels, label_pad = pad_batch([list(y) + [EOS_ID] for y in tgt_batch])
        memory = self._encode(p, src, src_pad, rng)
        logits, _ = self._decode(p, memory, src_pad, dec_in, rng)
        return T.cross_entropy_seq(logits, labels, label_pad), logits

    def greedy_decode_batch(self, src_batch: Sequence[Sequence[int]], capture: bool = False):
        """Greedy decoding until EOS or ``max_tgt_len`` generated tokens.

        Returns ``(outputs, traces)``: content ids (EOS stripped) per source, and
        a :class:`TraceBundle` per source when ``capture`` is set (else None).
        """
        cfg = self.config
        p = self.frozen()
        src, src_pad = pad_batch([list(s) for s in src_batch])
        memory = self._encode(p, src, src_pad)
        n = src.shape[0]
        generated = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        for _ in range(cfg.max_tgt_len):
            dec_in = np.array([[BOS_ID] + g for g in generated], dtype=np.int64)
            logits, _ = self._decode(p, memory, src_pad, dec_in)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            for i in range(n):
                if done[i]:
                    generated[i].append(PAD_ID)
                    continue
                generated[i].append(int(nxt[i]))
                if nxt[i] == EOS_ID:
                    done[i] = True
            if done.all():
                break
        emitted = []
        for g in generated:
            stop = g.index(EOS_ID) + 1 if EOS_ID in g else len(g)
            emitted.append(g[:stop])
        outputs = [e[:-1] if e and e[-1] == EOS_ID else e for e in emitted]
        if not capture:
            return outputs, None
        dec_in = np.array([[BOS_ID] + g[:-1] for g in generated], dtype=np.int64)
        _, (self_maps, cross_maps, hidden) = self._decode(p, memory, src_pad, dec_in, capture=True)
        traces = []
        for i, e in enumerate(emitted):
            t_dec, t_src = len(e), int((~src_pad[i]).sum())
            traces.append(TraceBundle(
                self_attention=[m[i, :, :t_dec, :t_dec].copy() for m in self_maps],
                cross_attention=[m[i, :, :t_dec, :t_src].copy() for m in cross_maps],
                decoder_hidden=[h[i, :t_dec].copy() for h in hidden],
                encoder_hidden=memory.data[i, :t_src].copy(),
                generated=list(e),
            ))
        return outputs, traces

    def greedy_decode(self, src_ids: Sequence[int]) -> tuple[list[int], TraceBundle]:
        outputs, traces = self.greedy_decode_batch([list(src_ids)], capture=True)
        return outputs[0], traces[0]
