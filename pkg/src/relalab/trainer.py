"""Teacher-forced training with per-epoch dev selection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_model
from .corpus import REInstance, Vocabulary, insert_entity_markers
from .evaluator import encode_sources, micro_f1, predict_dataset
from .labels import TargetMap
from .model import ModelConfig, Seq2SeqTransformer
from .optim import AdamW
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    base_lr: float = 3e-4
    warmup_ratio: float = 0.2
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip: float | None = None
    model: dict = field(default_factory=dict)  # ModelConfig fields except vocab_size
    train_f1_every: int = 0  # 0: never decode the training set
    stop_at_train_f1: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if "vocab_size" in self.model:
            raise ValueError("vocab_size is derived from the data, not configured")

    @staticmethod
    def default_epochs(n_train: int, small_threshold: int = 10000) -> int:
        return 20 if n_train < small_threshold else 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    train_loss: list[float]
    dev_f1: list[float | None]
    best_epoch: int  # 1-based
    best_dev_f1: float | None
    config_hash: str
    train_f1: list[float | None] = field(default_factory=list)
    steps: int = 0
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(**d)


@dataclass
class TrainResult:
    model: Seq2SeqTransformer
    vocab: Vocabulary
    record: RunRecord

    def __iter__(self):
        # unpacks as (best checkpoint, run record)
        return iter((self.model, self.record))


def build_vocabulary(train_set: Sequence[REInstance], tmap: TargetMap) -> Vocabulary:
    return Vocabulary.build((insert_entity_markers(x).tokens for x in train_set), tmap.vocabulary())


def select_best_epoch(dev_f1: Sequence[float | None]) -> int:
    """1-based epoch with the highest dev F1, earliest on ties; last if no dev scores."""
    scored = [(f, i) for i, f in enumerate(dev_f1) if f is not None]
    if not scored:
        return len(dev_f1)
    best = max(f for f, _ in scored)
    return next(i for f, i in scored if f == best) + 1


def _clip(params, max_norm: float) -> None:
    sq = sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)


def train(train_set: Sequence[REInstance], dev_set: Sequence[REInstance], tmap: TargetMap,
          config: TrainConfig, vocab: Vocabulary | None = None, out_dir: str | Path | None = None,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train from scratch and return the best-on-dev weights.

    With an empty ``dev_set`` the last epoch is kept. When ``out_dir`` is given
    the best checkpoint, vocabulary and run record are written there.
    """
    if not train_set:
        raise TrainingError("empty training set")
    t0 = time.perf_counter()
    vocab = vocab or build_vocabulary(train_set, tmap)
    mcfg = ModelConfig(**{"seed": config.seed, **config.model, "vocab_size": len(vocab)})
    model = Seq2SeqTransformer(mcfg)
    srcs = encode_sources(train_set, vocab, mcfg.max_src_len)
    tgts = [vocab.encode(tmap.tokens(x.relation)) for x in train_set]

    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = AdamW(model.parameters(), steps_per_epoch * config.epochs, config.base_lr,
                config.warmup_ratio, config.weight_decay)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])

    losses, dev_scores, train_scores = [], [], []
    best_state, best_f1 = None, None
    no_rel = tmap.labels.no_relation_id
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            opt.zero_grad()
            try:
                loss, _ = model.forward_loss([srcs[i] for i in idx], [tgts[i] for i in idx],
                                             rng=dropout_rng)
                loss.backward()
            except NonFiniteError as e:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {opt.state.step_count + 1} "
                                    f"(lr={opt.current_lr():.3g}): {e}") from e
            if config.grad_clip is not None:
                _clip(model.parameters(), config.grad_clip)
            opt.step()
            ntok = sum(len(tgts[i]) + 1 for i in idx)
            total += float(loss.data) * ntok
            count += ntok
        losses.append(total / count)

        dev = None
        if dev_set:
            recs, _ = predict_dataset(model, vocab, dev_set, tmap)
            dev = micro_f1(recs, no_rel).f1
        dev_scores.append(dev)
        tr = None
        if config.train_f1_every and epoch % config.train_f1_every == 0:
            recs, _ = predict_dataset(model, vocab, train_set, tmap)
            tr = micro_f1(recs, no_rel).f1
        train_scores.append(tr)
        if best_state is None or (dev is not None and (best_f1 is None or dev > best_f1)):
            best_state, best_f1 = model.state_dict(), dev
        elif not dev_set:
            best_state = model.state_dict()
        msg = f"epoch {epoch}: loss={losses[-1]:.4f}" + (f" dev_f1={dev:.4f}" if dev is not None else "") \
            + (f" train_f1={tr:.4f}" if tr is not None else "")
        log.info(msg)
        if progress:
            progress(msg)
        if config.stop_at_train_f1 is not None and tr is not None and tr >= config.stop_at_train_f1:
            break

    model.load_state_dict(best_state)
    record = RunRecord(losses, dev_scores, select_best_epoch(dev_scores), best_f1,
                       config.config_hash(), train_scores, opt.state.step_count,
                       time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out / "best.ckpt", {"best_epoch": record.best_epoch})
        vocab.save(out / "vocab.json")
        (out / "run_record.json").write_text(json.dumps(record.to_json(), indent=1) + "\n")
    return TrainResult(model, vocab, record)
