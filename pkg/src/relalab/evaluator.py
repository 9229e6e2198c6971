"""Decode-and-match prediction and micro-F1 over positive relations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import MAX_SRC_LEN, REInstance, Vocabulary, encode_instance, insert_entity_markers
from .labels import LabelSpace, TargetMap, match_decoded
from .model import Seq2SeqTransformer, TraceBundle


class VocabularyMismatch(ValueError):
    pass


@dataclass
class PredictionRecord:
    instance_id: int
    decoded: list[str]
    matched: int
    gold: int

    def to_json(self, labels: LabelSpace | None = None) -> dict:
        row = asdict(self)
        if labels is not None:
            name = lambda rid: labels.by_id(rid).name if rid in labels.ids else None
            row["matched_name"], row["gold_name"] = name(self.matched), name(self.gold)
        return row


@dataclass
class MicroF1Report:
    precision: float
    recall: float
    f1: float
    tp: int
    predicted_positive: int
    gold_positive: int
    per_relation: dict[int, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_relation"] = {str(k): v for k, v in sorted(self.per_relation.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MicroF1Report":
        d = dict(d)
        d["per_relation"] = {int(k): v for k, v in d.get("per_relation", {}).items()}
        return cls(**d)


def micro_f1(records: Sequence[PredictionRecord], no_relation_id: int) -> MicroF1Report:
    """Micro precision/recall/F1 with the negative label excluded.

    A prediction counts as positive when it is not ``no_relation_id``; a true
    positive additionally equals the gold label. Empty denominators give 0.
    """
    tp = pred_pos = gold_pos = 0
    per: dict[int, dict[str, int]] = {}

    def bump(rid, key):
        per.setdefault(rid, {"tp": 0, "fp": 0, "fn": 0})[key] += 1

    for r in records:
        if r.matched != no_relation_id:
            pred_pos += 1
        if r.gold != no_relation_id:
            gold_pos += 1
        if r.matched == r.gold:
            if r.gold != no_relation_id:
                tp += 1
            bump(r.gold, "tp")
        else:
            bump(r.matched, "fp")
            bump(r.gold, "fn")
    p = tp / pred_pos if pred_pos else 0.0
    rc = tp / gold_pos if gold_pos else 0.0
    f1 = 2 * p * rc / (p + rc) if p + rc > 0 else 0.0
    return MicroF1Report(p, rc, f1, tp, pred_pos, gold_pos, per)


def encode_sources(instances: Sequence[REInstance], vocab: Vocabulary,
                   max_len: int = MAX_SRC_LEN) -> list[list[int]]:
    return [encode_instance(insert_entity_markers(x), vocab, max_len) for x in instances]


def check_vocabulary(model: Seq2SeqTransformer, vocab: Vocabulary, tmap: TargetMap) -> None:
    if model.config.vocab_size != len(vocab):
        raise VocabularyMismatch(f"model vocabulary has {model.config.vocab_size} entries, "
                                 f"vocabulary file has {len(vocab)}")
    missing = [t for t in tmap.vocabulary() if t not in vocab]
    if missing:
        raise VocabularyMismatch(f"target tokens missing from the vocabulary: {missing}")


def predict_dataset(model: Seq2SeqTransformer, vocab: Vocabulary, instances: Sequence[REInstance],
                    tmap: TargetMap, capture: bool = False, batch_size: int = 64):
    """Greedy-decode every instance and map the output to a relation id.

    Returns ``(records, traces)``; ``traces`` is None unless ``capture``.
    """
    check_vocabulary(model, vocab, tmap)
    srcs = encode_sources(instances, vocab, model.config.max_src_len)
    records: list[PredictionRecord] = []
    traces: list[TraceBundle] | None = [] if capture else None
    for start in range(0, len(srcs), batch_size):
        outs, tr = model.greedy_decode_batch(srcs[start:start + batch_size], capture=capture)
        for k, ids in enumerate(outs):
            i = start + k
            toks = vocab.decode(ids)
            records.append(PredictionRecord(i, toks, match_decoded(toks, tmap), instances[i].relation))
        if capture:
            traces.extend(tr)
    return records, traces


def write_predictions(records: Sequence[PredictionRecord], path: str | Path,
                      labels: LabelSpace | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(labels), ensure_ascii=False) + "\n")


CSV_HEADER = "dataset,variant,seed,precision,recall,f1"


def csv_row(dataset: str, variant: str, seed, report: MicroF1Report) -> str:
    return f"{dataset},{variant},{seed},{report.precision:.6f},{report.recall:.6f},{report.f1:.6f}"
