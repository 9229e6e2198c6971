"""Experiment configs, content-addressed run directories and the run driver
shared by the command line and the acceptance suite."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .augment import AugmentationConfig, augment_relations, load_generations, load_lexicon
from .corpus import (REInstance, SyntheticSpec, generate_synthetic_corpus, holdout_split,
                     insert_entity_markers, load_jsonl, sample_low_resource, truncation_cuts_marker)
from .evaluator import CSV_HEADER, csv_row, micro_f1, predict_dataset, write_predictions
from .labels import KINDS, LabelSpace, TargetMap, build_transform, save_labelspace
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

OUT_ENV = "RELALAB_OUT"


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


DEFAULTS: dict[str, Any] = {
    "dataset": "synthetic",
    "data": {"synthetic_seed": 0, "spec": None, "train": None, "dev": None, "test": None,
             "relations": None, "holdout": 0.1},
    "transform": {"kind": "identity", "seed": None, "l": 0, "aux": None,
                  "method": "synonym", "lexicon": None, "generations": None, "override": None},
    "train": {k: v for k, v in TrainConfig().to_dict().items()},
    "seeds": [0],
    "n": None,
}


def flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and key in ("data", "transform", "train"):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def unflatten(flat: Mapping[str, Any]) -> dict:
    out: dict = {}
    for k, v in flat.items():
        node = out
        *head, last = k.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = copy.deepcopy(v)
    return out


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    values: dict
    sources: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str):
        node = self.values
        for part in key.split("."):
            node = node[part]
        return node

    @property
    def seeds(self) -> list[int]:
        return list(self.values["seeds"])

    def input_files(self) -> dict[str, str]:
        files = {}
        for key in ("data.spec", "data.train", "data.dev", "data.test", "data.relations",
                    "transform.lexicon", "transform.generations", "transform.override"):
            if self[key]:
                files[key] = self[key]
        return files

    def input_hashes(self) -> dict[str, str]:
        return {k: sha256_file(p) for k, p in sorted(self.input_files().items())}

    def config_hash(self) -> str:
        return digest({"config": self.values, "inputs": self.input_hashes()})

    def variant(self) -> str:
        t = self.values["transform"]
        if t["kind"] == "augmented":
            return f"augmented-{t['method']}-l{t['l']}"
        return t["kind"]

    def with_overrides(self, **flat) -> "ExperimentConfig":
        vals = flatten(self.values)
        vals.update(flat)
        src = dict(self.sources)
        src.update({k: "derived" for k in flat})
        return ExperimentConfig(unflatten(vals), src)

    def to_json(self) -> dict:
        return {"config": self.values, "sources": self.sources}


def resolve_config(file_cfg: Mapping | None = None, flags: Mapping[str, Any] | None = None,
                   base_dir: str | Path | None = None) -> ExperimentConfig:
    """Merge defaults < file < flags and validate. Paths in the file are taken
    relative to ``base_dir`` (the file's directory)."""
    file_cfg = dict(file_cfg or {})
    if "config" in file_cfg and "sources" in file_cfg:  # a run manifest
        file_cfg = file_cfg["config"]
    defaults = flatten(DEFAULTS)
    from_file = flatten(file_cfg)
    unknown = sorted(set(from_file) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    unknown = sorted(set(flags) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown override keys: {', '.join(unknown)}")
    merged, sources = {}, {}
    for k, v in defaults.items():
        if k in flags:
            merged[k], sources[k] = flags[k], "flag"
        elif k in from_file:
            merged[k], sources[k] = from_file[k], "file"
        else:
            merged[k], sources[k] = v, "default"
    for k in ("data.spec", "data.train", "data.dev", "data.test", "data.relations",
              "transform.lexicon", "transform.generations", "transform.override"):
        if merged[k] and sources[k] == "file" and base_dir is not None:
            p = Path(merged[k])
            merged[k] = str(p if p.is_absolute() else Path(base_dir) / p)
    cfg = ExperimentConfig(unflatten(merged), sources)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    for key, path in cfg.input_files().items():
        if not Path(path).is_file():
            raise ConfigError(f"{key}: file not found: {path}")
    if cfg["data.train"] is None and (cfg["data.test"] or cfg["data.dev"]):
        raise ConfigError("data.dev/data.test given without data.train")
    if cfg["data.train"] is not None and cfg["data.relations"] is None:
        raise ConfigError("data.relations is required with file-based datasets")
    kind = cfg["transform.kind"]
    if kind not in KINDS:
        raise ConfigError(f"transform.kind must be one of {', '.join(KINDS)}; got {kind!r}")
    if not isinstance(cfg["transform.l"], int) or cfg["transform.l"] < 0:
        raise ConfigError("transform.l must be a non-negative integer")
    if kind == "augmented" and cfg["transform.method"] != "synonym" and not cfg["transform.generations"]:
        raise ConfigError(f"method {cfg['transform.method']!r} needs transform.generations")
    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    n = cfg["n"]
    if n is not None and (not isinstance(n, int) or n < 1):
        raise ConfigError("n must be a positive integer or null")
    try:
        TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None


# -- data ------------------------------------------------------------------------

def load_relations(path: str | Path) -> LabelSpace:
    """Relation file: a list of names, ``{relations: [...], no_relation: name}``,
    or a saved label space."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(obj, list):
        return LabelSpace.from_names(obj)
    rels = obj.get("relations")
    if rels and isinstance(rels[0], dict):
        return LabelSpace.from_json(rels)
    return LabelSpace.from_names(rels or [], obj.get("no_relation"))


def relations_json(labels: LabelSpace) -> dict:
    return {"relations": labels.names,
            "no_relation": next((l.name for l in labels if l.is_no_relation), None)}


@dataclass
class Dataset:
    labels: LabelSpace
    train: list[REInstance]
    dev: list[REInstance]
    test: list[REInstance]
    lexicon: dict[str, list[str]] | None = None


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg["data.train"] is None:
        spec = SyntheticSpec.load(cfg["data.spec"])
        splits = generate_synthetic_corpus(spec, cfg["data.synthetic_seed"])
        return Dataset(spec.labelspace(), splits["train"], splits["dev"], splits["test"],
                       spec.lexicon())
    labels = load_relations(cfg["data.relations"])
    train_set = load_jsonl(cfg["data.train"], labels)
    dev = load_jsonl(cfg["data.dev"], labels) if cfg["data.dev"] else None
    if dev is None:
        train_set, dev = holdout_split(train_set, cfg["data.holdout"], seed=0)
    test = load_jsonl(cfg["data.test"], labels) if cfg["data.test"] else []
    return Dataset(labels, train_set, dev, test)


def build_target_map(cfg: ExperimentConfig, data: Dataset, seed: int) -> TargetMap:
    t = cfg.values["transform"]
    tseed = seed if t["seed"] is None else t["seed"]
    aux = dict(t["aux"] or {})
    if t["kind"] == "augmented":
        acfg = AugmentationConfig(method=t["method"], l=t["l"], override_path=t["override"])
        lexicon = load_lexicon(t["lexicon"]) if t["lexicon"] else (data.lexicon or load_lexicon())
        corpus = load_generations(t["generations"]) if t["generations"] else None
        skip = [l.name for l in data.labels if l.is_no_relation]
        aux["lexicon"] = augment_relations(data.labels.names, acfg, corpus=corpus,
                                           lexicon=lexicon, skip=skip)
    elif t["kind"] == "synonym_decorrelated" and "replacements" not in aux:
        lex = data.lexicon or load_lexicon(t["lexicon"])
        aux["replacements"] = {n: lex[n][0] for n in data.labels.names if lex.get(n)}
    return build_transform(data.labels, t["kind"], seed=tseed, aux=aux, l=t["l"])


# -- run directories -------------------------------------------------------------

def output_root(explicit: str | Path | None = None) -> Path:
    return Path(explicit or os.environ.get(OUT_ENV) or "runs")


class RunDir:
    """Build into a scratch directory, then rename into place in one step."""

    def __init__(self, root: Path, name: str, force: bool = False):
        self.final = root / name
        self.tmp = root / f".tmp-{name}-{os.getpid()}"
        self.force = force

    @property
    def exists(self) -> bool:
        return (self.final / "manifest.json").is_file()

    def __enter__(self) -> Path:
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def write_manifest(path: Path, command: str, cfg: ExperimentConfig, extra: Mapping | None = None) -> None:
    manifest = {"command": command, "version": __version__, **cfg.to_json(),
                "seeds": cfg.seeds, "inputs": cfg.input_hashes(),
                "precedence": "flags > file > defaults", **dict(extra or {})}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def dump_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# -- runs ------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    n: int | None
    variant: str
    f1: float
    precision: float
    recall: float
    best_dev_f1: float | None
    wall_time: float


def count_truncated(instances: Sequence[REInstance], max_len: int) -> int:
    """Instances whose entity markers fall past the source length limit."""
    return sum(truncation_cuts_marker(insert_entity_markers(x), max_len) for x in instances)


def execute_run(cfg: ExperimentConfig, data: Dataset, seed: int, out: Path,
                progress=None) -> RunResult:
    """One training run plus test evaluation, all artifacts under ``out``."""
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    tmap = build_target_map(cfg, data, seed)
    train_set = data.train
    if cfg["n"] is not None:
        train_set = sample_low_resource(train_set, cfg["n"], seed, data.labels)
    tcfg = TrainConfig.from_dict({**cfg["train"], "seed": seed})
    res = train(train_set, data.dev, tmap, tcfg, out_dir=out, progress=progress)
    save_labelspace(tmap, out / "labelspace.json")
    variant = cfg.variant()
    eval_set = data.test or data.dev
    max_src = res.model.config.max_src_len
    records, _ = predict_dataset(res.model, res.vocab, eval_set, tmap)
    report = micro_f1(records, data.labels.no_relation_id)
    write_predictions(records, out / "predictions.jsonl", data.labels)
    meta = {"dataset": cfg["dataset"], "variant": variant, "seed": seed, "n": cfg["n"],
            "split": "test" if data.test else "dev", "n_train": len(train_set),
            "markers_truncated": {"train": count_truncated(train_set, max_src),
                                  "eval": count_truncated(eval_set, max_src)}}
    dump_json(out / "report.json", {**meta, **report.to_json()})
    (out / "metrics.csv").write_text(CSV_HEADER + "\n" + csv_row(cfg["dataset"], variant, seed, report) + "\n")
    wall = time.perf_counter() - t0
    dump_json(out / "timing.json", {"wall_time": wall, "train_wall_time": res.record.wall_time})
    return RunResult(seed, cfg["n"], variant, report.f1, report.precision, report.recall,
                     res.record.best_dev_f1, wall)


def mean_std(xs: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    m = sum(xs) / len(xs)
    if len(xs) < 2:
        return m, 0.0
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


# -- report aggregation ------------------------------------------------------------

def find_reports(dirs: Iterable[str | Path]) -> list[Path]:
    found = []
    for d in dirs:
        d = Path(d)
        if d.is_file():
            found.append(d)
        elif (d / "report.json").exists():
            found.append(d / "report.json")
        elif d.is_dir():
            # skip half-built run dirs below the search root, not the root itself
            found.extend(sorted(p for p in d.rglob("report.json")
                                if ".tmp-" not in str(p.relative_to(d))))
        else:
            found.append(d / "report.json")
    return found


REPORT_KEYS = ("dataset", "variant", "seed", "precision", "recall", "f1")


def aggregate_reports(paths: Sequence[Path]) -> tuple[list[dict], list[str]]:
    """Group valid reports by (dataset, variant, n). Returns rows and problems."""
    groups: dict[tuple, list[dict]] = {}
    problems = []
    for p in paths:
        try:
            rep = json.loads(Path(p).read_text(encoding="utf-8"))
            missing = [k for k in REPORT_KEYS if k not in rep]
            if missing:
                raise ValueError(f"missing {', '.join(missing)}")
        except (OSError, ValueError) as e:
            problems.append(f"{p}: {e}")
            continue
        groups.setdefault((rep["dataset"], rep["variant"], rep.get("n")), []).append(rep)
    rows = []
    for (ds, var, n), reps in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 0)):
        row = {"dataset": ds, "variant": var, "n": n, "runs": len(reps),
               "seeds": sorted(r["seed"] for r in reps)}
        for k in ("precision", "recall", "f1"):
            row[f"{k}_mean"], row[f"{k}_std"] = mean_std([r[k] for r in reps])
        rows.append(row)
    return rows, problems


SUMMARY_FIELDS = ["dataset", "variant", "n", "runs", "f1_mean", "f1_std", "precision_mean",
                  "precision_std", "recall_mean", "recall_std"]


def write_summary(rows: Sequence[dict], out: Path, stem: str = "summary") -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in SUMMARY_FIELDS})
    dump_json(out / f"{stem}.json", list(rows))
