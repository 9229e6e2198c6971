"""``relalab`` command line.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
Run outputs go under ``--out``, else ``$RELALAB_OUT``, else ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .augment import (METHODS, AugmentError, AugmentationConfig, augment_relations,
                      build_inquiry_prompts, build_paraphrase_prompts, load_generations,
                      load_lexicon, tfidf_rank, tfidf_table, write_jsonl)
from .checkpoint import CheckpointError, load_model
from .corpus import (CorpusError, SyntheticSpec, Vocabulary, generate_synthetic_corpus,
                     holdout_split, insert_entity_markers, load_jsonl, truncation_cuts_marker)
from .corpus import write_jsonl as write_instances
from .evaluator import (CSV_HEADER, VocabularyMismatch, csv_row, micro_f1, predict_dataset,
                        write_predictions)
from .experiment import (ConfigError, RunDir, aggregate_reports, build_target_map, digest,
                         dump_json, execute_run, find_reports, load_dataset, load_relations,
                         mean_std, output_root, relations_json, resolve_config, sha256_file,
                         write_manifest, write_summary)
from .labels import (KINDS, LabelSpaceError, build_transform, check_fixture_file, load_labelspace,
                     save_labelspace, shipped_fixture)
from .probe import PCA_LAYERS, ProbeError, analyze
from .trainer import TrainingError

log = logging.getLogger("relalab")

RUNTIME_ERRORS = (AugmentError, CheckpointError, CorpusError, LabelSpaceError, ProbeError,
                  TrainingError, VocabularyMismatch, OSError, ValueError, KeyError)


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _read_json(path: str | None):
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _config(args, extra_flags: dict | None = None):
    file_cfg = _read_json(args.config)
    flags = {
        "transform.kind": getattr(args, "transform", None),
        "transform.l": getattr(args, "l", None),
        "transform.method": getattr(args, "method", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.base_lr": getattr(args, "lr", None),
        "dataset": getattr(args, "dataset", None),
    }
    if getattr(args, "seed", None) is not None:
        flags["seeds"] = [args.seed]
    if getattr(args, "repeats", None) is not None:
        flags["seeds"] = list(range(args.repeats))
    flags.update(extra_flags or {})
    base = Path(args.config).parent if args.config else None
    return resolve_config(file_cfg, flags, base)


def _common_run_flags(p: argparse.ArgumentParser, repeats: bool = False) -> None:
    p.add_argument("--config", help="experiment config JSON (or a run manifest)")
    p.add_argument("--out", help="output root directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--transform", choices=KINDS)
    p.add_argument("--l", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dataset", help="dataset name recorded in reports")
    p.add_argument("--force", action="store_true", help="rebuild an existing run directory")
    if repeats:
        p.add_argument("--repeats", type=int, help="use seeds 0..R-1")


def _run_dir(args, command: str, cfg, extra: dict | None = None) -> RunDir:
    key = digest({"command": command, "hash": cfg.config_hash(), **(extra or {})})[:12]
    return RunDir(output_root(args.out), f"{command}-{cfg['dataset']}-{cfg.variant()}-{key}", args.force)


def _progress(args):
    return (lambda m: print(m, file=sys.stderr)) if args.verbose else None


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec.load(args.spec)
    splits = generate_synthetic_corpus(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = spec.labelspace()
    for name, rows in splits.items():
        write_instances(rows, out / f"{name}.jsonl", labels)
    dump_json(out / "relations.json", relations_json(labels))
    dump_json(out / "lexicon.json", spec.lexicon())
    dump_json(out / "spec.json", spec.to_json())
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in splits.items())} to {out}")
    return 0


def cmd_prepare(args) -> int:
    for p in (args.train, args.relations, args.dev, args.test):
        if p and not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")
    labels = load_relations(args.relations)
    if args.no_relation:
        labels = type(labels).from_names(labels.names, args.no_relation)
    splits = {"train": load_jsonl(args.train, labels)}
    if args.dev:
        splits["dev"] = load_jsonl(args.dev, labels)
    else:
        splits["train"], splits["dev"] = holdout_split(splits["train"], args.holdout, args.seed)
    if args.test:
        splits["test"] = load_jsonl(args.test, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for name, rows in splits.items():
        write_instances(rows, out / f"{name}.jsonl", labels)
        counts = {}
        for r in rows:
            counts[labels.by_id(r.relation).name] = counts.get(labels.by_id(r.relation).name, 0) + 1
        cut = sum(truncation_cuts_marker(insert_entity_markers(r)) for r in rows)
        stats[name] = {"instances": len(rows), "per_relation": counts, "markers_truncated": cut}
    dump_json(out / "relations.json", relations_json(labels))
    dump_json(out / "stats.json", stats)
    print("prepared " + ", ".join(f"{k}={v['instances']}" for k, v in stats.items()) + f" in {out}")
    return 0


def cmd_labelspace(args) -> int:
    if args.fixtures:
        path = Path(args.fixtures)
        if not path.is_file():
            path = shipped_fixture(args.fixtures)
            if not path.is_file():
                raise ConfigError(f"fixture file not found: {args.fixtures}")
        reports = check_fixture_file(path, args.transform)
        if not reports:
            print(f"no fixture columns for transform {args.transform!r}")
            return 1
        for r in reports:
            for line in r.lines():
                print(line)
        return 0 if all(r.passed for r in reports) else 1
    if not args.relations and not args.synthetic:
        raise ConfigError("labelspace needs --relations, --synthetic or --fixtures")
    if args.relations and not Path(args.relations).is_file():
        raise ConfigError(f"file not found: {args.relations}")
    labels = load_relations(args.relations) if args.relations else SyntheticSpec.load().labelspace()
    aux = _read_json(args.aux) or {}
    if args.lexicon:
        aux["lexicon"] = load_lexicon(args.lexicon)
    elif args.transform == "augmented" and "lexicon" not in aux:
        aux["lexicon"] = SyntheticSpec.load().lexicon() if args.synthetic else load_lexicon()
    tmap = build_transform(labels, args.transform or "identity", seed=args.seed, aux=aux, l=args.l or 0)
    if args.out:
        save_labelspace(tmap, args.out)
    for name, text in tmap.by_name().items():
        print(f"{name}\t{text}")
    return 0


def cmd_augment_prompts(args) -> int:
    if args.method == "synonym":
        raise ConfigError("the synonym method uses a lexicon, not prompts")
    labels = load_relations(args.relations) if args.relations else SyntheticSpec.load().labelspace()
    if args.method == "paraphrase":
        prefixes = _read_json(args.prefixes) if args.prefixes else None
        names = [l.name for l in labels if not l.is_no_relation]
        rows = build_paraphrase_prompts(names, prefixes, args.runs or 10)
    else:
        if args.train:
            train_set = load_jsonl(args.train, labels)
        else:
            train_set = generate_synthetic_corpus(SyntheticSpec.load(), 0)["train"]
        rows = build_inquiry_prompts(train_set, labels, args.runs or 50)
    write_jsonl(rows, args.out)
    print(f"wrote {len(rows)} prompts to {args.out}")
    return 0


def cmd_augment_select(args) -> int:
    labels = load_relations(args.relations) if args.relations else SyntheticSpec.load().labelspace()
    acfg = AugmentationConfig(method=args.method, l=args.l, candidate_pool=args.pool,
                              override_path=args.override)
    skip = [l.name for l in labels if l.is_no_relation]
    corpus = lexicon = None
    ranked = {}
    if args.method == "synonym":
        lexicon = load_lexicon(args.lexicon) if args.lexicon else (
            SyntheticSpec.load().lexicon() if not args.relations else load_lexicon())
    else:
        if not args.generations:
            raise ConfigError(f"method {args.method!r} needs --generations")
        corpus = load_generations(args.generations)
        table = tfidf_table(corpus, acfg.stopwords)
        ranked = {n: [[p, s] for p, s in tfidf_rank(corpus, n, acfg.stopwords, args.pool, table)]
                  for n in labels.names if n not in skip and corpus.get(n)}
    phrases = augment_relations(labels.names, acfg, corpus=corpus, lexicon=lexicon, skip=skip)
    dump_json(Path(args.out), phrases)
    if ranked:
        dump_json(Path(args.out).with_suffix(".ranked.json"), ranked)
    for n, ps in phrases.items():
        print(f"{n}\t{', '.join(ps)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if len(cfg.seeds) != 1:
        raise ConfigError("train runs one seed; use lowres or sweep for repetitions")
    rd = _run_dir(args, "train", cfg)
    if rd.exists and not args.force:
        print(f"{rd.final} already complete (use --force to rebuild)")
        return 0
    data = load_dataset(cfg)
    with rd as tmp:
        write_manifest(tmp, "train", cfg)
        res = execute_run(cfg, data, cfg.seeds[0], tmp, _progress(args))
    print(f"{rd.final}\tF1={res.f1:.4f}\tP={res.precision:.4f}\tR={res.recall:.4f}")
    return 0


def _load_run(run_dir: Path):
    for f in ("best.ckpt", "vocab.json", "labelspace.json", "manifest.json"):
        if not (run_dir / f).is_file():
            raise ConfigError(f"{run_dir} is not a run directory (missing {f})")
    model = load_model(run_dir / "best.ckpt")
    vocab = Vocabulary.load(run_dir / "vocab.json")
    tmap = load_labelspace(run_dir / "labelspace.json")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    return model, vocab, tmap, manifest


def _eval_instances(args, manifest, tmap):
    if args.data:
        if not Path(args.data).is_file():
            raise ConfigError(f"file not found: {args.data}")
        return load_jsonl(args.data, tmap.labels), sha256_file(args.data)
    cfg = resolve_config(manifest)
    data = load_dataset(cfg)
    split = getattr(args, "split", "test")
    rows = getattr(data, split) or data.dev
    return rows, f"{split}:{cfg.config_hash()}"


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    model, vocab, tmap, manifest = _load_run(run_dir)
    instances, data_key = _eval_instances(args, manifest, tmap)
    records, _ = predict_dataset(model, vocab, instances, tmap)
    report = micro_f1(records, tmap.labels.no_relation_id)
    out = Path(args.out) if args.out else run_dir / f"eval-{digest(data_key)[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(records, out / "predictions.jsonl", tmap.labels)
    cfg = manifest["config"]
    variant = manifest.get("variant") or resolve_config(manifest).variant()
    seed = manifest["seeds"][0]
    dump_json(out / "report.json", {"dataset": cfg["dataset"], "variant": variant, "seed": seed,
                                    "n": cfg.get("n"), "data": data_key, **report.to_json()})
    (out / "metrics.csv").write_text(CSV_HEADER + "\n" + csv_row(cfg["dataset"], variant, seed, report) + "\n")
    print(f"F1={report.f1:.4f}\tP={report.precision:.4f}\tR={report.recall:.4f}\t{out}")
    return 0


def _multi_run(args, command: str, cfg, grid: list[tuple[str, dict]]) -> tuple[Path, list[dict]]:
    """Run ``cfg`` once per (grid point, seed) inside one run directory."""
    rd = _run_dir(args, command, cfg, {"grid": grid})
    if rd.exists and not args.force:
        print(f"{rd.final} already complete (use --force to rebuild)")
        return rd.final, json.loads((rd.final / "summary.json").read_text())
    with rd as tmp:
        write_manifest(tmp, command, cfg, {"grid": grid})
        data_cache: dict[str, object] = {}
        for label, overrides in grid:
            sub = cfg.with_overrides(**overrides)
            key = digest(sub.values["data"])
            if key not in data_cache:
                data_cache[key] = load_dataset(sub)
            for seed in cfg.seeds:
                res = execute_run(sub, data_cache[key], seed, tmp / label / f"seed{seed}", _progress(args))
                print(f"{label}\tseed={seed}\tF1={res.f1:.4f}", file=sys.stderr)
        rows, problems = aggregate_reports(find_reports([tmp]))
        for p in problems:
            print(f"warning: {p}", file=sys.stderr)
        write_summary(rows, tmp)
    return rd.final, rows


def cmd_lowres(args) -> int:
    cfg = _config(args)
    ns = args.n or [8, 16, 32, 64]
    grid = [(f"n{n}", {"n": n}) for n in ns]
    out, rows = _multi_run(args, "lowres", cfg, grid)
    with open(out / "lowres.csv", "w") as f:
        f.write("n,variant,runs,f1_mean,f1_std\n")
        for r in rows:
            f.write(f"{r['n']},{r['variant']},{r['runs']},{r['f1_mean']:.6f},{r['f1_std']:.6f}\n")
    print((out / "lowres.csv").read_text(), end="")
    print(out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args, {"n": args.n[0] if args.n else None})
    grid = []
    for kind in (args.transforms or [cfg["transform.kind"]]):
        if kind == "augmented":
            for l in (args.ls or [cfg["transform.l"]]):
                grid.append((f"augmented-l{l}", {"transform.kind": kind, "transform.l": l}))
        else:
            grid.append((kind, {"transform.kind": kind}))
    out, rows = _multi_run(args, "sweep", cfg, grid)
    # an l=0 augmentation must coincide with plain relation names
    checks = {}
    if any(label == "augmented-l0" for label, _ in grid):
        data = load_dataset(cfg)
        a = build_target_map(cfg.with_overrides(**{"transform.kind": "augmented", "transform.l": 0}), data, 0)
        b = build_transform(data.labels, "identity")
        checks["l0_identical_to_identity"] = all(a.tokens(i) == b.tokens(i) for i in data.labels.ids)
        dump_json(out / "checks.json", checks)
    for r in rows:
        print(f"{r['variant']}\tn={r['n']}\truns={r['runs']}\tF1={r['f1_mean']:.4f}±{r['f1_std']:.4f}")
    for k, v in checks.items():
        print(f"{k}: {v}")
    print(out)
    return 0 if all(checks.values()) else 1


def cmd_probe(args) -> int:
    run_dir = Path(args.run_dir)
    model, vocab, tmap, manifest = _load_run(run_dir)
    instances, data_key = _eval_instances(args, manifest, tmap)
    if args.limit:
        instances = instances[:args.limit]
    records, traces = predict_dataset(model, vocab, instances, tmap, capture=True)
    report = analyze(traces, [r.gold for r in records], layer=args.layer,
                     pca_layers=args.pca_layers or PCA_LAYERS)
    out = Path(args.out) if args.out else run_dir / f"probe-{digest([data_key, args.layer, args.limit])[:12]}"
    report.write(out)
    print(f"analysed {len(traces)} decodes ({report.self_attention.steps} aligned steps, "
          f"{report.self_attention.dropped_steps} dropped) -> {out}")
    return 0


def cmd_report(args) -> int:
    paths = find_reports(args.dirs)
    rows, problems = aggregate_reports(paths)
    for p in problems:
        print(f"skipped {p}", file=sys.stderr)
    if not rows:
        print("no valid reports found", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else output_root(None)
    write_summary(rows, out, args.stem)
    for r in rows:
        n = "" if r["n"] is None else f"n={r['n']}\t"
        print(f"{r['dataset']}\t{r['variant']}\t{n}runs={r['runs']}\tF1={r['f1_mean']:.4f}±{r['f1_std']:.4f}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relalab", description="Relation extraction as label generation.")
    ap.add_argument("--version", action="version", version=f"relalab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="write the synthetic corpus")
    p.add_argument("--spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="validate and normalise a JSONL dataset")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--relations", required=True)
    p.add_argument("--no-relation")
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("labelspace", help="build a target map or check fixtures")
    p.add_argument("--relations")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic relations")
    p.add_argument("--transform", choices=KINDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--aux", help="JSON with alphabet / permutation / replacements / lexicon")
    p.add_argument("--lexicon")
    p.add_argument("--fixtures", help="fixture file (path or shipped name)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_labelspace)

    p = sub.add_parser("augment-prompts", help="write generator prompts")
    p.add_argument("--method", choices=("paraphrase", "inquiry"), required=True)
    p.add_argument("--relations")
    p.add_argument("--train")
    p.add_argument("--prefixes")
    p.add_argument("--runs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment_prompts)

    p = sub.add_parser("augment-select", help="choose augmentation phrases")
    p.add_argument("--method", choices=METHODS, default="synonym")
    p.add_argument("--l", type=int, default=2)
    p.add_argument("--pool", type=int, default=50)
    p.add_argument("--relations")
    p.add_argument("--generations")
    p.add_argument("--lexicon")
    p.add_argument("--override")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment_select)

    p = sub.add_parser("train", help="train and evaluate one run")
    _common_run_flags(p)
    p.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "evaluate a trained run"),
                          ("probe", cmd_probe, "attention and hidden-state analysis")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--data", help="JSONL split (default: the run's test split)")
        p.add_argument("--split", choices=("train", "dev", "test"), default="test")
        p.add_argument("--out")
        if name == "probe":
            p.add_argument("--layer", type=int, default=-1)
            p.add_argument("--limit", type=int)
            p.add_argument("--pca-layers", nargs="+", choices=PCA_LAYERS)
        p.set_defaults(fn=fn)

    p = sub.add_parser("lowres", help="n-per-relation sweep over seeds")
    _common_run_flags(p, repeats=True)
    p.add_argument("--n", type=_ints, help="comma-separated, default 8,16,32,64")
    p.set_defaults(fn=cmd_lowres)

    p = sub.add_parser("sweep", help="compare transforms and augmentation sizes over seeds")
    _common_run_flags(p, repeats=True)
    p.add_argument("--transforms", type=lambda s: s.split(","))
    p.add_argument("--ls", type=_ints, help="augmentation sizes, e.g. 0,1,2,3")
    p.add_argument("--n", type=_ints, help="per-relation training size")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run reports")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--stem", default="summary")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
