"""Command-line interface.

Subcommands cover the full workflow: train taggers, evaluate them,
attribute predictions to character sets, run the segmentation / synthetic /
pattern / interaction analyses, and render heatmaps.  Exit codes: 0 success,
2 usage error, 3 missing input file, 4 data/model mismatch, 1 internal
error.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from . import __version__, attribution, corpus, report
from .attribution import AttributionError
from .autodiff import Rng
from .corpus import CorpusError, FINNISH_TRAIN_SKIP_LINES
from .decomposition import DecompositionError, class_contribution
from .kernels import KernelError, backend_name
from .models import (
    CnnConfig, Dataset, LstmConfig, ModelError, TaggerModel, TrainConfig,
    TrainingDiverged, evaluate_accuracy, load_model, save_model, train,
)
from .stats import StatsError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4

LANGUAGES = ("fi", "es", "sv")


def _data_path(path: str) -> str:
    """Resolve relative data paths against CHARCD_DATA_DIR when set."""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    base = os.environ.get("CHARCD_DATA_DIR")
    if base:
        candidate = os.path.join(base, path)
        if os.path.exists(candidate):
            return candidate
    return path


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _model_config(args, arch: str):
    if getattr(args, "small", False):
        if arch == "cnn":
            return CnnConfig(embed_dim=16, widths=(1, 2, 3),
                             counts=(12, 12, 12))
        return LstmConfig(embed_dim=16, hidden=24)
    kwargs = {}
    if arch == "cnn":
        if args.widths:
            kwargs["widths"] = tuple(_int_list(args.widths))
        if args.counts:
            kwargs["counts"] = tuple(_int_list(args.counts))
        if args.embed_dim:
            kwargs["embed_dim"] = args.embed_dim
        return CnnConfig(**kwargs)
    if args.embed_dim:
        kwargs["embed_dim"] = args.embed_dim
    if args.hidden:
        kwargs["hidden"] = args.hidden
    return LstmConfig(**kwargs)


def _read_split(path: str, schema, skip_lines: int = 0):
    return corpus.parse_conllu_file(_data_path(path), schema,
                                    skip_lines=skip_lines)


def _toy_ruleset(args) -> corpus.ToyRuleset:
    if getattr(args, "toy_ruleset", None):
        return corpus.ToyRuleset.load(_data_path(args.toy_ruleset))
    return corpus.DEFAULT_TOY_RULESET


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    manifest = report.RunManifest(command="train", arguments={
        "arch": args.arch, "seed": args.seed, "lr": args.lr,
        "batch_size": args.batch_size, "max_epochs": args.max_epochs,
        "patience": args.patience,
    })
    if args.language == "toy":
        ruleset = _toy_ruleset(args)
        schema = ruleset.schema()
        samples, annotations = corpus.generate_toy_corpus(
            ruleset, args.toy_words, Rng(args.seed).split("corpus"))
        train_s, valid_s, test_s = attribution.split_three(
            samples, Rng(args.seed).split("split"))
        if args.emit_corpus:
            os.makedirs(args.emit_corpus, exist_ok=True)
            for name, part in (("train", train_s), ("valid", valid_s),
                               ("test", test_s)):
                corpus.write_conllu(
                    part, os.path.join(args.emit_corpus, f"{name}.conllu"))
            by_surface = {a.surface: a for a in annotations}
            keep = [by_surface[s.surface]
                    for part in (train_s, valid_s, test_s) for s in part
                    if s.surface in by_surface]
            corpus.write_segments(
                keep, os.path.join(args.emit_corpus, "segments.tsv"))
            manifest.arguments["emit_corpus"] = args.emit_corpus
    else:
        if not (args.train and args.valid):
            print("--train and --valid are required for real corpora",
                  file=sys.stderr)
            return EXIT_USAGE
        schema = corpus.builtin_schema(args.language)
        skip = args.skip_lines
        if skip is None:
            skip = FINNISH_TRAIN_SKIP_LINES if args.language == "fi" else 0
        train_s = _read_split(args.train, schema, skip)
        valid_s = _read_split(args.valid, schema)
        test_s = _read_split(args.test, schema) if args.test else []
        for name, path in (("train", args.train), ("valid", args.valid)):
            manifest.add_input(name, _data_path(path))
        if args.test:
            manifest.add_input("test", _data_path(args.test))
        train_s, valid_s, test_s, reports = corpus.dedupe_and_split(
            train_s, valid_s, test_s)
        for split_name, rep in reports.items():
            print(f"{split_name}: {rep.kept} unique words "
                  f"({rep.dropped} duplicates, {rep.conflicts} conflicting)")
    dataset = Dataset.build(schema, train_s, valid_s, test_s)
    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size,
                     max_epochs=args.max_epochs, patience=args.patience,
                     seed=args.seed,
                     unk_substitution_prob=args.unk_prob)
    try:
        model, history = train(args.arch, dataset, tc,
                               _model_config(args, args.arch))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    save_model(model, args.out)
    print(f"saved {args.arch} model ({model.d2} features, "
          f"vocab {model.vocab.size}) to {args.out}")
    for rec in history:
        print(f"  epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  "
              f"valid acc {rec.valid_accuracy:.4f}")
    if args.history:
        report.write_jsonl(args.history, manifest, (
            {"record": "epoch", "epoch": r.epoch,
             "train_loss": r.train_loss,
             "valid_accuracy": r.valid_accuracy} for r in history))
    if dataset.test:
        acc = evaluate_accuracy(model, dataset.test)
        _print_accuracy(acc)
    return EXIT_OK


def _print_accuracy(acc) -> None:
    print(f"{'class':24s} {'accuracy':>9s} {'majority':>9s}")
    for name, value in acc.per_class.items():
        print(f"{name:24s} {100 * value:8.2f}% "
              f"{100 * acc.majority_per_class[name]:8.2f}%")
    print(f"{'average':24s} {100 * acc.average:8.2f}% "
          f"{100 * acc.majority_average:8.2f}%")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    model = load_model(_data_path(args.model))
    samples = _read_split(args.test, model.schema)
    samples = corpus.dedupe(samples)[0]
    acc = evaluate_accuracy(model, samples)
    _print_accuracy(acc)
    if args.out:
        manifest = report.RunManifest(command="evaluate", arguments={
            "model": args.model, "test": args.test})
        manifest.add_input("test", _data_path(args.test))
        report.write_jsonl(args.out, manifest,
                           [{"record": "accuracy", **acc.to_dict()}])
    return EXIT_OK


# ---------------------------------------------------------------------------
# attribute
# ---------------------------------------------------------------------------

def cmd_attribute(args) -> int:
    model = load_model(_data_path(args.model))
    if args.class_name not in model.schema.class_names:
        print(f"model has no feature class {args.class_name!r} "
              f"(has: {', '.join(model.schema.class_names)})",
              file=sys.stderr)
        return EXIT_MISMATCH
    label = args.label or model.predict(args.word)[args.class_name]
    ids = model.encode(args.word)
    sizes = _int_list(args.sizes) if args.sizes else None
    cands = attribution.enumerate_candidates(
        ids, args.mode, sizes=sizes,
        include_boundaries=args.include_boundaries)
    ranked = attribution.rank_candidates(model, ids, args.class_name, label,
                                         cands)
    contribution = class_contribution(model, ids,
                                      ranked[0].positions if ranked else (),
                                      args.class_name)
    col = model.schema.label_index(args.class_name, label)
    print(f"word {args.word!r}  class {args.class_name}  label {label}  "
          f"logit {contribution.logits[col]:+.4f}")
    shown = ranked[:args.top] if args.top else ranked
    for rc in shown:
        pattern = attribution.render_pattern(args.word, rc.positions)
        print(f"  {rc.score:+10.4f}  {pattern:12s}  positions "
              f"{','.join(str(p) for p in rc.positions)}")
    if args.out:
        manifest = report.RunManifest(command="attribute", arguments={
            "model": args.model, "word": args.word,
            "class": args.class_name, "label": label, "mode": args.mode})
        report.write_jsonl(args.out, manifest, (
            {"record": "candidate",
             "positions": list(rc.positions),
             "pattern": attribution.render_pattern(args.word, rc.positions),
             "score": rc.score} for rc in ranked))
    return EXIT_OK


# ---------------------------------------------------------------------------
# segeval
# ---------------------------------------------------------------------------

def cmd_segeval(args) -> int:
    model = load_model(_data_path(args.model))
    anns = corpus.parse_segmentation_file(_data_path(args.segments),
                                          model.schema)
    result = attribution.topk_segmentation_eval(
        model, anns, only_correct=args.only_correct, mode=args.mode)
    print(f"evaluated {result.evaluated} words "
          f"({result.skipped} skipped, {result.mispredicted} mispredicted)")
    for k in sorted(result.topk):
        print(f"  top-{k}: {result.topk[k]:5d}  ({100 * result.rate(k):.1f}%)")
    if args.out:
        manifest = report.RunManifest(command="segeval", arguments={
            "model": args.model, "segments": args.segments,
            "only_correct": args.only_correct, "mode": args.mode})
        manifest.add_input("segments", _data_path(args.segments))
        records = [{"record": "summary", "evaluated": result.evaluated,
                    "skipped": result.skipped,
                    "mispredicted": result.mispredicted,
                    "topk": {str(k): v for k, v in result.topk.items()}}]
        records.extend({"record": "word", **row} for row in result.per_word)
        report.write_jsonl(args.out, manifest, records)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

def cmd_synthetic(args) -> int:
    levels = tuple(_float_list(args.levels))
    seeds = tuple(_int_list(args.seeds))
    result = attribution.synthetic_experiment(
        levels=levels, seeds=seeds, n_words=args.words,
        symbol=args.symbol, label_noise=args.noise, arch=args.arch,
        progress=lambda cell: print(
            f"  p={cell.p_syn:.1f} seed={cell.seed}: "
            f"{cell.predicted}/{cell.n_words} predicted, "
            f"{cell.syn_top1} marker, {cell.gt_top1} true-rule"))
    print(f"{'p_syn':>6s} {'words':>6s} {'predicted':>10s} "
          f"{'marker':>8s} {'true-rule':>10s}")
    for level in levels:
        t = result.totals(level)
        print(f"{level:6.1f} {t['n_words']:6d} "
              f"{100 * t['predicted_rate']:9.1f}% "
              f"{100 * t['syn_top1_rate']:7.1f}% "
              f"{100 * t['gt_top1_rate']:9.1f}%")
    if args.out:
        manifest = report.RunManifest(command="synthetic", arguments={
            "levels": list(levels), "seeds": list(seeds),
            "words": args.words, "noise": args.noise, "arch": args.arch})
        records = [{"record": "level", **result.totals(level)}
                   for level in levels]
        records.extend(
            {"record": "cell", "p_syn": c.p_syn, "seed": c.seed,
             "n_words": c.n_words, "predicted": c.predicted,
             "syn_top1": c.syn_top1, "gt_top1": c.gt_top1,
             "retrained": c.retrained} for c in result.cells)
        report.write_jsonl(args.out, manifest, records)
    return EXIT_OK


# ---------------------------------------------------------------------------
# patterns
# ---------------------------------------------------------------------------

def cmd_patterns(args) -> int:
    model = load_model(_data_path(args.model))
    samples = _read_split(args.test, model.schema)
    samples = corpus.dedupe(samples)[0]
    if args.class_name not in model.schema.class_names:
        print(f"model has no feature class {args.class_name!r}",
              file=sys.stderr)
        return EXIT_MISMATCH
    labels = ([args.label] if args.label
              else [lab for lab in model.schema.labels(args.class_name)
                    if lab != corpus.NA_LABEL])
    all_reports = []
    for label in labels:
        rep = attribution.pattern_frequency(
            model, samples, args.class_name, label,
            sizes=tuple(_int_list(args.sizes)))
        all_reports.append(rep)
        print(f"{args.class_name}={label}: {rep.evaluated} words "
              f"({rep.mispredicted} mispredicted, {rep.skipped} skipped)")
        for row in rep.rows[:args.max_rows]:
            print(f"  {row.pattern:12s} size {row.size}  {row.count:5d}  "
                  f"({100 * row.share:.1f}%)")
    if args.out:
        manifest = report.RunManifest(command="patterns", arguments={
            "model": args.model, "test": args.test,
            "class": args.class_name, "sizes": args.sizes})
        manifest.add_input("test", _data_path(args.test))
        records = []
        for rep in all_reports:
            records.append({"record": "label", "label": rep.label,
                            "evaluated": rep.evaluated,
                            "skipped": rep.skipped,
                            "mispredicted": rep.mispredicted,
                            "total": rep.total})
            records.extend({"record": "pattern", "label": rep.label,
                            "pattern": r.pattern, "size": r.size,
                            "count": r.count, "share": r.share}
                           for r in rep.rows)
        report.write_jsonl(args.out, manifest, records)
    return EXIT_OK


# ---------------------------------------------------------------------------
# interaction
# ---------------------------------------------------------------------------

def cmd_interaction(args) -> int:
    model = load_model(_data_path(args.model))
    anns = corpus.parse_segmentation_file(_data_path(args.segments),
                                          model.schema)
    result = attribution.interaction_analysis(model, anns,
                                              max_subset_size=args.max_size)
    for notice in result.notices:
        print(f"note: {notice}")
    for name, kw, dunn in (("max", result.kw_max, result.dunn_max),
                           ("min", result.kw_min, result.dunn_min)):
        print(f"{name}-score groups: "
              + ", ".join(f"{g}={len(result.max_scores[g])}"
                          for g in attribution.INTERACTION_GROUPS))
        if kw is None:
            print(f"  {name}: test skipped")
            continue
        print(f"  H({kw.df}) = {kw.statistic:.3f}, p = {kw.p_value:.3g}")
        for cmp in dunn:
            gi = result.group_order[cmp.i]
            gj = result.group_order[cmp.j]
            print(f"    {gi} vs {gj}: z = {cmp.z:+.3f}, "
                  f"adjusted p = {cmp.p_adjusted:.3g}")
    if args.out:
        manifest = report.RunManifest(command="interaction", arguments={
            "model": args.model, "segments": args.segments,
            "max_size": args.max_size})
        manifest.add_input("segments", _data_path(args.segments))
        records = []
        for name, kw, dunn in (("max", result.kw_max, result.dunn_max),
                               ("min", result.kw_min, result.dunn_min)):
            if kw is None:
                continue
            records.append({"record": f"kruskal_{name}",
                            "H": kw.statistic, "df": kw.df,
                            "p_value": kw.p_value,
                            "groups": list(result.group_order),
                            "group_sizes": list(kw.group_sizes)})
            records.extend({"record": f"dunn_{name}",
                            "i": result.group_order[c.i],
                            "j": result.group_order[c.j],
                            "z": c.z, "p_unadjusted": c.p_unadjusted,
                            "p_adjusted": c.p_adjusted} for c in dunn)
        report.write_jsonl(args.out, manifest, records)
    return EXIT_OK


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------

def cmd_heatmap(args) -> int:
    model = load_model(_data_path(args.model))
    if args.class_name not in model.schema.class_names:
        print(f"model has no feature class {args.class_name!r}",
              file=sys.stderr)
        return EXIT_MISMATCH
    bold = []
    if args.segments:
        anns = corpus.parse_segmentation_file(_data_path(args.segments),
                                              model.schema)
        for ann in anns:
            if ann.surface == args.word and ann.class_name == args.class_name:
                bold = sorted(ann.index_set)
                break
    if args.pairs:
        label = args.label or model.predict(args.word)[args.class_name]
        chars, matrix = attribution.pair_score_matrix(
            model, args.word, args.class_name, label)
        rows, cols = chars, chars
        title = f"{args.word}: {args.class_name}={label} pair scores"
    else:
        rows, cols, matrix = attribution.singleton_score_matrix(
            model, args.word, args.class_name)
        title = f"{args.word}: {args.class_name} per-character scores"
    svg = report.heatmap_svg(rows, cols, matrix, bold_cols=bold, title=title)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    sidecar = os.path.splitext(args.out)[0] + ".tsv"
    with open(sidecar, "w", encoding="utf-8") as fh:
        fh.write(report.matrix_text(rows, cols, matrix))
    print(f"wrote {args.out} and {sidecar}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="charcd",
        description="Character-level morphological taggers with exact "
                    "character-set attribution.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a tagger")
    t.add_argument("--arch", choices=("cnn", "bilstm"), required=True)
    t.add_argument("--language", choices=LANGUAGES + ("toy",), required=True)
    t.add_argument("--train")
    t.add_argument("--valid")
    t.add_argument("--test")
    t.add_argument("--skip-lines", type=int, default=None,
                   help="lines to drop from the top of the training file "
                        "(default 520 for fi, else 0)")
    t.add_argument("--toy-words", type=int, default=1500)
    t.add_argument("--toy-ruleset")
    t.add_argument("--emit-corpus",
                   help="directory to write the generated toy corpus to")
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="write per-epoch JSONL here")
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=20)
    t.add_argument("--max-epochs", type=int, default=50)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--unk-prob", type=float, default=0.1)
    t.add_argument("--small", action="store_true",
                   help="small architecture for quick runs")
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--widths", help="comma list of filter widths")
    t.add_argument("--counts", help="comma list of filter counts")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy on a test corpus")
    e.add_argument("--model", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attribute", help="rank character sets for one word")
    a.add_argument("--model", required=True)
    a.add_argument("--word", required=True)
    a.add_argument("--class", dest="class_name", required=True)
    a.add_argument("--label")
    a.add_argument("--mode", choices=("singletons", "windows", "subsets"),
                   default="singletons")
    a.add_argument("--sizes", help="comma list of candidate sizes")
    a.add_argument("--include-boundaries", action="store_true")
    a.add_argument("--top", type=int, default=10)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attribute)

    s = sub.add_parser("segeval",
                       help="top-k recovery of annotated character sets")
    s.add_argument("--model", required=True)
    s.add_argument("--segments", required=True)
    s.add_argument("--only-correct", action="store_true")
    s.add_argument("--mode", choices=("subsets", "windows"),
                   default="subsets",
                   help="candidate pool: every same-size set, or "
                        "consecutive runs only")
    s.add_argument("--out")
    s.set_defaults(func=cmd_segeval)

    y = sub.add_parser("synthetic",
                       help="marker-injection reliance experiment")
    y.add_argument("--levels", default="1.0,0.9,0.8,0.7,0.6,0.5")
    y.add_argument("--seeds", default="1,2,3")
    y.add_argument("--words", type=int, default=800)
    y.add_argument("--symbol", default="#")
    y.add_argument("--noise", type=float, default=0.15)
    y.add_argument("--arch", choices=("cnn", "bilstm"), default="cnn")
    y.add_argument("--out")
    y.set_defaults(func=cmd_synthetic)

    g = sub.add_parser("patterns", help="frequent top-scoring patterns")
    g.add_argument("--model", required=True)
    g.add_argument("--test", required=True)
    g.add_argument("--class", dest="class_name", required=True)
    g.add_argument("--label")
    g.add_argument("--sizes", default="1,2,3")
    g.add_argument("--max-rows", type=int, default=10)
    g.add_argument("--out")
    g.set_defaults(func=cmd_patterns)

    i = sub.add_parser("interaction",
                       help="score-range comparison across character roles")
    i.add_argument("--model", required=True)
    i.add_argument("--segments", required=True)
    i.add_argument("--max-size", type=int, default=4)
    i.add_argument("--out")
    i.set_defaults(func=cmd_interaction)

    h = sub.add_parser("heatmap", help="render per-character score heatmap")
    h.add_argument("--model", required=True)
    h.add_argument("--word", required=True)
    h.add_argument("--class", dest="class_name", required=True)
    h.add_argument("--label")
    h.add_argument("--pairs", action="store_true",
                   help="square grid of pair scores instead of per-label rows")
    h.add_argument("--segments",
                   help="annotation file used to bold true-rule characters")
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CorpusError, ModelError, DecompositionError, AttributionError,
            KernelError, StatsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except Exception:  # pragma: no cover - defensive
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
