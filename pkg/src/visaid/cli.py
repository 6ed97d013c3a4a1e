"""Command line entry point wiring the whole pipeline.

Subcommands: train-mapper, build-index, train-visad, generate, evaluate,
ablate, selfcheck. Exit codes: 0 success, 1 validation/usage error,
2 runtime error. All randomness derives from --seed; logs are JSON lines on
stderr; artifacts go to --out paths, each preceded by its manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, metrics
from . import nn
from .content_words import load_pos_lexicon, load_stopwords
from .errors import ValidationError
from .features import IMAGE_KIND, WORD_KIND, load_feature_table
from .manifest import make_manifest, write_manifest
from .mapping import (MapperConfig, build_index, caption_examples, hinge,
                      load_index, load_mapper, save_index, save_mapper,
                      score_images, train_mapper)
from .model import VARIANTS, ModelConfig, VisAD
from .training import (RunBundle, TrainConfig, generate, load_run,
                       prepare_items, save_run, train)

log = logging.getLogger("visaid.cli")


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


class _JsonLineFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(),
                           "logger": record.name,
                           "event": record.getMessage()}, sort_keys=True)


def _setup_logging():
    root = logging.getLogger("visaid")
    if not any(isinstance(h, logging.StreamHandler) and
               isinstance(h.formatter, _JsonLineFormatter) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(_JsonLineFormatter())
        root.addHandler(handler)
        root.setLevel(logging.INFO)


def _fractions(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise CliUsageError("--split needs three comma-separated fractions")
    return tuple(float(p) for p in parts)


def build_parser() -> _Parser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--threads", type=int, default=1)
    shared.add_argument("--config", default=None, help="model config JSON")

    parser = _Parser(prog="visaid", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("train-mapper", parents=[shared],
                       help="train the word-image mapping model on captions")
    p.add_argument("--captions", required=True)
    p.add_argument("--word-feats", required=True)
    p.add_argument("--image-feats", required=True)
    p.add_argument("--pos-lexicon", required=True)
    p.add_argument("--stopwords", required=True)
    p.add_argument("--thr", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--joint-dim", type=int, default=64)
    p.add_argument("--max-captions", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_mapper)

    p = sub.add_parser("build-index", parents=[shared],
                       help="build or query the word->image index")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--word-feats", required=True)
    p.add_argument("--image-feats", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--query", default=None, help="print top-k images for one word instead")
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("train-visad", parents=[shared],
                       help="train the dialogue model")
    p.add_argument("--pairs", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--image-feats", required=True)
    p.add_argument("--pos-lexicon", required=True)
    p.add_argument("--stopwords", required=True)
    p.add_argument("--variant", default="FULL", choices=VARIANTS)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--split", type=_fractions, default=(0.8, 0.1, 0.1))
    p.add_argument("--no-split", action="store_true",
                   help="train on all pairs without a validation set")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train_visad)

    p = sub.add_parser("generate", parents=[shared],
                       help="two-phase greedy decoding for one post")
    p.add_argument("--ckpt", required=True, help="run directory")
    p.add_argument("--index", required=True)
    p.add_argument("--image-feats", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--out", default=None, help="also write the trace JSON here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[shared],
                       help="compute the metric report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--image-feats", required=True)
    p.add_argument("--embed-feats", required=True)
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[shared],
                       help="train and evaluate several variants, emit a comparison CSV")
    p.add_argument("--pairs", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--image-feats", required=True)
    p.add_argument("--embed-feats", required=True)
    p.add_argument("--pos-lexicon", required=True)
    p.add_argument("--stopwords", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--split", type=_fractions, default=(0.8, 0.1, 0.1))
    p.add_argument("--no-split", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selfcheck", parents=[shared],
                       help="gradient check a tiny model and run the metric identity suite")
    p.set_defaults(func=cmd_selfcheck)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _resolved(args, skip=("func", "subcommand")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_train_mapper(args) -> int:
    manifest = make_manifest("train-mapper", _resolved(args), {
        "captions": args.captions, "word_feats": args.word_feats,
        "image_feats": args.image_feats, "pos_lexicon": args.pos_lexicon,
        "stopwords": args.stopwords})
    write_manifest(str(args.out) + ".manifest.json", manifest)
    captions = data.load_caption_pairs(args.captions, args.max_captions)
    lexicon = load_pos_lexicon(args.pos_lexicon)
    stopwords = load_stopwords(args.stopwords)
    word_table = load_feature_table(args.word_feats, WORD_KIND)
    image_table = load_feature_table(args.image_feats, IMAGE_KIND)
    config = MapperConfig(thr=args.thr, lr=args.lr, epochs=args.epochs,
                          batch_size=args.batch, seed=args.seed,
                          joint_dim=args.joint_dim)
    model = train_mapper(caption_examples(captions, lexicon, stopwords),
                         word_table, image_table, config)
    save_mapper(args.out, model)
    log.info("saved mapper to %s (final loss %.6f)", args.out,
             model.history[-1] if model.history else float("nan"))
    return 0


def cmd_build_index(args) -> int:
    model = load_mapper(args.model)
    word_table = load_feature_table(args.word_feats, WORD_KIND)
    image_table = load_feature_table(args.image_feats, IMAGE_KIND)
    vocab = data.Vocabulary.load(args.vocab)
    image_ids = sorted(image_table.keys())
    if args.query is not None:
        ranked = score_images(model, args.query, word_table, image_ids, image_table)
        print(json.dumps({"word": args.query,
                          "top": [{"image_id": i, "score": s}
                                  for i, s in ranked[:args.topk]]}, sort_keys=True))
        return 0
    if args.out is None:
        raise ValidationError("--out is required unless --query is given")
    manifest = make_manifest("build-index", _resolved(args), {
        "model": args.model, "vocab": args.vocab,
        "word_feats": args.word_feats, "image_feats": args.image_feats})
    write_manifest(str(args.out) + ".manifest.json", manifest)
    words = [w for w in vocab.words() if w in word_table]
    index = build_index(model, words, word_table, image_ids, image_table,
                        threads=args.threads)
    save_index(args.out, index, manifest["manifest_hash"])
    log.info("indexed %d words over %d candidates", len(index), len(image_ids))
    return 0


def _load_model_config(args, image_table) -> ModelConfig:
    if args.config:
        config = ModelConfig.load(args.config)
        if config.feature_dim != image_table.dim:
            raise ValidationError(
                f"config feature_dim={config.feature_dim} but image table dim={image_table.dim}")
    else:
        config = ModelConfig(feature_dim=image_table.dim)
    return config


def cmd_train_visad(args) -> int:
    image_table = load_feature_table(args.image_feats, IMAGE_KIND)
    config = _load_model_config(args, image_table)
    inputs = {"pairs": args.pairs, "index": args.index,
              "image_feats": args.image_feats, "pos_lexicon": args.pos_lexicon,
              "stopwords": args.stopwords}
    if args.config:
        inputs["config"] = args.config
    manifest = make_manifest("train-visad", _resolved(args), inputs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "manifest.json", manifest)

    pairs = data.load_dialogue_pairs(args.pairs, args.max_pairs)
    lexicon = load_pos_lexicon(args.pos_lexicon)
    stopwords = load_stopwords(args.stopwords)
    index = load_index(args.index, image_table)
    corpus = [u for pair in pairs for u in (pair.post, pair.response)]
    vocab = data.build_vocab(corpus, config.vocab_cap)

    if args.no_split or len(pairs) < 3:
        train_pairs, valid_pairs = pairs, []
    else:
        train_pairs, valid_pairs, _ = data.split(pairs, args.split, args.seed)
    items = prepare_items(train_pairs, vocab, lexicon, stopwords, index, config)
    valid_items = prepare_items(valid_pairs, vocab, lexicon, stopwords, index, config)

    model = VisAD(config, len(vocab), variant=args.variant, seed=args.seed)
    tconfig = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                          seed=args.seed)
    result = train(model, items, tconfig, valid_items or None)
    model.load_state(result.best_state)
    save_run(out_dir, model, vocab, args.pos_lexicon, args.stopwords,
             manifest["manifest_hash"])
    log.info("saved run to %s (best epoch %d)", out_dir, result.best_epoch)
    return 0


def cmd_generate(args) -> int:
    bundle = load_run(args.ckpt)
    if bundle.lexicon is None or bundle.stopwords is None:
        raise ValidationError(f"{args.ckpt}: run directory lacks lexicon/stopword files")
    image_table = load_feature_table(args.image_feats, IMAGE_KIND)
    index = load_index(args.index, image_table)
    trace = generate(bundle.model, data.Utterance.from_raw(args.post),
                     bundle.vocab, bundle.lexicon, bundle.stopwords, index)
    payload = dict(trace.to_json())
    if args.out:
        manifest = make_manifest("generate", _resolved(args), {
            "index": args.index, "image_feats": args.image_feats,
            "ckpt_model": Path(args.ckpt) / "model.ckpt",
            "ckpt_config": Path(args.ckpt) / "config.json"})
        write_manifest(str(args.out) + ".manifest.json", manifest)
        payload["manifest_hash"] = manifest["manifest_hash"]
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    manifest = make_manifest("evaluate", _resolved(args), {
        "pairs": args.pairs, "index": args.index,
        "image_feats": args.image_feats, "embed_feats": args.embed_feats,
        "ckpt_model": Path(args.ckpt) / "model.ckpt",
        "ckpt_config": Path(args.ckpt) / "config.json"})
    write_manifest(str(args.out) + ".manifest.json", manifest)
    bundle = load_run(args.ckpt)
    image_table = load_feature_table(args.image_feats, IMAGE_KIND)
    index = load_index(args.index, image_table)
    embed_space = load_feature_table(args.embed_feats, WORD_KIND)
    pairs = data.load_dialogue_pairs(args.pairs, args.max_pairs)
    report, _ = metrics.evaluate_model(bundle, pairs, index, embed_space,
                                       threads=args.threads)
    config_hash = json.dumps(bundle.config.to_json(), sort_keys=True)
    meta = {"seed": args.seed,
            "config_hash": hashlib.sha256(config_hash.encode()).hexdigest()[:16],
            "manifest_hash": manifest["manifest_hash"],
            "variant": bundle.variant}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv(meta))
    log.info("wrote report to %s", args.out)
    return 0


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for tag in variants:
        if tag not in VARIANTS:
            raise ValidationError(f"unknown variant {tag!r}")
    manifest = make_manifest("ablate", _resolved(args), {
        "pairs": args.pairs, "index": args.index, "image_feats": args.image_feats,
        "embed_feats": args.embed_feats, "pos_lexicon": args.pos_lexicon,
        "stopwords": args.stopwords})
    write_manifest(str(args.out) + ".manifest.json", manifest)

    image_table = load_feature_table(args.image_feats, IMAGE_KIND)
    config = _load_model_config(args, image_table)
    embed_space = load_feature_table(args.embed_feats, WORD_KIND)
    index = load_index(args.index, image_table)
    lexicon = load_pos_lexicon(args.pos_lexicon)
    stopwords = load_stopwords(args.stopwords)
    pairs = data.load_dialogue_pairs(args.pairs, args.max_pairs)
    corpus = [u for pair in pairs for u in (pair.post, pair.response)]
    vocab = data.build_vocab(corpus, config.vocab_cap)
    if args.no_split or len(pairs) < 3:
        train_pairs, valid_pairs, test_pairs = pairs, [], pairs
    else:
        train_pairs, valid_pairs, test_pairs = data.split(pairs, args.split, args.seed)
    items = prepare_items(train_pairs, vocab, lexicon, stopwords, index, config)
    valid_items = prepare_items(valid_pairs, vocab, lexicon, stopwords, index, config)

    rows = []
    for tag in variants:
        model = VisAD(config, len(vocab), variant=tag, seed=args.seed)
        result = train(model, items,
                       TrainConfig(lr=args.lr, batch_size=args.batch,
                                   epochs=args.epochs, seed=args.seed),
                       valid_items or None)
        model.load_state(result.best_state)
        bundle = RunBundle(model, vocab, config, tag, lexicon, stopwords)
        report, _ = metrics.evaluate_model(bundle, test_pairs, index, embed_space,
                                           threads=args.threads)
        rows.append((tag, report))
        log.info("variant %s evaluated: ppl=%.4f bleu=%.4f", tag, report.ppl, report.bleu)

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("Model," + ",".join(metrics.METRIC_COLUMNS) + "\n")
        for tag, report in rows:
            values = report.metric_row()
            fh.write(tag + "," + ",".join(f"{values[c]:.6g}" for c in metrics.METRIC_COLUMNS) + "\n")
    log.info("wrote ablation table to %s", args.out)
    return 0


def cmd_selfcheck(args) -> int:
    failures = []

    def check(name, ok):
        print(json.dumps({"check": name, "ok": bool(ok)}))
        if not ok:
            failures.append(name)

    config = ModelConfig(model_dim=8, heads=1, enc_layers=1, dec_layers=1,
                         ffn_dim=16, dropout=0.0, smoothing=0.1, alpha=0.5,
                         max_len=6, max_impressions=3, vocab_cap=20, feature_dim=8)
    model = VisAD(config, 16, "FULL", seed=args.seed, dtype=np.float64)
    from .features import FeatureTable
    from .mapping import VisualImpression
    from .model import ImpressionSequence, TrainItem
    rng = np.random.default_rng(args.seed)

    def impressions(count):
        return ImpressionSequence.build(
            [VisualImpression(f"i{j}", rng.normal(size=8).astype(np.float32), 0.5)
             for j in range(count)], 3, 8)

    item = TrainItem(np.array([5, 6, 7]), np.array([8, 9]), np.array([10]),
                     ("w",), impressions(2), impressions(1))
    report = nn.gradient_check(lambda pt: model.total_loss([item], pt)[0], model.store)
    check("gradient_check_full_variant", report.passed)

    corpus = [["a", "b", "c", "d"], ["x", "y", "z", "w"]]
    check("bleu_identity", abs(metrics.bleu_avg(corpus, corpus) - 1.0) < 1e-9)
    check("distinct_aab", abs(metrics.distinct_n([["a", "a", "b"]], 1) - 2 / 3) < 1e-12)
    vecs = {t: rng.normal(size=4).astype(np.float32) for row in corpus for t in row}
    space = FeatureTable(vecs, 4, WORD_KIND)
    (avg, ext, gre), skipped = metrics.embedding_metrics_corpus(corpus, corpus, space)
    check("embedding_identity", max(abs(avg - 1), abs(ext - 1), abs(gre - 1)) < 1e-9)
    pre = metrics.preacc_and_avgpred(corpus, corpus)
    check("preacc_identity", abs(pre.preacc - 1.0) < 1e-12)
    triples = rng.uniform(-1, 1, size=(200, 3))
    ok = all(hinge(sp, sn, abs(t)) >= 0 and
             ((hinge(sp, sn, abs(t)) == 0) == (sp >= sn + abs(t)))
             for sp, sn, t in triples)
    check("hinge_contract", ok)
    check("sinusoidal_origin", float(nn.sinusoidal_positions(2, 4)[0, 1]) == 1.0)
    if failures:
        log.error("selfcheck failed: %s", failures)
        return 2
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def dispatch(argv) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, FileNotFoundError) as exc:
        log.error("validation error: %s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary
        log.error("runtime error: %s: %s", type(exc).__name__, exc)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
