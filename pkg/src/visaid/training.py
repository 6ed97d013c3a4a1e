"""End-to-end training loop, two-phase greedy inference, and run persistence.

A run directory holds the checkpoint plus everything needed to decode again:
model.ckpt, config.json, vocab.txt, and copies of the POS lexicon and
stopword list.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .content_words import PosLexicon, extract_content_words, load_pos_lexicon, load_stopwords
from .data import DialoguePair, Utterance, Vocabulary
from .errors import ValidationError
from .mapping import WordImageIndex, lookup_impressions
from .model import (GenerationTrace, ImpressionSequence, ModelConfig, TrainItem,
                    VisAD)

log = logging.getLogger("visaid.training")


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.998
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    alpha: float | None = None   # overrides ModelConfig.alpha when set

    def __post_init__(self):
        if min(self.lr, self.beta1, self.beta2) <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("train config values must be positive")
        if self.alpha is not None and self.alpha < 0:
            raise ValidationError("alpha must be >= 0")


def prepare_items(pairs: list[DialoguePair], vocab: Vocabulary, lexicon: PosLexicon,
                  stopwords: frozenset[str], index: WordImageIndex,
                  config: ModelConfig) -> list[TrainItem]:
    """Token ids plus PVI/RVI sequences for each pair.

    PVIs come from the post's content words; RVIs from the response's
    ground-truth content words (the training-time protocol). Utterances are
    truncated to max_len tokens, content words to max_impressions.
    """
    slots, fdim = config.max_impressions, config.feature_dim
    items = []
    for pair in pairs:
        post_tokens = pair.post.tokens[:config.max_len]
        resp_tokens = pair.response.tokens[:config.max_len]
        post_cw = extract_content_words(Utterance(post_tokens, pair.post.raw),
                                        lexicon, stopwords)
        resp_cw = extract_content_words(Utterance(resp_tokens, pair.response.raw),
                                        lexicon, stopwords)
        pvis = ImpressionSequence.build(
            lookup_impressions(post_cw, index, slots), slots, fdim)
        rvis = ImpressionSequence.build(
            lookup_impressions(resp_cw, index, slots), slots, fdim)
        cw_words = resp_cw.words[:slots]
        items.append(TrainItem(
            post_ids=vocab.encode(post_tokens),
            response_ids=vocab.encode(resp_tokens),
            content_word_ids=vocab.encode(cw_words),
            content_words=cw_words,
            pvis=pvis,
            rvis=rvis,
        ))
    return items


def index_coverage(items: list[TrainItem]) -> float:
    """Fraction of items whose post found at least one impression."""
    if not items:
        return 0.0
    return sum(1 for it in items if it.pvis.valid_count > 0) / len(items)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int = -1
    best_valid: float = float("inf")


def train(model: VisAD, items: list[TrainItem], config: TrainConfig,
          valid_items: list[TrainItem] | None = None) -> TrainResult:
    """Adam over the variant loss; tracks the best-validation parameter state.

    Without a validation set the training loss plays that role. Deterministic
    under config.seed in single-threaded execution; aborts on non-finite loss.
    """
    if not items:
        raise ValidationError("no training items")
    if config.alpha is not None:
        model.config.alpha = config.alpha
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    coverage = index_coverage(items)
    log.info("training %s on %d items (PVI coverage %.2f)",
             model.wiring.tag, len(items), coverage)

    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        sums = {"full": 0.0, "nll": 0.0, "cw": 0.0}
        for start in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[start:start + config.batch_size]]
            pt = model.store.tensors()
            loss, parts = model.total_loss(batch, pt, train=True, rng=rng)
            if not np.isfinite(parts["full"]):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"items {sorted(order[start:start + config.batch_size].tolist())}")
            loss.backward()
            grads = {name: t.grad for name, t in pt.items() if t.grad is not None}
            nn.adam_step(model.store, grads, config.lr, config.beta1, config.beta2)
            for key in sums:
                sums[key] += parts.get(key, 0.0) * len(batch)
        epoch_stats = {k: v / len(items) for k, v in sums.items()}
        record = {"epoch": epoch, "train_full": epoch_stats["full"],
                  "train_nll": epoch_stats["nll"], "train_cw": epoch_stats["cw"]}
        monitored = epoch_stats["full"]
        if valid_items:
            _, vparts = model.total_loss(valid_items, train=False)
            record["valid_full"] = vparts["full"]
            if not np.isfinite(vparts["full"]):
                raise RuntimeError(f"non-finite validation loss at epoch {epoch}")
            monitored = vparts["full"]
        if monitored < result.best_valid:
            result.best_valid = monitored
            result.best_epoch = epoch
            result.best_state = model.state_copy()
        result.history.append(record)
        log.info("epoch %d: %s", epoch, json.dumps(record))
    if result.best_state is None:
        result.best_state = model.state_copy()
        result.best_epoch = 0
    return result


def generate(model: VisAD, post: Utterance, vocab: Vocabulary, lexicon: PosLexicon,
             stopwords: frozenset[str], index: WordImageIndex) -> GenerationTrace:
    """Two-phase greedy inference.

    Post content words give PVIs; the cascade predicts the response content
    words, whose looked-up impressions feed the response decoder (or PVIs /
    embedded words, per wiring). Unknown post tokens map to UNK.
    """
    cfg = model.config
    post_tokens = post.tokens[:cfg.max_len]
    if not post_tokens:
        raise ValidationError("cannot generate from an empty post")
    post_ids = vocab.encode(post_tokens)
    post_cw = extract_content_words(Utterance(post_tokens, post.raw), lexicon, stopwords)
    pvis = ImpressionSequence.build(
        lookup_impressions(post_cw, index, cfg.max_impressions),
        cfg.max_impressions, cfg.feature_dim)

    with ad.no_grad():
        pt = model.store.tensors()
        enc = model.encode_post(post_ids, pvis, pt)
        if model.wiring.cascade:
            cw_ids = model.greedy_content_words(enc, pt)
            cw_tokens = [vocab.token(i) for i in cw_ids]
        else:
            cw_ids, cw_tokens = [], []

        source = model.wiring.impression_source
        if source == "rvi":
            rvis = ImpressionSequence.build(
                lookup_impressions(cw_tokens, index, cfg.max_impressions),
                cfg.max_impressions, cfg.feature_dim)
        elif source == "pvi":
            rvis = pvis
        else:
            rvis = ImpressionSequence.empty(cfg.max_impressions, cfg.feature_dim)

        resp_ids, dists = model.greedy_response(
            enc, rvis, cw_ids=np.asarray(cw_ids, dtype=np.int64), pt=pt)
    return GenerationTrace(
        content_words=cw_tokens,
        rvis=rvis,
        response=vocab.decode(resp_ids),
        step_distributions=dists,
    )


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RunBundle:
    model: VisAD
    vocab: Vocabulary
    config: ModelConfig
    variant: str
    lexicon: PosLexicon | None = None
    stopwords: frozenset[str] | None = None


def save_run(run_dir, model: VisAD, vocab: Vocabulary,
             pos_lexicon_path=None, stopwords_path=None,
             manifest_hash: str | None = None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(run_dir / "model.ckpt", model.store)
    vocab.save(run_dir / "vocab.txt")
    meta = {
        "model": model.config.to_json(),
        "variant": model.wiring.tag,
        "vocab_size": len(vocab),
        "manifest_hash": manifest_hash,
    }
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if pos_lexicon_path is not None:
        shutil.copyfile(pos_lexicon_path, run_dir / "pos_lexicon.tsv")
    if stopwords_path is not None:
        shutil.copyfile(stopwords_path, run_dir / "stopwords.txt")


def load_run(run_dir) -> RunBundle:
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise ValidationError(f"{run_dir}: not a run directory (missing config.json)")
    with open(config_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = ModelConfig.from_json(meta["model"])
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    if len(vocab) != meta["vocab_size"]:
        raise ValidationError(f"{run_dir}: vocab size mismatch")
    model = VisAD(config, len(vocab), variant=meta["variant"], seed=0)
    arrays, step = nn.load_checkpoint(run_dir / "model.ckpt")
    model.store.load_state(arrays)
    model.store.step = step
    lex_path = run_dir / "pos_lexicon.tsv"
    stop_path = run_dir / "stopwords.txt"
    return RunBundle(
        model=model,
        vocab=vocab,
        config=config,
        variant=meta["variant"],
        lexicon=load_pos_lexicon(lex_path) if lex_path.exists() else None,
        stopwords=load_stopwords(stop_path) if stop_path.exists() else None,
    )
