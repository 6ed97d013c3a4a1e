"""The dialogue model: co-attention encoder plus cascade decoder.

The encoder fuses the post with its visual impressions through a pair of
cross-attending transformer blocks and concatenates both views into one
unified memory. Decoding happens in two phases: a content-word decoder
predicts the response's content words (whose looked-up images become the
response impressions), then an impression-aware response decoder generates
the reply token by token.

Ablation wirings share this class; they differ only in whether the cascade's
first phase exists and in what the decoder's impression attention reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID
from .errors import ValidationError
from .mapping import VisualImpression

VARIANTS = ("FULL", "1DE-ORIG", "1DE-PVI", "2DE-PVI", "2DE-CW")

CONFIG_KEYS = ("model_dim", "heads", "enc_layers", "dec_layers", "ffn_dim",
               "dropout", "smoothing", "alpha", "max_len", "max_impressions",
               "vocab_cap", "feature_dim")


@dataclass
class ModelConfig:
    model_dim: int = 512
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 2048
    dropout: float = 0.1
    smoothing: float = 0.1
    alpha: float = 0.5
    max_len: int = 50
    max_impressions: int = 8
    vocab_cap: int = 20000
    feature_dim: int = 32

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.max_len < 1 or self.max_impressions < 1:
            raise ValidationError("max_len and max_impressions must be >= 1")
        self.attention = nn.AttentionConfig(self.model_dim, self.heads,
                                            self.ffn_dim, self.dropout)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in CONFIG_KEYS}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        unknown = set(obj) - set(CONFIG_KEYS)
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class VariantWiring:
    """What the ablation tag means structurally."""

    tag: str
    cascade: bool                 # content-word decoder present
    impression_attention: bool    # response decoder has an impression layer
    impression_source: str | None  # "rvi" | "pvi" | "cw" | None


def make_variant(tag: str) -> VariantWiring:
    table = {
        "FULL": VariantWiring("FULL", True, True, "rvi"),
        "1DE-ORIG": VariantWiring("1DE-ORIG", False, False, None),
        "1DE-PVI": VariantWiring("1DE-PVI", False, True, "pvi"),
        "2DE-PVI": VariantWiring("2DE-PVI", True, True, "pvi"),
        "2DE-CW": VariantWiring("2DE-CW", True, True, "cw"),
    }
    if tag not in table:
        raise ValidationError(f"unknown variant {tag!r} (expected one of {VARIANTS})")
    return table[tag]


@dataclass(eq=False)
class ImpressionSequence:
    """Fixed-slot impression storage: valid rows first, zeros beyond."""

    features: np.ndarray          # (slots, feature_dim)
    mask: np.ndarray              # (slots,) bool, True for valid rows
    ids: tuple[str, ...]          # valid image ids, in slot order

    @classmethod
    def build(cls, impressions: list[VisualImpression], slots: int,
              feature_dim: int) -> "ImpressionSequence":
        kept = impressions[:slots]
        features = np.zeros((slots, feature_dim), dtype=np.float32)
        mask = np.zeros(slots, dtype=bool)
        for i, imp in enumerate(kept):
            if imp.feature.shape != (feature_dim,):
                raise ValidationError(
                    f"impression {imp.image_id!r} has dim {imp.feature.shape}, "
                    f"expected ({feature_dim},)")
            features[i] = imp.feature
            mask[i] = True
        return cls(features, mask, tuple(imp.image_id for imp in kept))

    @classmethod
    def empty(cls, slots: int, feature_dim: int) -> "ImpressionSequence":
        return cls(np.zeros((slots, feature_dim), dtype=np.float32),
                   np.zeros(slots, dtype=bool), ())

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())


@dataclass(eq=False)
class EncoderOutput:
    unified: Tensor      # (|X| + max(k,1), d)
    post_part: Tensor
    pvi_part: Tensor
    mask: np.ndarray     # per unified row; all True under the valid-rows layout


@dataclass(eq=False)
class TrainItem:
    """One prepared dialogue pair: token ids plus both impression sequences."""

    post_ids: np.ndarray
    response_ids: np.ndarray
    content_word_ids: np.ndarray      # ground-truth response content words
    content_words: tuple[str, ...]
    pvis: ImpressionSequence
    rvis: ImpressionSequence


@dataclass(eq=False)
class GenerationTrace:
    content_words: list[str]
    rvis: ImpressionSequence
    response: list[str]
    step_distributions: list[np.ndarray] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"content_words": list(self.content_words),
                "rvi_ids": list(self.rvis.ids),
                "response": list(self.response)}


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


class VisAD:
    """Encoder/decoder stack over a ParameterStore, wired per ablation variant."""

    def __init__(self, config: ModelConfig, vocab_size: int, variant: str = "FULL",
                 seed: int = 0, dtype=np.float32):
        if vocab_size < 5:
            raise ValidationError("vocab_size must cover the reserved ids")
        self.config = config
        self.vocab_size = vocab_size
        self.wiring = make_variant(variant)
        self.store = nn.ParameterStore(seed, dtype=dtype)
        self._positions = nn.sinusoidal_positions(
            max(config.max_len + 2, config.max_impressions + 1),
            config.model_dim).astype(self.store.dtype)
        self._register()

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------
    def _register(self):
        cfg = self.config
        att = cfg.attention
        store = self.store
        store.add("embed.tok", (self.vocab_size, cfg.model_dim))
        for i in range(cfg.enc_layers):
            nn.init_transformer_block(store, f"enc.layer{i}", att)
        nn.init_linear(store, "pvi.proj", cfg.feature_dim, cfg.model_dim)
        store.add("pvi.null", (cfg.model_dim,))
        nn.init_transformer_block(store, "coattn.post", att)
        nn.init_transformer_block(store, "coattn.pvi", att)
        if self.wiring.cascade:
            for i in range(cfg.dec_layers):
                p = f"cdec.layer{i}"
                nn.init_mha(store, p + ".self", att)
                nn.init_layer_norm(store, p + ".ln_self", cfg.model_dim)
                nn.init_mha(store, p + ".uni", att)
                nn.init_layer_norm(store, p + ".ln_uni", cfg.model_dim)
                nn.init_ffn(store, p + ".ffn", att)
                nn.init_layer_norm(store, p + ".ln_ffn", cfg.model_dim)
            nn.init_linear(store, "cdec.out", cfg.model_dim, self.vocab_size)
        for i in range(cfg.dec_layers):
            p = f"rdec.layer{i}"
            nn.init_mha(store, p + ".self", att)
            nn.init_layer_norm(store, p + ".ln_self", cfg.model_dim)
            if self.wiring.impression_attention:
                nn.init_mha(store, p + ".imp", att)
                nn.init_layer_norm(store, p + ".ln_imp", cfg.model_dim)
            nn.init_mha(store, p + ".uni", att)
            nn.init_layer_norm(store, p + ".ln_uni", cfg.model_dim)
            nn.init_ffn(store, p + ".ffn", att)
            nn.init_layer_norm(store, p + ".ln_ffn", cfg.model_dim)
        nn.init_linear(store, "rdec.out", cfg.model_dim, self.vocab_size)
        if self.wiring.impression_attention:
            if self.wiring.impression_source != "cw":
                nn.init_linear(store, "dec.imp.proj", cfg.feature_dim, cfg.model_dim)
            store.add("dec.imp.null", (cfg.model_dim,))

    def parameter_names(self) -> list[str]:
        return sorted(self.store.arrays)

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------
    def _embed_tokens(self, pt, ids, train=False, rng=None) -> Tensor:
        h = ad.gather_rows(pt["embed.tok"], ids) + Tensor(self._positions[:len(ids)])
        if train:
            h = ad.dropout(h, self.config.dropout, rng)
        return h

    def encode_post(self, post_ids: np.ndarray, pvis: ImpressionSequence,
                    pt: dict[str, Tensor], train: bool = False, rng=None) -> EncoderOutput:
        """Unified representation: concat of image-enhanced post rows and
        text-enhanced impression rows (one learned null slot when no PVIs)."""
        cfg = self.config
        att = cfg.attention
        post_ids = np.asarray(post_ids, dtype=np.int64)
        if len(post_ids) == 0:
            raise ValidationError("post must be non-empty")
        if len(post_ids) > cfg.max_len:
            raise ValidationError(f"post longer than max_len={cfg.max_len}")
        h = self._embed_tokens(pt, post_ids, train, rng)
        for i in range(cfg.enc_layers):
            h = nn.transformer_block(h, h, h, None, pt, f"enc.layer{i}", att, train, rng)
        e_post = h

        k = pvis.valid_count
        if k == 0:
            e_pvi = ad.reshape(pt["pvi.null"], (1, cfg.model_dim))
        else:
            feats = Tensor(pvis.features[:k].astype(self.store.dtype))
            e_pvi = nn.linear(pt, "pvi.proj", feats) + Tensor(self._positions[:k])
            if train:
                e_pvi = ad.dropout(e_pvi, cfg.dropout, rng)
        fused_post = nn.transformer_block(e_post, e_pvi, e_pvi, None,
                                          pt, "coattn.post", att, train, rng)
        fused_pvi = nn.transformer_block(e_pvi, e_post, e_post, None,
                                         pt, "coattn.pvi", att, train, rng)
        unified = ad.concat_rows([fused_post, fused_pvi])
        return EncoderOutput(unified, fused_post, fused_pvi,
                             np.ones(unified.shape[0], dtype=bool))

    # ------------------------------------------------------------------
    # content word decoder (first cascade phase)
    # ------------------------------------------------------------------
    def _content_logits(self, pt, input_ids, enc: EncoderOutput, train, rng) -> Tensor:
        cfg = self.config
        att = cfg.attention
        if enc.unified.shape[0] == 0:
            raise ValidationError("encoder output is empty")
        h = self._embed_tokens(pt, input_ids, train, rng)
        causal = nn.causal_mask(len(input_ids))
        for i in range(cfg.dec_layers):
            p = f"cdec.layer{i}"
            a = nn.multi_head_attention(h, h, h, causal, pt, p + ".self", att, train, rng)
            h = nn.layer_norm(pt, p + ".ln_self", h + a)
            c = nn.multi_head_attention(h, enc.unified, enc.unified, None,
                                        pt, p + ".uni", att, train, rng)
            h = nn.layer_norm(pt, p + ".ln_uni", h + c)
            f = nn.ffn(pt, p + ".ffn", h, train, rng, att.dropout_rate)
            h = nn.layer_norm(pt, p + ".ln_ffn", h + f)
        return nn.linear(pt, "cdec.out", h)

    def content_word_loss(self, enc: EncoderOutput, target_ids: np.ndarray,
                          pt, train: bool = False, rng=None) -> tuple[Tensor, int]:
        """Teacher-forced NLL over the target content words plus EOS (summed)."""
        target_ids = np.asarray(target_ids, dtype=np.int64)
        inputs = np.concatenate([[BOS_ID], target_ids])
        targets = np.concatenate([target_ids, [EOS_ID]])
        logits = self._content_logits(pt, inputs, enc, train, rng)
        return nn.smoothed_cross_entropy(logits, targets, 0.0, pad_id=PAD_ID)

    def greedy_content_words(self, enc: EncoderOutput, pt=None) -> list[int]:
        """Argmax decoding until EOS or max_impressions words."""
        cfg = self.config
        with ad.no_grad():
            if pt is None:
                pt = self.store.tensors()
            out: list[int] = []
            while len(out) < cfg.max_impressions:
                inputs = np.concatenate([[BOS_ID], out]).astype(np.int64)
                logits = self._content_logits(pt, inputs, enc, False, None)
                nxt = int(np.argmax(logits.value[-1]))
                if nxt == EOS_ID:
                    break
                out.append(nxt)
        return out

    # ------------------------------------------------------------------
    # response decoder (second cascade phase)
    # ------------------------------------------------------------------
    def _decoder_impressions(self, pt, impressions: ImpressionSequence | None,
                             cw_ids: np.ndarray | None, train, rng) -> Tensor | None:
        """Build the decoder's impression memory per wiring (None if no layer)."""
        cfg = self.config
        if not self.wiring.impression_attention:
            return None
        if self.wiring.impression_source == "cw":
            ids = np.asarray(cw_ids if cw_ids is not None else [], dtype=np.int64)
            ids = ids[:cfg.max_impressions]
            if len(ids) == 0:
                return ad.reshape(pt["dec.imp.null"], (1, cfg.model_dim))
            return self._embed_tokens(pt, ids, train, rng)
        seq = impressions
        v = seq.valid_count if seq is not None else 0
        if v == 0:
            return ad.reshape(pt["dec.imp.null"], (1, cfg.model_dim))
        feats = Tensor(seq.features[:v].astype(self.store.dtype))
        e = nn.linear(pt, "dec.imp.proj", feats) + Tensor(self._positions[:v])
        if train:
            e = ad.dropout(e, cfg.dropout, rng)
        return e

    def _response_logits(self, pt, input_ids, imp: Tensor | None,
                         enc: EncoderOutput, train, rng) -> Tensor:
        cfg = self.config
        att = cfg.attention
        if enc.unified.shape[0] == 0:
            raise ValidationError("encoder output is empty")
        h = self._embed_tokens(pt, input_ids, train, rng)
        causal = nn.causal_mask(len(input_ids))
        for i in range(cfg.dec_layers):
            p = f"rdec.layer{i}"
            a = nn.multi_head_attention(h, h, h, causal, pt, p + ".self", att, train, rng)
            h = nn.layer_norm(pt, p + ".ln_self", h + a)
            if imp is not None:
                b = nn.multi_head_attention(h, imp, imp, None, pt, p + ".imp", att, train, rng)
                h = nn.layer_norm(pt, p + ".ln_imp", h + b)
            c = nn.multi_head_attention(h, enc.unified, enc.unified, None,
                                        pt, p + ".uni", att, train, rng)
            h = nn.layer_norm(pt, p + ".ln_uni", h + c)
            f = nn.ffn(pt, p + ".ffn", h, train, rng, att.dropout_rate)
            h = nn.layer_norm(pt, p + ".ln_ffn", h + f)
        return nn.linear(pt, "rdec.out", h)

    def _check_prefix(self, prefix_ids: np.ndarray):
        if len(prefix_ids) == 0 or prefix_ids[0] != BOS_ID:
            raise ValidationError("response prefix must begin with BOS")
        if len(prefix_ids) > self.config.max_len + 1:
            raise ValidationError(
                f"response prefix exceeds max length {self.config.max_len}")

    def decode_response_step(self, prefix_ids, rvis: ImpressionSequence | None,
                             enc: EncoderOutput, cw_ids=None) -> np.ndarray:
        """Distribution over the vocabulary for the next token after prefix."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        self._check_prefix(prefix_ids)
        with ad.no_grad():
            pt = self.store.tensors()
            imp = self._decoder_impressions(pt, rvis, cw_ids, False, None)
            logits = self._response_logits(pt, prefix_ids, imp, enc, False, None)
        return softmax_np(logits.value[-1])

    def response_loss(self, enc: EncoderOutput, impressions: ImpressionSequence | None,
                      response_ids: np.ndarray, pt, train: bool = False, rng=None,
                      cw_ids=None, smoothing: float | None = None) -> tuple[Tensor, int]:
        """Teacher-forced label-smoothed NLL over response tokens plus EOS (summed)."""
        response_ids = np.asarray(response_ids, dtype=np.int64)
        if len(response_ids) > self.config.max_len:
            raise ValidationError(f"response longer than max_len={self.config.max_len}")
        inputs = np.concatenate([[BOS_ID], response_ids])
        targets = np.concatenate([response_ids, [EOS_ID]])
        imp = self._decoder_impressions(pt, impressions, cw_ids, train, rng)
        logits = self._response_logits(pt, inputs, imp, enc, train, rng)
        sm = self.config.smoothing if smoothing is None else smoothing
        return nn.smoothed_cross_entropy(logits, targets, sm, pad_id=PAD_ID)

    def greedy_response(self, enc: EncoderOutput, impressions: ImpressionSequence | None,
                        cw_ids=None, pt=None) -> tuple[list[int], list[np.ndarray]]:
        """Argmax decoding until EOS or max_len tokens; returns (ids, distributions)."""
        cfg = self.config
        with ad.no_grad():
            if pt is None:
                pt = self.store.tensors()
            imp = self._decoder_impressions(pt, impressions, cw_ids, False, None)
            out: list[int] = []
            dists: list[np.ndarray] = []
            while len(out) < cfg.max_len:
                prefix = np.concatenate([[BOS_ID], out]).astype(np.int64)
                logits = self._response_logits(pt, prefix, imp, enc, False, None)
                dist = softmax_np(logits.value[-1])
                dists.append(dist)
                nxt = int(np.argmax(dist))
                if nxt == EOS_ID:
                    break
                out.append(nxt)
        return out, dists

    def response_token_logprobs(self, item: TrainItem) -> list[float]:
        """log p(r_t) for each gold response token, teacher-forced, no smoothing.

        Feeds the decoder exactly as in training (ground-truth content words
        drive the impression source); used by perplexity.
        """
        with ad.no_grad():
            pt = self.store.tensors()
            enc = self.encode_post(item.post_ids, item.pvis, pt)
            imp = self._decoder_impressions(pt, item.rvis, item.content_word_ids,
                                            False, None)
            inputs = np.concatenate([[BOS_ID], item.response_ids]).astype(np.int64)
            logits = self._response_logits(pt, inputs, imp, enc, False, None)
            logp = ad.log_softmax_rows(logits.value)
        n = len(item.response_ids)
        return [float(logp[t, item.response_ids[t]]) for t in range(n)]

    # ------------------------------------------------------------------
    # joint loss
    # ------------------------------------------------------------------
    def item_loss(self, item: TrainItem, pt, train: bool = False, rng=None):
        """(loss tensor, parts) for one pair; parts hold float nll/cw values."""
        enc = self.encode_post(item.post_ids, item.pvis, pt, train, rng)
        l_nll, _ = self.response_loss(enc, item.rvis, item.response_ids, pt,
                                      train, rng, cw_ids=item.content_word_ids)
        parts = {"nll": float(l_nll.value)}
        if self.wiring.cascade:
            l_c, _ = self.content_word_loss(enc, item.content_word_ids, pt, train, rng)
            parts["cw"] = float(l_c.value)
            loss = l_nll + self.config.alpha * l_c
        else:
            loss = l_nll
        return loss, parts

    def total_loss(self, batch: list[TrainItem], pt=None, train: bool = False, rng=None):
        """Mean over the batch of nll + alpha * content-word loss."""
        if not batch:
            raise ValidationError("empty batch")
        if pt is None:
            pt = self.store.tensors()
        total = None
        agg = {"nll": 0.0, "cw": 0.0}
        for item in batch:
            loss, parts = self.item_loss(item, pt, train, rng)
            total = loss if total is None else total + loss
            for key, val in parts.items():
                agg[key] += val
        mean = total * (1.0 / len(batch))
        agg = {k: v / len(batch) for k, v in agg.items()}
        agg["full"] = float(mean.value)
        return mean, agg

    # ------------------------------------------------------------------
    # persistence helpers
    # ------------------------------------------------------------------
    def state_copy(self):
        return self.store.state_copy()

    def load_state(self, state):
        self.store.load_state(state)


def wiring_summary(model: VisAD) -> dict:
    """Structural facts used for variant diffing."""
    return {
        "variant": model.wiring.tag,
        "cascade": model.wiring.cascade,
        "impression_attention_kv_source": model.wiring.impression_source,
        "parameters": model.parameter_names(),
    }


def structural_diff(a: dict, b: dict) -> list[str]:
    """Names of wiring fields on which two summaries disagree."""
    keys = sorted(set(a) | set(b))
    return [k for k in keys if a.get(k) != b.get(k)]
