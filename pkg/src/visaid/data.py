"""Corpus loading, tokenization, vocabulary, and deterministic splits.

Dialogue and caption corpora are UTF-8 JSON Lines. A dialogue line is either
a pair form {"post": str, "response": str} or a session form
{"session": [str, ...]} from which every adjacent utterance pair is taken.
"""

from __future__ import annotations

import json
import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

log = logging.getLogger("visaid.data")

PAD, BOS, EOS, UNK = "<PAD>", "<BOS>", "<EOS>", "<UNK>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and _is_punct(token[start]):
        start += 1
    while end > start and _is_punct(token[end - 1]):
        end -= 1
    return token[start:end]


def tokenize(raw: str) -> tuple[str, ...]:
    """Lowercase, split on whitespace, strip edge punctuation per token.

    Punctuation-only tokens are dropped.
    """
    out = []
    for piece in raw.lower().split():
        piece = _strip_punct(piece)
        if piece:
            out.append(piece)
    return tuple(out)


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    raw: str

    @classmethod
    def from_raw(cls, raw: str) -> "Utterance":
        return cls(tokenize(raw), raw)

    @property
    def empty(self) -> bool:
        return len(self.tokens) == 0


@dataclass(frozen=True)
class DialoguePair:
    post: Utterance
    response: Utterance


@dataclass(frozen=True)
class CaptionPair:
    image_id: str
    sentence: Utterance


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON line ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_dialogue_pairs(path, max_pairs: int | None = None) -> list[DialoguePair]:
    """Read pair-form or session-form dialogue lines, in file order.

    Session form yields one pair per adjacent utterance pair. Pairs with an
    empty side (nothing survives tokenization) are skipped with a warning.
    """
    pairs: list[DialoguePair] = []
    skipped = 0
    for lineno, obj in _read_jsonl(path):
        if "session" in obj:
            session = obj["session"]
            if not isinstance(session, list) or not all(isinstance(u, str) for u in session):
                raise ValidationError(f"{path}:{lineno}: 'session' must be a list of strings")
            utts = [Utterance.from_raw(u) for u in session]
            candidates = list(zip(utts, utts[1:]))
        elif "post" in obj and "response" in obj:
            if not isinstance(obj["post"], str) or not isinstance(obj["response"], str):
                raise ValidationError(f"{path}:{lineno}: 'post' and 'response' must be strings")
            candidates = [(Utterance.from_raw(obj["post"]), Utterance.from_raw(obj["response"]))]
        else:
            raise ValidationError(
                f"{path}:{lineno}: line needs either 'session' or 'post'+'response'")
        for post, response in candidates:
            if post.empty or response.empty:
                skipped += 1
                continue
            pairs.append(DialoguePair(post, response))
            if max_pairs is not None and len(pairs) >= max_pairs:
                if skipped:
                    log.warning("skipped %d pairs with an empty utterance", skipped)
                return pairs
    if skipped:
        log.warning("skipped %d pairs with an empty utterance", skipped)
    return pairs


def load_caption_pairs(path, max_pairs: int | None = None) -> list[CaptionPair]:
    """Read {"image_id", "sentence"} caption lines; empty sentences are skipped."""
    captions: list[CaptionPair] = []
    skipped = 0
    for lineno, obj in _read_jsonl(path):
        if "image_id" not in obj or "sentence" not in obj:
            raise ValidationError(f"{path}:{lineno}: caption line needs 'image_id' and 'sentence'")
        if not isinstance(obj["image_id"], str) or not isinstance(obj["sentence"], str):
            raise ValidationError(f"{path}:{lineno}: 'image_id' and 'sentence' must be strings")
        sent = Utterance.from_raw(obj["sentence"])
        if sent.empty:
            skipped += 1
            continue
        captions.append(CaptionPair(obj["image_id"], sent))
        if max_pairs is not None and len(captions) >= max_pairs:
            break
    if skipped:
        log.warning("skipped %d captions with an empty sentence", skipped)
    return captions


@dataclass
class Vocabulary:
    """Token/id maps with PAD, BOS, EOS, UNK reserved as ids 0..3."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = list(RESERVED)
            self.token_to_id = {tok: i for i, tok in enumerate(RESERVED)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def add(self, token: str) -> int:
        if token in self.token_to_id:
            return self.token_to_id[token]
        idx = len(self.id_to_token)
        self.token_to_id[token] = idx
        self.id_to_token.append(token)
        return idx

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.token(int(i)) for i in ids]

    def words(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.id_to_token[len(RESERVED):]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        while lines and lines[-1] == "":
            lines.pop()
        if lines[:4] != list(RESERVED):
            raise ValidationError(f"{path}: first four lines must be {' '.join(RESERVED)}")
        vocab = cls()
        for token in lines[4:]:
            if not token or token.split() != [token]:
                raise ValidationError(f"{path}: invalid vocabulary token {token!r}")
            vocab.add(token)
        return vocab


def build_vocab(corpus, cap: int) -> Vocabulary:
    """Frequency-ranked vocabulary (ties broken lexicographically), capped.

    The cap includes the four reserved ids, so cap - 4 corpus tokens are kept.
    """
    if cap < 5:
        raise ValidationError("vocabulary cap must be at least 5")
    counts: Counter[str] = Counter()
    seen_any = False
    for utt in corpus:
        seen_any = True
        counts.update(utt.tokens)
    if not seen_any:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = Vocabulary()
    for token, _ in ranked[: cap - len(RESERVED)]:
        vocab.add(token)
    return vocab


def split(pairs, fractions, seed: int):
    """Deterministic shuffle + partition into (train, valid, test).

    Sizes are floor allocations for valid/test with the remainder going to
    train, so evaluation sets are exactly sized.
    """
    f_train, f_valid, f_test = fractions
    if min(f_train, f_valid, f_test) <= 0:
        raise ValidationError("split fractions must be positive")
    if abs(f_train + f_valid + f_test - 1.0) > 1e-9:
        raise ValidationError("split fractions must sum to 1")
    n = len(pairs)
    if n < 3:
        raise ValidationError("need at least 3 pairs to split")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = math.floor(f_valid * n)
    n_test = math.floor(f_test * n)
    n_train = n - n_valid - n_test
    shuffled = [pairs[i] for i in order]
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_valid],
            shuffled[n_train + n_valid:])
