"""Rule-based content word extraction.

A content word survives stopword removal and carries a NOUN, VERB, ADJ, or
ADV tag. Tagging is a deterministic lexicon lookup (file-driven); unknown
tokens default to OTHER and are never treated as content words.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import Utterance
from .errors import ValidationError

CONTENT_TAGS = frozenset({"NOUN", "VERB", "ADJ", "ADV"})
VALID_TAGS = CONTENT_TAGS | {"OTHER"}
DEFAULT_TAG = "OTHER"


@dataclass(frozen=True)
class PosLexicon:
    """Total token -> tag map; absent tokens get the default tag."""

    tags: dict[str, str] = field(default_factory=dict)
    default: str = DEFAULT_TAG

    def tag(self, token: str) -> str:
        return self.tags.get(token, self.default)


@dataclass(frozen=True)
class ContentWordList:
    words: tuple[str, ...]
    source: Utterance


def load_pos_lexicon(path) -> PosLexicon:
    """TSV file, one "token<TAB>TAG" per line; blank lines ignored."""
    tags: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ValidationError(f"{path}:{lineno}: expected 'token<TAB>TAG'")
            token, tag = parts
            if tag not in VALID_TAGS:
                raise ValidationError(
                    f"{path}:{lineno}: unknown tag {tag!r} (expected one of {sorted(VALID_TAGS)})")
            tags[token] = tag
    return PosLexicon(tags)


def load_stopwords(path) -> frozenset[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(line.strip() for line in fh if line.strip())


def extract_content_words(utt: Utterance, lexicon: PosLexicon,
                          stopwords: frozenset[str]) -> ContentWordList:
    """Drop stopwords, then keep NOUN/VERB/ADJ/ADV tokens in original order.

    Duplicates are preserved; an empty result is legal.
    """
    kept = tuple(
        tok for tok in utt.tokens
        if tok not in stopwords and lexicon.tag(tok) in CONTENT_TAGS
    )
    return ContentWordList(kept, utt)
