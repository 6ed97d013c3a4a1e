"""Word-image mapping: dual projection heads scored by cosine similarity.

Stage one of the pipeline. Each head is a one-hidden-layer MLP (tanh, then
linear) into a shared joint space; training minimizes a margin ranking loss
over sampled negative images. The trained model builds a persisted
word -> top-1 image index that the dialogue model consumes.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import CaptionPair
from .errors import ValidationError
from .features import FeatureTable

log = logging.getLogger("visaid.mapping")

INDEX_MAGIC = "#VIDX"


@dataclass(eq=False)
class VisualImpression:
    """An image standing in for the mental picture a content word evokes."""

    image_id: str
    feature: np.ndarray
    score: float


@dataclass(eq=False)
class MappingModel:
    store: nn.ParameterStore
    word_dim: int
    image_dim: int
    joint_dim: int
    history: list[float] = field(default_factory=list)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.store.arrays):
            h.update(name.encode())
            h.update(self.store.arrays[name].astype("<f4").tobytes())
        return h.hexdigest()[:16]


def init_mapping_model(word_dim: int, image_dim: int, joint_dim: int = 64,
                       seed: int = 0, dtype=np.float32) -> MappingModel:
    store = nn.ParameterStore(seed, dtype=dtype)
    nn.init_linear(store, "word.in", word_dim, joint_dim)
    nn.init_linear(store, "word.out", joint_dim, joint_dim)
    nn.init_linear(store, "image.in", image_dim, joint_dim)
    nn.init_linear(store, "image.out", joint_dim, joint_dim)
    return MappingModel(store, word_dim, image_dim, joint_dim)


# ---------------------------------------------------------------------------
# projections and similarity
# ---------------------------------------------------------------------------

def _project_t(pt: dict[str, Tensor], head: str, x: Tensor) -> Tensor:
    hidden = ad.tanh(nn.linear(pt, f"{head}.in", x))
    return nn.linear(pt, f"{head}.out", hidden)


def _project_np(model: MappingModel, head: str, x: np.ndarray) -> np.ndarray:
    arrays = model.store.arrays
    hidden = np.tanh(x @ arrays[f"{head}.in.w"] + arrays[f"{head}.in.b"])
    return hidden @ arrays[f"{head}.out.w"] + arrays[f"{head}.out.b"]


def project_words(model: MappingModel, word_vecs: np.ndarray) -> np.ndarray:
    return _project_np(model, "word", word_vecs.astype(model.store.dtype))


def project_images(model: MappingModel, image_vecs: np.ndarray) -> np.ndarray:
    return _project_np(model, "image", image_vecs.astype(model.store.dtype))


def _checked_norms(projected: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(projected, axis=-1)
    if (norms == 0).any():
        raise ValidationError(f"zero-norm projected {what} vector")
    return norms


def similarity(word_vec: np.ndarray, image_vec: np.ndarray, model: MappingModel) -> float:
    """Cosine similarity of the two projections; in [-1, 1].

    The cosine itself is accumulated in float64 so that looped and vectorized
    scoring paths agree exactly on argmax decisions.
    """
    hw = project_words(model, np.asarray(word_vec)[None, :])[0].astype(np.float64)
    hv = project_images(model, np.asarray(image_vec)[None, :])[0].astype(np.float64)
    nw = _checked_norms(hw, "word")
    nv = _checked_norms(hv, "image")
    return float(hw @ hv / (nw * nv))


def hinge(sim_pos: float, sim_neg: float, thr: float) -> float:
    """max(0, -sim_pos + sim_neg + thr); zero exactly iff sim_pos >= sim_neg + thr."""
    return max(0.0, -sim_pos + sim_neg + thr)


def margin_loss(word_vec: np.ndarray, pos_image_vec: np.ndarray,
                neg_image_vec: np.ndarray, thr: float, model: MappingModel) -> float:
    if thr < 0:
        raise ValidationError("margin threshold must be >= 0")
    return hinge(similarity(word_vec, pos_image_vec, model),
                 similarity(word_vec, neg_image_vec, model), thr)


def _draw_negative(positive_id: str, distinct_ids: list[str], rng: np.random.Generator) -> str:
    # distinct_ids sorted; draw uniformly from the complement of the positive
    n = len(distinct_ids)
    if n < 2 and positive_id in distinct_ids:
        raise ValidationError("negative sampling needs at least 2 distinct images")
    if positive_id not in distinct_ids:
        return distinct_ids[int(rng.integers(n))]
    j = int(rng.integers(n - 1))
    pos = distinct_ids.index(positive_id)
    return distinct_ids[j + 1 if j >= pos else j]


def sample_negative(sentence: CaptionPair, image_ids, rng: np.random.Generator) -> str:
    """Uniform draw over distinct candidate ids excluding the positive."""
    return _draw_negative(sentence.image_id, sorted(set(image_ids)), rng)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class MapperConfig:
    thr: float = 0.2
    lr: float = 0.001
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    joint_dim: int = 64
    beta1: float = 0.9
    beta2: float = 0.998

    def __post_init__(self):
        if self.thr < 0:
            raise ValidationError("thr must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("bad epochs/batch_size")


def caption_examples(captions, lexicon, stopwords):
    """(image_id, content words) pairs for training; empty extractions dropped."""
    from .content_words import extract_content_words

    out = []
    dropped = 0
    for cap in captions:
        words = extract_content_words(cap.sentence, lexicon, stopwords).words
        if words:
            out.append((cap.image_id, words))
        else:
            dropped += 1
    if dropped:
        log.warning("dropped %d captions without content words", dropped)
    return out


def _cosine_rows(h_words: Tensor, h_image: Tensor) -> Tensor:
    """Cosine of each projected word row against one projected image row."""
    dots = ad.tsum(ad.mul(h_words, h_image), axis=1)
    norm_w = ad.sqrt(ad.tsum(ad.mul(h_words, h_words), axis=1))
    norm_v = ad.sqrt(ad.tsum(ad.mul(h_image, h_image)))
    return ad.div(dots, ad.mul(norm_w, norm_v))


def train_mapper(captions, word_table: FeatureTable, image_table: FeatureTable,
                 config: MapperConfig) -> MappingModel:
    """Minimize the summed hinge loss over captions with Adam.

    captions: (image_id, content_words) pairs, e.g. from caption_examples().
    Deterministic under config.seed (shuffling and negative draws included).
    """
    examples = []
    for image_id, words in captions:
        if image_id not in image_table:
            raise ValidationError(f"image {image_id!r} has no feature row")
        missing = [w for w in words if w not in word_table]
        if missing:
            raise ValidationError(f"words {missing!r} have no feature rows")
        if words:
            examples.append((image_id, tuple(words)))
    if not examples:
        raise ValidationError("no trainable captions (all empty)")

    model = init_mapping_model(word_table.dim, image_table.dim,
                               config.joint_dim, config.seed)
    store = model.store
    dtype = store.dtype
    distinct_ids = sorted({image_id for image_id, _ in examples})
    if len(distinct_ids) < 2:
        raise ValidationError("negative sampling needs at least 2 distinct images")
    rng = np.random.default_rng(config.seed)

    word_feats = {w: word_table.get(w).astype(dtype)
                  for _, words in examples for w in words}
    image_feats = {i: image_table.get(i).astype(dtype) for i in distinct_ids}

    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            pt = store.tensors()
            terms = []
            for image_id, words in batch:
                neg_id = _draw_negative(image_id, distinct_ids, rng)
                h_words = _project_t(pt, "word", Tensor(np.stack([word_feats[w] for w in words])))
                h_pos = _project_t(pt, "image", Tensor(image_feats[image_id][None, :]))
                h_neg = _project_t(pt, "image", Tensor(image_feats[neg_id][None, :]))
                sims_pos = _cosine_rows(h_words, h_pos)
                sims_neg = _cosine_rows(h_words, h_neg)
                terms.append(ad.tsum(ad.relu(sims_neg - sims_pos + config.thr)))
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            epoch_loss += float(total.value)
            batch_loss = total * (1.0 / len(batch))
            batch_loss.backward()
            grads = {name: t.grad for name, t in pt.items() if t.grad is not None}
            nn.adam_step(store, grads, config.lr, config.beta1, config.beta2)
        mean_loss = epoch_loss / len(examples)
        model.history.append(mean_loss)
        log.info("mapper epoch %d mean loss %.6f", epoch, mean_loss)
    return model


# ---------------------------------------------------------------------------
# index build and lookup
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class WordImageIndex:
    entries: dict[str, VisualImpression]
    model_fingerprint: str
    candidates_fingerprint: str

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, word: str) -> VisualImpression | None:
        return self.entries.get(word)


def candidates_fingerprint(image_ids, image_table: FeatureTable) -> str:
    h = hashlib.sha256()
    for image_id in sorted(set(image_ids)):
        h.update(image_id.encode())
        h.update(b"\x00")
        h.update(image_table.get(image_id).astype("<f4").tobytes())
    return h.hexdigest()[:16]


def _normalized_projections(model, head, keys, table):
    feats = np.stack([table.get(k) for k in keys])
    projected = _project_np(model, head, feats.astype(model.store.dtype)).astype(np.float64)
    norms = _checked_norms(projected, head)
    return projected / norms[:, None]


def score_images(model: MappingModel, word: str, word_table: FeatureTable,
                 image_ids, image_table: FeatureTable) -> list[tuple[str, float]]:
    """All candidate scores for one word, best first (ties by smaller id)."""
    ids = sorted(set(image_ids))
    word_n = _normalized_projections(model, "word", [word], word_table)
    image_n = _normalized_projections(model, "image", ids, image_table)
    scores = (word_n @ image_n.T)[0]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(np.clip(scores[i], -1.0, 1.0))) for i in order]


def build_index(model: MappingModel, words, word_table: FeatureTable,
                image_ids, image_table: FeatureTable, threads: int = 1) -> WordImageIndex:
    """Top-1 image per distinct word over the candidate set.

    Exact brute force; ties go to the lexicographically smallest image id.
    The thread count only chunks the scoring work, never the result.
    """
    ids = sorted(set(image_ids))
    if not ids:
        raise ValidationError("candidate image set is empty")
    distinct_words = sorted(set(words))
    missing_words = [w for w in distinct_words if w not in word_table]
    missing_images = [i for i in ids if i not in image_table]
    if missing_words or missing_images:
        raise ValidationError(
            f"no feature rows for words {missing_words!r} / images {missing_images!r}")
    image_n = _normalized_projections(model, "image", ids, image_table)

    def best_for(chunk):
        word_n = _normalized_projections(model, "word", chunk, word_table)
        scores = word_n @ image_n.T
        picks = scores.argmax(axis=1)  # first max wins: ids sorted = smallest id
        return [(w, ids[j], float(np.clip(scores[i, j], -1.0, 1.0)))
                for i, (w, j) in enumerate(zip(chunk, picks))]

    rows: list[tuple[str, str, float]] = []
    if threads > 1 and len(distinct_words) > 1:
        size = (len(distinct_words) + threads - 1) // threads
        chunks = [distinct_words[i:i + size] for i in range(0, len(distinct_words), size)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(best_for, chunks):
                rows.extend(part)
    elif distinct_words:
        rows = best_for(distinct_words)

    entries = {w: VisualImpression(image_id, image_table.get(image_id), score)
               for w, image_id, score in rows}
    return WordImageIndex(entries, model.fingerprint(),
                          candidates_fingerprint(ids, image_table))


def lookup_impressions(words, index: WordImageIndex, k_max: int) -> list[VisualImpression]:
    """Impressions for the first k_max indexed words, in word order.

    Words absent from the index are skipped; duplicates map to the same entry.
    """
    found = []
    word_seq = words.words if hasattr(words, "words") else words
    for word in word_seq:
        impression = index.get(word)
        if impression is not None:
            found.append(impression)
            if len(found) >= k_max:
                break
    return found


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_mapper(path, model: MappingModel):
    nn.save_checkpoint(path, model.store)


def load_mapper(path) -> MappingModel:
    arrays, step = nn.load_checkpoint(path)
    expected = {"word.in.w", "word.in.b", "word.out.w", "word.out.b",
                "image.in.w", "image.in.b", "image.out.w", "image.out.b"}
    if set(arrays) != expected:
        raise ValidationError(f"{path}: not a mapping model checkpoint")
    word_dim, joint_dim = arrays["word.in.w"].shape
    image_dim = arrays["image.in.w"].shape[0]
    model = init_mapping_model(word_dim, image_dim, joint_dim, seed=0)
    model.store.load_state(arrays)
    model.store.step = step
    return model


def save_index(path, index: WordImageIndex, manifest_hash: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{INDEX_MAGIC}\t{index.model_fingerprint}\t{index.candidates_fingerprint}\n")
        if manifest_hash:
            fh.write(f"#MANIFEST\t{manifest_hash}\n")
        for word in sorted(index.entries):
            imp = index.entries[word]
            fh.write(f"{word}\t{imp.image_id}\t{imp.score:.8f}\n")


def load_index(path, image_table: FeatureTable) -> WordImageIndex:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(INDEX_MAGIC + "\t"):
        raise ValidationError(f"{path}: not an index file (bad header)")
    _, model_fp, cand_fp = lines[0].split("\t")
    entries: dict[str, VisualImpression] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 'word<TAB>image<TAB>score'")
        word, image_id, score = parts
        if image_id not in image_table:
            raise ValidationError(f"{path}:{lineno}: image {image_id!r} missing from table")
        entries[word] = VisualImpression(image_id, image_table.get(image_id), float(score))
    return WordImageIndex(entries, model_fp, cand_fp)
