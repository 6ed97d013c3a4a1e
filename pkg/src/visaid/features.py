"""Feature providers: per-key vectors for words and images.

Stands in for the pretrained text/image encoders: features come either from
a binary table file or from a deterministic synthetic generator that places
keys on noisy cluster centers (shared between the word and image tables, so
cross-modal alignment is learnable by construction).

Feature file layout (little-endian): magic "VFEA", u32 version=1, u32 dim,
u32 count, then count records of [u16 key_len, UTF-8 key, dim x f32].
The key "<UNK>" designates the fallback row of a word table.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .content_words import ContentWordList
from .errors import ValidationError

FEATURE_MAGIC = b"VFEA"
FEATURE_VERSION = 1
UNK_KEY = "<UNK>"

WORD_KIND = "word-context"
IMAGE_KIND = "image"


@dataclass
class FeatureTable:
    vectors: dict[str, np.ndarray]
    dim: int
    kind: str = WORD_KIND

    def __post_init__(self):
        for key, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise ValidationError(
                    f"feature row {key!r} has dim {vec.shape}, expected ({self.dim},)")
            if not np.isfinite(vec).all():
                raise ValidationError(f"feature row {key!r} contains non-finite values")

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, key: str) -> bool:
        return key in self.vectors

    def get(self, key: str) -> np.ndarray:
        return self.vectors[key]

    def keys(self):
        return self.vectors.keys()


def save_feature_table(path, table: FeatureTable):
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, table.dim, len(table.vectors)))
        for key, vec in table.vectors.items():
            encoded = key.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(vec.astype("<f4").tobytes())


def load_feature_table(path, kind: str = WORD_KIND) -> FeatureTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValidationError(f"{path}: not a feature table (bad magic)")
    version, dim, count = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise ValidationError(f"{path}: unsupported feature table version {version}")
    offset = 16
    vectors: dict[str, np.ndarray] = {}
    for row in range(count):
        if offset + 2 > len(blob):
            raise ValidationError(f"{path}: truncated at record {row}")
        (key_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        key = blob[offset:offset + key_len].decode("utf-8")
        offset += key_len
        end = offset + 4 * dim
        if end > len(blob):
            raise ValidationError(f"{path}: record {row} ({key!r}) shorter than dim {dim}")
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float32)
        offset = end
        if not np.isfinite(vec).all():
            raise ValidationError(f"{path}: record {row} ({key!r}) has non-finite values")
        vectors[key] = vec
    return FeatureTable(vectors, dim, kind)


def word_context_features(content_words: ContentWordList, table: FeatureTable) -> np.ndarray:
    """Stack per-word vectors in word order; absent words fall back to "<UNK>"."""
    if table.kind != WORD_KIND:
        raise ValidationError(f"word features requested from a {table.kind!r} table")
    rows = []
    for word in content_words.words:
        if word in table:
            rows.append(table.get(word))
        elif UNK_KEY in table:
            rows.append(table.get(UNK_KEY))
        else:
            raise ValidationError(f"word {word!r} missing and table has no {UNK_KEY} row")
    if not rows:
        return np.zeros((0, table.dim), dtype=np.float32)
    return np.stack(rows)


@dataclass(frozen=True)
class SyntheticFeatureSpec:
    seed: int
    dim: int
    cluster_count: int
    noise_scale: float

    def __post_init__(self):
        if self.dim < 2:
            raise ValidationError("synthetic dim must be >= 2")
        if self.cluster_count < 1:
            raise ValidationError("cluster_count must be >= 1")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")


def cluster_centers(spec: SyntheticFeatureSpec) -> np.ndarray:
    """Unit-sphere cluster centers, drawn once from the seeded generator."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(size=(spec.cluster_count, spec.dim))
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def _key_rng(spec: SyntheticFeatureSpec, kind: str, key: str) -> np.random.Generator:
    # per-key stream derived from a stable hash, so key order never matters
    digest = hashlib.sha256(f"{kind}:{key}".encode("utf-8")).digest()
    return np.random.default_rng([spec.seed, int.from_bytes(digest[:8], "little")])


def synthetic_tables(spec: SyntheticFeatureSpec, word_keys, image_keys,
                     word_clusters, image_clusters) -> tuple[FeatureTable, FeatureTable]:
    """Deterministic word and image tables around shared cluster centers.

    Every key must be assigned a cluster index below spec.cluster_count;
    its vector is center + gaussian noise * noise_scale.
    """
    centers = cluster_centers(spec)

    def build(keys, clusters, kind):
        vectors = {}
        for key in keys:
            cluster = clusters[key]
            if not 0 <= cluster < spec.cluster_count:
                raise ValidationError(f"key {key!r} assigned to invalid cluster {cluster}")
            noise = _key_rng(spec, kind, key).normal(size=spec.dim) * spec.noise_scale
            vectors[key] = (centers[cluster] + noise).astype(np.float32)
        return vectors

    word_table = FeatureTable(build(word_keys, word_clusters, WORD_KIND), spec.dim, WORD_KIND)
    image_table = FeatureTable(build(image_keys, image_clusters, IMAGE_KIND), spec.dim, IMAGE_KIND)
    return word_table, image_table


def table_fingerprint(table: FeatureTable) -> str:
    """Stable digest over sorted keys and f32 payloads."""
    h = hashlib.sha256()
    for key in sorted(table.vectors):
        h.update(key.encode("utf-8"))
        h.update(b"\x00")
        h.update(table.vectors[key].astype("<f4").tobytes())
    return h.hexdigest()[:16]
