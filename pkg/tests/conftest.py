"""Shared test world: a small two-topic corpus with a trained mapper."""

from dataclasses import dataclass

import numpy as np
import pytest

from visaid import data, features, mapping
from visaid.content_words import PosLexicon
from visaid.model import ModelConfig

TOPIC0 = ["dog", "ball", "park", "run", "fetch", "happy"]
TOPIC1 = ["soup", "cook", "kitchen", "eat", "tasty", "dinner"]
STOPWORDS = frozenset({"the", "a", "is", "i", "we", "you", "to", "and", "on", "in"})


@dataclass
class ToyWorld:
    words: list
    clusters: dict
    image_ids: list
    image_clusters: dict
    word_table: features.FeatureTable
    image_table: features.FeatureTable
    lexicon: PosLexicon
    stopwords: frozenset
    captions: list
    mapper: mapping.MappingModel
    index: mapping.WordImageIndex


@pytest.fixture(scope="session")
def toy() -> ToyWorld:
    words = TOPIC0 + TOPIC1
    clusters = {w: (0 if w in TOPIC0 else 1) for w in words}
    image_ids = [f"img{i:02d}" for i in range(8)]
    image_clusters = {im: (0 if i < 4 else 1) for i, im in enumerate(image_ids)}
    spec = features.SyntheticFeatureSpec(seed=7, dim=16, cluster_count=2, noise_scale=0.05)
    word_table, image_table = features.synthetic_tables(
        spec, words, image_ids, clusters, image_clusters)
    tags = {w: tag for w, tag in zip(words, ["NOUN", "NOUN", "NOUN", "VERB", "VERB", "ADJ"] * 2)}
    lexicon = PosLexicon(tags)
    captions = []
    for i, image_id in enumerate(image_ids):
        topic = TOPIC0 if image_clusters[image_id] == 0 else TOPIC1
        sentence = " ".join(topic[i % 3:i % 3 + 3])
        captions.append(data.CaptionPair(image_id, data.Utterance.from_raw(sentence)))
    examples = mapping.caption_examples(captions, lexicon, STOPWORDS)
    mapper = mapping.train_mapper(
        examples, word_table, image_table,
        mapping.MapperConfig(epochs=60, seed=3, joint_dim=16))
    index = mapping.build_index(mapper, words, word_table, image_ids, image_table)
    return ToyWorld(words, clusters, image_ids, image_clusters, word_table,
                    image_table, lexicon, STOPWORDS, captions, mapper, index)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(model_dim=16, heads=2, enc_layers=1, dec_layers=1, ffn_dim=32,
                dropout=0.0, smoothing=0.1, alpha=0.5, max_len=12,
                max_impressions=4, vocab_cap=200, feature_dim=16)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture()
def toy_vocab(toy) -> data.Vocabulary:
    vocab = data.Vocabulary()
    for w in sorted(set(toy.words) | set(STOPWORDS)):
        vocab.add(w)
    return vocab


def random_impressions(rng, count, slots, dim):
    from visaid.mapping import VisualImpression
    from visaid.model import ImpressionSequence

    imps = [VisualImpression(f"im{j}", rng.normal(size=dim).astype(np.float32), 0.1)
            for j in range(count)]
    return ImpressionSequence.build(imps, slots, dim)
