"""Visually-aided dialogue generation toolkit.

Two-stage pipeline: a word-image mapping model that attaches visual
impressions to utterances, and a transformer with a co-attention encoder and
cascade decoder that consumes them, plus the evaluation and ablation harness.

The heavy lifting lives in submodules (data, content_words, features,
mapping, model, training, metrics); the most common entry points are
re-exported here.
"""

__version__ = "0.1.0"

from .data import DialoguePair, Utterance, Vocabulary, load_dialogue_pairs  # noqa: E402
from .mapping import MappingModel, WordImageIndex, build_index, train_mapper  # noqa: E402
from .model import ModelConfig, VisAD  # noqa: E402
from .training import TrainConfig, generate, train  # noqa: E402

__all__ = [
    "DialoguePair", "MappingModel", "ModelConfig", "TrainConfig", "Utterance",
    "VisAD", "Vocabulary", "WordImageIndex", "build_index", "generate",
    "load_dialogue_pairs", "train", "train_mapper", "__version__",
]
