#!/usr/bin/env python3
"""Regenerate the shipped toy fixtures (deterministic; overwrite in place).

Four topics, ~40 content words, 28 candidate images, 30 captions, and 18
dialogue sessions (55+ post-response pairs). Feature tables are synthetic
clusters whose centers are shared between word and image tables so the
mapping model has signal to learn.
"""

import json
import sys
from pathlib import Path

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "visaid" / "fixtures"
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from visaid import data  # noqa: E402
from visaid.features import (SyntheticFeatureSpec, FeatureTable, UNK_KEY,  # noqa: E402
                             WORD_KIND, save_feature_table, synthetic_tables)

TOPICS = {
    "outdoors": {
        "NOUN": ["dog", "ball", "park", "grass", "leash"],
        "VERB": ["run", "fetch", "walk", "chase"],
        "ADJ": ["happy", "sunny"],
        "ADV": ["outside"],
    },
    "kitchen": {
        "NOUN": ["soup", "kitchen", "dinner", "recipe", "bread"],
        "VERB": ["cook", "eat", "bake", "chop"],
        "ADJ": ["tasty", "hungry"],
        "ADV": ["slowly"],
    },
    "beach": {
        "NOUN": ["beach", "ocean", "sand", "wave", "boat"],
        "VERB": ["swim", "surf", "sail", "float"],
        "ADJ": ["warm", "salty"],
        "ADV": ["gently"],
    },
    "music": {
        "NOUN": ["band", "song", "guitar", "drum", "stage"],
        "VERB": ["sing", "dance", "strum", "listen"],
        "ADJ": ["loud", "catchy"],
        "ADV": ["together"],
    },
}

OTHER_WORDS = ["yeah", "okay", "sure", "please", "thanks", "hello", "hi",
               "maybe", "wow", "right"]

STOPWORDS = ["i", "you", "we", "they", "he", "she", "it", "the", "a", "an",
             "is", "are", "was", "were", "be", "been", "am", "do", "does",
             "did", "to", "on", "in", "at", "of", "and", "or", "my", "your",
             "our", "me", "us", "that", "this", "so", "very", "there", "have",
             "has", "had", "what", "how", "when", "can", "will", "would",
             "lets", "let", "with", "for", "about", "not", "no", "yes"]

CAPTIONS = {
    "outdoors": [
        "a happy dog runs in the sunny park",
        "the dog chases a ball on the grass",
        "we walk the dog outside on a leash",
        "a dog fetches the ball in the park",
        "the happy dog plays fetch on sunny grass",
        "a small dog runs outside with a ball",
        "the park grass is sunny and the dog is happy",
        "a dog on a leash walks in the park",
    ],
    "kitchen": [
        "a cook chops bread in the kitchen",
        "tasty soup for a hungry dinner",
        "we bake bread slowly with a recipe",
        "the kitchen smells of tasty soup",
        "a hungry cook eats dinner in the kitchen",
        "soup and bread make a tasty dinner",
        "the recipe says to chop slowly",
    ],
    "beach": [
        "a warm wave rolls on the sand",
        "we swim in the salty ocean at the beach",
        "a boat sails gently on the ocean",
        "surfers surf a warm wave near the beach",
        "the sand at the beach is warm",
        "a boat floats gently on a salty wave",
        "we sail the boat to the beach",
    ],
    "music": [
        "the band sings a catchy song on stage",
        "a loud guitar and a drum play together",
        "we dance together to a catchy song",
        "the guitar strums a loud melody on stage",
        "a band with a drum and a guitar",
        "they listen to the loud band sing",
        "the stage lights shine on the catchy band",
        "a drummer and a singer dance on stage",
    ],
}

SESSIONS = {
    "outdoors": [
        ["do you walk the dog in the park",
         "yes we run and play fetch on the grass",
         "the dog is so happy when it is sunny",
         "lets chase the ball outside"],
        ["my dog loves to fetch the ball",
         "our park has sunny grass to run on",
         "okay lets walk there with the leash"],
        ["the park is sunny today",
         "we can walk the dog on the grass",
         "yeah the dog will chase the ball outside"],
        ["i run with my dog every morning",
         "a happy dog on a leash is a good dog",
         "sure we can fetch the ball in the park"],
        ["is the grass dry enough to play fetch",
         "yes and the dog is already outside",
         "happy dogs run fast in the sunny park"],
        ["the leash is by the door",
         "okay we walk the dog now",
         "run ahead and i fetch the ball",
         "the grass is wet but the dog is happy"],
    ],
    "kitchen": [
        ["what do you cook for dinner",
         "i bake bread and make tasty soup",
         "wow the kitchen smells so good",
         "we eat when the soup is ready"],
        ["i am hungry after work",
         "lets cook a tasty dinner in the kitchen",
         "okay you chop and i follow the recipe"],
        ["this recipe says to chop the bread slowly",
         "sure the soup needs time to cook",
         "a hungry cook eats twice"],
        ["do you bake your own bread",
         "yes and the kitchen smells tasty",
         "please save me some dinner"],
        ["the soup needs salt",
         "chop more bread please",
         "we eat dinner when the bake is done",
         "tasty food makes a happy kitchen"],
    ],
    "beach": [
        ["lets go to the beach today",
         "we can swim in the warm ocean",
         "i will sail the boat near the sand",
         "the waves are gentle so we can surf"],
        ["the ocean looks warm and salty",
         "yes a wave rolls on the sand gently",
         "maybe we surf before the boat ride"],
        ["can you sail a boat",
         "sure i sail and you swim",
         "the beach sand is warm today"],
        ["i love to float on a warm wave",
         "we swim at the beach every summer",
         "okay bring the boat and we sail"],
        ["the wave is big today",
         "we float near the boat instead",
         "warm sand is the best part of the beach",
         "okay we swim later"],
    ],
    "music": [
        ["the band plays a catchy song tonight",
         "i love the loud guitar and the drum",
         "we can dance together near the stage",
         "they sing so well"],
        ["do you listen to the new song",
         "yes the guitar strums a catchy melody",
         "lets dance when the band is on stage"],
        ["the drum is too loud",
         "maybe but the song is catchy",
         "we sing together anyway"],
        ["who plays the guitar on stage",
         "the band sings and the drummer plays",
         "okay lets listen together"],
        ["that song is stuck in my head",
         "catchy songs make you dance",
         "the band should sing it on stage again"],
        ["turn the drum down please",
         "the loud part is the catchy part",
         "we listen and then we dance on stage",
         "sing the song one more time"],
    ],
}


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    topics = list(TOPICS)
    content_words = []
    word_tags = {}
    word_clusters = {}
    for t_idx, (topic, by_tag) in enumerate(TOPICS.items()):
        for tag, words in by_tag.items():
            for w in words:
                content_words.append(w)
                word_tags[w] = tag
                word_clusters[w] = t_idx

    # POS lexicon: content words plus explicitly OTHER-tagged chatter
    with open(FIXTURES / "pos_lexicon.tsv", "w", encoding="utf-8") as fh:
        for w in sorted(word_tags):
            fh.write(f"{w}\t{word_tags[w]}\n")
        for w in OTHER_WORDS:
            fh.write(f"{w}\tOTHER\n")

    with open(FIXTURES / "stopwords.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(STOPWORDS) + "\n")

    # images: 7 per topic
    image_ids = []
    image_clusters = {}
    for t_idx, topic in enumerate(topics):
        for j in range(7):
            image_id = f"img{t_idx * 7 + j:03d}"
            image_ids.append(image_id)
            image_clusters[image_id] = t_idx

    # captions: round-robin images within each topic
    with open(FIXTURES / "captions.jsonl", "w", encoding="utf-8") as fh:
        for t_idx, topic in enumerate(topics):
            for j, sentence in enumerate(CAPTIONS[topic]):
                image_id = f"img{t_idx * 7 + (j % 7):03d}"
                fh.write(json.dumps({"image_id": image_id, "sentence": sentence}) + "\n")

    with open(FIXTURES / "dialogues.jsonl", "w", encoding="utf-8") as fh:
        for topic in topics:
            for session in SESSIONS[topic]:
                fh.write(json.dumps({"session": session}) + "\n")

    # feature tables
    spec = SyntheticFeatureSpec(seed=20240, dim=32, cluster_count=4, noise_scale=0.08)
    word_table, image_table = synthetic_tables(
        spec, content_words, image_ids, word_clusters, image_clusters)
    word_vectors = dict(word_table.vectors)
    word_vectors[UNK_KEY] = word_table.vectors[content_words[0]] * 0.0
    save_feature_table(FIXTURES / "word_feats.vfea",
                       FeatureTable(word_vectors, spec.dim, WORD_KIND))
    save_feature_table(FIXTURES / "image_feats.vfea", image_table)

    # embedding space for metrics: every token of the corpus, function words
    # in their own cluster
    all_tokens = set()
    for caps in CAPTIONS.values():
        for s in caps:
            all_tokens.update(data.tokenize(s))
    for sessions in SESSIONS.values():
        for session in sessions:
            for s in session:
                all_tokens.update(data.tokenize(s))
    embed_spec = SyntheticFeatureSpec(seed=555, dim=24, cluster_count=5, noise_scale=0.25)
    embed_clusters = {t: word_clusters.get(t, 4) for t in all_tokens}
    embed_table, _ = synthetic_tables(embed_spec, sorted(all_tokens), [],
                                      embed_clusters, {})
    save_feature_table(FIXTURES / "embed_feats.vfea", embed_table)

    # indexable word list, vocabulary file format
    vocab = data.Vocabulary()
    for w in sorted(content_words):
        vocab.add(w)
    vocab.save(FIXTURES / "vocab.txt")

    with open(FIXTURES / "model_config.json", "w", encoding="utf-8") as fh:
        json.dump({"model_dim": 32, "heads": 2, "enc_layers": 1, "dec_layers": 1,
                   "ffn_dim": 64, "dropout": 0.0, "smoothing": 0.1, "alpha": 0.5,
                   "max_len": 50, "max_impressions": 8, "vocab_cap": 2000,
                   "feature_dim": 32}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    pairs = data.load_dialogue_pairs(FIXTURES / "dialogues.jsonl")
    print(f"fixtures written to {FIXTURES}")
    print(f"  content words: {len(content_words)}  images: {len(image_ids)}  "
          f"captions: {sum(len(v) for v in CAPTIONS.values())}  pairs: {len(pairs)}")


if __name__ == "__main__":
    main()
