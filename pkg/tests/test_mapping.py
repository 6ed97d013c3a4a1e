import numpy as np
import pytest

from visaid import mapping
from visaid.data import CaptionPair, Utterance
from visaid.errors import ValidationError
from visaid.features import FeatureTable, IMAGE_KIND, WORD_KIND


def identity_model(dim=4):
    """Heads whose hidden layer is the identity (weights I, biases 0), so the
    projection is elementwise tanh; one-hot inputs stay one-hot up to scale."""
    model = mapping.init_mapping_model(dim, dim, joint_dim=dim, seed=0, dtype=np.float64)
    for head in ("word", "image"):
        model.store.arrays[f"{head}.in.w"][...] = np.eye(dim)
        model.store.arrays[f"{head}.in.b"][...] = 0.0
        model.store.arrays[f"{head}.out.w"][...] = np.eye(dim)
        model.store.arrays[f"{head}.out.b"][...] = 0.0
    return model


def one_hot(dim, idx, scale=1.0):
    v = np.zeros(dim)
    v[idx] = scale
    return v


class TestSimilarity:
    def test_equal_inputs_give_one(self):
        model = identity_model()
        v = np.array([0.3, -0.2, 0.9, 0.1])
        assert mapping.similarity(v, v, model) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_one_hots_give_zero(self):
        model = identity_model()
        assert mapping.similarity(one_hot(4, 0), one_hot(4, 1), model) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_gives_minus_one(self):
        model = identity_model()
        v = np.array([0.5, -0.1, 0.2, 0.4])
        assert mapping.similarity(v, -v, model) == pytest.approx(-1.0, abs=1e-12)

    def test_range_bound(self, toy):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = rng.normal(size=16)
            v = rng.normal(size=16)
            s = mapping.similarity(w, v, toy.mapper)
            assert -1.0 - 1e-6 <= s <= 1.0 + 1e-6

    def test_zero_norm_projection_rejected(self):
        model = identity_model()
        model.store.arrays["word.out.w"][...] = 0.0  # projects everything to 0
        with pytest.raises(ValidationError, match="zero-norm"):
            mapping.similarity(one_hot(4, 0), one_hot(4, 1), model)


class TestHingeAndMarginLoss:
    def test_satisfied_margin_is_zero(self):
        assert mapping.hinge(0.9, 0.2, 0.1) == 0.0

    def test_violated_margin_value(self):
        assert mapping.hinge(0.3, 0.5, 0.2) == pytest.approx(0.4, abs=1e-12)

    def test_boundary_exactly_zero(self):
        assert mapping.hinge(0.7, 0.7, 0.0) == 0.0

    def test_margin_loss_composes_similarities(self):
        model = identity_model()
        w = one_hot(4, 0)
        # pos identical (sim 1), neg orthogonal (sim 0), thr 0.3 -> satisfied
        assert mapping.margin_loss(w, w, one_hot(4, 1), 0.3, model) == 0.0
        # pos orthogonal (0), neg identical (1), thr 0.2 -> 1.2
        got = mapping.margin_loss(w, one_hot(4, 1), w, 0.2, model)
        assert got == pytest.approx(1.2, abs=1e-9)

    def test_negative_threshold_rejected(self):
        model = identity_model()
        with pytest.raises(ValidationError):
            mapping.margin_loss(one_hot(4, 0), one_hot(4, 0), one_hot(4, 1), -0.1, model)


class TestSampleNegative:
    def caption(self, image_id):
        return CaptionPair(image_id, Utterance.from_raw("a dog"))

    def test_two_image_corpus_forced(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert mapping.sample_negative(self.caption("A"), ["A", "B"], rng) == "B"

    def test_seeded_reproducible(self):
        ids = ["a", "b", "c", "d"]
        draws1 = [mapping.sample_negative(self.caption("a"), ids, np.random.default_rng(7))
                  for _ in range(1)]
        draws2 = [mapping.sample_negative(self.caption("a"), ids, np.random.default_rng(7))
                  for _ in range(1)]
        assert draws1 == draws2

    def test_single_image_rejected(self):
        with pytest.raises(ValidationError):
            mapping.sample_negative(self.caption("A"), ["A"], np.random.default_rng(0))

    def test_uniformity_within_five_sigma(self):
        # 10k draws over 3 candidates: binomial sigma = sqrt(n p (1-p)) ~ 47.1
        rng = np.random.default_rng(123)
        counts = {"b": 0, "c": 0, "d": 0}
        n = 10_000
        for _ in range(n):
            counts[mapping.sample_negative(self.caption("a"), ["a", "b", "c", "d"], rng)] += 1
        sigma = (n * (1 / 3) * (2 / 3)) ** 0.5
        for image_id, count in counts.items():
            assert abs(count - n / 3) < 5 * sigma, (image_id, count)

    def test_never_returns_positive(self):
        rng = np.random.default_rng(5)
        ids = ["a", "b", "c"]
        for _ in range(200):
            assert mapping.sample_negative(self.caption("b"), ids, rng) != "b"


class TestTrainMapper:
    def test_loss_decreases_on_separable_clusters(self, toy):
        history = toy.mapper.history
        assert history[-1] < history[0]

    def test_zero_threshold_identical_features_is_fixed_point(self):
        # pos and neg images share one feature vector; hinge is 0 everywhere
        dim = 6
        vec = np.ones(dim, dtype=np.float32)
        word_table = FeatureTable({"w": vec.copy()}, dim, WORD_KIND)
        image_table = FeatureTable({"i1": vec.copy(), "i2": vec.copy()}, dim, IMAGE_KIND)
        config = mapping.MapperConfig(thr=0.0, epochs=3, seed=0, joint_dim=4)
        model = mapping.train_mapper([("i1", ("w",)), ("i2", ("w",))],
                                     word_table, image_table, config)
        assert model.history == [0.0, 0.0, 0.0]
        fresh = mapping.init_mapping_model(dim, dim, 4, seed=0)
        for name, arr in fresh.store.arrays.items():
            np.testing.assert_array_equal(model.store.arrays[name], arr)

    def test_unresolvable_feature_fails_before_training(self, toy):
        config = mapping.MapperConfig(epochs=1, seed=0)
        with pytest.raises(ValidationError, match="feature"):
            mapping.train_mapper([("img00", ("notaword",))],
                                 toy.word_table, toy.image_table, config)

    def test_deterministic_under_seed(self, toy):
        examples = mapping.caption_examples(toy.captions, toy.lexicon, toy.stopwords)
        config = mapping.MapperConfig(epochs=3, seed=5, joint_dim=8)
        m1 = mapping.train_mapper(examples, toy.word_table, toy.image_table, config)
        m2 = mapping.train_mapper(examples, toy.word_table, toy.image_table, config)
        assert m1.history == m2.history
        for name in m1.store.arrays:
            np.testing.assert_array_equal(m1.store.arrays[name], m2.store.arrays[name])


class TestBuildIndex:
    def brute_force(self, model, word, word_table, image_ids, image_table):
        best_id, best_score = None, -2.0
        for image_id in sorted(set(image_ids)):
            score = mapping.similarity(word_table.get(word), image_table.get(image_id), model)
            if score > best_score:
                best_id, best_score = image_id, score
        return best_id

    def test_matches_brute_force_oracle(self, toy):
        for word in toy.words:
            want = self.brute_force(toy.mapper, word, toy.word_table,
                                    toy.image_ids, toy.image_table)
            assert toy.index.get(word).image_id == want

    def test_singleton_candidate_set(self, toy):
        index = mapping.build_index(toy.mapper, toy.words, toy.word_table,
                                    ["img03"], toy.image_table)
        assert all(index.get(w).image_id == "img03" for w in toy.words)

    def test_tie_break_smallest_id(self, toy):
        # two candidates with identical features: exact tie, smaller id wins
        vec = toy.image_table.get("img00")
        table = FeatureTable({"zz_b": vec.copy(), "aa_a": vec.copy()}, 16, IMAGE_KIND)
        index = mapping.build_index(toy.mapper, ["dog"], toy.word_table,
                                    ["zz_b", "aa_a"], table)
        assert index.get("dog").image_id == "aa_a"

    def test_duplicate_words_deduplicated(self, toy):
        index = mapping.build_index(toy.mapper, ["dog", "dog", "dog"],
                                    toy.word_table, toy.image_ids, toy.image_table)
        assert len(index) == 1

    def test_scale_invariance_of_argmax(self, toy):
        # scaling every projected image vector by 3 never changes an argmax
        import copy

        scaled = copy.deepcopy(toy.mapper)
        scaled.store.arrays["image.out.w"][...] *= 3.0
        scaled.store.arrays["image.out.b"][...] *= 3.0
        index = mapping.build_index(scaled, toy.words, toy.word_table,
                                    toy.image_ids, toy.image_table)
        for word in toy.words:
            assert index.get(word).image_id == toy.index.get(word).image_id

    def test_threaded_build_identical(self, toy):
        threaded = mapping.build_index(toy.mapper, toy.words, toy.word_table,
                                       toy.image_ids, toy.image_table, threads=4)
        for word in toy.words:
            assert threaded.get(word).image_id == toy.index.get(word).image_id
            assert threaded.get(word).score == toy.index.get(word).score

    def test_rebuild_byte_identical_file(self, toy, tmp_path):
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        mapping.save_index(p1, toy.index)
        rebuilt = mapping.build_index(toy.mapper, toy.words, toy.word_table,
                                      toy.image_ids, toy.image_table)
        mapping.save_index(p2, rebuilt)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_candidates_rejected(self, toy):
        with pytest.raises(ValidationError):
            mapping.build_index(toy.mapper, toy.words, toy.word_table, [], toy.image_table)

    def test_scores_in_range(self, toy):
        for word in toy.words:
            assert -1.0 <= toy.index.get(word).score <= 1.0

    def test_query_ranking_consistent_with_index(self, toy):
        ranked = mapping.score_images(toy.mapper, "dog", toy.word_table,
                                      toy.image_ids, toy.image_table)
        assert ranked[0][0] == toy.index.get("dog").image_id
        scores = [s for _, s in ranked]
        assert scores == sorted(scores, reverse=True)


class TestLookupImpressions:
    def test_known_words_in_order(self, toy):
        got = mapping.lookup_impressions(["dog", "soup", "park"], toy.index, 8)
        assert [i.image_id for i in got] == [toy.index.get(w).image_id
                                             for w in ("dog", "soup", "park")]

    def test_truncation_to_k_max(self, toy):
        got = mapping.lookup_impressions(toy.words, toy.index, 8)
        assert len(got) == 8

    def test_unknown_words_skipped(self, toy):
        got = mapping.lookup_impressions(["dog", "qqq", "soup"], toy.index, 8)
        assert len(got) == 2

    def test_all_unknown_empty(self, toy):
        assert mapping.lookup_impressions(["qqq", "zzz"], toy.index, 8) == []

    def test_duplicates_map_to_same_entry(self, toy):
        a, b = mapping.lookup_impressions(["dog", "dog"], toy.index, 8)
        assert a is b


class TestPersistence:
    def test_mapper_round_trip(self, toy, tmp_path):
        path = tmp_path / "m.ckpt"
        mapping.save_mapper(path, toy.mapper)
        loaded = mapping.load_mapper(path)
        assert loaded.fingerprint() == toy.mapper.fingerprint()
        assert (loaded.word_dim, loaded.image_dim, loaded.joint_dim) == (16, 16, 16)

    def test_index_round_trip(self, toy, tmp_path):
        path = tmp_path / "i.tsv"
        mapping.save_index(path, toy.index, manifest_hash="cafe")
        loaded = mapping.load_index(path, toy.image_table)
        assert loaded.model_fingerprint == toy.index.model_fingerprint
        assert loaded.candidates_fingerprint == toy.index.candidates_fingerprint
        assert set(loaded.entries) == set(toy.index.entries)
        for word in toy.words:
            assert loaded.get(word).image_id == toy.index.get(word).image_id
            assert loaded.get(word).score == pytest.approx(toy.index.get(word).score, abs=1e-7)

    def test_index_header_format(self, toy, tmp_path):
        path = tmp_path / "i.tsv"
        mapping.save_index(path, toy.index)
        lines = path.read_text().splitlines()
        assert lines[0] == f"#VIDX\t{toy.index.model_fingerprint}\t{toy.index.candidates_fingerprint}"
        body = [l for l in lines[1:] if not l.startswith("#")]
        words = [l.split("\t")[0] for l in body]
        assert words == sorted(words)

    def test_index_missing_image_rejected(self, toy, tmp_path):
        path = tmp_path / "i.tsv"
        path.write_text("#VIDX\tx\ty\ndog\tnope\t0.5\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="nope"):
            mapping.load_index(path, toy.image_table)

    def test_not_a_mapper_rejected(self, toy, tmp_path):
        from visaid import nn
        store = nn.ParameterStore(0)
        store.add("something", (2, 2))
        path = tmp_path / "x.ckpt"
        nn.save_checkpoint(path, store)
        with pytest.raises(ValidationError):
            mapping.load_mapper(path)
