import math

import numpy as np
import pytest

from visaid import autodiff as ad
from visaid import nn
from visaid.autodiff import Tensor


def cfg(d=8, heads=2, ffn=16, dropout=0.0):
    return nn.AttentionConfig(d, heads, ffn, dropout)


def store64(seed=0):
    return nn.ParameterStore(seed, dtype=np.float64)


class TestParameterStore:
    def test_same_seed_identical_init(self):
        a, b = store64(5), store64(5)
        a.add("w", (4, 4))
        b.add("w", (4, 4))
        assert np.array_equal(a.arrays["w"], b.arrays["w"])

    def test_duplicate_name_rejected(self):
        s = store64()
        s.add("w", (2,))
        with pytest.raises(ValueError, match="duplicate"):
            s.add("w", (2,))

    def test_trunc_normal_bounded(self):
        s = store64()
        w = s.add("w", (500,))
        assert np.abs(w).max() <= 0.04 + 1e-12

    def test_init_kinds(self):
        s = store64()
        assert np.array_equal(s.add("z", (3,), init="zeros"), np.zeros(3))
        assert np.array_equal(s.add("o", (3,), init="ones"), np.ones(3))

    def test_astype(self):
        s = nn.ParameterStore(0, dtype=np.float32)
        s.add("w", (3,))
        d = s.astype(np.float64)
        assert d.arrays["w"].dtype == np.float64
        np.testing.assert_allclose(d.arrays["w"], s.arrays["w"])


class TestMultiHeadAttention:
    def test_single_key_output_is_projected_v(self):
        # m = 1: softmax over one element is 1 for every query row
        c = cfg()
        s = store64()
        nn.init_mha(s, "m", c)
        pt = s.tensors()
        rng = np.random.default_rng(0)
        q_in = Tensor(rng.normal(size=(4, 8)))
        kv = Tensor(rng.normal(size=(1, 8)))
        out = nn.multi_head_attention(q_in, kv, kv, None, pt, "m", c).value
        arr = s.arrays
        v_proj = kv.value @ arr["m.v.w"] + arr["m.v.b"]
        expected = v_proj @ arr["m.o.w"] + arr["m.o.b"]
        for row in out:
            np.testing.assert_allclose(row, expected[0], atol=1e-12)

    def test_identity_projection_one_hot_selection(self):
        # hand-checkable 2x2 softmax: huge matching logit selects one V row
        c = nn.AttentionConfig(2, 1, 4, 0.0)
        s = store64()
        nn.init_mha(s, "m", c)
        for part in ("q", "k", "v", "o"):
            s.arrays[f"m.{part}.w"][...] = np.eye(2)
            s.arrays[f"m.{part}.b"][...] = 0.0
        pt = s.tensors()
        k_in = Tensor(np.eye(2))
        v_in = Tensor(np.array([[5.0, -1.0], [2.0, 7.0]]))
        q_in = Tensor(np.array([[60.0, 0.0]]))
        out = nn.multi_head_attention(q_in, k_in, v_in, None, pt, "m", c).value
        w_sel = 1.0 / (1.0 + math.exp(-60.0 / math.sqrt(2)))
        expected = w_sel * v_in.value[0] + (1 - w_sel) * v_in.value[1]
        np.testing.assert_allclose(out[0], expected, atol=1e-9)

    def test_causal_mask_weights_lower_triangular(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(2, 3, 4))
        k = rng.normal(size=(2, 3, 4))
        attn = ad.attention_weights(q, k, nn.causal_mask(3))
        for h in range(2):
            assert np.array_equal(np.triu(attn[h], k=1), np.zeros((3, 3)))
            assert (np.tril(attn[h]) > 0).sum() == 6

    def test_attention_weights_nonsquare(self):
        rng = np.random.default_rng(2)
        attn = ad.attention_weights(rng.normal(size=(2, 3, 4)),
                                    rng.normal(size=(2, 5, 4)),
                                    np.ones((3, 5), dtype=bool))
        assert attn.shape == (2, 3, 5)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)

    def test_all_false_row_rejected(self):
        c = cfg()
        s = store64()
        nn.init_mha(s, "m", c)
        pt = s.tensors()
        x = Tensor(np.ones((2, 8)))
        bad = np.array([[True, True], [False, False]])
        with pytest.raises(ValueError, match="no visible"):
            nn.multi_head_attention(x, x, x, bad, pt, "m", c)

    def test_inference_deterministic(self):
        c = cfg()
        s = store64()
        nn.init_mha(s, "m", c)
        x = np.random.default_rng(2).normal(size=(3, 8))
        a = nn.multi_head_attention(Tensor(x), Tensor(x), Tensor(x), None, s.tensors(), "m", c).value
        b = nn.multi_head_attention(Tensor(x), Tensor(x), Tensor(x), None, s.tensors(), "m", c).value
        assert np.array_equal(a, b)


class TestTransformerBlock:
    def test_output_shape_matches_q(self):
        c = cfg()
        s = store64()
        nn.init_transformer_block(s, "b", c)
        pt = s.tensors()
        rng = np.random.default_rng(0)
        for m in (1, 3, 9):
            out = nn.transformer_block(Tensor(rng.normal(size=(4, 8))),
                                       Tensor(rng.normal(size=(m, 8))),
                                       Tensor(rng.normal(size=(m, 8))),
                                       None, pt, "b", c)
            assert out.shape == (4, 8)

    def test_layer_norm_row_statistics(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(5, 16)) * 3 + 1)
        y = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).value
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_zero_ffn_reduces_to_normalized_attention(self):
        c = cfg()
        s = store64()
        nn.init_transformer_block(s, "b", c)
        for name in ("b.ffn.in.w", "b.ffn.in.b", "b.ffn.out.w", "b.ffn.out.b"):
            s.arrays[name][...] = 0.0
        pt = s.tensors()
        rng = np.random.default_rng(4)
        q = Tensor(rng.normal(size=(1, 8)))
        kv = Tensor(rng.normal(size=(2, 8)))
        got = nn.transformer_block(q, kv, kv, None, pt, "b", c).value
        att = nn.multi_head_attention(q, kv, kv, None, pt, "b.mha", c)
        x = nn.layer_norm(pt, "b.ln1", q + att)
        expected = nn.layer_norm(pt, "b.ln2", x).value
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestSinusoidalPositions:
    def test_position_zero(self):
        pe = nn.sinusoidal_positions(4, 6)
        assert np.array_equal(pe[0, 0::2], np.zeros(3))
        assert np.array_equal(pe[0, 1::2], np.ones(3))

    def test_first_position_first_dim(self):
        pe = nn.sinusoidal_positions(2, 4)
        assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-12)
        assert pe[1, 0] == pytest.approx(0.8415, abs=1e-4)

    def test_range(self):
        pe = nn.sinusoidal_positions(100, 32)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            nn.sinusoidal_positions(4, 5)

    def test_wavelength_structure(self):
        pe = nn.sinusoidal_positions(3, 4)
        assert pe[2, 0] == pytest.approx(math.sin(2.0), abs=1e-12)
        assert pe[2, 2] == pytest.approx(math.sin(2.0 / 100.0), abs=1e-12)


class TestSmoothedCrossEntropy:
    def test_uniform_logits_give_log_v(self):
        for v in (2, 7, 64):
            loss, _ = nn.smoothed_cross_entropy(Tensor(np.zeros((1, v))), [0], 0.0)
            assert float(loss.value) == pytest.approx(math.log(v), rel=1e-12)

    def test_perfect_prediction_near_zero(self):
        logits = np.full((1, 5), -300.0)
        logits[0, 2] = 300.0
        loss, _ = nn.smoothed_cross_entropy(Tensor(logits), [2], 0.0)
        assert float(loss.value) == pytest.approx(0.0, abs=1e-10)

    def test_two_class_smoothed_value(self):
        logits = np.log(np.array([[0.75, 0.25]]))
        loss, _ = nn.smoothed_cross_entropy(Tensor(logits), [0], 0.1)
        want = -(0.9 * math.log(0.75) + 0.1 * math.log(0.25))
        assert float(loss.value) == pytest.approx(want, rel=1e-12)

    def test_pad_targets_contribute_zero(self):
        logits = np.random.default_rng(0).normal(size=(3, 6))
        full, n_full = nn.smoothed_cross_entropy(Tensor(logits), [1, 0, 2], 0.1, pad_id=0)
        part, n_part = nn.smoothed_cross_entropy(Tensor(logits[[0, 2]]), [1, 2], 0.1, pad_id=0)
        assert n_full == 2 and n_part == 2
        assert float(full.value) == pytest.approx(float(part.value), rel=1e-12)

    def test_bad_smoothing_rejected(self):
        with pytest.raises(ValueError):
            nn.smoothed_cross_entropy(Tensor(np.zeros((1, 4))), [0], 1.0)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        s = store64()
        w = s.add("w", (3,))
        before = w.copy()
        nn.adam_step(s, {"w": np.zeros(3)}, lr=0.1)
        np.testing.assert_allclose(s.arrays["w"], before, atol=1e-12)

    def test_first_step_magnitude(self):
        s = store64()
        s.add("w", (1,), init="zeros")
        nn.adam_step(s, {"w": np.ones(1)}, lr=0.001)
        assert s.arrays["w"][0] == pytest.approx(-0.001, rel=1e-6)
        assert s.step == 1

    def test_deterministic(self):
        grads = {"w": np.array([0.5, -0.2, 0.1])}
        outs = []
        for _ in range(2):
            s = store64(9)
            s.add("w", (3,))
            for _ in range(5):
                nn.adam_step(s, grads, lr=0.01)
            outs.append(s.arrays["w"].copy())
        assert np.array_equal(outs[0], outs[1])

    def test_non_finite_gradient_names_parameter(self):
        s = store64()
        s.add("bad.weight", (2,))
        with pytest.raises(nn.NonFiniteGradient, match="bad.weight"):
            nn.adam_step(s, {"bad.weight": np.array([1.0, np.nan])}, lr=0.01)

    def test_missing_grads_skipped(self):
        s = store64()
        s.add("a", (2,))
        b = s.add("b", (2,)).copy()
        nn.adam_step(s, {"a": np.ones(2)}, lr=0.01)
        assert np.array_equal(s.arrays["b"], b)


class TestGradientCheck:
    def test_quadratic(self):
        s = store64()
        s.add("x", (1,), init="zeros")
        s.arrays["x"][0] = 3.0
        report = nn.gradient_check(lambda pt: ad.tsum(ad.mul(pt["x"], pt["x"])) * 0.5, s)
        assert report.max_rel_error < 1e-8
        assert report.passed

    def test_tiny_attention_model(self):
        c = cfg(d=6, heads=1, ffn=8)
        s = store64(1)
        nn.init_mha(s, "m", c)
        x = np.random.default_rng(2).normal(size=(3, 6))

        def loss_fn(pt):
            out = nn.multi_head_attention(Tensor(x), Tensor(x), Tensor(x), None, pt, "m", c)
            return ad.tsum(ad.mul(out, out))

        report = nn.gradient_check(loss_fn, s)
        assert report.max_rel_error < 1e-4

    def test_corrupted_gradient_flagged(self):
        s = store64()
        s.add("good", (2,))
        s.add("evil", (2,))
        s.arrays["evil"][...] = [0.5, -0.3]

        def loss_fn(pt):
            detached = Tensor(pt["evil"].value)  # silently drops the gradient path
            return ad.tsum(ad.mul(pt["good"], pt["good"])) + ad.tsum(ad.mul(detached, detached))

        report = nn.gradient_check(loss_fn, s)
        assert not report.passed
        assert report.flagged() == ["evil"]
        assert report.worst_param == "evil"


class TestCheckpointIO:
    def test_round_trip(self, tmp_path):
        s = nn.ParameterStore(0, dtype=np.float32)
        s.add("layer.w", (3, 4))
        s.add("layer.b", (4,), init="zeros")
        s.step = 17
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(path, s)
        arrays, step = nn.load_checkpoint(path)
        assert step == 17
        assert set(arrays) == {"layer.w", "layer.b"}
        np.testing.assert_array_equal(arrays["layer.w"], s.arrays["layer.w"])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError, match="magic"):
            nn.load_checkpoint(path)

    def test_deterministic_bytes(self, tmp_path):
        blobs = []
        for name in ("a.ckpt", "b.ckpt"):
            s = nn.ParameterStore(4, dtype=np.float32)
            s.add("w", (5, 5))
            nn.save_checkpoint(tmp_path / name, s)
            blobs.append((tmp_path / name).read_bytes())
        assert blobs[0] == blobs[1]
