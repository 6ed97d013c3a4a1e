import subprocess
import sys

import numpy as np
import pytest

from visaid import backend


@pytest.fixture(scope="module")
def lanes():
    numba = backend.numba_lane()
    if numba is None:
        pytest.skip("numba unavailable")
    return backend.IMPLEMENTATIONS["numpy"], numba


def random_problem(rng, heads=3, n=5, m=7, dh=4, masked=True):
    q = rng.normal(size=(heads, n, dh))
    k = rng.normal(size=(heads, m, dh))
    v = rng.normal(size=(heads, m, dh))
    if masked:
        mask = rng.random((n, m)) > 0.4
        mask[:, 0] = True  # no empty rows
    else:
        mask = np.ones((n, m), dtype=bool)
    return q, k, v, mask


class TestLaneAgreement:
    def test_attention_forward(self, lanes):
        np_lane, nb_lane = lanes
        rng = np.random.default_rng(0)
        for masked in (True, False):
            q, k, v, mask = random_problem(rng, masked=masked)
            c1, a1 = np_lane["attn_core_forward"](q, k, v, mask, 0.5)
            c2, a2 = nb_lane["attn_core_forward"](q, k, v, mask, 0.5)
            np.testing.assert_allclose(c1, c2, atol=1e-13)
            np.testing.assert_allclose(a1, a2, atol=1e-13)

    def test_attention_backward(self, lanes):
        np_lane, nb_lane = lanes
        rng = np.random.default_rng(1)
        q, k, v, mask = random_problem(rng)
        _, attn = np_lane["attn_core_forward"](q, k, v, mask, 0.5)
        dctx = rng.normal(size=q.shape)
        g1 = np_lane["attn_core_backward"](dctx, q, k, v, attn, 0.5)
        g2 = nb_lane["attn_core_backward"](dctx, q, k, v, attn, 0.5)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, atol=1e-13)

    def test_layer_norm_both_directions(self, lanes):
        np_lane, nb_lane = lanes
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 10))
        gain = rng.normal(size=10)
        bias = rng.normal(size=10)
        y1, m1, r1 = np_lane["layer_norm_forward"](x, gain, bias, 1e-5)
        y2, m2, r2 = nb_lane["layer_norm_forward"](x, gain, bias, 1e-5)
        np.testing.assert_allclose(y1, y2, atol=1e-13)
        dy = rng.normal(size=x.shape)
        g1 = np_lane["layer_norm_backward"](dy, x, gain, m1, r1)
        g2 = nb_lane["layer_norm_backward"](dy, x, gain, m2, r2)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, atol=1e-13)

    def test_float32_supported(self, lanes):
        np_lane, nb_lane = lanes
        rng = np.random.default_rng(3)
        q, k, v, mask = random_problem(rng)
        args = tuple(x.astype(np.float32) for x in (q, k, v)) + (mask,)
        c1, _ = np_lane["attn_core_forward"](*args, 0.5)
        c2, _ = nb_lane["attn_core_forward"](*args, 0.5)
        assert c1.dtype == np.float32 == c2.dtype
        np.testing.assert_allclose(c1, c2, atol=1e-5)


class TestMaskSemantics:
    def test_masked_positions_exactly_zero(self):
        rng = np.random.default_rng(4)
        q, k, v, mask = random_problem(rng)
        _, attn = backend.attn_core_forward(q, k, v, mask, 0.5)
        assert (attn[:, ~mask] == 0.0).all() if attn.ndim == 2 else True
        for h in range(attn.shape[0]):
            assert (attn[h][~mask] == 0.0).all()

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        q, k, v, mask = random_problem(rng)
        _, attn = backend.attn_core_forward(q, k, v, mask, 0.5)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)


def test_env_flag_selects_numpy_lane():
    code = ("import os; os.environ['VISAID_NUMBA']='0'; "
            "import visaid.backend as b; print(b.active_lane())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"


def test_default_lane_is_numba_when_available():
    assert backend.active_lane() in ("numba", "numpy")
    if backend.numba_lane() is not None:
        code = ("import os; os.environ.pop('VISAID_NUMBA', None); "
                "import visaid.backend as b; print(b.active_lane())")
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
        assert out.stdout.strip() == "numba"
