"""Neural building blocks: parameter store, attention layers, Adam, gradient check.

Everything operates on :class:`visaid.autodiff.Tensor`; parameters live in a
:class:`ParameterStore` and are wrapped into tensors once per forward pass.
Layers are plain functions taking (param tensors, prefix, inputs) so that the
same store can drive any wiring.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"VCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class AttentionConfig:
    """Shape/regularization knobs shared by all attention layers."""

    model_dim: int
    head_count: int
    ffn_dim: int
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.head_count != 0:
            raise ValueError("model_dim must be divisible by head_count")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class ParameterStore:
    """Named trainable arrays with seeded init and Adam slots.

    Arrays are registered in a fixed order during model construction, so the
    same seed always yields the same initialization.
    """

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.arrays: dict[str, np.ndarray] = {}
        self.step = 0
        self._rng = np.random.default_rng(seed)
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}

    def add(self, name: str, shape, init: str = "trunc_normal") -> np.ndarray:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter name: {name}")
        if init == "trunc_normal":
            arr = self._trunc_normal(shape, 0.02)
        elif init == "zeros":
            arr = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            arr = np.ones(shape, dtype=self.dtype)
        else:
            raise ValueError(f"unknown init: {init}")
        self.arrays[name] = arr
        return arr

    def _trunc_normal(self, shape, sigma: float) -> np.ndarray:
        # resample anything beyond 2 sigma
        out = self._rng.normal(0.0, sigma, size=shape)
        bad = np.abs(out) > 2.0 * sigma
        while bad.any():
            out[bad] = self._rng.normal(0.0, sigma, size=int(bad.sum()))
            bad = np.abs(out) > 2.0 * sigma
        return out.astype(self.dtype)

    def tensors(self) -> dict[str, Tensor]:
        """Fresh grad-capable wrappers for one forward/backward pass."""
        return {name: Tensor(arr, requires_grad=True) for name, arr in self.arrays.items()}

    def astype(self, dtype) -> "ParameterStore":
        """Copy of this store in another dtype (Adam state not carried over)."""
        clone = ParameterStore.__new__(ParameterStore)
        clone.seed = self.seed
        clone.dtype = np.dtype(dtype)
        clone.arrays = {k: v.astype(dtype) for k, v in self.arrays.items()}
        clone.step = self.step
        clone._rng = np.random.default_rng(self.seed)
        clone._adam_m, clone._adam_v = {}, {}
        return clone

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, arr in state.items():
            if name not in self.arrays:
                raise KeyError(f"unknown parameter in state: {name}")
            if self.arrays[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}")
            self.arrays[name][...] = arr.astype(self.dtype)


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.998, eps: float = 1e-8):
    """One Adam update with bias correction over all parameters with a gradient."""
    store.step += 1
    t = store.step
    for name in store.arrays:
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter '{name}'")
        g = g.astype(store.dtype, copy=False)
        m = store._adam_m.setdefault(name, np.zeros_like(store.arrays[name]))
        v = store._adam_v.setdefault(name, np.zeros_like(store.arrays[name]))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        store.arrays[name] -= lr * mhat / (np.sqrt(vhat) + eps)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table: PE[p, 2i] = sin(p / 10000^(2i/dim))."""
    if dim % 2 != 0:
        raise ValueError("position embedding dim must be even")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def init_linear(store: ParameterStore, prefix: str, d_in: int, d_out: int):
    store.add(prefix + ".w", (d_in, d_out))
    store.add(prefix + ".b", (d_out,), init="zeros")


def linear(pt: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.matmul(x, pt[prefix + ".w"]) + pt[prefix + ".b"]


def init_layer_norm(store: ParameterStore, prefix: str, dim: int):
    store.add(prefix + ".gain", (dim,), init="ones")
    store.add(prefix + ".bias", (dim,), init="zeros")


def layer_norm(pt: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, pt[prefix + ".gain"], pt[prefix + ".bias"])


def init_mha(store: ParameterStore, prefix: str, cfg: AttentionConfig):
    for part in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.{part}", cfg.model_dim, cfg.model_dim)


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, mask,
                         pt: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                         train_mode: bool = False, rng=None) -> Tensor:
    """Scaled dot-product attention with learned projections over head_count heads.

    mask is an n x m boolean array (True = visible) or None for full visibility.
    Raises if any query row has no visible key.
    """
    n, m = q_in.shape[0], k_in.shape[0]
    if mask is None:
        mask = np.ones((n, m), dtype=bool)
    q = ad.split_heads(linear(pt, prefix + ".q", q_in), cfg.head_count)
    k = ad.split_heads(linear(pt, prefix + ".k", k_in), cfg.head_count)
    v = ad.split_heads(linear(pt, prefix + ".v", v_in), cfg.head_count)
    ctx = ad.attention_core(q, k, v, mask)
    out = linear(pt, prefix + ".o", ad.merge_heads(ctx))
    if train_mode:
        out = ad.dropout(out, cfg.dropout_rate, rng)
    return out


def init_ffn(store: ParameterStore, prefix: str, cfg: AttentionConfig):
    init_linear(store, prefix + ".in", cfg.model_dim, cfg.ffn_dim)
    init_linear(store, prefix + ".out", cfg.ffn_dim, cfg.model_dim)


def ffn(pt: dict[str, Tensor], prefix: str, x: Tensor,
        train_mode: bool = False, rng=None, dropout_rate: float = 0.0) -> Tensor:
    h = linear(pt, prefix + ".out", ad.relu(linear(pt, prefix + ".in", x)))
    if train_mode:
        h = ad.dropout(h, dropout_rate, rng)
    return h


def init_transformer_block(store: ParameterStore, prefix: str, cfg: AttentionConfig):
    init_mha(store, prefix + ".mha", cfg)
    init_layer_norm(store, prefix + ".ln1", cfg.model_dim)
    init_ffn(store, prefix + ".ffn", cfg)
    init_layer_norm(store, prefix + ".ln2", cfg.model_dim)


def transformer_block(q_in: Tensor, k_in: Tensor, v_in: Tensor, mask,
                      pt: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                      train_mode: bool = False, rng=None) -> Tensor:
    """MHA + residual + layer norm, then position-wise FFN + residual + layer norm."""
    att = multi_head_attention(q_in, k_in, v_in, mask, pt, prefix + ".mha", cfg, train_mode, rng)
    x = layer_norm(pt, prefix + ".ln1", q_in + att)
    f = ffn(pt, prefix + ".ffn", x, train_mode, rng, cfg.dropout_rate)
    return layer_norm(pt, prefix + ".ln2", x + f)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def smoothed_cross_entropy(logits, targets, smoothing: float, pad_id=None):
    return ad.smoothed_cross_entropy(logits, targets, smoothing, pad_id)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def flagged(self) -> list[str]:
        return sorted(n for n, e in self.per_param.items() if e >= self.tolerance)


def gradient_check(loss_fn, store: ParameterStore, tolerance: float = 1e-4,
                   h: float = 1e-5, denom_floor: float = 1e-4) -> GradCheckReport:
    """Central finite differences against the tape's analytic gradients.

    loss_fn(param_tensors) must build and return a deterministic scalar Tensor
    (run it with dropout off). Works in the store's dtype; use float64.

    Per-element error is |analytic - fd| / max(|analytic| + |fd|, denom_floor).
    The floor matters: central differences carry an absolute noise floor of
    about ulp(loss) / h, so magnitudes far below it cannot be compared
    relatively and would report spurious mismatches.
    """
    pt = store.tensors()
    loss = loss_fn(pt)
    loss.backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for name, t in pt.items()}

    per_param: dict[str, float] = {}
    worst, worst_name = 0.0, ""
    for name, arr in store.arrays.items():
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            with ad.no_grad():
                lp = float(loss_fn(store.tensors()).value)
            flat[idx] = orig - h
            with ad.no_grad():
                lm = float(loss_fn(store.tensors()).value)
            flat[idx] = orig
            fd_flat[idx] = (lp - lm) / (2.0 * h)
        denom = np.maximum(np.abs(analytic[name]) + np.abs(fd), denom_floor)
        err = float((np.abs(analytic[name] - fd) / denom).max()) if flat.size else 0.0
        per_param[name] = err
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(worst, worst_name, per_param, tolerance)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path, store: ParameterStore):
    """Write all arrays as little-endian f32 records under the VCKPT header."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, store.step))
        for name, arr in store.arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, step = struct.unpack_from("<IQ", blob, 5)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 5 + 12
    arrays: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        arrays[name] = data.reshape(shape).astype(np.float32)
    return arrays, step
