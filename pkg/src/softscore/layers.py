"""Transformer building blocks shared by the translation model and the
frozen contextual encoder: named parameter sets, sinusoidal positions,
multi-head attention, feed-forward blocks, layer norm."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9  # additive mask value; finite so masked softmax stays NaN-free


class Params:
    """Ordered name -> Tensor map. Insertion order doubles as the archive
    order when a parameter set is serialized."""

    def __init__(self):
        self._map = {}

    def add(self, name, array, trainable=True):
        if name in self._map:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(array, requires_grad=trainable)
        self._map[name] = t
        return t

    def __getitem__(self, name):
        return self._map[name]

    def __contains__(self, name):
        return name in self._map

    def __len__(self):
        return len(self._map)

    def names(self):
        return list(self._map)

    def items(self):
        return self._map.items()

    def tensors(self):
        return list(self._map.values())

    def arrays(self):
        return {name: t.data for name, t in self._map.items()}

    def load_arrays(self, arrays):
        for name, t in self._map.items():
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r}: stored shape {incoming.shape} != expected {t.data.shape}"
                )
            t.data = incoming
            t.grad = None

    def state_bytes(self):
        """Exact in-memory bytes of every parameter, for frozen-ness checks."""
        return b"".join(t.data.tobytes() for t in self._map.values())

    def count(self):
        return sum(t.data.size for t in self._map.values())


def sinusoidal_positions(max_len, dim):
    """The usual sin/cos position table, shape (max_len, dim)."""
    if dim % 2 != 0:
        raise ValueError(f"positional encoding needs an even width, got {dim}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    inv = np.exp(-np.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((max_len, dim))
    table[:, 0::2] = np.sin(pos * inv)
    table[:, 1::2] = np.cos(pos * inv)
    return table


def causal_mask(length):
    """Additive (1, 1, L, L) mask hiding positions after the query's own."""
    m = np.triu(np.full((length, length), NEG_INF), k=1)
    return m[None, None]


def pad_key_mask(pad_positions):
    """Additive (B, 1, 1, Lk) mask hiding padded keys.

    `pad_positions` is a boolean (B, Lk) array, True where padded.
    """
    return np.where(pad_positions, NEG_INF, 0.0)[:, None, None, :]


# -- initialization -----------------------------------------------------------


def uniform_init(rng, shape, width):
    scale = 1.0 / np.sqrt(width)
    return rng.uniform(-scale, scale, size=shape)


def init_attention(params, prefix, width, rng, trainable=True):
    for name in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{name}", uniform_init(rng, (width, width), width), trainable)
        params.add(f"{prefix}.b{name[1]}", np.zeros(width), trainable)


def init_ffn(params, prefix, width, hidden, rng, trainable=True):
    params.add(f"{prefix}.w1", uniform_init(rng, (width, hidden), width), trainable)
    params.add(f"{prefix}.b1", np.zeros(hidden), trainable)
    params.add(f"{prefix}.w2", uniform_init(rng, (hidden, width), width), trainable)
    params.add(f"{prefix}.b2", np.zeros(width), trainable)


def init_layer_norm(params, prefix, width, trainable=True):
    params.add(f"{prefix}.gain", np.ones(width), trainable)
    params.add(f"{prefix}.bias", np.zeros(width), trainable)


# -- forward blocks -----------------------------------------------------------


def attention(params, prefix, q_in, kv_in, n_heads, mask=None):
    """Multi-head scaled dot-product attention over (B, L, d) tensors."""
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    dh = d // n_heads

    def proj(x, name, length):
        y = x @ params[f"{prefix}.{name}"] + params[f"{prefix}.b{name[1]}"]
        return y.reshape(b, length, n_heads, dh).swapaxes(1, 2)

    q = proj(q_in, "wq", lq)
    k = proj(kv_in, "wk", lk)
    v = proj(kv_in, "wv", lk)

    scores = (q @ k.swapaxes(-1, -2)) * (dh**-0.5)
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = ad.softmax(scores, axis=-1)
    ctx = (weights @ v).swapaxes(1, 2).reshape(b, lq, d)
    return ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def feed_forward(params, prefix, x):
    hidden = (x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]).relu()
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def layer_norm(params, prefix, x):
    return ad.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])
