"""The frozen contextual encoder: static embedding lookup plus an optional
transformer stack, loadable from a manifest + binary file pair.

Parameters are immutable after load and never receive gradients; gradients
still flow *through* the encoder to whatever is fed in, which is what lets
soft predictions be trained against the score downstream.
"""

from dataclasses import dataclass

import numpy as np

from . import layers, serialization
from .autodiff import Tensor
from .layers import Params

SCHEMA_VERSION = 1
MANIFEST_NAME = "model.json"
BLOB_NAME = "model.bin"

IDENTITY = "identity"
TRANSFORMER = "transformer"

BOS, EOS, PAD, UNK = "<s>", "</s>", "<pad>", "<unk>"


class LmLoadError(Exception):
    """Base class for encoder-file problems."""


class ChecksumMismatch(LmLoadError):
    pass


class DimensionMismatch(LmLoadError):
    pass


class SentinelError(LmLoadError):
    pass


class Vocabulary:
    """Ordered token inventory with bos/eos/pad/unk sentinels."""

    def __init__(self, tokens, bos_id, eos_id, pad_id, unk_id):
        self.tokens = list(tokens)
        self.bos_id = int(bos_id)
        self.eos_id = int(eos_id)
        self.pad_id = int(pad_id)
        self.unk_id = int(unk_id)
        sentinel_ids = (self.bos_id, self.eos_id, self.pad_id, self.unk_id)
        if len(set(sentinel_ids)) != 4:
            raise SentinelError(f"sentinel indices must be distinct, got {sentinel_ids}")
        if not all(0 <= i < len(self.tokens) for i in sentinel_ids):
            raise SentinelError(f"sentinel index out of range for size {len(self.tokens)}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, content_tokens):
        """Sentinels first, then the given content tokens."""
        tokens = [BOS, EOS, PAD, UNK] + list(content_tokens)
        return cls(tokens, 0, 1, 2, 3)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.tokens == other.tokens
            and (self.bos_id, self.eos_id, self.pad_id, self.unk_id)
            == (other.bos_id, other.eos_id, other.pad_id, other.unk_id)
        )

    def encode(self, words):
        return [self._index.get(w, self.unk_id) for w in words]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def content_ids(self, ids):
        """Drop bos/eos/pad; unk is a real position and stays."""
        drop = {self.bos_id, self.eos_id, self.pad_id}
        return [i for i in ids if i not in drop]


@dataclass
class EmbeddingTable:
    """The V x d static embedding matrix of the frozen language model."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding table must be 2-d, got shape {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding table contains non-finite entries")

    @property
    def rows(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


def _layer_tensor_names(i):
    names = []
    for w in ("wq", "wk", "wv", "wo"):
        names += [f"layer{i}.attn.{w}", f"layer{i}.attn.b{w[1]}"]
    names += [f"layer{i}.ln1.gain", f"layer{i}.ln1.bias"]
    names += [f"layer{i}.ffn.w1", f"layer{i}.ffn.b1", f"layer{i}.ffn.w2", f"layer{i}.ffn.b2"]
    names += [f"layer{i}.ln2.gain", f"layer{i}.ln2.bias"]
    return names


class LmEncoder:
    """Frozen embedding table + optional post-norm transformer stack."""

    def __init__(self, vocab, table, mode=IDENTITY, n_layers=0, n_heads=2, ffn_dim=None, max_len=64, layer_arrays=None):
        if len(vocab) != table.rows:
            raise DimensionMismatch(
                f"vocabulary has {len(vocab)} tokens but the embedding table has {table.rows} rows"
            )
        if mode not in (IDENTITY, TRANSFORMER):
            raise ValueError(f"unknown encoder mode {mode!r}")
        if mode == IDENTITY and n_layers != 0:
            raise ValueError("identity mode must have zero layers")
        if mode == TRANSFORMER and n_layers < 1:
            raise ValueError("transformer mode needs at least one layer")
        self.vocab = vocab
        self.table = table
        self.mode = mode
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ffn_dim = ffn_dim if ffn_dim is not None else 2 * table.dim
        self.max_len = max_len
        self.positions = layers.sinusoidal_positions(max_len, table.dim)

        self.params = Params()
        self.params.add("embeddings", table.matrix, trainable=False)
        if mode == TRANSFORMER:
            if layer_arrays is None:
                raise ValueError("transformer mode requires layer weights")
            for i in range(n_layers):
                for name in _layer_tensor_names(i):
                    self.params.add(name, layer_arrays[name], trainable=False)

    @property
    def dim(self):
        return self.table.dim

    def embed_tokens(self, ids):
        """Static lookup: row ids[j] of the embedding matrix."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.rows):
            raise IndexError(f"token id out of range for vocabulary of size {self.table.rows}")
        return self.table.matrix[ids]

    def contextualize(self, static_seq):
        """Map static embeddings to contextual ones; identity mode returns
        the input unchanged. Accepts (L, d) or (B, L, d) tensors and is
        differentiable with respect to the input only."""
        x = static_seq if isinstance(static_seq, Tensor) else Tensor(static_seq)
        if self.mode == IDENTITY:
            return x
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        length = x.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence of length {length} exceeds the encoder maximum {self.max_len}")
        h = x + Tensor(self.positions[:length])
        for i in range(self.n_layers):
            attn = layers.attention(self.params, f"layer{i}.attn", h, h, self.n_heads)
            h = layers.layer_norm(self.params, f"layer{i}.ln1", h + attn)
            ffn = layers.feed_forward(self.params, f"layer{i}.ffn", h)
            h = layers.layer_norm(self.params, f"layer{i}.ln2", h + ffn)
        if squeeze:
            h = h.reshape(h.shape[1], h.shape[2])
        return h

    def state_bytes(self):
        return self.params.state_bytes()


def identity_encoder(vocab, matrix, max_len=64):
    return LmEncoder(vocab, EmbeddingTable(matrix), mode=IDENTITY, n_layers=0, max_len=max_len)


def random_encoder(vocab, dim=32, n_layers=1, n_heads=2, ffn_dim=None, max_len=64, seed=0):
    """Random frozen transformer encoder (a stand-in for a pretrained one)."""
    rng = np.random.default_rng(seed)
    table = EmbeddingTable(layers.uniform_init(rng, (len(vocab), dim), dim))
    ffn_dim = ffn_dim if ffn_dim is not None else 2 * dim
    scratch = Params()
    for i in range(n_layers):
        layers.init_attention(scratch, f"layer{i}.attn", dim, rng, trainable=False)
        layers.init_layer_norm(scratch, f"layer{i}.ln1", dim, trainable=False)
        layers.init_ffn(scratch, f"layer{i}.ffn", dim, ffn_dim, rng, trainable=False)
        layers.init_layer_norm(scratch, f"layer{i}.ln2", dim, trainable=False)
    return LmEncoder(
        vocab,
        table,
        mode=TRANSFORMER,
        n_layers=n_layers,
        n_heads=n_heads,
        ffn_dim=ffn_dim,
        max_len=max_len,
        layer_arrays=scratch.arrays(),
    )


# -- persistence ---------------------------------------------------------------


def save_lm(encoder, out_dir):
    """Write model.json + model.bin (float32 blob, manifest-declared order)."""
    names = encoder.params.names()
    arrays = [encoder.params[n].data for n in names]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "blob_file": BLOB_NAME,
        "mode": encoder.mode,
        "vocab_size": len(encoder.vocab),
        "dim": encoder.dim,
        "n_layers": encoder.n_layers,
        "n_heads": encoder.n_heads,
        "ffn_dim": encoder.ffn_dim,
        "max_len": encoder.max_len,
        "vocabulary": encoder.vocab.tokens,
        "bos_id": encoder.vocab.bos_id,
        "eos_id": encoder.vocab.eos_id,
        "pad_id": encoder.vocab.pad_id,
        "unk_id": encoder.vocab.unk_id,
        "tensors": [{"name": n, "shape": list(encoder.params[n].data.shape)} for n in names],
    }
    return serialization.write_manifest_and_blob(out_dir, MANIFEST_NAME, BLOB_NAME, manifest, arrays)


def load_lm(path):
    """Load an encoder from a directory or a model.json path.

    Raises ChecksumMismatch / DimensionMismatch / SentinelError for the
    corresponding defects.
    """
    path = str(path)
    manifest_path = path if path.endswith(".json") else f"{path}/{MANIFEST_NAME}"
    manifest, blob = serialization.read_manifest_and_blob(manifest_path)

    digest = serialization.sha256_hex(blob)
    if digest != manifest.get("blob_sha256"):
        raise ChecksumMismatch(
            f"{manifest_path}: blob sha256 {digest} != manifest {manifest.get('blob_sha256')}"
        )

    mode = manifest["mode"]
    v, d = manifest["vocab_size"], manifest["dim"]
    n_layers = manifest["n_layers"]
    declared = manifest["tensors"]
    expected_names = ["embeddings"]
    if mode == TRANSFORMER:
        for i in range(n_layers):
            expected_names += _layer_tensor_names(i)
    if [t["name"] for t in declared] != expected_names:
        raise DimensionMismatch(f"{manifest_path}: tensor list does not match mode/layer declaration")

    if len(manifest["vocabulary"]) != v:
        raise DimensionMismatch(
            f"{manifest_path}: manifest declares {v} tokens but lists {len(manifest['vocabulary'])}"
        )
    emb_shape = tuple(declared[0]["shape"])
    if emb_shape != (v, d):
        raise DimensionMismatch(
            f"{manifest_path}: embedding tensor shape {emb_shape} != (vocab {v}, dim {d})"
        )

    try:
        arrays = serialization.unpack_arrays(blob, [tuple(t["shape"]) for t in declared])
    except ValueError as exc:
        raise DimensionMismatch(f"{manifest_path}: {exc}") from None

    vocab = Vocabulary(
        manifest["vocabulary"],
        manifest["bos_id"],
        manifest["eos_id"],
        manifest["pad_id"],
        manifest["unk_id"],
    )
    named = dict(zip(expected_names, arrays))
    table = EmbeddingTable(named.pop("embeddings"))
    return LmEncoder(
        vocab,
        table,
        mode=mode,
        n_layers=n_layers,
        n_heads=manifest["n_heads"],
        ffn_dim=manifest["ffn_dim"],
        max_len=manifest["max_len"],
        layer_arrays=named if mode == TRANSFORMER else None,
    )
