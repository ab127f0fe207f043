"""Desk-scale transformer encoder-decoder for translation.

The decoder's output index space is the shared target vocabulary (the same
one the frozen contextual encoder uses).  Teacher-forced forward passes are
batched and differentiable; greedy and beam decoding run tape-free.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import layers, serialization
from .autodiff import Tensor
from .layers import Params
from .lm import Vocabulary

CKPT_MANIFEST = "ckpt.json"
CKPT_BLOB = "ckpt.bin"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 64
    max_len: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"model config field {name} must be positive, got {value}")
        if self.width % self.n_heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.width % 2 != 0:
            raise ValueError("width must be even for sinusoidal positions")


def parameter_count(config, src_vocab_size, tgt_vocab_size):
    """Closed-form size of the parameter vector for a given configuration."""
    d, f = config.width, config.ffn_dim
    attn = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * f + f + f * d + d
    enc = config.enc_layers * (attn + ffn + 2 * ln) + ln
    dec = config.dec_layers * (2 * attn + ffn + 3 * ln) + ln
    return (
        src_vocab_size * d
        + tgt_vocab_size * d
        + enc
        + dec
        + d * tgt_vocab_size
        + tgt_vocab_size
    )


class Seq2SeqModel:
    def __init__(self, config, src_vocab, tgt_vocab, seed=0):
        self.config = config
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = config.width

        p = Params()
        p.add("src_embed", layers.uniform_init(rng, (len(src_vocab), d), d))
        p.add("tgt_embed", layers.uniform_init(rng, (len(tgt_vocab), d), d))
        for i in range(config.enc_layers):
            layers.init_layer_norm(p, f"enc{i}.ln1", d)
            layers.init_attention(p, f"enc{i}.attn", d, rng)
            layers.init_layer_norm(p, f"enc{i}.ln2", d)
            layers.init_ffn(p, f"enc{i}.ffn", d, config.ffn_dim, rng)
        layers.init_layer_norm(p, "enc.final_ln", d)
        for i in range(config.dec_layers):
            layers.init_layer_norm(p, f"dec{i}.ln1", d)
            layers.init_attention(p, f"dec{i}.self_attn", d, rng)
            layers.init_layer_norm(p, f"dec{i}.ln2", d)
            layers.init_attention(p, f"dec{i}.cross_attn", d, rng)
            layers.init_layer_norm(p, f"dec{i}.ln3", d)
            layers.init_ffn(p, f"dec{i}.ffn", d, config.ffn_dim, rng)
        layers.init_layer_norm(p, "dec.final_ln", d)
        p.add("out_w", layers.uniform_init(rng, (d, len(tgt_vocab)), d))
        p.add("out_b", np.zeros(len(tgt_vocab)))
        self.params = p
        self.positions = layers.sinusoidal_positions(config.max_len, d)

    # -- forward ---------------------------------------------------------

    def _embed(self, table_name, ids):
        x = ad.take_rows(self.params[table_name], ids)
        return x + Tensor(self.positions[: ids.shape[-1]])

    def _encode(self, src_ids, src_pad):
        if src_ids.shape[1] > self.config.max_len:
            raise ValueError(f"source length {src_ids.shape[1]} exceeds max {self.config.max_len}")
        mask = layers.pad_key_mask(src_pad)
        h = self._embed("src_embed", src_ids)
        p = self.params
        for i in range(self.config.enc_layers):
            n = layers.layer_norm(p, f"enc{i}.ln1", h)
            h = h + layers.attention(p, f"enc{i}.attn", n, n, self.config.n_heads, mask)
            n = layers.layer_norm(p, f"enc{i}.ln2", h)
            h = h + layers.feed_forward(p, f"enc{i}.ffn", n)
        return layers.layer_norm(p, "enc.final_ln", h)

    def _decode(self, tgt_in, enc_out, src_pad):
        lt = tgt_in.shape[1]
        if lt > self.config.max_len:
            raise ValueError(f"target length {lt} exceeds max {self.config.max_len}")
        causal = layers.causal_mask(lt)
        cross = layers.pad_key_mask(src_pad)
        h = self._embed("tgt_embed", tgt_in)
        p = self.params
        for i in range(self.config.dec_layers):
            n = layers.layer_norm(p, f"dec{i}.ln1", h)
            h = h + layers.attention(p, f"dec{i}.self_attn", n, n, self.config.n_heads, causal)
            n = layers.layer_norm(p, f"dec{i}.ln2", h)
            h = h + layers.attention(p, f"dec{i}.cross_attn", n, enc_out, self.config.n_heads, cross)
            n = layers.layer_norm(p, f"dec{i}.ln3", h)
            h = h + layers.feed_forward(p, f"dec{i}.ffn", n)
        h = layers.layer_norm(p, "dec.final_ln", h)
        return h @ p["out_w"] + p["out_b"]

    def step_outputs_batch(self, sources, references):
        """Teacher-forced decoder outputs for a batch of sentence pairs.

        Returns (logits, probs, position_mask): logits and probs are
        (B, L, V) tensors where row j conditions on the gold prefix up to
        position j; position_mask marks rows that predict a real token.
        """
        bos = self.tgt_vocab.bos_id
        for ref in references:
            if not ref or ref[0] != bos:
                raise ValueError("reference must begin with the bos token")
            if len(ref) - 1 > self.config.max_len:
                raise ValueError(f"reference length {len(ref)} exceeds max {self.config.max_len}")
        src_ids, src_pad = pad_batch(sources, self.src_vocab.pad_id)
        dec_in, _ = pad_batch([r[:-1] for r in references], self.tgt_vocab.pad_id)
        position_mask = np.zeros(dec_in.shape, dtype=bool)
        for b, r in enumerate(references):
            position_mask[b, : len(r) - 1] = True

        enc_out = self._encode(src_ids, src_pad)
        logits = self._decode(dec_in, enc_out, src_pad)
        probs = ad.softmax(logits, axis=-1)
        return logits, probs, position_mask

    # -- decoding --------------------------------------------------------

    def encode_source(self, src_ids):
        """Frozen-source context reused across decoding steps."""
        with ad.no_grad():
            ids, pad = pad_batch([src_ids], self.src_vocab.pad_id)
            return self._encode(ids, pad).data, pad

    def next_logprobs(self, ctx, prefixes):
        """Log-probabilities of the next token for each prefix row."""
        enc_data, src_pad = ctx
        return _next_logprobs_batch(self, enc_data, src_pad, np.asarray(prefixes, dtype=np.int64))

    def state_bytes(self):
        return self.params.state_bytes()


def init_model(config, src_vocab, tgt_vocab, seed=0):
    return Seq2SeqModel(config, src_vocab, tgt_vocab, seed)


def pad_batch(seqs, pad_id):
    """Right-pad id sequences; returns (ids, pad_positions) arrays."""
    width = max(1, max((len(s) for s in seqs), default=1))
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    pad = np.ones((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        pad[i, : len(s)] = False
    return ids, pad


def teacher_forced_probs(model, source, reference):
    """Probability rows (l, V): row j is the next-token distribution given
    the source and the gold prefix reference[0..j]."""
    _, probs, _ = model.step_outputs_batch([source], [reference])
    return probs.data[0]


def greedy_decode(model, source, max_len=None):
    """Feed the argmax back in until eos or the length cap; bos/eos excluded
    from the returned ids."""
    return greedy_decode_batch(model, [source], max_len)[0]


def greedy_decode_batch(model, sources, max_len=None):
    max_len = max_len or model.config.max_len
    vocab = model.tgt_vocab
    b = len(sources)
    ctx_data, src_pad = _batched_source_context(model, sources)
    prefixes = np.full((b, 1), vocab.bos_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outputs = [[] for _ in range(b)]
    for _ in range(max_len):
        logprobs = _next_logprobs_batch(model, ctx_data, src_pad, prefixes)
        nxt = np.argmax(logprobs, axis=-1)
        nxt[done] = vocab.pad_id
        for i in range(b):
            if not done[i]:
                if nxt[i] == vocab.eos_id:
                    done[i] = True
                else:
                    outputs[i].append(int(nxt[i]))
        if done.all():
            break
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
    return outputs


def _batched_source_context(model, sources):
    with ad.no_grad():
        ids, pad = pad_batch(sources, model.src_vocab.pad_id)
        return model._encode(ids, pad).data, pad


def _next_logprobs_batch(model, enc_data, src_pad, prefixes):
    b = prefixes.shape[0]
    if enc_data.shape[0] != b:
        enc_data = np.broadcast_to(enc_data, (b,) + enc_data.shape[1:])
        src_pad = np.broadcast_to(src_pad, (b, src_pad.shape[1]))
    with ad.no_grad():
        logits = model._decode(prefixes, Tensor(enc_data), src_pad)
    z = logits.data[:, -1, :]
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_decode(model, source, beam_size=5, length_penalty_alpha=1.0, max_len=None):
    """Beam search ranked by (sum of log-probs) / length^alpha.

    Each step keeps the top beam_size extensions overall; the ones ending in
    eos retire to the finished pool, the rest stay alive.  Length counts
    emitted tokens including eos.  Deterministic throughout: score ties break
    toward the earlier hypothesis and the lower token index, so beam size 1
    reproduces greedy decoding token for token.
    """
    if beam_size < 1:
        raise ValueError(f"beam size must be >= 1, got {beam_size}")
    if length_penalty_alpha < 0:
        raise ValueError(f"length penalty must be >= 0, got {length_penalty_alpha}")
    max_len = max_len or model.config.max_len
    vocab = model.tgt_vocab
    enc_data, src_pad = model.encode_source(source)

    def normalized(score, emitted):
        return score / (max(emitted, 1) ** length_penalty_alpha)

    alive = [((vocab.bos_id,), 0.0)]
    finished = []  # (normalized score, arrival order, tokens-without-sentinels)
    order = 0
    for _ in range(max_len):
        prefixes = np.array([h[0] for h in alive], dtype=np.int64)
        logprobs = _next_logprobs_batch(model, enc_data, src_pad, prefixes)
        candidates = []
        for rank, ((tokens, score), row) in enumerate(zip(alive, logprobs)):
            for tok in range(len(vocab)):
                candidates.append((score + row[tok], rank, tok, tokens))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        alive = []
        for score, _, tok, tokens in candidates[:beam_size]:
            extended = tokens + (tok,)
            if tok == vocab.eos_id:
                finished.append((normalized(score, len(extended) - 1), order, list(extended[1:-1])))
                order += 1
            else:
                alive.append((extended, score))
        if not alive:
            break
    for tokens, score in alive:
        finished.append((normalized(score, len(tokens) - 1), order, list(tokens[1:])))
        order += 1
    finished.sort(key=lambda f: (-f[0], f[1]))
    return finished[0][2]


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model, out_dir, optimizer=None, step=0, epoch=0, metric_history=()):
    """Write ckpt.json + ckpt.bin; optimizer moments ride along when given."""
    names = model.params.names()
    arrays = [model.params[n].data for n in names]
    tensor_specs = [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "blob_file": CKPT_BLOB,
        "config": asdict(model.config),
        "seed": model.seed,
        "step": int(step),
        "epoch": int(epoch),
        "metric_history": list(metric_history),
        "src_vocab": _vocab_manifest(model.src_vocab),
        "tgt_vocab": _vocab_manifest(model.tgt_vocab),
        "has_optimizer": optimizer is not None,
    }
    if optimizer is not None:
        manifest["adam_step"] = optimizer.step
        for kind in ("m", "v"):
            store = optimizer.m if kind == "m" else optimizer.v
            for n in names:
                arr = store[n]
                arrays.append(arr)
                tensor_specs.append({"name": f"adam_{kind}.{n}", "shape": list(arr.shape)})
    manifest["tensors"] = tensor_specs
    return serialization.write_manifest_and_blob(out_dir, CKPT_MANIFEST, CKPT_BLOB, manifest, arrays)


def load_checkpoint(path):
    """Rebuild a model (and optimizer state, when present) from ckpt files."""
    from .training import AdamState  # local import to avoid a cycle

    path = str(path)
    manifest_path = path if path.endswith(".json") else f"{path}/{CKPT_MANIFEST}"
    manifest, blob = serialization.read_manifest_and_blob(manifest_path)
    digest = serialization.sha256_hex(blob)
    if digest != manifest.get("blob_sha256"):
        raise ValueError(f"{manifest_path}: checkpoint blob checksum mismatch")

    config = ModelConfig(**manifest["config"])
    src_vocab = _vocab_from_manifest(manifest["src_vocab"])
    tgt_vocab = _vocab_from_manifest(manifest["tgt_vocab"])
    model = Seq2SeqModel(config, src_vocab, tgt_vocab, seed=manifest.get("seed", 0))

    specs = manifest["tensors"]
    arrays = serialization.unpack_arrays(blob, [tuple(t["shape"]) for t in specs])
    named = dict(zip([t["name"] for t in specs], arrays))
    model.params.load_arrays({n: named[n] for n in model.params.names()})

    optimizer = None
    if manifest.get("has_optimizer"):
        optimizer = AdamState.empty(model.params)
        optimizer.step = manifest["adam_step"]
        for n in model.params.names():
            optimizer.m[n] = named[f"adam_m.{n}"]
            optimizer.v[n] = named[f"adam_v.{n}"]

    return Checkpoint(
        model=model,
        optimizer=optimizer,
        step=manifest["step"],
        epoch=manifest["epoch"],
        metric_history=manifest.get("metric_history", []),
    )


@dataclass
class Checkpoint:
    model: Seq2SeqModel
    optimizer: object
    step: int
    epoch: int
    metric_history: list


def _vocab_manifest(vocab):
    return {
        "tokens": vocab.tokens,
        "bos_id": vocab.bos_id,
        "eos_id": vocab.eos_id,
        "pad_id": vocab.pad_id,
        "unk_id": vocab.unk_id,
    }


def _vocab_from_manifest(entry):
    return Vocabulary(entry["tokens"], entry["bos_id"], entry["eos_id"], entry["pad_id"], entry["unk_id"])
