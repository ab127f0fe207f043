"""Training: label-smoothed NLL for the baseline phase, then fine-tuning
that maximizes the embedding-similarity F score through soft predictions.

The contextual encoder is frozen throughout; only translation-model
parameters move.  Both phases share Adam, early stopping on a validation
metric, per-epoch checkpoints, and a metrics.csv log.  Training state is
quantized to float32 at epoch boundaries so a resumed run reproduces an
uninterrupted one exactly (checkpoints store float32).
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation, model as model_mod, scoring, softpred
from .autodiff import Tensor
from .serialization import round_f32

PROB_FLOOR = softpred.PROB_FLOOR


class NonFiniteGradient(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_epsilon: float = 1e-8
    label_smoothing: float = 0.1
    warmup_steps: int = 200
    patience: int = 3
    max_epochs: int = 30
    eval_interval: int = 25
    mode: softpred.PredictionMode = field(default_factory=softpred.PredictionMode)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label smoothing must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max epochs must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, m, v, step=0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def empty(cls, params):
        return cls(
            {n: np.zeros_like(t.data) for n, t in params.items()},
            {n: np.zeros_like(t.data) for n, t in params.items()},
        )

    def quantize(self):
        for store in (self.m, self.v):
            for n in store:
                store[n] = round_f32(store[n])


def adam_step(params, grads, state, config, lr=None):
    """Standard bias-corrected Adam update, in place.

    Rejects non-finite gradients, naming the offending parameter.
    """
    lr = config.learning_rate if lr is None else lr
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise ValueError(f"adam_step: gradient shape mismatch for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2, eps = config.beta1, config.beta2, config.adam_epsilon
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def lr_at(step, peak, warmup_steps):
    """Linear warm-up to `peak`, then inverse-square-root decay."""
    if step <= warmup_steps:
        return peak * step / max(warmup_steps, 1)
    return peak * (warmup_steps / step) ** 0.5


# -- losses --------------------------------------------------------------------


def label_smoothed_nll(probs, targets, epsilon, position_mask=None):
    """Mean over real positions of
    -[(1 - eps) * log p[target] + (eps / V) * sum_i log p[i]].

    `probs` is a Tensor of probability rows, (l, V) or (B, L, V); `targets`
    holds the gold ids with matching leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != probs.shape[:-1]:
        raise ValueError(
            f"targets shape {targets.shape} does not match probability rows {probs.shape[:-1]}"
        )
    v = probs.shape[-1]
    if position_mask is None:
        position_mask = np.ones(targets.shape, dtype=bool)
    one_hot = np.zeros(probs.shape)
    np.put_along_axis(one_hot, targets[..., None], 1.0, axis=-1)

    logp = ad.log(ad.clamp_min(probs, PROB_FLOOR))
    picked = (logp * Tensor(one_hot)).sum(axis=-1)
    total = logp.sum(axis=-1)
    per_pos = -((1.0 - epsilon) * picked + (epsilon / v) * total)
    mask = position_mask.astype(np.float64)
    return (per_pos * Tensor(mask)).sum() / float(mask.sum())


def bertscore_loss(model, lm_encoder, batch, mode, rng):
    """Negative mean similarity-F over a batch of (source, reference) pairs.

    Per pair: teacher-forced rows -> per-position soft prediction (by mode)
    -> expected embeddings over the frozen table -> contextualize -> score.
    Differentiable in the translation model's parameters only.
    """
    if model.tgt_vocab != lm_encoder.vocab:
        raise ValueError("translation model and encoder must share the target vocabulary")
    sources = [src for src, _ in batch]
    references = [ref for _, ref in batch]
    logits, probs, _ = model.step_outputs_batch(sources, references)
    table = lm_encoder.params["embeddings"]

    f_scores = []
    for b, ref in enumerate(references):
        content = lm_encoder.vocab.content_ids(ref)
        k = len(content)
        if k == 0:
            f_scores.append(Tensor(0.0))
            continue
        rows_logits = logits[b, :k]
        rows_probs = probs[b, :k]
        soft_rows = softpred.transform_rows(rows_logits, rows_probs, mode, rng)
        expected = soft_rows @ table
        f_scores.append(scoring.score_soft(expected, ref, lm_encoder).f)
    return -(ad.addn(*f_scores).sum() / float(len(f_scores)))


# -- training loops -------------------------------------------------------------


class MetricsLog:
    """metrics.csv writer: step, epoch, phase, losses and validation scores."""

    FIELDS = ["step", "epoch", "phase", "train_loss", "val_bleu", "val_fbert", "epoch_boundary"]

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.FIELDS)

    def row(self, step, epoch, phase, train_loss=None, val_bleu=None, val_fbert=None, boundary=False):
        def fmt(x):
            return "" if x is None else f"{x:.6f}"

        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [step, epoch, phase, fmt(train_loss), fmt(val_bleu), fmt(val_fbert), int(boundary)]
            )


def _grads_of(params, loss):
    ad.zero_grads(params.tensors())
    ad.backward(loss)
    return {
        n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()
    }


def _quantize_state(model, opt):
    for t in model.params.tensors():
        t.data = round_f32(t.data)
    opt.quantize()


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng([seed, epoch, stream])


def _encode_pairs(pairs, src_vocab, tgt_vocab):
    from . import data

    return [
        (data.encode_source(src_vocab, s), data.encode_target(tgt_vocab, t)) for s, t in pairs
    ]


def _bleu_validator(src_vocab, tgt_vocab, valid_pairs):
    encoded = _encode_pairs(valid_pairs, src_vocab, tgt_vocab)
    sources = [s for s, _ in encoded]
    refs = [t.split() for _, t in valid_pairs]

    def run(model):
        decoded = model_mod.greedy_decode_batch(model, sources)
        cands = [tgt_vocab.decode(ids) for ids in decoded]
        return evaluation.corpus_bleu(cands, refs)

    return run


def _finetune_validator(lm_encoder, src_vocab, tgt_vocab, valid_pairs):
    encoded = _encode_pairs(valid_pairs, src_vocab, tgt_vocab)
    sources = [s for s, _ in encoded]
    ref_ids = [r for _, r in encoded]
    refs_tok = [t.split() for _, t in valid_pairs]

    def run(model):
        decoded = model_mod.greedy_decode_batch(model, sources)
        cands = [tgt_vocab.decode(ids) for ids in decoded]
        bleu = evaluation.corpus_bleu(cands, refs_tok)
        fbert = float(
            np.mean([scoring.score_hard(c, r, lm_encoder).f for c, r in zip(decoded, ref_ids)])
        )
        return bleu, fbert

    return run


def _best_and_staleness(history, key):
    """Best metric value, its epoch, and validations since improvement."""
    best, best_epoch, stale = -np.inf, None, 0
    for entry in history:
        if entry[key] > best:
            best, best_epoch, stale = entry[key], entry["epoch"], 0
        else:
            stale += 1
    return best, best_epoch, stale


def train_baseline(corpus, lm_encoder, config, out_dir, model_config=None, resume=None, validator=None):
    """Label-smoothed NLL with warm-up + inverse-sqrt schedule; early stop on
    validation BLEU; returns the best-validation checkpoint."""
    from . import data

    if not corpus.train:
        raise ValueError("training corpus is empty")
    out_dir = Path(out_dir)
    src_vocab = resume.model.src_vocab if resume else data.build_source_vocab(corpus.train)
    tgt_vocab = lm_encoder.vocab

    if resume is not None:
        model = resume.model
        opt = resume.optimizer or AdamState.empty(model.params)
        start_epoch, step = resume.epoch, resume.step
        history = list(resume.metric_history)
    else:
        model_config = model_config or model_mod.ModelConfig()
        model = model_mod.Seq2SeqModel(model_config, src_vocab, tgt_vocab, seed=config.seed)
        opt = AdamState.empty(model.params)
        start_epoch, step = 0, 0
        history = []

    train_enc = _encode_pairs(corpus.train, src_vocab, tgt_vocab)
    if validator is None:
        validator = _bleu_validator(src_vocab, tgt_vocab, corpus.valid)

    log = MetricsLog(out_dir / "metrics.csv")
    for entry in history:
        log.row(entry["step"], entry["epoch"], "baseline", entry["train_loss"], entry["val_bleu"], boundary=True)

    for epoch in range(start_epoch + 1, config.max_epochs + 1):
        order = _epoch_rng(config.seed, epoch, 0).permutation(len(train_enc))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            chunk = [train_enc[i] for i in order[lo : lo + config.batch_size]]
            sources = [s for s, _ in chunk]
            refs = [r for _, r in chunk]
            _, probs, mask = model.step_outputs_batch(sources, refs)
            targets, _ = model_mod.pad_batch([r[1:] for r in refs], tgt_vocab.pad_id)
            loss = label_smoothed_nll(probs, targets, config.label_smoothing, mask)
            step += 1
            grads = _grads_of(model.params, loss)
            adam_step(model.params, grads, opt, config, lr=lr_at(step, config.learning_rate, config.warmup_steps))
            losses.append(loss.item())

        _quantize_state(model, opt)
        val_bleu = validator(model)
        train_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "step": step, "train_loss": train_loss, "val_bleu": val_bleu})
        log.row(step, epoch, "baseline", train_loss, val_bleu, boundary=True)
        model_mod.save_checkpoint(model, out_dir / f"epoch_{epoch:03d}", opt, step, epoch, history)

        _, _, stale = _best_and_staleness(history, "val_bleu")
        if stale >= config.patience:
            break

    if not history:
        model_mod.save_checkpoint(model, out_dir / "epoch_000", opt, step, 0, history)
        return model_mod.load_checkpoint(out_dir / "epoch_000")
    _, best_epoch, _ = _best_and_staleness(history, "val_bleu")
    return model_mod.load_checkpoint(out_dir / f"epoch_{best_epoch:03d}")


def finetune(start, corpus, lm_encoder, config, out_dir, validator=None):
    """Optimize the negative similarity-F score from a baseline checkpoint.

    The encoder is untouched (asserted bytewise); validation F is tracked
    per epoch and per eval-interval steps, with the starting model's scores
    logged at step 0; the best-F checkpoint comes back.
    """
    if config.mode is None:
        raise ValueError("finetune requires a prediction mode")
    model = start.model
    if model.tgt_vocab != lm_encoder.vocab:
        raise ValueError("checkpoint and encoder must share the target vocabulary")
    out_dir = Path(out_dir)
    frozen_before = lm_encoder.state_bytes()

    train_enc = _encode_pairs(corpus.train, model.src_vocab, model.tgt_vocab)
    if validator is None:
        validator = _finetune_validator(lm_encoder, model.src_vocab, model.tgt_vocab, corpus.valid)

    opt = AdamState.empty(model.params)
    step = 0
    history = []
    log = MetricsLog(out_dir / "metrics.csv")

    base_bleu, base_fbert = validator(model)
    log.row(0, 0, "finetune", None, base_bleu, base_fbert, boundary=True)
    model_mod.save_checkpoint(model, out_dir / "epoch_000", opt, 0, 0, history)
    history.append({"epoch": 0, "step": 0, "train_loss": None, "val_bleu": base_bleu, "val_fbert": base_fbert})

    for epoch in range(1, config.max_epochs + 1):
        order = _epoch_rng(config.seed, epoch, 0).permutation(len(train_enc))
        noise_rng = _epoch_rng(config.seed, epoch, 1)
        losses = []
        for lo in range(0, len(order), config.batch_size):
            chunk = [train_enc[i] for i in order[lo : lo + config.batch_size]]
            loss = bertscore_loss(model, lm_encoder, chunk, config.mode, noise_rng)
            step += 1
            grads = _grads_of(model.params, loss)
            adam_step(model.params, grads, opt, config)
            losses.append(loss.item())
            if config.eval_interval and step % config.eval_interval == 0:
                bleu, fbert = validator(model)
                log.row(step, epoch, "finetune", float(np.mean(losses)), bleu, fbert)

        _quantize_state(model, opt)
        bleu, fbert = validator(model)
        train_loss = float(np.mean(losses)) if losses else None
        history.append({"epoch": epoch, "step": step, "train_loss": train_loss, "val_bleu": bleu, "val_fbert": fbert})
        log.row(step, epoch, "finetune", train_loss, bleu, fbert, boundary=True)
        model_mod.save_checkpoint(model, out_dir / f"epoch_{epoch:03d}", opt, step, epoch, history)

        _, _, stale = _best_and_staleness(history, "val_fbert")
        if stale >= config.patience:
            break

    if lm_encoder.state_bytes() != frozen_before:
        raise AssertionError("frozen encoder parameters changed during fine-tuning")

    _, best_epoch, _ = _best_and_staleness(history, "val_fbert")
    return model_mod.load_checkpoint(out_dir / f"epoch_{best_epoch:03d}")
