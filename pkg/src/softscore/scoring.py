"""Embedding-similarity scoring: greedy cosine alignment between contextual
embeddings of a candidate and a reference.

Recall averages, over reference tokens, each token's best cosine match among
candidate tokens; precision swaps the roles; F combines the two.  The hard
path scores token sequences for evaluation; the soft path scores expected
embeddings and stays differentiable end-to-end.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ScoreTriple:
    precision: float
    recall: float
    f: float
    empty: bool = False


class SoftScore(NamedTuple):
    precision: Tensor
    recall: Tensor
    f: Tensor

    def values(self):
        return ScoreTriple(self.precision.item(), self.recall.item(), self.f.item())


class Alignment(NamedTuple):
    row_argmax: np.ndarray
    row_max: np.ndarray
    col_argmax: np.ndarray
    col_max: np.ndarray


def greedy_align(sim):
    """Per-row and per-column argmax of a similarity matrix.

    Ties break to the lowest index, matching the gradient convention of the
    max primitive.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.size == 0:
        raise ValueError("greedy_align: empty similarity matrix")
    return Alignment(
        row_argmax=np.argmax(sim, axis=1),
        row_max=np.max(sim, axis=1),
        col_argmax=np.argmax(sim, axis=0),
        col_max=np.max(sim, axis=0),
    )


def _harmonic(p, r):
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def _normalized_contextual(encoder, ids):
    """Hard path: lookup, contextualize, unit-normalize. Plain arrays out."""
    with ad.no_grad():
        ctx = encoder.contextualize(Tensor(encoder.embed_tokens(ids)))
    norm = np.linalg.norm(ctx.data, axis=-1, keepdims=True)
    return ctx.data / np.maximum(norm, 1e-12)


def score_hard(candidate_ids, reference_ids, encoder):
    """ScoreTriple for two token-id sequences (sentinels stripped here)."""
    cand = encoder.vocab.content_ids(candidate_ids)
    ref = encoder.vocab.content_ids(reference_ids)
    if not cand or not ref:
        return ScoreTriple(0.0, 0.0, 0.0, empty=True)
    ref_n = _normalized_contextual(encoder, ref)
    cand_n = _normalized_contextual(encoder, cand)
    sim = ref_n @ cand_n.T
    align = greedy_align(sim)
    recall = float(align.row_max.mean())
    precision = float(align.col_max.mean())
    return ScoreTriple(precision, recall, _harmonic(precision, recall))


def score_soft(soft_candidate, reference_ids, encoder):
    """Differentiable scoring of expected embeddings against a reference.

    `soft_candidate` is a (k, d) Tensor of expected embeddings for the k
    candidate positions; the reference goes through the hard path.  The
    result tensors carry gradients back into the soft embeddings (and only
    there: encoder parameters are frozen).
    """
    if soft_candidate.ndim != 2:
        raise ValueError(f"soft candidate must be (k, d), got shape {soft_candidate.shape}")
    if soft_candidate.shape[1] != encoder.dim:
        raise ValueError(
            f"soft candidate width {soft_candidate.shape[1]} != encoder width {encoder.dim}"
        )
    ref = encoder.vocab.content_ids(reference_ids)
    if not ref or soft_candidate.shape[0] == 0:
        zero = Tensor(0.0)
        return SoftScore(zero, zero, zero)

    ref_n = _normalized_contextual(encoder, ref)
    cand_ctx = encoder.contextualize(soft_candidate)
    cand_n = ad.l2_normalize(cand_ctx, axis=-1)
    sim = Tensor(ref_n) @ cand_n.swapaxes(0, 1)

    recall = sim.max(axis=1).mean()
    precision = sim.max(axis=0).mean()
    if precision.item() + recall.item() > 0:
        f = 2.0 * precision * recall / (precision + recall)
    else:
        f = Tensor(0.0)
    return SoftScore(precision, recall, f)
