"""Soft-prediction operators: differentiable stand-ins for the argmax.

A decoding step normally commits to one token.  The operators here keep the
whole probability vector alive instead — plain temperature softmax, the
simplex projection (sparse output), or Gumbel-perturbed softmax (sampled,
sparse at low temperature) — so downstream scoring stays differentiable.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

PROB_FLOOR = 1e-12

DENSE = "dense"
SPARSEMAX = "sparsemax"
GUMBEL = "gumbel-softmax"
_VARIANTS = (DENSE, SPARSEMAX, GUMBEL)


@dataclass(frozen=True)
class PredictionMode:
    """Which soft-prediction operator the fine-tuning loss applies."""

    variant: str = DENSE
    tau: float = 0.1

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown prediction mode {self.variant!r}; expected one of {_VARIANTS}")
        if self.variant == GUMBEL and not self.tau > 0:
            raise ValueError(f"gumbel-softmax requires tau > 0, got {self.tau}")


@dataclass
class SoftDistribution:
    """A probability vector over the vocabulary, possibly sparse."""

    probabilities: np.ndarray
    support: np.ndarray = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError(f"SoftDistribution needs a 1-d vector, got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("SoftDistribution entries must be non-negative")
        total = p.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"SoftDistribution entries sum to {total!r}, not 1")
        self.probabilities = p
        self.support = np.flatnonzero(p > 0)

    def __len__(self):
        return self.probabilities.shape[0]


def _probs_of(dist):
    return dist.probabilities if isinstance(dist, SoftDistribution) else np.asarray(dist, dtype=np.float64)


def softmax_temperature(logits, temperature=1.0):
    """p_i proportional to exp(logit_i / T)."""
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return SoftDistribution(e / e.sum())


def sparsemax(logits):
    """Euclidean projection of the logits onto the probability simplex."""
    z = np.asarray(logits, dtype=np.float64)
    p = ad.sparsemax_values(z)
    # Projection output sums to 1 by construction; renormalization would
    # only launder rounding noise, so assert instead.
    return SoftDistribution(p)


def sparsemax_backward(output, upstream):
    """Jacobian-vector product of sparsemax at a forward output.

    Within the support the projection is an affine mean-subtraction;
    outside it the gradient is zero.
    """
    p = _probs_of(output)
    upstream = np.asarray(upstream, dtype=np.float64)
    assert np.any(p > 0), "sparsemax output has empty support"
    return ad.sparsemax_grad(p, upstream)


def gumbel_noise(rng, size=None):
    """Standard Gumbel draws g = -log(-log u), u ~ Uniform(0,1)."""
    u = rng.random(size)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


def gumbel_softmax(probs, tau, rng, noise=None):
    """Sampled soft one-hot: softmax((log p + g) / tau) with Gumbel g.

    Pass `noise` to pin the perturbation (frozen-noise gradient checks);
    otherwise one fresh draw per entry comes from `rng`.
    """
    if not tau > 0:
        raise ValueError(f"gumbel-softmax requires tau > 0, got {tau}")
    p = _probs_of(probs)
    if noise is None:
        noise = gumbel_noise(rng, p.shape)
    z = (np.log(np.maximum(p, PROB_FLOOR)) + noise) / tau
    z = z - z.max()
    e = np.exp(z)
    return SoftDistribution(e / e.sum())


def gumbel_softmax_tensor(probs, tau, noise):
    """Differentiable gumbel_softmax over a Tensor of probability rows.

    The noise is a constant: gradients flow through p only, which makes the
    sampled relaxation differentiable for a fixed draw.
    """
    if not tau > 0:
        raise ValueError(f"gumbel-softmax requires tau > 0, got {tau}")
    shifted = ad.log(ad.clamp_min(probs, PROB_FLOOR)) + ad.Tensor(noise)
    return ad.softmax(shifted * (1.0 / tau), axis=-1)


def entropy(dist):
    """Shannon entropy in nats, with 0 * ln 0 = 0."""
    p = _probs_of(dist)
    nz = p[p > 0]
    value = float(-(nz * np.log(nz)).sum())
    return max(value, 0.0)


def expected_embedding(dist, table):
    """Probability-weighted average of embedding rows: sum_i p_i * row_i."""
    p = _probs_of(dist)
    matrix = np.asarray(getattr(table, "matrix", table), dtype=np.float64)
    if p.shape[0] != matrix.shape[0]:
        raise ValueError(f"distribution has {p.shape[0]} entries but the table has {matrix.shape[0]} rows")
    return p @ matrix


def transform_rows(logits, probs, mode, rng):
    """Apply a PredictionMode to Tensor rows of decoder outputs.

    dense keeps the softmax probabilities; sparsemax projects the raw
    logits; gumbel-softmax perturbs the probabilities with one fresh draw
    per row and entry.
    """
    if mode.variant == DENSE:
        return probs
    if mode.variant == SPARSEMAX:
        return ad.sparsemax(logits)
    noise = gumbel_noise(rng, probs.shape)
    return gumbel_softmax_tensor(probs, mode.tau, noise)
