"""Latent-variable machinery: prior and posterior nets, KL, label classifier.

Both distribution networks are one-hidden-layer tanh feedforwards producing
a mean and a pre-activation standard deviation, with sigma = softplus(.) +
1e-6 so the diagonal Gaussians stay strictly positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ContractViolation, Tensor, _tape_of, affine, concat,
                       softmax_values, softplus, tanh)
from .model import ModelConfig

SIGMA_FLOOR = 1e-6


@dataclass
class GaussianParams:
    """Mean and entrywise-positive standard deviation of a diagonal Gaussian."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ContractViolation("GaussianParams: mu/sigma shape mismatch")
        if np.any(self.sigma.data <= 0):
            raise ContractViolation("GaussianParams: sigma must be entrywise > 0")


def _gauss_head(pb: dict, prefix: str, x: Tensor) -> GaussianParams:
    h = tanh(affine(x, pb[f"{prefix}.w1"], pb[f"{prefix}.b1"]))
    mu = affine(h, pb[f"{prefix}.w_mu"], pb[f"{prefix}.b_mu"])
    sigma = softplus(affine(h, pb[f"{prefix}.w_sig"], pb[f"{prefix}.b_sig"])) + SIGMA_FLOOR
    return GaussianParams(mu, sigma)


def prior(pb: dict, cfg: ModelConfig, ctx_vec: Tensor, y_embed: Tensor) -> GaussianParams:
    """Latent prior conditioned on the context vector and the label embedding."""
    if ctx_vec.shape != (cfg.context_dim,):
        raise ContractViolation(f"prior: context vector has shape {ctx_vec.shape}")
    return _gauss_head(pb, "pri", concat([ctx_vec, y_embed]))


def posterior(pb: dict, cfg: ModelConfig, ctx_vec: Tensor, y_embed: Tensor,
              encoded_next: Tensor) -> GaussianParams:
    """Approximate posterior; additionally sees the response utterance's
    final encoder state.  Parameters are disjoint from the prior's."""
    if encoded_next.shape != (cfg.encoder_dim,):
        raise ContractViolation(f"posterior: encoded utterance has shape {encoded_next.shape}")
    return _gauss_head(pb, "pos", concat([ctx_vec, y_embed, encoded_next]))


def kl_diag_gauss(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) between diagonal Gaussians, as one fused tape primitive.

    sum_i log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
    """
    if q.mu.shape != p.mu.shape:
        raise ContractViolation("kl_diag_gauss: dimension mismatch")
    mq, sq, mp, sp = q.mu, q.sigma, p.mu, p.sigma
    tape = _tape_of(mq, sq, mp, sp)
    delta = mq.data - mp.data
    sp2 = sp.data * sp.data
    val = float(np.sum(np.log(sp.data / sq.data)
                       + (sq.data * sq.data + delta * delta) / (2.0 * sp2) - 0.5))
    out = Tensor(val, tape)
    if tape is not None:
        mqd, sqd, spd = mq.data, sq.data, sp.data

        def bwd(g):
            g = float(g)
            d_mq = g * delta / sp2
            d_sq = g * (sqd / sp2 - 1.0 / sqd)
            d_sp = g * (1.0 / spd - (sqd * sqd + delta * delta) / (sp2 * spd))
            return (d_mq, d_sq, -d_mq, d_sp)

        tape.record(out, (mq, sq, mp, sp), bwd)
    return out


@dataclass
class LabelDistribution:
    """Probability vector over the active scenario's label set."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or np.any(self.probs < 0):
            raise ContractViolation("LabelDistribution: need a nonnegative vector")
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ContractViolation("LabelDistribution: probabilities must sum to 1")


def classifier_logits(pb: dict, cfg: ModelConfig, ctx_vec: Tensor) -> Tensor:
    """Raw label scores from the context vector (training surface)."""
    if cfg.scenario != 2:
        raise ContractViolation("label classifier exists only in scenario 2")
    h = tanh(affine(ctx_vec, pb["cls.w1"], pb["cls.b1"]))
    return affine(h, pb["cls.w2"], pb["cls.b2"])


def classify_label(pb: dict, cfg: ModelConfig, ctx_vec: Tensor) -> LabelDistribution:
    """Softmax label distribution predicted from the context vector."""
    logits = classifier_logits(pb, cfg, ctx_vec)
    return LabelDistribution(softmax_values(logits.data))


def predicted_label(dist: LabelDistribution) -> int:
    """argmax label; exact ties break toward the lowest index."""
    return int(np.argmax(dist.probs))
