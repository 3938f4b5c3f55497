"""Response generation: label resolution, prior sampling, beam search.

Beam search ranks hypotheses by true (unrenormalized) cumulative
log-softmax scores; suppressed ids — <pad>, <unk>, <bou> and the turn
marker — are simply never candidates, so a returned sequence's score is
exactly the model log-probability that teacher-forced rescoring recovers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import latent as lat
from .autodiff import ContractViolation, Tensor, log_softmax_values
from .corpus import Dialog, Vocab, speaker_of_turn
from .model import (BOU_ID, EOT_ID, EOU_ID, PAD_ID, UNK_ID, ModelConfig,
                    ParamSet, cond_bundle, context_vector, decoder_init,
                    decoder_step, encode_utterance, initial_context,
                    label_embedding, update_context)
from .nn import sample_gaussian
from .rng import derive_rng

SUPPRESSED_IDS = (PAD_ID, UNK_ID, BOU_ID, EOT_ID)


class InvalidRequestError(ValueError):
    """The generation request is outside the active scenario's domain."""


@dataclass
class Hypothesis:
    """One beam entry; finished hypotheses are never extended."""

    tokens: list[int]
    log_prob: float
    state: Tensor
    finished: bool = False


@dataclass
class GenerationRequest:
    history: Dialog
    scenario: int
    label_mode: str = "predict"  # "fixed" | "predict"
    label_value: int | None = None
    beam_size: int = 5
    max_len: int = 30
    seed: int = 0
    deterministic_z: bool = False

    def validate(self) -> None:
        if self.scenario not in (1, 2):
            raise InvalidRequestError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.label_mode not in ("fixed", "predict"):
            raise InvalidRequestError(f"label_mode must be fixed|predict, got {self.label_mode!r}")
        if self.label_mode == "fixed":
            n = 2 if self.scenario == 1 else 3
            if self.label_value is None or not 0 <= self.label_value < n:
                raise InvalidRequestError(
                    f"fixed label {self.label_value!r} outside scenario-{self.scenario} domain")
        elif self.scenario == 1:
            raise InvalidRequestError(
                "scenario 1 labels are assigned, not predicted; use fixed mode")
        if self.beam_size < 1 or self.max_len < 1:
            raise InvalidRequestError("beam_size and max_len must be >= 1")


def resolve_label(pb: dict, cfg: ModelConfig, ctx_vec: Tensor,
                  request: GenerationRequest) -> tuple[int, lat.LabelDistribution | None]:
    """The label to condition on, plus the classifier distribution when
    predicted."""
    request.validate()
    if request.label_mode == "fixed":
        return int(request.label_value), None
    dist = lat.classify_label(pb, cfg, ctx_vec)
    return lat.predicted_label(dist), dist


def beam_search(pb: dict, cfg: ModelConfig, cond: Tensor, beam: int = 5,
                max_len: int = 30, min_tokens: int = 0) -> tuple[list[int], float, bool]:
    """Best finished hypothesis by cumulative log-probability.

    Suppressed ids are excluded from every step's candidates; hypotheses
    finish on the eou id or at max_len.  If nothing finishes, the best
    live hypothesis is returned with the truncation flag set.  beam=1 is
    exactly greedy argmax decoding over the allowed ids.  min_tokens > 0
    additionally keeps the eou id out of the first min_tokens steps
    (response-producing callers use 1 so replies are never empty).
    """
    if beam < 1:
        raise ContractViolation("beam_search: beam must be >= 1")
    allowed = np.array([i for i in range(cfg.vocab_size) if i not in SUPPRESSED_IDS])
    h0 = decoder_init(pb, cfg, cond)
    live = [Hypothesis([], 0.0, h0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []  # (-score, live_index, token) for a deterministic order
        states = []
        for i, hyp in enumerate(live):
            prev = hyp.tokens[-1] if hyp.tokens else BOU_ID
            state, logits = decoder_step(pb, cfg, hyp.state, prev, cond)
            logp = log_softmax_values(logits.data)
            states.append(state)
            eou_barred = len(hyp.tokens) < min_tokens
            for tok in allowed:
                if eou_barred and tok == EOU_ID:
                    continue
                candidates.append((hyp.log_prob + logp[tok], i, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, i, tok in candidates[:beam]:
            hyp = Hypothesis(live[i].tokens + [tok], score, states[i], tok == EOU_ID)
            if hyp.finished:
                finished.append(hyp)
            else:
                next_live.append(hyp)
        live = next_live
        if not live:
            break
    if finished:
        best = max(finished, key=lambda h: h.log_prob)
        return best.tokens, best.log_prob, False
    best = max(live, key=lambda h: h.log_prob)
    return best.tokens, best.log_prob, True


def run_history(pb: dict, cfg: ModelConfig, turns_ids: list[list[list[int]]]):
    """Advance a fresh context over encoded history turns; returns the state."""
    ctx = initial_context(cfg)
    for k, turn in enumerate(turns_ids):
        enc = None
        for ids in turn:
            enc = encode_utterance(pb, cfg, ids)
        if enc is not None:
            ctx = update_context(pb, cfg, ctx, enc, speaker_of_turn(k))
    return ctx


def encode_history(history: Dialog, vocab: Vocab) -> list[list[list[int]]]:
    return [[vocab.encode(u) + [vocab.eou_id] for u in turn] for turn in history.turns]


@dataclass
class GenerationResult:
    token_ids: list[int]
    tokens: list[str]
    label_used: int
    label_source: str  # "fixed" | "predicted"
    label_distribution: lat.LabelDistribution | None
    z: np.ndarray
    log_prob: float
    truncated: bool
    empty_history: bool

    @property
    def text(self) -> str:
        """Response without the terminal eou marker."""
        toks = self.tokens[:-1] if self.tokens and self.tokens[-1] == "__eou__" else self.tokens
        return " ".join(toks)


def generate_response(params: ParamSet, cfg: ModelConfig, vocab: Vocab,
                      request: GenerationRequest) -> GenerationResult:
    """Encode the history, resolve the label, draw z from the prior, decode.

    With deterministic_z the latent is the prior mean; otherwise it is
    sampled with the request's seed.
    """
    request.validate()
    if request.scenario != cfg.scenario:
        raise InvalidRequestError(
            f"request scenario {request.scenario} does not match the model's {cfg.scenario}")
    pb = params.bind(None)
    turns_ids = encode_history(request.history, vocab)
    ctx = run_history(pb, cfg, turns_ids)
    ctx_vec = context_vector(cfg, ctx)
    label, dist = resolve_label(pb, cfg, ctx_vec, request)
    y_emb = label_embedding(pb, cfg, label)
    pri = lat.prior(pb, cfg, ctx_vec, y_emb)
    if request.deterministic_z:
        z = pri.mu
    else:
        z = sample_gaussian(pri.mu, pri.sigma, derive_rng(request.seed, "gen-z"))
    cond = cond_bundle(cfg, ctx_vec, z, y_emb)
    ids, log_prob, truncated = beam_search(pb, cfg, cond, request.beam_size,
                                           request.max_len, min_tokens=1)
    return GenerationResult(
        token_ids=ids,
        tokens=vocab.decode(ids),
        label_used=label,
        label_source="fixed" if request.label_mode == "fixed" else "predicted",
        label_distribution=dist,
        z=z.data.copy(),
        log_prob=log_prob,
        truncated=truncated,
        empty_history=not request.history.turns,
    )
