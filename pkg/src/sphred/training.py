"""Training loop: loss assembly, annealing, word dropout, early stopping.

The loss of one batch is the per-utterance mean of
    NLL + w * (KL + classification cross-entropy)
where w is the linear anneal weight.  Batches are built from dialog slices
(windows of slice_len stream tokens); a dialog's slices stay together and
are processed in order, with the recurrent state detached at every slice
boundary (truncated backprop).  An utterance that straddles a boundary is
charged, whole, to the slice where it ends.

Randomness per training step is consumed in a documented order so tests
can replay it: for each dialog in batch order, for each utterance, first
the dropout mask (one uniform per gold decoder-input token; skipped when
the rate is 0), then one standard-normal latent draw of size latent_dim.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import latent as lat
from .autodiff import ContractViolation, Tape, Tensor, backward, detach, softmax_xent
from .corpus import Dialog, Vocab, dialog_tokens, speaker_of_turn, utterance_label
from .model import (BOU_ID, ContextState, ModelConfig, ParamSet, cond_bundle,
                    context_vector, encode_utterance, init_params,
                    initial_context, label_embedding, update_context,
                    utterance_nll)
from .nn import sample_gaussian
from .optim import AdamState, adam_step, clip_global_norm
from .rng import derive_rng


class DivergenceError(RuntimeError):
    """A loss component went non-finite; the message names the component."""


@dataclass
class TrainConfig:
    """Optimization knobs.  The defaults are the full-scale recipe; toy
    corpora want a larger learning rate and smaller dims.  (For reference,
    the single-stream baseline configuration conventionally trains at 2e-4;
    no separate baseline system ships here.)"""

    batch_size: int = 128
    learning_rate: float = 1e-4
    anneal_steps: int | None = None  # None: two epochs' worth of steps
    word_dropout_rate: float = 0.25
    patience: int = 5
    max_epochs: int = 30
    seed: int = 0
    slice_len: int = 80
    clip_norm: float = 5.0
    val_fraction: float = 0.05
    shuffle: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.word_dropout_rate < 1.0:
            raise ContractViolation("word_dropout_rate must be in [0, 1)")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")
        if self.anneal_steps is not None and self.anneal_steps < 1:
            raise ContractViolation("anneal_steps must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.slice_len < 1:
            raise ContractViolation("batch_size, max_epochs, slice_len must be >= 1")


@dataclass
class LossBreakdown:
    """Scalar parts of one batch loss; total = nll + weight * (kl + cls)."""

    nll: float
    kl: float
    cls: float
    weight: float
    total: float
    n_utterances: int
    n_tokens: int

    @property
    def nll_per_token(self) -> float:
        return self.nll * self.n_utterances / max(1, self.n_tokens)


def anneal_weight(step: int, anneal_steps: int) -> float:
    """Linear warmup min(1, step / anneal_steps); clamped to [0, 1]."""
    if step < 0:
        raise ContractViolation("anneal_weight: step must be >= 0")
    if anneal_steps < 1:
        raise ContractViolation("anneal_weight: anneal_steps must be >= 1")
    return min(1.0, step / anneal_steps)


def word_dropout(gold_prev_tokens: list[int], rate: float,
                 rng: np.random.Generator, unk_id: int = 1) -> list[int]:
    """Independently replace each decoder-input token by <unk> with p=rate.

    Gold targets are never touched; this corrupts only the inputs.  With
    rate 0 the list is returned unchanged and no randomness is consumed.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractViolation("word_dropout: rate must be in [0, 1)")
    if rate == 0.0 or not gold_prev_tokens:
        return list(gold_prev_tokens)
    mask = rng.random(len(gold_prev_tokens)) < rate
    return [unk_id if m else t for t, m in zip(gold_prev_tokens, mask)]


# ---------------------------------------------------------------------------
# Encoded corpus


@dataclass
class EncodedUtterance:
    ids: list[int]  # content ids followed by the eou id
    label: int


@dataclass
class EncodedDialog:
    turns: list[list[EncodedUtterance]]
    stream_len: int

    def n_slices(self, slice_len: int) -> int:
        return max(1, math.ceil(self.stream_len / slice_len))

    def n_utterances(self) -> int:
        return sum(len(t) for t in self.turns)


def encode_dialog(dialog: Dialog, vocab: Vocab, scenario: int,
                  phrases=None) -> EncodedDialog:
    turns = []
    for turn in dialog.turns:
        turns.append([
            EncodedUtterance(vocab.encode(utt) + [vocab.eou_id],
                             utterance_label(utt, scenario, phrases))
            for utt in turn
        ])
    return EncodedDialog(turns, len(dialog_tokens(dialog)))


def encode_corpus(dialogs: list[Dialog], vocab: Vocab, scenario: int,
                  phrases=None) -> list[EncodedDialog]:
    return [encode_dialog(d, vocab, scenario, phrases) for d in dialogs]


# ---------------------------------------------------------------------------
# Batch loss


def _detach_ctx(ctx: ContextState) -> ContextState:
    return ContextState(detach(ctx.h_a), detach(ctx.h_b) if ctx.h_b is not None else None)


def _dialog_terms(pb: dict, cfg: ModelConfig, dialog: EncodedDialog,
                  dropout_rate: float, slice_len: int,
                  rng: np.random.Generator, sample_z: bool = True):
    """Per-utterance (nll, kl, cls, n_tokens) terms for one dialog.

    Advances the two status streams between turns and detaches recurrent
    state whenever the stream position crosses a slice boundary.
    """
    ctx = initial_context(cfg)
    cur_slice = 0
    pos = 0
    terms = []
    for k, turn in enumerate(dialog.turns):
        enc = None
        enc_slice = cur_slice
        for utt in turn:
            end_pos = pos + len(utt.ids) - 1
            sl = end_pos // slice_len
            if sl > cur_slice:
                ctx = _detach_ctx(ctx)
                cur_slice = sl
            cvec = context_vector(cfg, ctx)
            y_emb = label_embedding(pb, cfg, utt.label)
            enc = encode_utterance(pb, cfg, utt.ids)
            enc_slice = cur_slice
            post = lat.posterior(pb, cfg, cvec, y_emb, enc)
            pri = lat.prior(pb, cfg, cvec, y_emb)
            kl = lat.kl_diag_gauss(post, pri)
            gold_prev = utt.ids[:-1]
            prev = [BOU_ID] + word_dropout(gold_prev, dropout_rate, rng)
            if sample_z:
                z = sample_gaussian(post.mu, post.sigma, rng)
            else:
                z = post.mu
            cond = cond_bundle(cfg, cvec, z, y_emb)
            nll = utterance_nll(pb, cfg, prev, utt.ids, cond)
            cls = None
            if cfg.scenario == 2:
                cls = softmax_xent(lat.classifier_logits(pb, cfg, cvec), utt.label)
            terms.append((nll, kl, cls, len(utt.ids)))
            pos = end_pos + 1
        sl = pos // slice_len  # the turn's __eot__ marker position
        if sl > cur_slice:
            ctx = _detach_ctx(ctx)
            cur_slice = sl
        if enc_slice < cur_slice:
            enc = detach(enc)
        ctx = update_context(pb, cfg, ctx, enc, speaker_of_turn(k))
        pos += 1
    return terms


def _sum(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total


def batch_loss(pb: dict, cfg: ModelConfig, batch: list[EncodedDialog],
               weight: float, dropout_rate: float, slice_len: int,
               rng: np.random.Generator) -> tuple[LossBreakdown, Tensor]:
    """Mean-per-utterance loss of a batch; returns the breakdown and the
    total as a tape tensor.  Raises DivergenceError on non-finite parts."""
    if not batch:
        raise ContractViolation("batch_loss: batch is empty")
    nlls, kls, clss = [], [], []
    n_tokens = 0
    for dialog in batch:
        for nll, kl, cls, ntok in _dialog_terms(pb, cfg, dialog, dropout_rate,
                                                slice_len, rng):
            nlls.append(nll)
            kls.append(kl)
            if cls is not None:
                clss.append(cls)
            n_tokens += ntok
    n = len(nlls)
    inv = 1.0 / n
    nll_mean = _sum(nlls) * inv
    kl_mean = _sum(kls) * inv
    cls_mean = _sum(clss) * inv if clss else Tensor(0.0)
    total = nll_mean + weight * (kl_mean + cls_mean)
    bd = LossBreakdown(
        nll=nll_mean.item(), kl=kl_mean.item(), cls=cls_mean.item(),
        weight=weight, total=total.item(), n_utterances=n, n_tokens=n_tokens)
    for part, value in (("reconstruction NLL", bd.nll), ("KL", bd.kl),
                        ("classification loss", bd.cls), ("total", bd.total)):
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite {part} ({value}) in batch loss")
    return bd, total


def step_loss(params: ParamSet, cfg: ModelConfig, batch: list[EncodedDialog],
              step: int, tc: TrainConfig,
              rng: np.random.Generator | None = None) -> LossBreakdown:
    """Loss breakdown of one training step (values only, no gradients).

    When tc.anneal_steps is None (the in-loop "two epochs" default needs a
    corpus), the schedule degenerates to N=1: weight 0 at step 0, 1 after.
    """
    tc.validate()
    if rng is None:
        rng = derive_rng(tc.seed, "z", 0)
    weight = anneal_weight(step, tc.anneal_steps or 1)
    pb = params.bind(None)
    bd, _ = batch_loss(pb, cfg, batch, weight, tc.word_dropout_rate, tc.slice_len, rng)
    return bd


def training_step(params: ParamSet, cfg: ModelConfig, batch: list[EncodedDialog],
                  weight: float, tc: TrainConfig, state: AdamState,
                  rng: np.random.Generator) -> LossBreakdown:
    """Forward, backward, clip, Adam update (in place on params)."""
    tape = Tape()
    pb = params.bind(tape)
    bd, total = batch_loss(pb, cfg, batch, weight, tc.word_dropout_rate,
                           tc.slice_len, rng)
    grads_by_id = backward(tape, total)
    grads = {name: grads_by_id.of(t) for name, t in pb.items()}
    clip_global_norm(grads, tc.clip_norm)
    adam_step(params.arrays, grads, state, tc.learning_rate)
    return bd


def validation_loss(params: ParamSet, cfg: ModelConfig,
                    batch: list[EncodedDialog], tc: TrainConfig) -> LossBreakdown:
    """Validation objective: anneal weight 1, no word dropout, and a fixed
    derived rng so the posterior draw is identical across epochs."""
    pb = params.bind(None)
    rng = derive_rng(tc.seed, "val")
    bd, _ = batch_loss(pb, cfg, batch, 1.0, 0.0, tc.slice_len, rng)
    return bd


# ---------------------------------------------------------------------------
# The training loop


@dataclass
class EpochMetrics:
    epoch: int
    train_nll_per_token: float
    train_kl: float
    train_cls: float
    weight: float
    val_total: float
    val_nll_per_token: float

    def log_line(self) -> str:
        return "\t".join([
            str(self.epoch),
            f"{self.train_nll_per_token:.6f}",
            f"{self.train_kl:.6f}",
            f"{self.train_cls:.6f}",
            f"{self.weight:.6f}",
            f"{self.val_total:.6f}",
        ])


@dataclass
class TrainResult:
    params: ParamSet
    config: ModelConfig
    train_config: TrainConfig
    history: list[EpochMetrics]
    best_epoch: int
    best_val_total: float
    epochs_run: int
    stopped_early: bool


def split_corpus(encoded: list[EncodedDialog], val_fraction: float):
    """Deterministic split: the last ceil(fraction) of dialogs validate."""
    if len(encoded) < 2:
        raise ContractViolation("training needs at least 2 dialogs")
    n_val = max(1, int(round(len(encoded) * val_fraction)))
    n_val = min(n_val, len(encoded) - 1)
    return encoded[:-n_val], encoded[-n_val:]


def make_batches(order: list[int], encoded: list[EncodedDialog],
                 batch_size: int, slice_len: int) -> list[list[int]]:
    """Group dialogs (kept whole) until each batch holds batch_size slices."""
    batches = []
    cur: list[int] = []
    cur_slices = 0
    for i in order:
        cur.append(i)
        cur_slices += encoded[i].n_slices(slice_len)
        if cur_slices >= batch_size:
            batches.append(cur)
            cur, cur_slices = [], 0
    if cur:
        batches.append(cur)
    return batches


def train(dialogs: list[Dialog], vocab: Vocab, cfg: ModelConfig,
          tc: TrainConfig, phrases=None, log_path=None,
          init: ParamSet | None = None) -> TrainResult:
    """Optimize the full objective over a corpus with early stopping.

    Writes one tab-separated metrics line per epoch (epoch, train NLL/token,
    train KL, train class-loss, anneal weight at the epoch's first step,
    validation total) when log_path is given; the epoch-0 row is the
    untrained validation baseline with nan train columns.  Returns the
    best-validation parameters.
    """
    tc.validate()
    encoded = encode_corpus(dialogs, vocab, cfg.scenario, phrases)
    train_set, val_set = split_corpus(encoded, tc.val_fraction)
    params = init.copy() if init is not None else init_params_for(cfg, tc.seed)
    state = AdamState.for_params(params.arrays)

    n_slices = sum(d.n_slices(tc.slice_len) for d in train_set)
    steps_per_epoch = max(1, math.ceil(n_slices / tc.batch_size))
    anneal_n = tc.anneal_steps if tc.anneal_steps is not None else 2 * steps_per_epoch

    log_file = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(m: EpochMetrics):
        history.append(m)
        if log_file:
            log_file.write(m.log_line() + "\n")
            log_file.flush()

    history: list[EpochMetrics] = []
    try:
        vb = validation_loss(params, cfg, val_set, tc)
        emit(EpochMetrics(0, float("nan"), float("nan"), float("nan"),
                          anneal_weight(0, anneal_n), vb.total, vb.nll_per_token))
        best_val = vb.total
        best_epoch = 0
        best_params = params.copy()
        since_best = 0
        step = 0
        stopped = False
        epoch = 0
        for epoch in range(1, tc.max_epochs + 1):
            order = list(range(len(train_set)))
            if tc.shuffle:
                derive_rng(tc.seed, "shuffle", epoch).shuffle(order)
            batches = make_batches(order, train_set, tc.batch_size, tc.slice_len)
            z_rng = derive_rng(tc.seed, "step", epoch)
            epoch_start_weight = anneal_weight(step, anneal_n)
            agg_nll = agg_kl = agg_cls = 0.0
            agg_utts = agg_tokens = 0
            for idx in batches:
                weight = anneal_weight(step, anneal_n)
                bd = training_step(params, cfg, [train_set[i] for i in idx],
                                   weight, tc, state, z_rng)
                agg_nll += bd.nll * bd.n_utterances
                agg_kl += bd.kl * bd.n_utterances
                agg_cls += bd.cls * bd.n_utterances
                agg_utts += bd.n_utterances
                agg_tokens += bd.n_tokens
                step += 1
            vb = validation_loss(params, cfg, val_set, tc)
            emit(EpochMetrics(
                epoch,
                agg_nll / max(1, agg_tokens),
                agg_kl / max(1, agg_utts),
                agg_cls / max(1, agg_utts),
                epoch_start_weight,
                vb.total,
                vb.nll_per_token,
            ))
            if vb.total < best_val:
                best_val = vb.total
                best_epoch = epoch
                best_params = params.copy()
                since_best = 0
            else:
                since_best += 1
                if since_best >= tc.patience:
                    stopped = True
                    break
    finally:
        if log_file:
            log_file.close()
    return TrainResult(
        params=best_params, config=cfg, train_config=tc, history=history,
        best_epoch=best_epoch, best_val_total=best_val, epochs_run=epoch,
        stopped_early=stopped)


def init_params_for(cfg: ModelConfig, seed: int) -> ParamSet:
    return init_params(cfg, derive_rng(seed, "init"))
