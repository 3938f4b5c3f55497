"""The dialog model: utterance encoder, per-speaker status RNNs, decoder.

The dialog context is tracked by two GRUs, one per speaker; each consumes
only its own speaker's completed turns and the concatenation of both states
is the context vector.  A config flag collapses them into one shared stream
(the conventional single-context hierarchical encoder-decoder baseline).

Token ids follow the reserved layout of corpus.RESERVED: pad=0, unk=1,
bou=2, eou=3, eot=4, sentiment tags 5..7.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (ContractViolation, Tape, Tensor, affine, affine_rows,
                       concat, concat_cols, gather_rows, embedding_row,
                       softmax_xent_rows, tanh, tile_rows)
from .nn import GruParams, gru_sequence, gru_step, last_row, uniform_init

PAD_ID, UNK_ID, BOU_ID, EOU_ID, EOT_ID = 0, 1, 2, 3, 4
TAG_IDS = (5, 6, 7)


@dataclass
class ModelConfig:
    """Dimensions and mode switches; context vector size is 2 * status_dim."""

    vocab_size: int
    embed_dim: int = 64
    encoder_dim: int = 64
    status_dim: int = 32
    latent_dim: int = 16
    label_embed_dim: int = 100
    decoder_dim: int = 64
    scenario: int = 2
    shared_status: bool = False
    mlp_hidden: int = 0  # 0 means "use context_dim"
    init_scale: float = 0.08

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ContractViolation(f"scenario must be 1 or 2, got {self.scenario}")
        min_vocab = 8 if self.scenario == 2 else 5
        if self.vocab_size < min_vocab:
            raise ContractViolation(f"vocab_size must cover the reserved ids (>= {min_vocab})")
        for name in ("embed_dim", "encoder_dim", "status_dim", "latent_dim",
                     "label_embed_dim", "decoder_dim"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")

    @property
    def context_dim(self) -> int:
        return 2 * self.status_dim

    @property
    def n_labels(self) -> int:
        return 2 if self.scenario == 1 else 3

    @property
    def cond_dim(self) -> int:
        return self.context_dim + self.latent_dim + self.label_embed_dim

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden > 0 else self.context_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _gru_shapes(prefix: str, hidden: int, inputs: int) -> list[tuple[str, tuple]]:
    out = []
    for gate in ("z", "r", "h"):
        out.append((f"{prefix}.w_{gate}", (hidden, inputs)))
        out.append((f"{prefix}.u_{gate}", (hidden, hidden)))
        out.append((f"{prefix}.b_{gate}", (hidden,)))
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every named parameter tensor the config requires, with its shape."""
    shapes: list[tuple[str, tuple]] = [
        ("emb.tok", (cfg.vocab_size, cfg.embed_dim)),
        ("emb.label", (cfg.n_labels, cfg.label_embed_dim)),
    ]
    shapes += _gru_shapes("enc", cfg.encoder_dim, cfg.embed_dim)
    if cfg.shared_status:
        shapes += _gru_shapes("sta.s", cfg.context_dim, cfg.encoder_dim)
    else:
        shapes += _gru_shapes("sta.a", cfg.status_dim, cfg.encoder_dim)
        shapes += _gru_shapes("sta.b", cfg.status_dim, cfg.encoder_dim)
    m = cfg.hidden
    shapes += [
        ("pri.w1", (m, cfg.context_dim + cfg.label_embed_dim)),
        ("pri.b1", (m,)),
        ("pri.w_mu", (cfg.latent_dim, m)),
        ("pri.b_mu", (cfg.latent_dim,)),
        ("pri.w_sig", (cfg.latent_dim, m)),
        ("pri.b_sig", (cfg.latent_dim,)),
        ("pos.w1", (m, cfg.context_dim + cfg.label_embed_dim + cfg.encoder_dim)),
        ("pos.b1", (m,)),
        ("pos.w_mu", (cfg.latent_dim, m)),
        ("pos.b_mu", (cfg.latent_dim,)),
        ("pos.w_sig", (cfg.latent_dim, m)),
        ("pos.b_sig", (cfg.latent_dim,)),
    ]
    if cfg.scenario == 2:
        shapes += [
            ("cls.w1", (m, cfg.context_dim)),
            ("cls.b1", (m,)),
            ("cls.w2", (cfg.n_labels, m)),
            ("cls.b2", (cfg.n_labels,)),
        ]
    shapes += [
        ("dec.w_init", (cfg.decoder_dim, cfg.cond_dim)),
        ("dec.b_init", (cfg.decoder_dim,)),
    ]
    shapes += _gru_shapes("dec", cfg.decoder_dim, cfg.embed_dim + cfg.cond_dim)
    shapes += [
        ("out.w", (cfg.vocab_size, cfg.decoder_dim)),
        ("out.b", (cfg.vocab_size,)),
    ]
    return dict(shapes)


class ParamSet:
    """Named parameter arrays with a fixed iteration order."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = dict(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: a.copy() for k, a in self.arrays.items()})

    def n_values(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def bind(self, tape: Tape | None) -> dict[str, Tensor]:
        """Tensors for every parameter; watched leaves when a tape is given."""
        if tape is None:
            return {k: Tensor(a) for k, a in self.arrays.items()}
        return {k: tape.leaf(a) for k, a in self.arrays.items()}


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                scale: float | None = None) -> ParamSet:
    """uniform(-scale, scale) weights and zero biases, in declaration order."""
    if scale is None:
        scale = cfg.init_scale
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.split(".")[-1].startswith("b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = uniform_init(rng, shape, scale)
    return ParamSet(arrays)


def gru_view(pb: dict[str, Tensor], prefix: str) -> GruParams:
    return GruParams(
        w_z=pb[f"{prefix}.w_z"], u_z=pb[f"{prefix}.u_z"], b_z=pb[f"{prefix}.b_z"],
        w_r=pb[f"{prefix}.w_r"], u_r=pb[f"{prefix}.u_r"], b_r=pb[f"{prefix}.b_r"],
        w_h=pb[f"{prefix}.w_h"], u_h=pb[f"{prefix}.u_h"], b_h=pb[f"{prefix}.b_h"],
    )


# ---------------------------------------------------------------------------
# Context tracking


@dataclass
class ContextState:
    """Per-speaker status vectors.  Shared mode keeps one stream in h_a."""

    h_a: Tensor
    h_b: Tensor | None


def initial_context(cfg: ModelConfig) -> ContextState:
    if cfg.shared_status:
        return ContextState(Tensor(np.zeros(cfg.context_dim)), None)
    z = np.zeros(cfg.status_dim)
    return ContextState(Tensor(z), Tensor(z.copy()))


def encode_utterance(pb: dict, cfg: ModelConfig, token_ids, h0: Tensor | None = None) -> Tensor:
    """Final token-GRU state over the embedded utterance, from h0 (or zeros)."""
    ids = list(token_ids)
    if not ids:
        raise ContractViolation("encode_utterance: utterance is empty")
    if h0 is None:
        h0 = Tensor(np.zeros(cfg.encoder_dim))
    xs = gather_rows(pb["emb.tok"], ids)
    hs = gru_sequence(xs, h0, gru_view(pb, "enc"))
    return last_row(hs)


def update_context(pb: dict, cfg: ModelConfig, ctx: ContextState,
                   encoded_turn: Tensor, speaker: str) -> ContextState:
    """Advance the status stream of `speaker` ('A' or 'B') by one turn.

    The other speaker's state is returned untouched (the same tensor).
    """
    if speaker not in ("A", "B"):
        raise ContractViolation(f"update_context: speaker must be 'A' or 'B', got {speaker!r}")
    if cfg.shared_status:
        return ContextState(gru_step(encoded_turn, ctx.h_a, gru_view(pb, "sta.s")), None)
    if speaker == "A":
        return ContextState(gru_step(encoded_turn, ctx.h_a, gru_view(pb, "sta.a")), ctx.h_b)
    return ContextState(ctx.h_a, gru_step(encoded_turn, ctx.h_b, gru_view(pb, "sta.b")))


def context_vector(cfg: ModelConfig, ctx: ContextState) -> Tensor:
    """concat(h_A, h_B); always length 2 * status_dim."""
    if cfg.shared_status:
        return ctx.h_a
    return concat([ctx.h_a, ctx.h_b])


# ---------------------------------------------------------------------------
# Decoder


def label_embedding(pb: dict, cfg: ModelConfig, label: int) -> Tensor:
    if not 0 <= label < cfg.n_labels:
        raise ContractViolation(f"label {label} outside scenario-{cfg.scenario} domain")
    return embedding_row(pb["emb.label"], label)


def cond_bundle(cfg: ModelConfig, ctx_vec: Tensor, z: Tensor, y_emb: Tensor) -> Tensor:
    """Conditioning input: concat(context vector, latent, label embedding),
    constant across one utterance's decoding steps."""
    return concat([ctx_vec, z, y_emb])


def decoder_init(pb: dict, cfg: ModelConfig, cond: Tensor) -> Tensor:
    return tanh(affine(cond, pb["dec.w_init"], pb["dec.b_init"]))


def decode_logits(pb: dict, cfg: ModelConfig, prev_ids, cond: Tensor) -> Tensor:
    """Per-step vocabulary logits (T, V) for teacher-forced inputs.

    prev_ids[0] must be the beginning-of-utterance id; the conditioning
    bundle both initializes the decoder state and rides along with every
    step's token embedding.
    """
    ids = list(prev_ids)
    if not ids or ids[0] != BOU_ID:
        raise ContractViolation("decode_logits: prev tokens must start with the bou id")
    if cond.shape != (cfg.cond_dim,):
        raise ContractViolation(f"decode_logits: cond has shape {cond.shape}, "
                                f"expected {(cfg.cond_dim,)}")
    xs = gather_rows(pb["emb.tok"], ids)
    xc = concat_cols(xs, tile_rows(cond, len(ids)))
    hs = gru_sequence(xc, decoder_init(pb, cfg, cond), gru_view(pb, "dec"))
    return affine_rows(hs, pb["out.w"], pb["out.b"])


def decoder_step(pb: dict, cfg: ModelConfig, h: Tensor, token_id: int,
                 cond: Tensor) -> tuple[Tensor, Tensor]:
    """One stepwise decode: returns (next state, logits over the vocab)."""
    x = concat([embedding_row(pb["emb.tok"], token_id), cond])
    h_next = gru_step(x, h, gru_view(pb, "dec"))
    return h_next, affine(h_next, pb["out.w"], pb["out.b"])


def utterance_nll(pb: dict, cfg: ModelConfig, prev_ids, target_ids, cond: Tensor) -> Tensor:
    """Summed token cross-entropy of one utterance under teacher forcing."""
    if len(prev_ids) != len(target_ids):
        raise ContractViolation("utterance_nll: prev/target length mismatch")
    return softmax_xent_rows(decode_logits(pb, cfg, prev_ids, cond), target_ids)


def sequence_nll(pb: dict, cfg: ModelConfig, turns: list, zs: list, ys: list) -> Tensor:
    """Teacher-forced NLL of a whole dialog, context advanced between turns.

    `turns` is a list of turns, each a list of utterance id-lists ending in
    the eou id; zs and ys give one latent vector and one label per utterance
    in dialog order.
    """
    n_utts = sum(len(t) for t in turns)
    if len(zs) != n_utts or len(ys) != n_utts:
        raise ContractViolation("sequence_nll: need one z and one y per utterance")
    ctx = initial_context(cfg)
    total = Tensor(0.0)
    u = 0
    for k, turn in enumerate(turns):
        enc = None
        for ids in turn:
            cvec = context_vector(cfg, ctx)
            cond = cond_bundle(cfg, cvec, zs[u], label_embedding(pb, cfg, ys[u]))
            prev = [BOU_ID] + list(ids[:-1])
            total = total + utterance_nll(pb, cfg, prev, ids, cond)
            enc = encode_utterance(pb, cfg, ids)
            u += 1
        ctx = update_context(pb, cfg, ctx, enc, "A" if k % 2 == 0 else "B")
    return total
