"""Label-conditioned variational dialog generation with per-speaker context.

The package bundles a small float64 autodiff core, a hierarchical
encoder-decoder whose dialog state is tracked per speaker, a conditional
latent-variable layer, the training/evaluation pipeline, and a CLI plus
HTTP chat service.
"""

__version__ = "0.1.0"

from .autodiff import ContractViolation, Tape, Tensor, backward
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import (Dialog, ToyCorpusSpec, Vocab, build_vocab, label_generic,
                     make_toy_corpus, next_sentiment, tag_corpus_sentiment,
                     tokenize)
from .decoding import GenerationRequest, beam_search, generate_response
from .evaluation import (EmbeddingTable, EvalReport, embedding_average,
                         evaluate_pairs, greedy_match, label_accuracy,
                         vector_extrema)
from .latent import GaussianParams, kl_diag_gauss, posterior, prior
from .model import ModelConfig, ParamSet, init_params
from .nn import GruParams, gru_step, sample_gaussian
from .optim import AdamState, adam_step
from .training import (LossBreakdown, TrainConfig, TrainResult, anneal_weight,
                       train, word_dropout)

__all__ = [
    "AdamState", "Checkpoint", "ContractViolation", "Dialog", "EmbeddingTable",
    "EvalReport", "GaussianParams", "GenerationRequest", "GruParams",
    "LossBreakdown", "ModelConfig", "ParamSet", "Tape", "Tensor",
    "ToyCorpusSpec", "TrainConfig", "TrainResult", "Vocab", "adam_step",
    "anneal_weight", "backward", "beam_search", "build_vocab",
    "embedding_average", "evaluate_pairs", "generate_response", "greedy_match",
    "gru_step", "init_params", "kl_diag_gauss", "label_accuracy",
    "label_generic", "load_checkpoint", "make_toy_corpus", "next_sentiment",
    "posterior", "prior", "sample_gaussian", "save_checkpoint",
    "tag_corpus_sentiment", "tokenize", "train", "vector_extrema",
    "word_dropout",
]
