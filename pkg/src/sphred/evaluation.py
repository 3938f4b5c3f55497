"""Embedding-based response metrics (average, greedy, extrema) and label
accuracy.

Only content tokens are scored: the structural markers, <unk>/<pad>, and
the sentiment tags are excluded from the embedding metrics.  A pair with no
scorable tokens on either side (or a zero-norm aggregate) scores 0 and is
counted as degenerate in the corpus report.

Reference label-accuracy levels for the full-scale recipe, kept here as
documentation targets (the desk-scale acceptance bars are 80% / 99%):
generic-control compliance around 91% under y=1 and 87% under y=0, and
sentiment-tag accuracy above 99% for both tagging rules.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation
from .corpus import (BOU, EOT, EOU, PAD, SENTIMENTS, TAG_TOKENS, UNK, Vocab,
                     label_generic, next_sentiment, sentiment_of_utterance)
from .model import ParamSet

EXCLUDED_TOKENS = frozenset({PAD, UNK, BOU, EOU, EOT, *TAG_TOKENS})


class EmbeddingTable:
    """token -> vector map used by the metrics."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ContractViolation("EmbeddingTable: no vectors")
        shapes = {v.shape for v in vectors.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 1:
            raise ContractViolation("EmbeddingTable: vectors must share one 1-d shape")
        self.vectors = vectors
        self.dim = next(iter(vectors.values())).shape[0]

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __getitem__(self, token: str) -> np.ndarray:
        return self.vectors[token]

    @classmethod
    def from_model(cls, params: ParamSet, vocab: Vocab) -> "EmbeddingTable":
        """The model's learned input embeddings, one vector per vocab token."""
        emb = params["emb.tok"]
        return cls({tok: emb[i].copy() for i, tok in enumerate(vocab.tokens)})

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        """File format: token, space, then the vector's floats, per line."""
        vectors = {}
        with open(path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) < 2:
                    raise ContractViolation(f"embedding file line {ln}: no values")
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        return cls(vectors)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, vec in self.vectors.items():
                f.write(tok + " " + " ".join(repr(float(x)) for x in vec) + "\n")

    def scored(self, tokens: list[str]) -> list[np.ndarray]:
        return [self.vectors[t] for t in tokens
                if t not in EXCLUDED_TOKENS and t in self.vectors]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def embedding_average(resp: list[str], ref: list[str], emb: EmbeddingTable) -> float:
    """Cosine between the two sequences' mean content-word vectors."""
    xs, ys = emb.scored(resp), emb.scored(ref)
    if not xs or not ys:
        return 0.0
    return _cosine(np.mean(xs, axis=0), np.mean(ys, axis=0))


def greedy_match(resp: list[str], ref: list[str], emb: EmbeddingTable) -> float:
    """Symmetrized greedy matching: each token grabs its best cosine on the
    other side; directional means are averaged."""
    xs, ys = emb.scored(resp), emb.scored(ref)
    if not xs or not ys:
        return 0.0

    def direction(us, vs):
        return float(np.mean([max(_cosine(u, v) for v in vs) for u in us]))

    return 0.5 * (direction(xs, ys) + direction(ys, xs))


def _extrema_vector(vs: list[np.ndarray]) -> np.ndarray:
    m = np.stack(vs)
    hi = m.max(axis=0)
    lo = m.min(axis=0)
    return np.where(np.abs(lo) > hi, lo, hi)


def vector_extrema(resp: list[str], ref: list[str], emb: EmbeddingTable) -> float:
    """Cosine between per-dimension extreme values (the max, unless the
    min's magnitude beats it)."""
    xs, ys = emb.scored(resp), emb.scored(ref)
    if not xs or not ys:
        return 0.0
    return _cosine(_extrema_vector(xs), _extrema_vector(ys))


def is_degenerate_pair(resp: list[str], ref: list[str], emb: EmbeddingTable) -> bool:
    xs, ys = emb.scored(resp), emb.scored(ref)
    if not xs or not ys:
        return True
    return (float(np.linalg.norm(np.mean(xs, axis=0))) < 1e-12
            or float(np.linalg.norm(np.mean(ys, axis=0))) < 1e-12)


# ---------------------------------------------------------------------------
# Label accuracy


def response_matches_label(resp: list[str], expected: int, scenario: int,
                           phrases=None) -> bool:
    """Scenario 1 compares the generic flag; scenario 2 compares the
    trailing sentiment tag (a missing tag is a mismatch)."""
    toks = [t for t in resp if t not in (EOU, EOT)]
    if scenario == 1:
        return label_generic(toks, phrases) == expected
    if scenario == 2:
        s = sentiment_of_utterance(toks)
        return s is not None and SENTIMENTS.index(s) == expected
    raise ContractViolation(f"scenario must be 1 or 2, got {scenario}")


def label_accuracy(responses: list[list[str]], expected_labels: list[int],
                   scenario: int, phrases=None) -> float:
    if len(responses) != len(expected_labels):
        raise ContractViolation("label_accuracy: responses/labels length mismatch")
    if not responses:
        raise ContractViolation("label_accuracy: need at least one pair")
    hits = sum(response_matches_label(r, e, scenario, phrases)
               for r, e in zip(responses, expected_labels))
    return hits / len(responses)


def expected_sentiment_for_history(history_utterances: list[list[str]],
                                   rule: int) -> int:
    """Rule-derived label index of the next response given tagged history.

    The history must contain a tagged utterance from each speaker (the two
    most recent ones, by alternation, are the rule's inputs)."""
    if len(history_utterances) < 2:
        raise ContractViolation("need at least two history utterances")
    prev_other = sentiment_of_utterance(history_utterances[-1])
    prev_self = sentiment_of_utterance(history_utterances[-2])
    if prev_other is None or prev_self is None:
        raise ContractViolation("history utterances lack sentiment tags")
    return SENTIMENTS.index(next_sentiment(prev_self, prev_other, rule))


# ---------------------------------------------------------------------------
# Corpus-level report


@dataclass
class EvalReport:
    average: float
    greedy: float
    extrema: float
    accuracy: float | None
    pairs: int
    degenerate_pairs: int = 0

    def __post_init__(self):
        if self.pairs <= 0:
            raise ContractViolation("EvalReport: pair count must be positive")
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ContractViolation("EvalReport: accuracy must be in [0, 1]")

    def tsv_line(self) -> str:
        acc = f"{self.accuracy:.6f}" if self.accuracy is not None else "-"
        return "\t".join([f"{self.average:.6f}", f"{self.greedy:.6f}",
                          f"{self.extrema:.6f}", acc, str(self.pairs)])

    def human_block(self) -> str:
        lines = [
            f"embedding average : {self.average:.4f}",
            f"greedy matching   : {self.greedy:.4f}",
            f"vector extrema    : {self.extrema:.4f}",
        ]
        if self.accuracy is not None:
            lines.append(f"label accuracy    : {self.accuracy:.4f}")
        lines.append(f"pairs scored      : {self.pairs}"
                     + (f" ({self.degenerate_pairs} degenerate)"
                        if self.degenerate_pairs else ""))
        return "\n".join(lines)


def evaluate_pairs(responses: list[list[str]], references: list[list[str]],
                   emb: EmbeddingTable,
                   expected_labels: list[int] | None = None,
                   scenario: int | None = None, phrases=None) -> EvalReport:
    if len(responses) != len(references) or not responses:
        raise ContractViolation("evaluate_pairs: need equal, nonempty response/reference lists")
    avg = [embedding_average(r, g, emb) for r, g in zip(responses, references)]
    gre = [greedy_match(r, g, emb) for r, g in zip(responses, references)]
    ext = [vector_extrema(r, g, emb) for r, g in zip(responses, references)]
    degenerate = sum(is_degenerate_pair(r, g, emb) for r, g in zip(responses, references))
    accuracy = None
    if expected_labels is not None:
        if scenario is None:
            raise ContractViolation("evaluate_pairs: labels need a scenario")
        accuracy = label_accuracy(responses, expected_labels, scenario, phrases)
    return EvalReport(
        average=float(np.mean(avg)), greedy=float(np.mean(gre)),
        extrema=float(np.mean(ext)), accuracy=accuracy,
        pairs=len(responses), degenerate_pairs=int(degenerate))
