"""Dialog corpora: tokenization, vocabulary, labels, slicing, toy generation.

File formats
------------
corpus file   one dialog per line; space-separated lowercase tokens;
              ``__eou__`` ends an utterance, ``__eot__`` ends a turn
vocab file    one token per line, line number = id, reserved tokens first
phrase file   one generic phrase per line, lowercase

Speakers alternate by turn: turn k belongs to speaker A when k is even.
"""
from __future__ import annotations

import importlib.resources
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation

EOU = "__eou__"
EOT = "__eot__"
PAD, UNK, BOU = "<pad>", "<unk>", "<bou>"
TAG_TOKENS = (":)", ":(", ":P")
SENTIMENTS = ("positive", "negative", "neutral")
SENTIMENT_VALUES = {"positive": 1, "negative": -1, "neutral": 0}
TAG_BY_SENTIMENT = dict(zip(SENTIMENTS, TAG_TOKENS))
SENTIMENT_BY_TAG = dict(zip(TAG_TOKENS, SENTIMENTS))
RESERVED = (PAD, UNK, BOU, EOU, EOT) + TAG_TOKENS


class CorpusFormatError(ValueError):
    """A corpus, vocab, or phrase file does not follow its documented format."""


# ---------------------------------------------------------------------------
# Tokenization and dialog structure


def tokenize(line: str) -> list[str]:
    """Lowercased whitespace tokens; an empty line gives an empty list.

    The neutral sentiment tag is canonicalized back to ":P" (its reserved
    spelling) because blanket lowercasing would otherwise orphan it.
    """
    return [":P" if t == ":p" else t for t in line.lower().split()]


@dataclass
class Dialog:
    """turns[k][j] is the content-token list of utterance j in turn k.

    Content tokens exclude the ``__eou__``/``__eot__`` markers; those are
    added by render() and consumed by parse().
    """

    turns: list[list[list[str]]] = field(default_factory=list)

    def utterances(self):
        """Yield (turn_index, utterance_tokens) over the whole dialog."""
        for k, turn in enumerate(self.turns):
            for utt in turn:
                yield k, utt

    def n_utterances(self) -> int:
        return sum(len(t) for t in self.turns)


def speaker_of_turn(turn_index: int) -> str:
    return "A" if turn_index % 2 == 0 else "B"


def render_dialog(dialog: Dialog) -> str:
    parts = []
    for turn in dialog.turns:
        for utt in turn:
            parts.extend(utt)
            parts.append(EOU)
        parts.append(EOT)
    return " ".join(parts)


def parse_dialog(line: str) -> Dialog:
    tokens = tokenize(line)
    if not tokens:
        return Dialog([])
    if tokens[-1] != EOT:
        raise CorpusFormatError("dialog line must end with __eot__")
    turns = []
    turn: list[list[str]] = []
    utt: list[str] = []
    for tok in tokens:
        if tok == EOU:
            turn.append(utt)
            utt = []
        elif tok == EOT:
            if utt:
                raise CorpusFormatError("utterance not closed by __eou__ before __eot__")
            if not turn:
                raise CorpusFormatError("empty turn (no utterances before __eot__)")
            turns.append(turn)
            turn = []
        else:
            utt.append(tok)
    if utt or turn:
        raise CorpusFormatError("trailing tokens after the last __eot__")
    return Dialog(turns)


def dialog_tokens(dialog: Dialog) -> list[str]:
    """The dialog's full marker-annotated token stream (the rendered form)."""
    out = []
    for turn in dialog.turns:
        for utt in turn:
            out.extend(utt)
            out.append(EOU)
        out.append(EOT)
    return out


def load_corpus(path) -> list[Dialog]:
    dialogs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                dialogs.append(parse_dialog(line))
    return dialogs


def save_corpus(dialogs: list[Dialog], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogs:
            f.write(render_dialog(d) + "\n")


# ---------------------------------------------------------------------------
# Vocabulary


class Vocab:
    """Bijective token<->id map; reserved tokens occupy the first ids."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(RESERVED)]) != list(RESERVED):
            raise CorpusFormatError("vocab must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusFormatError("vocab contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def unk_id(self):
        return self.index[UNK]

    @property
    def bou_id(self):
        return self.index[BOU]

    @property
    def eou_id(self):
        return self.index[EOU]

    @property
    def eot_id(self):
        return self.index[EOT]

    def tag_id(self, sentiment: str) -> int:
        return self.index[TAG_BY_SENTIMENT[sentiment]]

    def encode_token(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(dialogs: list[Dialog], max_words: int = 20000) -> Vocab:
    """Reserved tokens plus the max_words most frequent remaining tokens.

    Frequency ties break toward earlier first occurrence.  Everything else
    maps to <unk> at encode time.
    """
    if not dialogs:
        raise ContractViolation("build_vocab: corpus is empty")
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    pos = 0
    for d in dialogs:
        for _, utt in d.utterances():
            for tok in utt:
                counts[tok] += 1
                if tok not in first_seen:
                    first_seen[tok] = pos
                pos += 1
    candidates = [t for t in counts if t not in RESERVED]
    candidates.sort(key=lambda t: (-counts[t], first_seen[t]))
    return Vocab(list(RESERVED) + candidates[:max_words])


# ---------------------------------------------------------------------------
# Scenario 1: generic-response labels


def load_phrases(path=None) -> list[list[str]]:
    """Generic-phrase list as token lists; defaults to the shipped file."""
    if path is None:
        text = (importlib.resources.files("sphred.data") / "generic_phrases.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    phrases = [tokenize(line) for line in text.splitlines() if line.strip()]
    if not phrases:
        raise CorpusFormatError("phrase list is empty")
    return phrases


def _contains_subsequence(tokens: list[str], phrase: list[str]) -> bool:
    n, m = len(tokens), len(phrase)
    for i in range(n - m + 1):
        if tokens[i : i + m] == phrase:
            return True
    return False


def label_generic(utterance: list[str], phrases: list[list[str]]) -> int:
    """1 iff the utterance contains any phrase as a contiguous token run."""
    if not phrases:
        raise ContractViolation("label_generic: phrase list must be nonempty")
    return int(any(_contains_subsequence(utterance, p) for p in phrases))


# ---------------------------------------------------------------------------
# Scenario 2: simulated sentiment tags


def next_sentiment(tag_prev_self: str, tag_prev_other: str, rule: int) -> str:
    """Next utterance's sentiment from each speaker's latest one.

    Rule 1 keeps the speaker's own tag.  Rule 2 takes the sign of the mean
    of the two tags' values (+1/0/-1), with +-0.5 rounding away from zero.
    """
    for t in (tag_prev_self, tag_prev_other):
        if t not in SENTIMENT_VALUES:
            raise ContractViolation(f"next_sentiment: unknown tag {t!r}")
    if rule == 1:
        return tag_prev_self
    if rule == 2:
        mean = (SENTIMENT_VALUES[tag_prev_self] + SENTIMENT_VALUES[tag_prev_other]) / 2.0
        if mean > 0:
            return "positive"
        if mean < 0:
            return "negative"
        return "neutral"
    raise ContractViolation(f"next_sentiment: rule must be 1 or 2, got {rule}")


def sentiment_of_utterance(utterance: list[str]) -> str | None:
    """Sentiment named by the utterance's trailing tag token, if any."""
    if utterance and utterance[-1] in SENTIMENT_BY_TAG:
        return SENTIMENT_BY_TAG[utterance[-1]]
    return None


def tag_corpus_sentiment(dialogs: list[Dialog], rule: int,
                         rng: np.random.Generator) -> list[Dialog]:
    """Append simulated sentiment tags to every utterance of every dialog.

    The first utterance of each speaker draws a uniformly random tag; later
    utterances follow next_sentiment applied to each speaker's latest tag.
    The tag token lands just before __eou__ (last content position).
    """
    out = []
    for d in dialogs:
        if len(d.turns) < 2:
            raise ContractViolation("tag_corpus_sentiment: dialogs need >= 2 turns")
        last: dict[str, str | None] = {"A": None, "B": None}
        turns = []
        for k, turn in enumerate(d.turns):
            spk = speaker_of_turn(k)
            other = "B" if spk == "A" else "A"
            new_turn = []
            for utt in turn:
                if last[spk] is None:
                    tag = SENTIMENTS[int(rng.integers(0, 3))]
                elif last[other] is None:
                    # Other speaker has not spoken yet: only rule 1 applies cleanly.
                    tag = last[spk] if rule == 1 else next_sentiment(last[spk], last[spk], rule)
                else:
                    tag = next_sentiment(last[spk], last[other], rule)
                last[spk] = tag
                new_turn.append(list(utt) + [TAG_BY_SENTIMENT[tag]])
            turns.append(new_turn)
        out.append(Dialog(turns))
    return out


# ---------------------------------------------------------------------------
# Slicing


@dataclass
class Slice:
    """A window of <= slice_len positions of one dialog's token stream.

    Consecutive slices of a dialog tile it without gaps; the recurrent
    states carried across a boundary are owned by whoever consumes the
    stream (the trainer detaches them there to truncate backprop).
    """

    dialog_index: int
    start: int
    tokens: list[str]
    is_first: bool
    is_last: bool


def slice_dialogs(dialogs: list[Dialog], slice_len: int = 80) -> list[Slice]:
    if slice_len < 1:
        raise ContractViolation("slice_dialogs: slice_len must be >= 1")
    slices = []
    for di, d in enumerate(dialogs):
        stream = dialog_tokens(d)
        for start in range(0, len(stream), slice_len):
            window = stream[start : start + slice_len]
            slices.append(Slice(
                dialog_index=di,
                start=start,
                tokens=window,
                is_first=start == 0,
                is_last=start + slice_len >= len(stream),
            ))
    return slices


# ---------------------------------------------------------------------------
# Per-utterance labels for training


def utterance_label(utterance: list[str], scenario: int,
                    phrases: list[list[str]] | None = None) -> int:
    """Label index of one utterance under the active scenario.

    Scenario 1: 0 = non-generic, 1 = generic (phrase-list rule).
    Scenario 2: index into SENTIMENTS, read from the trailing tag token.
    """
    if scenario == 1:
        if phrases is None:
            raise ContractViolation("utterance_label: scenario 1 needs a phrase list")
        return label_generic(utterance, phrases)
    if scenario == 2:
        s = sentiment_of_utterance(utterance)
        if s is None:
            raise CorpusFormatError(
                "scenario 2 utterance lacks a trailing sentiment tag: "
                + " ".join(utterance[-4:]))
        return SENTIMENTS.index(s)
    raise ContractViolation(f"utterance_label: scenario must be 1 or 2, got {scenario}")


def dialog_labels(dialog: Dialog, scenario: int,
                  phrases: list[list[str]] | None = None) -> list[int]:
    return [utterance_label(u, scenario, phrases) for _, u in dialog.utterances()]


# ---------------------------------------------------------------------------
# Toy corpus generator


@dataclass
class ToyCorpusSpec:
    """Knobs for the synthetic template corpus.

    vocab_size is a target, not an exact count: topics are added in blocks
    until the distinct-token budget is met.
    """

    n_dialogs: int = 1000
    turns_per_dialog: int = 4
    vocab_size: int = 200
    generic_rate: float = 0.02

    def validate(self) -> None:
        if self.n_dialogs < 1 or self.turns_per_dialog < 2:
            raise ContractViolation("toy corpus needs >= 1 dialog and >= 2 turns")
        if not 0.0 <= self.generic_rate < 1.0:
            raise ContractViolation("generic_rate must be in [0, 1)")
        if self.vocab_size < 60:
            raise ContractViolation("vocab_size must be >= 60")


_BASE_NOUNS = [
    "kernel", "driver", "panel", "server", "router", "monitor", "package",
    "printer", "laptop", "editor", "browser", "firewall", "desktop", "modem",
    "player", "terminal", "archive", "backup", "battery", "cable", "camera",
    "client", "compiler", "daemon", "database", "display", "folder", "disk",
    "keyboard", "library", "manifest", "network", "partition", "password",
    "plugin", "profile", "repo", "screen", "script", "service", "socket",
    "theme", "touchpad", "wallpaper", "webcam", "window", "account", "adapter",
    "bios", "bootloader", "codec", "cursor", "dock", "font", "gadget", "image",
    "inbox", "journal", "launcher", "mirror",
]

_VERBS = ["restart", "update", "reinstall", "configure", "reset", "check",
          "enable", "disable", "patch", "upgrade"]

_ASK_TEMPLATES = [
    ("how", "do", "i", "{verb}", "the", "{noun}", "?"),
    ("my", "{noun}", "is", "broken", "."),
    ("what", "is", "wrong", "with", "my", "{noun}", "?"),
    ("the", "{noun}", "fails", "after", "every", "{verb2}", "."),
    ("can", "you", "help", "with", "the", "{noun}", "?"),
]

_REPLY_TEMPLATES = [
    ("try", "to", "{verb}", "the", "{noun}", "."),
    ("you", "can", "{verb}", "the", "{noun}", "first", "."),
    ("just", "{verb}", "the", "{noun}", "and", "retry", "."),
    ("the", "{noun}", "needs", "a", "{verb2}", "."),
    ("maybe", "{verb}", "the", "{noun}", "settings", "."),
]

_FOLLOWUP_TEMPLATES = [
    ("the", "{noun}", "still", "fails", "."),
    ("ok", "that", "fixed", "the", "{noun}", "."),
    ("thanks", ",", "the", "{noun}", "works", "now", "."),
    ("same", "problem", "with", "the", "{noun}", "again", "."),
]


def _topic_nouns(vocab_size: int) -> list[list[str]]:
    fixed = set(_VERBS)
    for group in (_ASK_TEMPLATES, _REPLY_TEMPLATES, _FOLLOWUP_TEMPLATES):
        for t in group:
            fixed.update(w for w in t if not w.startswith("{"))
    budget = max(20, vocab_size - len(fixed) - len(RESERVED) - 12)
    nouns = []
    i = 0
    while len(nouns) < budget:
        base = _BASE_NOUNS[i % len(_BASE_NOUNS)]
        nouns.append(base if i < len(_BASE_NOUNS) else f"{base}{i // len(_BASE_NOUNS)}")
        i += 1
    per_topic = 4
    return [nouns[j : j + per_topic] for j in range(0, len(nouns) - per_topic + 1, per_topic)]


def _fill(template, rng, nouns) -> list[str]:
    out = []
    for w in template:
        if w == "{noun}":
            out.append(nouns[int(rng.integers(0, len(nouns)))])
        elif w == "{verb}":
            out.append(_VERBS[int(rng.integers(0, len(_VERBS)))])
        elif w == "{verb2}":
            out.append(_VERBS[int(rng.integers(0, len(_VERBS)))])
        else:
            out.append(w)
    return out


def make_toy_corpus(spec: ToyCorpusSpec, rng: np.random.Generator,
                    phrases: list[list[str]] | None = None) -> list[Dialog]:
    """Synthetic dialogs from a topic-keyed template grammar.

    Each dialog sticks to one topic's noun pool, so replies correlate with
    their context.  Every utterance is independently replaced by a generic
    phrase with probability spec.generic_rate.  One utterance per turn;
    speaker A asks, speaker B replies.
    """
    spec.validate()
    if phrases is None:
        phrases = load_phrases()
    topics = _topic_nouns(spec.vocab_size)
    dialogs = []
    for _ in range(spec.n_dialogs):
        nouns = topics[int(rng.integers(0, len(topics)))]
        turns = []
        for k in range(spec.turns_per_dialog):
            if float(rng.random()) < spec.generic_rate:
                utt = list(phrases[int(rng.integers(0, len(phrases)))]) + ["."]
            elif k == 0:
                utt = _fill(_ASK_TEMPLATES[int(rng.integers(0, len(_ASK_TEMPLATES)))], rng, nouns)
            elif k % 2 == 1:
                utt = _fill(_REPLY_TEMPLATES[int(rng.integers(0, len(_REPLY_TEMPLATES)))], rng, nouns)
            else:
                utt = _fill(_FOLLOWUP_TEMPLATES[int(rng.integers(0, len(_FOLLOWUP_TEMPLATES)))], rng, nouns)
            turns.append([utt])
        dialogs.append(Dialog(turns))
    return dialogs
