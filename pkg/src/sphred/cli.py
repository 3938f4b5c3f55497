"""Command-line entry points: make-corpus, train, generate, evaluate, serve."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import corpus as cp
from . import evaluation as ev
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .decoding import GenerationRequest, generate_response
from .model import ModelConfig
from .rng import derive_rng
from .training import DivergenceError, TrainConfig, train

CHECKPOINT_ENV = "SPHRED_CHECKPOINT"


def _add_make_corpus(sub):
    p = sub.add_parser("make-corpus", help="write a synthetic corpus + vocab + labels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--toy", action="store_true", help="use the template generator (default)")
    p.add_argument("--dialogs", type=int, default=1000)
    p.add_argument("--turns", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--scenario", type=int, choices=(1, 2), default=1)
    p.add_argument("--rule", type=int, choices=(1, 2), default=1,
                   help="sentiment rule for scenario 2")
    p.add_argument("--generic-rate", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phrases", default=None, help="generic-phrase list file")


def _cmd_make_corpus(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create {out}: {e}", file=sys.stderr)
        return 1
    phrases = cp.load_phrases(args.phrases)
    spec = cp.ToyCorpusSpec(n_dialogs=args.dialogs, turns_per_dialog=args.turns,
                            vocab_size=args.vocab_size, generic_rate=args.generic_rate)
    dialogs = cp.make_toy_corpus(spec, derive_rng(args.seed, "toy"), phrases)
    if args.scenario == 2:
        dialogs = cp.tag_corpus_sentiment(dialogs, args.rule, derive_rng(args.seed, "tags"))
    vocab = cp.build_vocab(dialogs, max_words=20000)
    try:
        cp.save_corpus(dialogs, out / "corpus.txt")
        vocab.save(out / "vocab.txt")
        with open(out / "labels.txt", "w", encoding="utf-8") as f:
            for d in dialogs:
                labels = cp.dialog_labels(d, args.scenario, phrases)
                if args.scenario == 2:
                    f.write(" ".join(cp.TAG_TOKENS[i] for i in labels) + "\n")
                else:
                    f.write(" ".join(str(i) for i in labels) + "\n")
    except OSError as e:
        print(f"error: cannot write corpus files: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(dialogs)} dialogs, vocab {len(vocab)} to {out}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train a model and write the best checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--scenario", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="metrics log path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--anneal-steps", type=int, default=None)
    p.add_argument("--slice-len", type=int, default=80)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--encoder-dim", type=int, default=64)
    p.add_argument("--status-dim", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--label-dim", type=int, default=100)
    p.add_argument("--decoder-dim", type=int, default=64)
    p.add_argument("--shared-status", action="store_true",
                   help="single shared context stream (baseline structure)")
    p.add_argument("--phrases", default=None)


def _cmd_train(args) -> int:
    dialogs = cp.load_corpus(args.corpus)
    vocab = cp.Vocab.load(args.vocab)
    phrases = cp.load_phrases(args.phrases) if args.scenario == 1 else None
    cfg = ModelConfig(
        vocab_size=len(vocab), embed_dim=args.embed_dim,
        encoder_dim=args.encoder_dim, status_dim=args.status_dim,
        latent_dim=args.latent_dim, label_embed_dim=args.label_dim,
        decoder_dim=args.decoder_dim, scenario=args.scenario,
        shared_status=args.shared_status)
    tc = TrainConfig(
        batch_size=args.batch_size, learning_rate=args.lr,
        anneal_steps=args.anneal_steps, word_dropout_rate=args.dropout,
        patience=args.patience, max_epochs=args.epochs, seed=args.seed,
        slice_len=args.slice_len, clip_norm=args.clip,
        val_fraction=args.val_fraction)
    try:
        result = train(dialogs, vocab, cfg, tc, phrases=phrases, log_path=args.log)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    ckpt = Checkpoint(
        config=cfg, vocab=vocab, params=result.params, seed=args.seed,
        provenance={
            "best_epoch": result.best_epoch,
            "best_val_total": result.best_val_total,
            "epochs_run": result.epochs_run,
            "stopped_early": result.stopped_early,
        })
    save_checkpoint(ckpt, args.out)
    print(f"best epoch {result.best_epoch} (val {result.best_val_total:.6f}); "
          f"checkpoint -> {args.out}")
    return 0


def _add_generate(sub):
    p = sub.add_parser("generate", help="one response per context line")
    p.add_argument("--checkpoint", default=os.environ.get(CHECKPOINT_ENV))
    p.add_argument("--contexts", required=True, help="dialog-format context lines")
    p.add_argument("--out", default=None, help="write responses here (default stdout)")
    p.add_argument("--label", type=int, default=None, help="fixed label index")
    p.add_argument("--predict", action="store_true", help="classifier-predicted label")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--det-z", action="store_true", help="use the prior mean for z")
    p.add_argument("--seed", type=int, default=0)


def _cmd_generate(args, parser) -> int:
    if not args.checkpoint:
        parser.error(f"--checkpoint required (or set {CHECKPOINT_ENV})")
    if args.predict == (args.label is not None):
        parser.error("choose exactly one of --label or --predict")
    ckpt = load_checkpoint(args.checkpoint)
    histories = cp.load_corpus(args.contexts)
    lines = []
    for i, history in enumerate(histories):
        request = GenerationRequest(
            history=history, scenario=ckpt.config.scenario,
            label_mode="predict" if args.predict else "fixed",
            label_value=args.label, beam_size=args.beam, max_len=args.max_len,
            seed=args.seed + i, deterministic_z=args.det_z)
        result = generate_response(ckpt.params, ckpt.config, ckpt.vocab, request)
        lines.append(result.text)
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="embedding metrics + label accuracy")
    p.add_argument("--responses", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--checkpoint", default=os.environ.get(CHECKPOINT_ENV),
                   help="embeddings source (model input embeddings)")
    p.add_argument("--embeddings", default=None, help="external embedding table file")
    p.add_argument("--scenario", type=int, choices=(1, 2), default=None)
    p.add_argument("--expected-label", type=int, default=None,
                   help="scenario 1: the fixed test-time label")
    p.add_argument("--contexts", default=None,
                   help="scenario 2: tagged history lines for rule-derived labels")
    p.add_argument("--rule", type=int, choices=(1, 2), default=None)
    p.add_argument("--phrases", default=None)
    p.add_argument("--out", default=None, help="write the TSV report line here too")


def _read_token_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [cp.tokenize(line) for line in f.read().splitlines()]


def _cmd_evaluate(args, parser) -> int:
    responses = _read_token_lines(args.responses)
    references = _read_token_lines(args.references)
    if len(responses) != len(references):
        parser.error("responses and references must have the same number of lines")
    if args.embeddings:
        emb = ev.EmbeddingTable.load(args.embeddings)
    elif args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        emb = ev.EmbeddingTable.from_model(ckpt.params, ckpt.vocab)
    else:
        parser.error(f"need --embeddings or --checkpoint (or set {CHECKPOINT_ENV})")
    expected = None
    phrases = None
    if args.scenario == 1:
        if args.expected_label is None:
            parser.error("scenario 1 accuracy needs --expected-label")
        phrases = cp.load_phrases(args.phrases)
        expected = [args.expected_label] * len(responses)
    elif args.scenario == 2:
        if not args.contexts or args.rule is None:
            parser.error("scenario 2 accuracy needs --contexts and --rule")
        histories = cp.load_corpus(args.contexts)
        if len(histories) != len(responses):
            parser.error("contexts and responses must align line by line")
        expected = [
            ev.expected_sentiment_for_history([u for _, u in h.utterances()], args.rule)
            for h in histories
        ]
    report = ev.evaluate_pairs(responses, references, emb, expected,
                               args.scenario, phrases)
    print(report.tsv_line())
    print(report.human_block())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report.tsv_line() + "\n")
    return 0


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the chat HTTP service")
    p.add_argument("--checkpoint", default=os.environ.get(CHECKPOINT_ENV))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--transcript-dir", default=None)
    p.add_argument("--ui", default=None, help="static directory to serve at /")


def _cmd_serve(args, parser) -> int:
    if not args.checkpoint:
        parser.error(f"--checkpoint required (or set {CHECKPOINT_ENV})")
    import uvicorn

    from .service import create_app

    app = create_app(load_checkpoint(args.checkpoint), base_seed=args.seed,
                     beam_size=args.beam, max_len=args.max_len,
                     transcript_dir=args.transcript_dir, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphred",
        description="label-conditioned variational dialog generation")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_make_corpus(sub)
    _add_train(sub)
    _add_generate(sub)
    _add_evaluate(sub)
    _add_serve(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "make-corpus":
        return _cmd_make_corpus(args)
    if args.command == "train":
        return _cmd_train(args)
    if args.command == "generate":
        return _cmd_generate(args, parser)
    if args.command == "evaluate":
        return _cmd_evaluate(args, parser)
    if args.command == "serve":
        return _cmd_serve(args, parser)
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
