"""HTTP JSON service exposing label-steered generation for chat clients.

Endpoints:
    POST /sessions              {scenario}            -> new session
    POST /sessions/{id}/turns   {utterance, label_override?, deterministic?}
    GET  /sessions/{id}         transcript + label provenance
    GET  /health

Scenario-1 labels travel as integers (0 non-generic, 1 generic); scenario-2
labels as the sentiment names.  Malformed bodies get 400 with field
diagnostics, unknown sessions 404, out-of-domain labels 422.  Parameters
are never mutated; per-session turns are serialized by a lock.
"""
from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import latent as lat
from .checkpoint import Checkpoint
from .corpus import BOU, EOT, EOU, PAD, SENTIMENTS, tokenize
from .decoding import beam_search
from .model import (ContextState, cond_bundle, context_vector,
                    encode_utterance, initial_context, label_embedding,
                    update_context)
from .nn import sample_gaussian
from .rng import derive_rng

_STRUCTURAL = {PAD, BOU, EOU, EOT}


class CreateSessionBody(BaseModel):
    scenario: int


class TurnBody(BaseModel):
    utterance: str
    label_override: int | str | None = None
    deterministic: bool = False


@dataclass
class Session:
    session_id: str
    scenario: int
    ctx: ContextState
    turns: list[dict] = field(default_factory=list)
    exchanges: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


def _normalize_label(scenario: int, override) -> int:
    """Override value -> label index; raises ValueError outside the domain."""
    if scenario == 1:
        if isinstance(override, bool) or not isinstance(override, int) or override not in (0, 1):
            raise ValueError("scenario 1 label_override must be the integer 0 or 1")
        return override
    if isinstance(override, str):
        if override not in SENTIMENTS:
            raise ValueError(f"scenario 2 label_override must be one of {list(SENTIMENTS)}")
        return SENTIMENTS.index(override)
    if isinstance(override, int) and not isinstance(override, bool) and 0 <= override < 3:
        return override
    raise ValueError(f"scenario 2 label_override must be one of {list(SENTIMENTS)} or 0..2")


def _label_wire(scenario: int, label: int):
    return label if scenario == 1 else SENTIMENTS[label]


def create_app(ckpt: Checkpoint, base_seed: int = 0, beam_size: int = 5,
               max_len: int = 30, transcript_dir=None, ui_dir=None) -> FastAPI:
    cfg = ckpt.config
    vocab = ckpt.vocab
    pb = ckpt.params.bind(None)  # read-only binding shared by all sessions
    sessions: dict[str, Session] = {}
    store_lock = threading.Lock()
    tdir = Path(transcript_dir) if transcript_dir else None
    if tdir:
        tdir.mkdir(parents=True, exist_ok=True)

    app = FastAPI(title="sphred chat service")
    app.state.sessions = sessions  # introspection/debugging only
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.exception_handler(RequestValidationError)
    async def _bad_body(request: Request, exc: RequestValidationError):
        details = [{"field": ".".join(str(p) for p in e["loc"]), "message": e["msg"]}
                   for e in exc.errors()]
        return JSONResponse(status_code=400, content={"detail": details})

    def _error(status: int, message: str):
        return JSONResponse(status_code=status, content={"detail": message})

    def _append_transcript(session: Session, entry: dict) -> None:
        session.turns.append(entry)
        if tdir:
            with open(tdir / f"{session.session_id}.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    @app.get("/health")
    def health():
        return {"status": "ok", "scenario": cfg.scenario, "vocab_size": cfg.vocab_size,
                "sessions": len(sessions)}

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        if body.scenario != cfg.scenario:
            return _error(422, f"this server hosts a scenario-{cfg.scenario} model")
        sid = uuid.uuid4().hex
        session = Session(sid, cfg.scenario, initial_context(cfg))
        with store_lock:
            sessions[sid] = session
        return {"session_id": sid, "scenario": cfg.scenario, "turn_count": 0}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        session = sessions.get(sid)
        if session is None:
            return _error(404, f"unknown session {sid}")
        return {"session_id": sid, "scenario": session.scenario,
                "turns": session.turns}

    @app.post("/sessions/{sid}/turns")
    def post_turn(sid: str, body: TurnBody):
        session = sessions.get(sid)
        if session is None:
            return _error(404, f"unknown session {sid}")
        tokens = [t for t in tokenize(body.utterance) if t not in _STRUCTURAL]
        if not tokens:
            return _error(422, "utterance must contain at least one token")
        if body.label_override is not None:
            try:
                label = _normalize_label(cfg.scenario, body.label_override)
            except ValueError as e:
                return _error(422, str(e))
            label_source = "fixed"
        elif cfg.scenario == 1:
            label = 0  # documented default: steer away from generic replies
            label_source = "fixed"
        else:
            label = None
            label_source = "predicted"

        with session.lock:
            turn_index = session.exchanges
            user_ids = vocab.encode(tokens) + [vocab.eou_id]
            enc = encode_utterance(pb, cfg, user_ids)
            ctx = update_context(pb, cfg, session.ctx, enc, "A")
            ctx_vec = context_vector(cfg, ctx)

            dist = None
            if label is None:
                dist = lat.classify_label(pb, cfg, ctx_vec)
                label = lat.predicted_label(dist)
            y_emb = label_embedding(pb, cfg, label)
            pri = lat.prior(pb, cfg, ctx_vec, y_emb)
            if body.deterministic:
                z = pri.mu
            else:
                z = sample_gaussian(pri.mu, pri.sigma,
                                    derive_rng(base_seed, sid, turn_index))
            cond = cond_bundle(cfg, ctx_vec, z, y_emb)
            ids, log_prob, truncated = beam_search(pb, cfg, cond, beam_size,
                                                   max_len, min_tokens=1)
            reply_ids = ids if (ids and ids[-1] == vocab.eou_id) else ids + [vocab.eou_id]
            reply_tokens = vocab.decode(reply_ids)
            enc_reply = encode_utterance(pb, cfg, reply_ids)
            session.ctx = update_context(pb, cfg, ctx, enc_reply, "B")
            session.exchanges += 1

            text = " ".join(reply_tokens[:-1])
            dist_wire = ({SENTIMENTS[i]: float(p) for i, p in enumerate(dist.probs)}
                         if dist is not None else None)
            _append_transcript(session, {
                "turn_index": turn_index, "speaker": "user",
                "text": " ".join(tokens)})
            model_entry = {
                "turn_index": turn_index, "speaker": "model", "text": text,
                "label_used": _label_wire(cfg.scenario, label),
                "label_source": label_source, "log_prob": log_prob,
                "truncated": truncated,
            }
            if dist_wire is not None:
                model_entry["label_distribution"] = dist_wire
            _append_transcript(session, model_entry)

        response = {
            "response": text,
            "label_used": _label_wire(cfg.scenario, label),
            "label_source": label_source,
            "log_prob": log_prob,
            "turn_index": turn_index,
            "truncated": truncated,
        }
        if dist_wire is not None:
            response["label_distribution"] = dist_wire
        return response

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
