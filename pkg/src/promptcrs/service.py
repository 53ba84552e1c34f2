"""Live conversational endpoint: sessions, the turn pipeline, HTTP surface."""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import pydantic

from .data import Utterance, _context_blocks, _truncate_blocks, tokenize
from .pipeline import RecommenderPipeline


class SessionNotFound(KeyError):
    pass


@dataclass
class TurnResult:
    template_tokens: list[str]
    slot_count: int
    recommendations: list[dict]  # {item_id, name, probability}
    response: str
    consistent: bool

    def to_dict(self) -> dict:
        return {
            "template": self.template_tokens,
            "slot_count": self.slot_count,
            "recommendations": self.recommendations,
            "response": self.response,
            "consistent": self.consistent,
        }


@dataclass
class Session:
    id: str
    created_at: float
    turns: list[Utterance] = field(default_factory=list)
    entity_memory: list[int] = field(default_factory=list)
    last_result: TurnResult | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def remember(self, entity_ids: list[int]) -> None:
        for eid in entity_ids:
            if eid not in self.entity_memory:
                self.entity_memory.append(eid)

    def snapshot(self) -> dict:
        return {
            "id": self.id,
            "created_at": self.created_at,
            "history": [
                {"speaker": t.speaker, "text": t.text()} for t in self.turns
            ],
            "entity_memory": list(self.entity_memory),
            "last_result": self.last_result.to_dict() if self.last_result else None,
        }


class RecommenderService:
    """Per-session dialogue state over an immutable trained pipeline."""

    def __init__(self, pipeline: RecommenderPipeline, top_k: int = 3,
                 journal_dir=None):
        self.pipeline = pipeline
        self.top_k = top_k
        self.journal_dir = Path(journal_dir) if journal_dir else None
        if self.journal_dir:
            self.journal_dir.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, Session] = {}
        self._store_lock = threading.Lock()

    def create_session(self) -> Session:
        session = Session(id=uuid.uuid4().hex, created_at=time.time())
        with self._store_lock:
            self._sessions[session.id] = session
        self._journal(session.id, {"event": "created", "at": session.created_at})
        return session

    def get_session(self, session_id: str) -> Session:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise SessionNotFound(session_id) from None

    def post_message(self, session_id: str, text: str) -> TurnResult:
        session = self.get_session(session_id)
        arts = self.pipeline.arts
        with session.lock:
            mentions = arts.linker.link(text)
            user_turn = Utterance(
                speaker="user",
                tokens=tokenize(text),
                item_mentions=[
                    m.entity_id for m in mentions if m.entity_id in set(arts.kg.item_ids)
                ],
                entity_mentions=[m.entity_id for m in mentions],
                mentions=mentions,
            )
            session.remember(user_turn.entity_mentions)

            blocks = _truncate_blocks(
                _context_blocks(session.turns + [user_turn]),
                arts.prompt_cfg.max_context_tokens,
            )
            context_tokens = [t for b in blocks for t in b[0]]
            out = self.pipeline.respond(
                context_tokens, list(session.entity_memory), top_k=self.top_k
            )

            response_text = " ".join(out.response_tokens)
            sys_mentions = arts.linker.link(response_text)
            system_turn = Utterance(
                speaker="system",
                tokens=out.response_tokens,
                item_mentions=[iid for iid, _ in out.recommendations][: out.template.slot_count]
                if out.template.slot_count else [],
                entity_mentions=[m.entity_id for m in sys_mentions],
                mentions=sys_mentions,
            )
            session.turns.append(user_turn)
            session.turns.append(system_turn)
            session.remember(system_turn.entity_mentions)

            result = TurnResult(
                template_tokens=out.template.tokens(arts.vocab),
                slot_count=out.template.slot_count,
                recommendations=[
                    {
                        "item_id": iid,
                        "name": arts.entity_names[iid],
                        "probability": prob,
                    }
                    for iid, prob in out.recommendations
                ],
                response=response_text,
                consistent=out.consistent,
            )
            session.last_result = result
        self._journal(session_id, {"event": "turn", "text": text,
                                   "result": result.to_dict()})
        return result

    def get_state(self, session_id: str) -> dict:
        return self.get_session(session_id).snapshot()

    def _journal(self, session_id: str, record: dict) -> None:
        if not self.journal_dir:
            return
        with open(self.journal_dir / f"{session_id}.jsonl", "a") as fh:
            fh.write(json.dumps(record) + "\n")


class _MessageIn(pydantic.BaseModel):
    text: str


def create_app(service: RecommenderService | None):
    from fastapi import FastAPI, HTTPException

    app = FastAPI(title="promptcrs")

    def _service() -> RecommenderService:
        if service is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return service

    @app.post("/sessions")
    def create_session():
        return {"id": _service().create_session().id}

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, body: _MessageIn):
        try:
            return _service().post_message(session_id, body.text).to_dict()
        except SessionNotFound:
            raise HTTPException(status_code=404, detail="unknown session")

    @app.get("/sessions/{session_id}")
    def get_state(session_id: str):
        try:
            return _service().get_state(session_id)
        except SessionNotFound:
            raise HTTPException(status_code=404, detail="unknown session")

    return app


def chat_loop(service: RecommenderService, input_fn=input, print_fn=print) -> None:
    """Terminal chat wrapping the same pipeline without HTTP."""
    session = service.create_session()
    print_fn("type a message ('quit' to exit)")
    while True:
        try:
            text = input_fn("you> ")
        except EOFError:
            break
        if text.strip().lower() in ("quit", "exit"):
            break
        result = service.post_message(session.id, text)
        print_fn(f"bot> {result.response}")
        if result.recommendations:
            for rec in result.recommendations:
                print_fn(f"     [{rec['probability']:.3f}] {rec['name']}")
