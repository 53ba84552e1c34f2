import json

import pytest
from fastapi.testclient import TestClient

from promptcrs.pipeline import RecommenderPipeline
from promptcrs.service import (
    RecommenderService,
    SessionNotFound,
    chat_loop,
    create_app,
)
from promptcrs.training import load_artifacts


@pytest.fixture(scope="module")
def service(tiny_ckpt):
    arts = load_artifacts(tiny_ckpt.ckpt_dir, tiny_ckpt.data.dir)
    return RecommenderService(RecommenderPipeline(arts), top_k=3)


@pytest.fixture(scope="module")
def client(service):
    return TestClient(create_app(service))


def _an_entity_name(service):
    arts = service.pipeline.arts
    non_items = set(arts.entity_names) - set(arts.kg.item_ids)
    return min(non_items), arts.entity_names[min(non_items)]


def test_sessions_are_isolated(service):
    a = service.create_session()
    b = service.create_session()
    assert a.id != b.id
    service.post_message(a.id, "hello there")
    assert service.get_session(a.id).turns and not service.get_session(b.id).turns


def test_unknown_session_raises(service):
    with pytest.raises(SessionNotFound):
        service.post_message("nope", "hi")
    with pytest.raises(SessionNotFound):
        service.get_state("nope")


def test_turn_appends_user_then_system(service):
    s = service.create_session()
    result = service.post_message(s.id, "hello")
    assert [t.speaker for t in s.turns] == ["user", "system"]
    assert result.response == s.turns[-1].text()
    assert result.consistent in (True, False)
    if result.slot_count:
        assert len(result.recommendations) >= 1
        for rec in result.recommendations:
            assert set(rec) == {"item_id", "name", "probability"}
            assert 0.0 <= rec["probability"] <= 1.0
    else:
        assert result.recommendations == []


def test_entity_memory_accumulates_without_duplicates(service):
    eid, name = _an_entity_name(service)
    s = service.create_session()
    service.post_message(s.id, f"i enjoy {name}")
    assert eid in s.entity_memory
    before = list(s.entity_memory)
    service.post_message(s.id, f"really, {name} is great")
    # mentioning the same entity again must not duplicate it
    assert s.entity_memory.count(eid) == 1
    assert s.entity_memory[: len(before)] == before


def test_snapshot_round_trips_through_json(service):
    s = service.create_session()
    service.post_message(s.id, "recommend something")
    snap = service.get_state(s.id)
    assert json.loads(json.dumps(snap)) == snap
    assert snap["id"] == s.id
    assert len(snap["history"]) == 2
    assert snap["last_result"]["response"] == s.last_result.response


def test_journal_written(tiny_ckpt, tmp_path):
    arts = load_artifacts(tiny_ckpt.ckpt_dir, tiny_ckpt.data.dir)
    svc = RecommenderService(RecommenderPipeline(arts), journal_dir=tmp_path)
    s = svc.create_session()
    svc.post_message(s.id, "hi")
    lines = (tmp_path / f"{s.id}.jsonl").read_text().splitlines()
    events = [json.loads(l)["event"] for l in lines]
    assert events == ["created", "turn"]


def test_http_turn_cycle(client):
    sid = client.post("/sessions").json()["id"]
    r = client.post(f"/sessions/{sid}/messages", json={"text": "hello"})
    assert r.status_code == 200
    body = r.json()
    assert set(body) == {"template", "slot_count", "recommendations",
                         "response", "consistent"}
    state = client.get(f"/sessions/{sid}").json()
    assert state["last_result"]["response"] == body["response"]
    assert len(state["history"]) == 2


def test_http_unknown_session_404(client):
    assert client.post("/sessions/zzz/messages", json={"text": "x"}).status_code == 404
    assert client.get("/sessions/zzz").status_code == 404


def test_http_503_without_model():
    bare = TestClient(create_app(None))
    assert bare.post("/sessions").status_code == 503


def test_chat_loop_quits_and_prints(service):
    lines = iter(["hello", "quit"])
    printed = []
    chat_loop(service, input_fn=lambda _: next(lines), print_fn=printed.append)
    assert any(p.startswith("bot>") for p in printed)
