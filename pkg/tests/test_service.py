import pytest
from fastapi.testclient import TestClient

from mcpforge.service import create_app

from conftest import case_a_config, case_a_task


@pytest.fixture
def client(tmp_path):
    return TestClient(create_app(case_a_config(tmp_path)))


def post_case_a(client):
    task = case_a_task()
    return client.post("/tasks", json={"query": task.query, "id": task.id})


def test_health(client):
    assert client.get("/health").json()["status"] == "ok"


def test_task_then_registry(client):
    r = post_case_a(client)
    assert r.status_code == 200, r.text
    body = r.json()
    assert body["answer"] == "100000000" and body["task_id"] == "case-a"

    events = client.get("/tasks/case-a/transcript").json()
    assert [e["seq"] for e in events] == list(range(1, len(events) + 1))
    assert body["supporting_event_seqs"][-1] <= len(events)

    mcps = client.get("/mcps").json()
    assert [(m["name"], m["usage_count"]) for m in mcps] == [("youtube_subtitle_crawler", 1)]
    detail = client.get(f"/mcps/{mcps[0]['id']}").json()
    assert detail["input_schema"][0]["name"] == "video_id"
    assert detail["env_name"].startswith("alita-")

    hits = client.get("/mcps/lookup", params={"q": "extract the subtitles of a YouTube video"}).json()
    assert hits[0]["name"] == "youtube_subtitle_crawler"


def test_call_mcp(client):
    post_case_a(client)
    r = client.post("/mcps/youtube_subtitle_crawler/call", json={"arguments": {"video_id": "vr360-march-2018"}})
    assert r.status_code == 200
    assert "100000000 years ago" in r.json()["stdout"]
    assert r.json()["usage_count"] == 2
    bad = client.post("/mcps/youtube_subtitle_crawler/call", json={"arguments": {"volume": 11}})
    assert bad.status_code == 422


def test_errors(client):
    assert client.post("/tasks", json={"query": ""}).status_code == 422
    assert client.get("/tasks/none/transcript").status_code == 404
    assert client.get("/mcps/none").status_code == 404
    assert client.get("/mcps/lookup", params={"q": "x", "threshold": 2}).status_code == 422
    assert client.get("/mcps").json() == []


def test_pipeline_failure_is_422(tmp_path):
    cfg = case_a_config(tmp_path)
    cfg.loop_budget = 1
    client = TestClient(create_app(cfg))
    r = post_case_a(client)
    assert r.status_code == 422
    assert "LoopBudgetExceeded" in r.json()["detail"]
