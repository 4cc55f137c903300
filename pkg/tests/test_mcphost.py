import io
import json
import shutil
import subprocess
import sys

import pytest

from mcpforge.config import build_envman
from mcpforge.mcpbox import Registry
from mcpforge.mcphost import (
    INTERNAL_ERROR,
    INVALID_PARAMS,
    INVALID_REQUEST,
    METHOD_NOT_FOUND,
    PARSE_ERROR,
    PROTOCOL_VERSION,
    McpSession,
    ToolInvoker,
    encode,
    tool_descriptor,
)
from mcpforge.schema import Param

from conftest import FIXTURES, WHEELHOUSE, case_a_config, make_record, run_case_a

GOLDEN = FIXTURES / "mcp-golden"


def normalize_ids(lines):
    """Re-number request ids in order of appearance so transcripts compare independent of client id choice."""
    mapping, out = {}, []
    for line in lines:
        msg = json.loads(line)
        if "id" in msg and msg["id"] is not None:
            msg["id"] = mapping.setdefault(json.dumps(msg["id"]), len(mapping) + 1)
        out.append(encode(msg))
    return out


@pytest.fixture(scope="module")
def case_a_workdir(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("case-a")
    run_case_a(workdir)
    return workdir


@pytest.fixture
def workdir(case_a_workdir, tmp_path):
    # each test gets its own copy so usage counters do not leak between tests
    dest = tmp_path / "wd"
    shutil.copytree(case_a_workdir, dest, symlinks=True)
    return dest


def session_for(workdir, key="youtube_subtitle_crawler"):
    cfg = case_a_config(workdir)
    reg = Registry(cfg.registry_path)
    return McpSession(reg, key, ToolInvoker(reg, build_envman(cfg), 30)), reg


def serve_lines(session, lines):
    out = io.StringIO()
    session.serve(io.StringIO("".join(line + "\n" for line in lines)), out)
    return out.getvalue().splitlines()


def test_golden_transcript_in_process(workdir):
    session, _ = session_for(workdir)
    requests = GOLDEN.joinpath("requests.jsonl").read_text().splitlines()
    got = serve_lines(session, requests)
    want = GOLDEN.joinpath("responses.jsonl").read_text().splitlines()
    assert normalize_ids(got) == normalize_ids(want)


def test_golden_transcript_with_other_ids(workdir):
    session, _ = session_for(workdir)
    requests = []
    for line in GOLDEN.joinpath("requests.jsonl").read_text().splitlines():
        msg = json.loads(line)
        if "id" in msg:
            msg["id"] = f"req-{msg['id'] * 7}"
        requests.append(json.dumps(msg))
    got = serve_lines(session, requests)
    want = GOLDEN.joinpath("responses.jsonl").read_text().splitlines()
    assert normalize_ids(got) == normalize_ids(want)


def test_golden_transcript_over_stdio(workdir):
    proc = subprocess.run(
        [sys.executable, "-m", "mcpforge.cli", "mcp", "serve", "youtube_subtitle_crawler",
         "--workdir", str(workdir), "--provider", "stub", "--wheelhouse", str(WHEELHOUSE)],
        input=GOLDEN.joinpath("requests.jsonl").read_bytes(), capture_output=True, timeout=60,
    )
    assert proc.returncode == 0, proc.stderr.decode()
    assert proc.stdout == GOLDEN.joinpath("responses.jsonl").read_bytes()


def test_initialize_shape(workdir):
    session, _ = session_for(workdir)
    resp = session.handle({"jsonrpc": "2.0", "id": 1, "method": "initialize", "params": {}})
    assert resp["result"]["protocolVersion"] == PROTOCOL_VERSION == "2024-11-05"
    assert "tools" in resp["result"]["capabilities"]
    assert resp["result"]["serverInfo"]["name"]


def test_tools_list_matches_record(workdir):
    session, reg = session_for(workdir)
    tools = session.handle({"jsonrpc": "2.0", "id": 2, "method": "tools/list"})["result"]["tools"]
    assert tools == [tool_descriptor(reg.get("youtube_subtitle_crawler"))]
    assert tools[0]["inputSchema"]["type"] == "object"


def test_call_increments_usage_only_on_success(workdir):
    session, reg = session_for(workdir)
    before = reg.get("youtube_subtitle_crawler").usage_count
    ok = session.handle({"jsonrpc": "2.0", "id": 3, "method": "tools/call",
                         "params": {"name": "youtube_subtitle_crawler", "arguments": {}}})
    assert ok["result"]["isError"] is False
    assert "100000000" in ok["result"]["content"][0]["text"]
    bad = session.handle({"jsonrpc": "2.0", "id": 4, "method": "tools/call",
                          "params": {"name": "youtube_subtitle_crawler", "arguments": {"video_id": "zzz"}}})
    assert bad["result"]["isError"] is True
    assert Registry(reg.root).get("youtube_subtitle_crawler").usage_count == before + 1


@pytest.mark.parametrize("params,needle", [
    ({"name": "other_tool", "arguments": {}}, "unknown tool"),
    ({"name": "youtube_subtitle_crawler", "arguments": {"colour": "red"}}, "unknown arguments"),
    ({"name": "youtube_subtitle_crawler", "arguments": []}, "arguments must be an object"),
])
def test_invalid_params(workdir, params, needle):
    session, _ = session_for(workdir)
    resp = session.handle({"jsonrpc": "2.0", "id": 9, "method": "tools/call", "params": params})
    assert resp["error"]["code"] == INVALID_PARAMS
    assert needle in resp["error"]["message"]


def test_missing_required_argument(tmp_path):
    reg = Registry(tmp_path / "reg")
    reg.register(make_record(tmp_path, "needs_arg", "d", [Param("path", "string", "file")]))
    session = McpSession(reg, "needs_arg", invoker=None)
    resp = session.handle({"jsonrpc": "2.0", "id": 1, "method": "tools/call",
                           "params": {"name": "needs_arg", "arguments": {}}})
    assert resp["error"]["code"] == INVALID_PARAMS
    assert tool_descriptor(reg.get("needs_arg"))["inputSchema"]["required"] == ["path"]


def test_protocol_errors(workdir):
    session, _ = session_for(workdir)
    lines = [
        "{not json",
        json.dumps({"id": 1, "method": "tools/list"}),
        json.dumps({"jsonrpc": "2.0", "id": 2, "method": "prompts/get"}),
        json.dumps({"jsonrpc": "2.0", "method": "notifications/cancelled"}),
        json.dumps([1, 2]),
        "",
    ]
    replies = [json.loads(x) for x in serve_lines(session, lines)]
    assert [r["error"]["code"] for r in replies] == [PARSE_ERROR, INVALID_REQUEST, METHOD_NOT_FOUND, INVALID_REQUEST]
    assert replies[2]["id"] == 2


def test_internal_error_keeps_session_alive(workdir):
    session, _ = session_for(workdir)

    class Exploding:
        def invoke(self, record, arguments):
            raise RuntimeError("kaboom")

    session.invoker = Exploding()
    lines = [
        json.dumps({"jsonrpc": "2.0", "id": 1, "method": "tools/call",
                    "params": {"name": "youtube_subtitle_crawler", "arguments": {}}}),
        json.dumps({"jsonrpc": "2.0", "id": 2, "method": "tools/list"}),
    ]
    replies = [json.loads(x) for x in serve_lines(session, lines)]
    assert replies[0]["error"]["code"] == INTERNAL_ERROR
    assert "tools" in replies[1]["result"]


def test_unknown_record(workdir):
    cfg = case_a_config(workdir)
    reg = Registry(cfg.registry_path)
    with pytest.raises(KeyError):
        McpSession(reg, "nope", None)


def test_encoding_is_compact_utf8():
    assert encode({"a": "é", "b": [1, 2]}) == '{"a":"é","b":[1,2]}'
