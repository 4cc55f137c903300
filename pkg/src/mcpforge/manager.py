"""The coordinating agent loop.

Each task starts with capability assessment, then alternates model decisions
and tool dispatch until the model emits ``FINAL:`` or the loop budget runs
out.  Everything is appended to ``<workdir>/transcripts/<task_id>.jsonl``.

Reply grammar (one action per reply)::

    THOUGHT: free text, optional
    ACTION: <tool_name> key=value key2="quoted value"
    FINAL: <answer>
"""
from __future__ import annotations

import json
import logging
import re
import shlex
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from . import brainstorm
from .brainstorm import CapabilityAssessment
from .envman import EnvManager
from .errors import (
    ActionParseError,
    BackendUnavailable,
    EmptyQuery,
    FetchError,
    LoopBudgetExceeded,
    MCPForgeError,
    ToolSynthesisFailed,
)
from .gateway import ChatMessage, Gateway
from .mcpbox import REUSE_THRESHOLD, MCPRecord, Registry
from .mcphost import ToolInvoker, check_arguments
from .runner import DEFAULT_TIMEOUT, ToolSynthesizer
from .schema import Task, ToolSpec, load_prompt, utcnow
from .scriptgen import RetrievedContext, write_bundle
from .webagent import WebAgent

logger = logging.getLogger(__name__)

LOOP_BUDGET = 12
ACTORS = ("manager", "webagent", "brainstorm", "scriptgen", "envman", "runner", "mcpbox", "mcphost")
EVENT_KINDS = ("thought", "tool_call", "observation", "final", "error")
TIME_KEYS = frozenset({"timestamp", "created_at", "fetched_at", "duration"})
OBSERVATION_LIMIT = 6000
CODE_HOSTS = ("github.com", "gitlab.com", "bitbucket.org")

_LINE_RE = re.compile(r"^(THOUGHT|ACTION|FINAL)\s*:\s?(.*)$")


@dataclass
class TranscriptEvent:
    seq: int
    timestamp: str
    actor: str
    kind: str
    payload: dict

    def to_dict(self) -> dict:
        return {"seq": self.seq, "timestamp": self.timestamp, "actor": self.actor, "kind": self.kind,
                "payload": self.payload}


class Transcript:
    """Append-only event log; each event is written and flushed immediately."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self.events: list[TranscriptEvent] = []
        self._fh = None
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, actor: str, kind: str, payload: dict) -> TranscriptEvent:
        if actor not in ACTORS:
            raise ValueError(f"unknown actor {actor!r}")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        with self._lock:
            event = TranscriptEvent(len(self.events) + 1, utcnow(), actor, kind, payload)
            self.events.append(event)
            if self._fh:
                self._fh.write(json.dumps(event.to_dict(), ensure_ascii=False) + "\n")
                self._fh.flush()
        return event

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def rotate(path: Path) -> None:
    """Move an earlier transcript of the same task out of the way (<id>.1.jsonl, <id>.2.jsonl, ...)."""
    if not path.exists():
        return
    n = 1
    while path.with_name(f"{path.stem}.{n}.jsonl").exists():
        n += 1
    path.rename(path.with_name(f"{path.stem}.{n}.jsonl"))


def read_transcript(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").split("\n") if line.strip()]


def mask_timestamps(obj: Any) -> Any:
    """Replace every time-valued field (timestamps and durations) with a fixed marker."""
    if isinstance(obj, dict):
        return {k: ("<masked>" if k in TIME_KEYS else mask_timestamps(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [mask_timestamps(v) for v in obj]
    return obj


def masked_transcript_text(path: str | Path) -> str:
    return "".join(json.dumps(mask_timestamps(e), ensure_ascii=False) + "\n" for e in read_transcript(path))


@dataclass
class AugmentedPrompt:
    task_id: str
    system_preamble: str
    framework_description: str
    user_query: str


@dataclass
class AgentAction:
    kind: str
    tool_name: Optional[str] = None
    arguments: dict = field(default_factory=dict)
    text: str = ""
    raw: str = ""


@dataclass
class FinalAnswer:
    task_id: str
    answer_text: str
    supporting_event_seqs: list[int] = field(default_factory=list)
    transcript_path: Optional[Path] = None


def parse_action(reply: str, tool_names) -> AgentAction:
    thought: list[str] = []
    action_line = None
    final_lines: Optional[list[str]] = None
    current = None
    for line in reply.strip().splitlines():
        m = _LINE_RE.match(line.strip())
        if m:
            key, rest = m.group(1), m.group(2)
            if key == "THOUGHT":
                current = "thought"
                thought.append(rest)
            elif key == "ACTION":
                if action_line is not None or final_lines is not None:
                    raise ActionParseError("reply must contain exactly one ACTION or FINAL")
                action_line, current = rest.strip(), "action"
            else:
                if action_line is not None or final_lines is not None:
                    raise ActionParseError("reply must contain exactly one ACTION or FINAL")
                final_lines, current = [rest], "final"
        elif current == "thought":
            thought.append(line)
        elif current == "final":
            final_lines.append(line)
        elif line.strip() and current == "action":
            raise ActionParseError("ACTION must fit on one line")
    text = "\n".join(thought).strip()
    if final_lines is not None:
        answer = "\n".join(final_lines).strip()
        if not answer:
            raise ActionParseError("FINAL answer is empty")
        return AgentAction("final", text=answer, raw=reply)
    if action_line is not None:
        try:
            tokens = shlex.split(action_line)
        except ValueError as exc:
            raise ActionParseError(f"cannot tokenize ACTION: {exc}") from None
        if not tokens:
            raise ActionParseError("ACTION names no tool")
        name, args = tokens[0], {}
        if name not in tool_names:
            raise ActionParseError(f"unknown tool {name!r}; available: {', '.join(sorted(tool_names))}")
        for tok in tokens[1:]:
            key, sep, value = tok.partition("=")
            if not sep or not key:
                raise ActionParseError(f"argument {tok!r} is not key=value")
            args[key] = value
        return AgentAction("call_tool", tool_name=name, arguments=args, text=text, raw=reply)
    if text:
        return AgentAction("think", text=text, raw=reply)
    raise ActionParseError("reply contains no THOUGHT, ACTION or FINAL line")


def _clip(text: str, limit: int = OBSERVATION_LIMIT) -> str:
    return text if len(text) <= limit else text[:limit] + f"\n[... {len(text) - limit} more characters]"


BASE_TOOLS = {
    "web_search": "query=<text> source=<web|code_host>: ranked search results",
    "visit_page": "url=<url>: open a page in the text browser (first viewport)",
    "page_down": "scroll the open page one viewport down",
    "page_up": "scroll the open page one viewport up",
    "generate_tool": "name=<proposal name>: build, validate and register a tool proposed during assessment",
}


class Manager:
    def __init__(
        self,
        gateway: Gateway,
        registry: Registry,
        envman: EnvManager,
        webagent: WebAgent,
        workdir: str | Path,
        *,
        loop_budget: int = LOOP_BUDGET,
        reuse_threshold: float = REUSE_THRESHOLD,
        exec_timeout: float = DEFAULT_TIMEOUT,
    ):
        self.gateway = gateway
        self.registry = registry
        self.envman = envman
        self.webagent = webagent
        self.workdir = Path(workdir)
        self.loop_budget = loop_budget
        self.reuse_threshold = reuse_threshold
        self.exec_timeout = exec_timeout
        self.transcript = Transcript()
        self._steps = 0
        self._assessment: Optional[CapabilityAssessment] = None
        self._reuse: dict[str, str] = {}
        self._task: Optional[Task] = None

    # -- prompt ----------------------------------------------------------
    def tool_names(self) -> set[str]:
        return set(BASE_TOOLS) | {r.name for r in self.registry.records.values()}

    def _mcp_signature(self, rec: MCPRecord) -> str:
        args = " ".join(f"{p.name}=<{p.type}>" for p in rec.input_schema)
        return f"{rec.name} {args}".strip() + f": {rec.description}"

    def build_augmented_prompt(self, task: Task, registry_summary: str) -> AugmentedPrompt:
        caps = [f"- {brainstorm.TOOL_NAME}: capability assessment (runs automatically at task start)"]
        caps += [f"- {name} {desc}" if "=" in desc else f"- {name}: {desc}" for name, desc in BASE_TOOLS.items()]
        caps += [f"- {self._mcp_signature(r)}" for r in self.registry.ordered()]
        if registry_summary.startswith("Registered MCPs:"):
            registry_section = registry_summary
        else:
            registry_section = "Registered MCPs:\n" + registry_summary
        framework = "Available capabilities:\n" + "\n".join(caps) + "\n\n" + registry_section
        query = f"Task: {task.query}"
        if task.attachments:
            query += "\nAttachments:\n" + "\n".join(f"- {a}" for a in task.attachments)
        return AugmentedPrompt(task.id, load_prompt("manager").template.strip(), framework, query)

    def _messages(self, history: list[TranscriptEvent], prompt: AugmentedPrompt) -> list[ChatMessage]:
        messages = [
            ChatMessage("system", prompt.system_preamble + "\n\n" + prompt.framework_description),
            ChatMessage("user", prompt.user_query),
        ]
        for ev in history:
            if ev.actor == "manager" and "raw" in ev.payload:
                messages.append(ChatMessage("assistant", ev.payload["raw"]))
            elif "observation" in ev.payload:
                messages.append(ChatMessage("user", f"OBSERVATION ({ev.actor}): {ev.payload['observation']}"))
        return messages

    # -- loop ------------------------------------------------------------
    def step(self, history: list[TranscriptEvent], prompt: AugmentedPrompt) -> AgentAction:
        if self._steps >= self.loop_budget:
            raise LoopBudgetExceeded(self.loop_budget)
        self._steps += 1
        messages = self._messages(history, prompt)
        reply = self.gateway.chat("manager", messages).content
        names = self.tool_names()
        try:
            return parse_action(reply, names)
        except ActionParseError as exc:
            logger.info("manager reply unparseable (%s); re-asking once", exc)
            messages += [
                ChatMessage("assistant", reply),
                ChatMessage("user", f"Your reply could not be parsed: {exc}. Reply with one THOUGHT and exactly one ACTION or FINAL line."),
            ]
            return parse_action(self.gateway.chat("manager", messages).content, names)

    def emit(self, actor: str, kind: str, payload: dict) -> TranscriptEvent:
        return self.transcript.append(actor, kind, payload)

    def run_task(self, task: Task) -> FinalAnswer:
        path = self.workdir / "transcripts" / f"{task.id}.jsonl"
        rotate(path)
        self.transcript = Transcript(path)
        self._steps = 0
        self._assessment = None
        self._reuse = {}
        self._task = task
        self.envman.emit = self.emit
        try:
            return self._run(task, path)
        except Exception as exc:
            self.emit("manager", "error", {"error": type(exc).__name__, "message": str(exc)})
            raise
        finally:
            self.transcript.close()

    def _run(self, task: Task, path: Path) -> FinalAnswer:
        summary = self.registry.summarize()
        prompt = self.build_augmented_prompt(task, summary)
        self.emit("manager", "thought", {"task": task.to_dict(), "framework_description": prompt.framework_description})
        self.emit("manager", "tool_call", {"tool": brainstorm.TOOL_NAME, "arguments": {}})
        assessment = brainstorm.assess(self.gateway, task, prompt.framework_description, summary)
        self._assessment = assessment
        self.emit("brainstorm", "observation", {"assessment": assessment.to_dict(),
                                                "observation": self._render_assessment(assessment)})
        for spec in assessment.proposals:
            self._offer_reuse(spec)
        while True:
            action = self.step(self.transcript.events, prompt)
            if action.kind == "final":
                seqs = [e.seq for e in self.transcript.events if e.kind == "observation" and "observation" in e.payload]
                self.emit("manager", "final", {"answer": action.text, "supporting_event_seqs": seqs, "raw": action.raw})
                return FinalAnswer(task.id, action.text, seqs, path)
            if action.kind == "think":
                self.emit("manager", "thought", {"thought": action.text, "raw": action.raw})
                continue
            self.emit("manager", "tool_call", {"tool": action.tool_name, "arguments": action.arguments,
                                               "thought": action.text, "raw": action.raw})
            self._dispatch(action)

    def _render_assessment(self, a: CapabilityAssessment) -> str:
        if not a.gap_found:
            return f"No capability gap: {a.rationale}"
        lines = [f"Capability gap: {a.rationale}", "Proposed tools (build with ACTION: generate_tool name=<name>):"]
        for p in a.proposals:
            params = ", ".join(f"{x.name}:{x.type}" for x in p.input_schema) or "no inputs"
            lines.append(f"- {p.name} ({params}): {p.purpose}")
        return "\n".join(lines)

    def _offer_reuse(self, spec: ToolSpec) -> None:
        matches = self.registry.lookup(spec.purpose, self.reuse_threshold)
        exact = self.registry.get(spec.name)
        if exact is not None and all(rid != exact.id for rid, _ in matches):
            matches.insert(0, (exact.id, 1.0))
        if not matches:
            return
        rid, score = matches[0]
        rec = self.registry.records[rid]
        self._reuse[spec.name] = rid
        self.emit("mcpbox", "observation", {
            "op": "lookup",
            "query": spec.purpose,
            "matches": [{"id": i, "score": round(s, 6)} for i, s in matches],
            "observation": f"Registered MCP {rec.name} (score {score:.2f}) already covers proposal {spec.name}; "
                           f"call it directly: ACTION: {self._mcp_signature(rec)}",
        })

    def _observe(self, actor: str, text: str, **extra) -> None:
        self.emit(actor, "observation", {**extra, "observation": _clip(text)})

    def _dispatch(self, action: AgentAction) -> None:
        name, args = action.tool_name, action.arguments
        handlers: dict[str, Callable[[dict], None]] = {
            "web_search": self._web_search,
            "visit_page": self._visit,
            "page_down": lambda a: self._page("down"),
            "page_up": lambda a: self._page("up"),
            "generate_tool": self._generate_tool,
        }
        try:
            if name in handlers:
                handlers[name](args)
            else:
                self._call_mcp(name, args)
        except (FetchError, EmptyQuery, BackendUnavailable, ValueError, KeyError) as exc:
            actor = "webagent" if name in ("web_search", "visit_page", "page_down", "page_up") else "manager"
            self.emit(actor, "error", {"tool": name, "error": type(exc).__name__,
                                       "observation": f"{name} failed: {exc}"})

    # -- web -------------------------------------------------------------
    def _web_search(self, args: dict) -> None:
        source = args.get("source", "web")
        results = self.webagent.search(args.get("query", ""), source)
        lines = [f"{i}. {r.title} | {r.url}\n   {r.snippet}" for i, r in enumerate(results, 1)]
        self._observe("webagent", "\n".join(lines) or "no results",
                      op="search", query=args.get("query", ""), source=source, results=[r.to_dict() for r in results])

    def _visit(self, args: dict) -> None:
        view = self.webagent.visit(args.get("url", ""))
        self._observe("webagent", view.render(), op="visit", view=view.to_dict())

    def _page(self, direction: str) -> None:
        browser = self.webagent.browser
        if browser.current is None:
            raise FetchError("", "no page is open")
        view = browser.page_move(browser.current, direction)
        self._observe("webagent", view.render(), op=f"page_{direction}", view=view.to_dict())

    def research(self, spec: ToolSpec) -> list[RetrievedContext]:
        """Turn a proposal's suggested sources into retrieved excerpts (URLs visited, queries searched on code hosts)."""
        contexts = []
        for source in spec.suggested_sources:
            if source.startswith(("http://", "https://")):
                url = source
            else:
                self.emit("webagent", "tool_call", {"tool": "search", "query": source, "source": "code_host"})
                try:
                    results = self.webagent.search(source, "code_host")
                except (EmptyQuery, BackendUnavailable) as exc:
                    self.emit("webagent", "error", {"op": "search", "query": source, "message": str(exc)})
                    continue
                self.emit("webagent", "observation", {"op": "search", "query": source,
                                                      "results": [r.to_dict() for r in results]})
                if not results:
                    continue
                url = results[0].url
            self.emit("webagent", "tool_call", {"tool": "visit", "url": url})
            try:
                view = self.webagent.visit(url)
            except FetchError as exc:
                self.emit("webagent", "error", {"op": "visit", "url": url, "message": str(exc)})
                continue
            self.emit("webagent", "observation", {"op": "visit", "view": view.to_dict()})
            text = self.webagent.browser.full_text(url)
            if view.is_error or not text.strip():
                continue
            kind = "readme" if any(h in url for h in CODE_HOSTS) else "webpage"
            contexts.append(RetrievedContext(url, kind, text))
        return contexts

    # -- tool synthesis --------------------------------------------------
    def _generate_tool(self, args: dict) -> None:
        name = args.get("name", "")
        proposals = {p.name: p for p in (self._assessment.proposals if self._assessment else [])}
        if name not in proposals:
            raise KeyError(f"no proposal named {name!r}; proposals: {', '.join(proposals) or 'none'}")
        spec = proposals[name]
        rid = self._reuse.get(name)
        if rid is None:
            existing = self.registry.get(name)
            rid = existing.id if existing else None
        if rid is not None:
            rec = self.registry.records[rid]
            self._observe("mcpbox", f"Reusing registered MCP {rec.name} ({rec.id}) instead of generating a new tool. "
                                    f"Call it with: ACTION: {self._mcp_signature(rec)}", op="reuse", id=rec.id)
            return
        retrieved = self.research(spec)
        synth = ToolSynthesizer(self.gateway, self.envman, timeout=self.exec_timeout, emit=self.emit)
        try:
            out = synth.synthesize(spec, retrieved, self._task.id)
        except ToolSynthesisFailed as exc:
            self.emit("manager", "error", {"tool": "generate_tool", "tool_name": name,
                                           "reports": [r.to_dict() for r in exc.reports]})
            raise
        bundle_dir = write_bundle(out.bundle, self.workdir / "bundles" / spec.name)
        record = MCPRecord(
            name=spec.name,
            description=spec.purpose,
            input_schema=spec.input_schema,
            bundle_ref=str(bundle_dir),
            env_profile=out.profile,
            provenance={"task_id": self._task.id, "model_ids": dict(self.gateway.model_ids), "created_at": utcnow()},
        )
        self.emit("mcpbox", "tool_call", {"tool": "register", "name": spec.name})
        rid = self.registry.register(record)
        self._observe(
            "mcpbox",
            f"Tool {spec.name} validated and registered as MCP {rid}. Smoke run output:\n{_clip(out.result.stdout, 2000)}\n"
            f"Call it with: ACTION: {self._mcp_signature(self.registry.records[rid])}",
            op="register", id=rid, attempts=len(out.reports) + 1,
        )

    def _call_mcp(self, name: str, args: dict) -> None:
        rec = self.registry.get(name)
        if rec is None:
            raise KeyError(f"no registered MCP named {name!r}")
        problem = check_arguments(rec, args)
        if problem:
            raise ValueError(problem)
        invoker = ToolInvoker(self.registry, self.envman, self.exec_timeout)
        self.emit("mcphost", "tool_call", {"tool": name, "id": rec.id, "arguments": args})
        try:
            result = invoker.invoke(rec, args)
        except MCPForgeError as exc:
            self.emit("mcphost", "error", {"tool": name, "error": type(exc).__name__,
                                           "observation": f"{name} failed: {exc}"})
            return
        if result.status == "success":
            text = result.stdout
        else:
            text = f"{name} failed ({result.status}, exit {result.exit_code}):\n{result.stderr[-2000:]}"
        self._observe("mcphost", text, result=result.to_dict(), usage_count=rec.usage_count)
