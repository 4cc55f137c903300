"""Capability assessment: decide whether the task needs new tools and specify them."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .errors import BrainstormParseError
from .gateway import ChatMessage, Gateway
from .schema import NAME_RE, PARAM_TYPES, Param, Task, ToolSpec, ValidationSpec, load_prompt

logger = logging.getLogger(__name__)

MAX_PROPOSALS = 3
TOOL_NAME = "mcp_brainstorming"

_BLOCK_RE = re.compile(r"```assessment[ \t]*\n(.*?)```", re.S)
_INPUT_RE = re.compile(
    r"^(?P<name>[a-z_][a-z0-9_]*)\s*:\s*(?P<type>[a-z]+)"
    r"(?:\s*=\s*(?P<default>[^|]*?))?\s*(?:\|\s*(?P<desc>.*))?$"
)
_KEYS = ("GAP", "RATIONALE", "TOOL", "PURPOSE", "INPUT", "OUTPUT", "SOURCE", "VALIDATE")


@dataclass
class CapabilityAssessment:
    gap_found: bool
    rationale: str = ""
    proposals: list[ToolSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.gap_found != bool(self.proposals):
            raise BrainstormParseError(
                "gap_found=%s but %d proposals" % (self.gap_found, len(self.proposals))
            )

    def to_dict(self) -> dict:
        return {
            "gap_found": self.gap_found,
            "rationale": self.rationale,
            "proposals": [p.to_dict() for p in self.proposals],
        }


def _parse_validate(value: str) -> ValidationSpec:
    kind, _, pattern = value.strip().partition(" ")
    try:
        return ValidationSpec(kind, pattern.strip() or None)
    except (ValueError, re.error) as exc:
        raise BrainstormParseError(f"bad VALIDATE {value!r}: {exc}") from None


def _parse_input(value: str) -> Param:
    m = _INPUT_RE.match(value.strip())
    if not m:
        raise BrainstormParseError(f"bad INPUT {value!r}")
    if m["type"] not in PARAM_TYPES:
        raise BrainstormParseError(f"INPUT {m['name']}: unknown type {m['type']!r}")
    default = m["default"]
    return Param(m["name"], m["type"], (m["desc"] or "").strip(), default.strip() if default is not None else None)


def _finish(cur: dict) -> ToolSpec:
    if not cur.get("PURPOSE"):
        raise BrainstormParseError(f"tool {cur['TOOL']} has no PURPOSE")
    try:
        return ToolSpec(
            name=cur["TOOL"],
            purpose=cur["PURPOSE"],
            input_schema=cur["INPUT"],
            output_description=cur.get("OUTPUT", ""),
            suggested_sources=cur["SOURCE"],
            validation_hint=cur.get("VALIDATE") or ValidationSpec("nonempty_stdout"),
        )
    except ValueError as exc:
        raise BrainstormParseError(str(exc)) from None


def parse_assessment(text: str) -> CapabilityAssessment:
    """Parse the fenced ``assessment`` block of a brainstorm reply."""
    m = _BLOCK_RE.search(text)
    if not m:
        raise BrainstormParseError("no ```assessment block found")
    gap = None
    rationale = ""
    proposals: list[ToolSpec] = []
    cur: dict | None = None
    for raw in m.group(1).splitlines():
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        key = key.strip().upper()
        if not sep or key not in _KEYS:
            raise BrainstormParseError(f"unexpected line {line!r}")
        value = value.strip()
        if key == "GAP":
            if value.lower() not in ("yes", "no", "true", "false"):
                raise BrainstormParseError(f"GAP must be yes or no, got {value!r}")
            gap = value.lower() in ("yes", "true")
        elif key == "RATIONALE":
            rationale = value
        elif key == "TOOL":
            if cur is not None:
                proposals.append(_finish(cur))
            if not NAME_RE.match(value):
                raise BrainstormParseError(f"tool name {value!r} must be lowercase_underscore")
            cur = {"TOOL": value, "INPUT": [], "SOURCE": []}
        else:
            if cur is None:
                raise BrainstormParseError(f"{key} outside of a TOOL group")
            if key == "INPUT":
                cur["INPUT"].append(_parse_input(value))
            elif key == "SOURCE":
                cur["SOURCE"].append(value)
            elif key == "VALIDATE":
                cur["VALIDATE"] = _parse_validate(value)
            else:
                cur[key] = value
    if cur is not None:
        proposals.append(_finish(cur))
    if gap is None:
        raise BrainstormParseError("missing GAP field")
    names = [p.name for p in proposals]
    if len(names) != len(set(names)):
        raise BrainstormParseError("duplicate tool names in proposals")
    if len(proposals) > MAX_PROPOSALS:
        logger.info("dropping %d proposals beyond the limit of %d", len(proposals) - MAX_PROPOSALS, MAX_PROPOSALS)
        proposals = proposals[:MAX_PROPOSALS]
    return CapabilityAssessment(gap, rationale, proposals)


def build_messages(task: Task, framework_description: str, registry_summary: str) -> list[ChatMessage]:
    # registry_summary is usually already part of framework_description; include it only once
    desc = framework_description
    if registry_summary and registry_summary not in desc:
        desc = f"{desc}\n{registry_summary}"
    prompt = load_prompt("brainstorm").safe_substitute(framework_description=desc, query=task.query)
    return [ChatMessage("user", prompt)]


def assess(gateway: Gateway, task: Task, framework_description: str, registry_summary: str) -> CapabilityAssessment:
    if not framework_description or not registry_summary:
        raise ValueError("framework_description and registry_summary must be non-empty")
    messages = build_messages(task, framework_description, registry_summary)
    reply = gateway.chat("brainstorm", messages).content
    try:
        return parse_assessment(reply)
    except BrainstormParseError as exc:
        logger.info("brainstorm reply unparseable (%s); re-asking once", exc)
        messages = messages + [
            ChatMessage("assistant", reply),
            ChatMessage("user", f"Your reply could not be parsed: {exc}. Answer again with exactly one ```assessment block."),
        ]
        return parse_assessment(gateway.chat("brainstorm", messages).content)
