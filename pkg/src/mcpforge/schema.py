"""Small value types shared across modules: tool parameters, validation specs, tasks."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from string import Template
from typing import Optional

PARAM_TYPES = ("string", "integer", "number", "boolean")
VALIDATION_KINDS = ("exit_zero", "nonempty_stdout", "stdout_matches")
NAME_RE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)*$")


def utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def load_prompt(group: str, name: str = "v1") -> Template:
    text = resources.files("mcpforge").joinpath("assets", "prompts", group, f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


@dataclass
class Param:
    name: str
    type: str = "string"
    description: str = ""
    default: Optional[str] = None

    @property
    def required(self) -> bool:
        return self.default is None

    def to_dict(self) -> dict:
        return {"name": self.name, "type": self.type, "description": self.description, "default": self.default}

    @classmethod
    def from_dict(cls, d: dict) -> "Param":
        return cls(d["name"], d.get("type", "string"), d.get("description", ""), d.get("default"))


@dataclass
class ValidationSpec:
    kind: str = "exit_zero"
    pattern: Optional[str] = None

    def __post_init__(self):
        if self.kind not in VALIDATION_KINDS:
            raise ValueError(f"unknown validation kind {self.kind!r}")
        if self.kind == "stdout_matches":
            if not self.pattern:
                raise ValueError("stdout_matches requires a pattern")
            re.compile(self.pattern)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pattern": self.pattern}

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationSpec":
        return cls(d.get("kind", "exit_zero"), d.get("pattern"))


@dataclass
class ToolSpec:
    name: str
    purpose: str
    input_schema: list[Param] = field(default_factory=list)
    output_description: str = ""
    suggested_sources: list[str] = field(default_factory=list)
    validation_hint: ValidationSpec = field(default_factory=lambda: ValidationSpec("nonempty_stdout"))

    def __post_init__(self):
        if not NAME_RE.match(self.name or ""):
            raise ValueError(f"tool name {self.name!r} must be lowercase and underscore-separated")
        names = [p.name for p in self.input_schema]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate parameter names in {self.name}")

    def smoke_args(self) -> list[str]:
        return params_to_argv(self.input_schema, {})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "purpose": self.purpose,
            "input_schema": [p.to_dict() for p in self.input_schema],
            "output_description": self.output_description,
            "suggested_sources": list(self.suggested_sources),
            "validation_hint": self.validation_hint.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolSpec":
        return cls(
            name=d["name"],
            purpose=d.get("purpose", ""),
            input_schema=[Param.from_dict(p) for p in d.get("input_schema", [])],
            output_description=d.get("output_description", ""),
            suggested_sources=list(d.get("suggested_sources", [])),
            validation_hint=ValidationSpec.from_dict(d.get("validation_hint") or {}),
        )


def params_to_argv(schema: list[Param], arguments: dict) -> list[str]:
    """Render arguments as ``--name value`` pairs in schema order.

    Parameters the caller left out fall back to their declared default.
    """
    argv: list[str] = []
    for p in schema:
        value = arguments.get(p.name)
        if value is None:
            value = p.default
        if value is not None:
            if isinstance(value, bool):
                value = "true" if value else "false"
            argv += [f"--{p.name}", str(value)]
    return argv


@dataclass
class Task:
    query: str
    id: str = ""
    attachments: list[str] = field(default_factory=list)
    created_at: str = field(default_factory=utcnow)

    def __post_init__(self):
        if not self.query or not self.query.strip():
            raise ValueError("task query must be non-empty")
        if not self.id:
            self.id = derive_task_id(self.query)

    def to_dict(self) -> dict:
        return {"id": self.id, "query": self.query, "attachments": list(self.attachments), "created_at": self.created_at}


def derive_task_id(query: str) -> str:
    return "task-" + hashlib.sha256(query.strip().encode("utf-8")).hexdigest()[:12]

