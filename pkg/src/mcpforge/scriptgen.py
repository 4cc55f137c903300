"""Generate tool bundles (tool script, environment script, cleanup script, entry command).

A scriptgen reply consists of header lines ``TOOL:``, ``ENV:`` and
``CLEANUP:`` each followed by a fenced code block, plus one ``ENTRY:`` line::

    TOOL:
    ```python
    print("hi")
    ```
    ENV:
    ```bash
    pip install requests
    ```
    ENTRY: python tool.py
"""
from __future__ import annotations

import logging
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import BundleParseError
from .gateway import ChatMessage, Gateway
from .schema import ToolSpec, load_prompt, utcnow

logger = logging.getLogger(__name__)

MAX_EXCERPT = 16_384
MAX_SCRIPT_BYTES = 64 * 1024
TRUNCATION_MARKER = "\n[... truncated ...]"

DEFAULT_CLEANUP = """\
#!/bin/sh
# default cleanup: environment teardown is performed by the provider when the env is destroyed;
# this script only clears the scratch directory it runs in
find . -mindepth 1 -maxdepth 1 ! -name 'tool.*' -exec rm -rf {} +
"""

_LANG_ALIASES = {
    "python": "python", "py": "python", "python3": "python",
    "bash": "bash", "sh": "bash", "shell": "bash",
    "javascript": "javascript", "js": "javascript", "node": "javascript",
}
_LANG_EXT = {"python": "py", "bash": "sh", "javascript": "js"}
_EXT_LANG = {v: k for k, v in _LANG_EXT.items()}

_SECTION_RE = re.compile(r"^(TOOL|ENV|CLEANUP)\s*:[^\n]*\n```([^\n`]*)\n(.*?)^```", re.M | re.S)
_ENTRY_RE = re.compile(r"^ENTRY\s*:\s*(.+)$", re.M)

# lexical deny-list: patterns over shell and python text
_DANGEROUS = [
    re.compile(r"\brm\s+(?:-[a-zA-Z]+\s+)*-[a-zA-Z]*[rR][a-zA-Z]*\s+(?:-[a-zA-Z]+\s+)*(?:/|~|\$HOME)(?:\s|\*|$|;)"),
    re.compile(r"\bmkfs(?:\.\w+)?\b"),
    re.compile(r"\bdd\b[^\n]*\bof=/dev/"),
    re.compile(r":\(\)\s*\{\s*:\|:&\s*\};:"),
]
_ABS_WRITES = [
    re.compile(r"(?<![<>\d&])>{1,2}\s*(/[^\s;|&]*)"),
    re.compile(r"\btee\s+(?:-a\s+)?(/[^\s;|&]*)"),
    re.compile(r"\b(?:cp|mv|install)\s+(?:-\S+\s+)*\S+\s+(/[^\s;|&]*)"),
    re.compile(r"\bopen\(\s*['\"](/[^'\"]*)['\"]\s*,\s*['\"][wax]"),
]
_ALLOWED_ABS = ("/dev/null", "/dev/stdout", "/dev/stderr")


def normalize_language(hint: str) -> str:
    hint = (hint or "").strip().lower()
    return _LANG_ALIASES.get(hint, hint or "python")


@dataclass
class RetrievedContext:
    source_url: str
    kind: str
    excerpt: str
    fetched_at: str = field(default_factory=utcnow)

    def __post_init__(self):
        if self.kind not in ("readme", "code", "webpage"):
            raise ValueError(f"unknown context kind {self.kind!r}")
        if not self.excerpt:
            raise ValueError("excerpt must be non-empty")
        if len(self.excerpt) > MAX_EXCERPT:
            self.excerpt = self.excerpt[: MAX_EXCERPT - len(TRUNCATION_MARKER)] + TRUNCATION_MARKER

    def to_dict(self) -> dict:
        return {"source_url": self.source_url, "kind": self.kind, "excerpt": self.excerpt, "fetched_at": self.fetched_at}


@dataclass
class ScriptBundle:
    tool_script: str
    env_setup_script: str
    cleanup_script: str = DEFAULT_CLEANUP
    entry_command: list[str] = field(default_factory=list)
    language_hint: str = "python"

    def __post_init__(self):
        self.language_hint = normalize_language(self.language_hint)

    @property
    def tool_filename(self) -> str:
        return "tool." + _LANG_EXT.get(self.language_hint, self.language_hint)

    def to_dict(self) -> dict:
        return {
            "tool_script": self.tool_script,
            "env_setup_script": self.env_setup_script,
            "cleanup_script": self.cleanup_script,
            "entry_command": list(self.entry_command),
            "language_hint": self.language_hint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptBundle":
        return cls(d["tool_script"], d["env_setup_script"], d.get("cleanup_script", DEFAULT_CLEANUP),
                   list(d.get("entry_command", [])), d.get("language_hint", "python"))


@dataclass
class AttemptReport:
    attempt_no: int
    error_summary: str
    strategy_applied: Optional[str] = None

    def __post_init__(self):
        if not 1 <= self.attempt_no <= 3:
            raise ValueError("attempt_no must be in 1..3")

    def to_dict(self) -> dict:
        return {"attempt_no": self.attempt_no, "error_summary": self.error_summary, "strategy_applied": self.strategy_applied}


@dataclass
class GenerationContext:
    tool_spec: ToolSpec
    retrieved: list[RetrievedContext] = field(default_factory=list)
    prior_attempts: list[AttemptReport] = field(default_factory=list)

    def __post_init__(self):
        numbers = [a.attempt_no for a in self.prior_attempts]
        if numbers != sorted(numbers):
            raise ValueError("prior_attempts must be ordered by attempt number")


def parse_bundle(text: str) -> ScriptBundle:
    sections: dict[str, tuple[str, str]] = {}
    for m in _SECTION_RE.finditer(text):
        sections.setdefault(m.group(1), (m.group(2).strip(), m.group(3)))
    issues = []
    if not sections.get("TOOL", ("", ""))[1].strip():
        issues.append("tool_script_missing")
    if not sections.get("ENV", ("", ""))[1].strip():
        issues.append("env_setup_missing")
    entry_m = _ENTRY_RE.search(text)
    entry: list[str] = []
    if entry_m:
        try:
            entry = shlex.split(entry_m.group(1).strip())
        except ValueError:
            issues.append("entry_unparseable")
    if not entry and "entry_unparseable" not in issues:
        issues.append("entry_missing")
    if issues:
        raise BundleParseError(issues)
    lang, tool = sections["TOOL"]
    cleanup = sections.get("CLEANUP", ("", ""))[1]
    return ScriptBundle(
        tool_script=tool,
        env_setup_script=sections["ENV"][1],
        cleanup_script=cleanup if cleanup.strip() else DEFAULT_CLEANUP,
        entry_command=entry,
        language_hint=lang or "python",
    )


def _format_prompt(ctx: GenerationContext) -> str:
    spec = ctx.tool_spec
    inputs = "\n".join(
        f"- {p.name} ({p.type})" + (f", default {p.default}" if p.default is not None else "") +
        (f": {p.description}" if p.description else "")
        for p in spec.input_schema
    ) or "- none"
    refs = "\n\n".join(f"[{r.kind}] {r.source_url}\n{r.excerpt}" for r in ctx.retrieved) or "none"
    prior = ""
    if ctx.prior_attempts:
        prior = "Previous attempts failed; fix these problems:\n" + "\n".join(
            f"attempt {a.attempt_no}: {a.error_summary}" for a in ctx.prior_attempts
        ) + "\n"
    return load_prompt("scriptgen").safe_substitute(
        name=spec.name, purpose=spec.purpose, inputs=inputs,
        output=spec.output_description or "text", references=refs, prior_attempts=prior,
    )


def generate(gateway: Gateway, ctx: GenerationContext) -> ScriptBundle:
    messages = [ChatMessage("user", _format_prompt(ctx))]
    reply = gateway.chat("scriptgen", messages, max_tokens=4096).content
    try:
        return parse_bundle(reply)
    except BundleParseError as exc:
        logger.info("bundle reply unparseable (%s); re-asking once", exc)
        messages += [
            ChatMessage("assistant", reply),
            ChatMessage("user", f"Your reply is missing: {', '.join(exc.issues)}. Reply again with TOOL, ENV, CLEANUP sections and an ENTRY line."),
        ]
        return parse_bundle(gateway.chat("scriptgen", messages, max_tokens=4096).content)


def _abs_write_targets(script: str) -> list[str]:
    hits = []
    for pat in _ABS_WRITES:
        for m in pat.finditer(script):
            target = m.group(1)
            if target not in _ALLOWED_ABS:
                hits.append(target)
    return hits


def validate_bundle(bundle: ScriptBundle, workdir: Optional[str | Path] = None) -> list[str]:
    """Static checks only; returns issue codes (empty when the bundle looks sane)."""
    issues = []
    if not bundle.tool_script.strip():
        issues.append("tool_script_empty")
    if not bundle.env_setup_script.strip():
        issues.append("env_setup_empty")
    if not bundle.entry_command:
        issues.append("entry_empty")
    elif not any(Path(tok).name == bundle.tool_filename for tok in bundle.entry_command):
        issues.append("entry_not_referencing_tool")
    scripts = (bundle.tool_script, bundle.env_setup_script, bundle.cleanup_script)
    if any(p.search(s) for s in scripts for p in _DANGEROUS):
        issues.append("dangerous_path_operation")
    root = str(Path(workdir).resolve()) if workdir else None
    for s in scripts:
        targets = [t for t in _abs_write_targets(s) if not (root and t.startswith(root + "/"))]
        if targets:
            issues.append("absolute_path_write")
            break
    if any(len(s.encode("utf-8")) > MAX_SCRIPT_BYTES for s in scripts):
        issues.append("oversized_script")
    return issues


def write_bundle(bundle: ScriptBundle, dest: str | Path) -> Path:
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    for old in dest.glob("tool.*"):
        old.unlink()
    # bytes in, bytes out: scripts must survive the disk round trip unchanged, line endings included
    (dest / bundle.tool_filename).write_bytes(bundle.tool_script.encode("utf-8"))
    (dest / "env_setup.sh").write_bytes(bundle.env_setup_script.encode("utf-8"))
    (dest / "cleanup.sh").write_bytes(bundle.cleanup_script.encode("utf-8"))
    (dest / "entry.txt").write_bytes((shlex.join(bundle.entry_command) + "\n").encode("utf-8"))
    return dest


def read_bundle(src: str | Path) -> ScriptBundle:
    src = Path(src)
    tools = sorted(src.glob("tool.*"))
    if len(tools) != 1:
        raise FileNotFoundError(f"expected exactly one tool.* file in {src}")
    ext = tools[0].suffix[1:]
    return ScriptBundle(
        tool_script=tools[0].read_bytes().decode("utf-8"),
        env_setup_script=(src / "env_setup.sh").read_bytes().decode("utf-8"),
        cleanup_script=(src / "cleanup.sh").read_bytes().decode("utf-8"),
        entry_command=shlex.split((src / "entry.txt").read_bytes().decode("utf-8")),
        language_hint=_EXT_LANG.get(ext, ext),
    )
