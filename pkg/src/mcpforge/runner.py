"""Execute bundles inside their environments and drive the bounded regenerate loop."""
from __future__ import annotations

import logging
import os
import re
import signal
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .envman import (
    EnvHandle,
    EnvManager,
    EnvProfile,
    inspect_metadata,
    plan_env,
)
from .errors import (
    BundleParseError,
    EnvGone,
    PlanError,
    RecoveryExhausted,
    SpawnError,
    ToolSynthesisFailed,
)
from .gateway import Gateway
from .schema import ToolSpec, ValidationSpec
from .scriptgen import (
    AttemptReport,
    GenerationContext,
    RetrievedContext,
    ScriptBundle,
    generate,
    validate_bundle,
)

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 3
DEFAULT_TIMEOUT = 120.0
STREAM_LIMIT = 256 * 1024
STREAM_MARKER = "\n[... output truncated at 256 KiB ...]"
ERROR_CONTEXT_CHARS = 2000

__all__ = [
    "AttemptReport", "ExecutionResult", "ValidationSpec", "ToolSynthesizer", "SynthesisResult",
    "execute", "validate",
]


@dataclass
class ExecutionResult:
    status: str
    exit_code: Optional[int]
    stdout: str
    stderr: str
    duration: float

    def __post_init__(self):
        if (self.status == "success") != (self.exit_code == 0):
            raise ValueError("status=success iff exit_code=0")

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "duration": self.duration,
        }


def _truncate(data: bytes) -> str:
    text = data.decode("utf-8", errors="replace")
    if len(data) > STREAM_LIMIT:
        text = data[:STREAM_LIMIT].decode("utf-8", errors="ignore") + STREAM_MARKER
    return text


def materialize(bundle: ScriptBundle, scratch: Path) -> Path:
    scratch.mkdir(parents=True, exist_ok=True)
    path = scratch / bundle.tool_filename
    path.write_text(bundle.tool_script, encoding="utf-8")
    path.chmod(0o755)
    (scratch / "cleanup.sh").write_text(bundle.cleanup_script, encoding="utf-8")
    return path


def execute(envman: EnvManager, bundle: ScriptBundle, env: EnvHandle, args: list[str] = (),
            timeout: float = DEFAULT_TIMEOUT) -> ExecutionResult:
    """Run ``entry_command + args`` through the provider's run template, cwd = env scratch."""
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    if not env.live:
        raise EnvGone(f"environment {env.env_name} is gone")
    if not bundle.entry_command:
        raise SpawnError("bundle has no entry command")
    materialize(bundle, env.scratch)
    refs = [t for t in bundle.entry_command if Path(t).name == bundle.tool_filename]
    if refs and not (env.scratch / refs[0]).is_file():
        raise SpawnError(f"entry references missing file {refs[0]}")
    argv = envman.provider.render("run", env_name=env.env_name, root=env.root_path,
                                  command=list(bundle.entry_command) + list(args))
    started = time.monotonic()
    try:
        proc = subprocess.Popen(argv, cwd=env.scratch, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                stdin=subprocess.DEVNULL, start_new_session=True)
    except (FileNotFoundError, PermissionError) as exc:
        raise SpawnError(f"cannot spawn {argv[0]}: {exc}") from None
    try:
        out, err = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, err = proc.communicate()
        return ExecutionResult("timeout", None, _truncate(out), _truncate(err), time.monotonic() - started)
    duration = time.monotonic() - started
    code = proc.returncode
    return ExecutionResult("success" if code == 0 else "error", code, _truncate(out), _truncate(err), duration)


def validate(result: ExecutionResult, spec: ValidationSpec) -> tuple[bool, str]:
    if spec.kind == "exit_zero":
        ok = result.status == "success"
        return ok, f"exit_zero: status={result.status} exit_code={result.exit_code}"
    if result.status != "success":
        return False, f"{spec.kind}: execution did not succeed (status={result.status}, exit_code={result.exit_code})"
    if spec.kind == "nonempty_stdout":
        ok = bool(result.stdout.strip())
        return ok, "nonempty_stdout: " + ("stdout has content" if ok else "stdout is empty")
    ok = re.search(spec.pattern, result.stdout) is not None
    return ok, f"stdout_matches {spec.pattern!r}: " + ("matched" if ok else "no match in stdout")


@dataclass
class SynthesisResult:
    bundle: ScriptBundle
    profile: EnvProfile
    result: ExecutionResult
    reports: list[AttemptReport]
    handle: EnvHandle


def _error_summary(text: str, verdict: str) -> str:
    tail = text[-ERROR_CONTEXT_CHARS:]
    return f"{verdict}\nstderr tail:\n{tail}" if tail.strip() else verdict


class ToolSynthesizer:
    """generate -> plan_env -> provision (with recovery) -> smoke run -> validate, at most 3 times."""

    def __init__(self, gateway: Gateway, envman: EnvManager, *, timeout: float = DEFAULT_TIMEOUT,
                 max_attempts: int = MAX_ATTEMPTS, emit: Optional[Callable[[str, str, dict], None]] = None):
        self.gateway = gateway
        self.envman = envman
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.emit = emit or (lambda actor, kind, payload: None)

    def _cleanup(self, bundle: ScriptBundle, handle: EnvHandle) -> None:
        if handle.live and bundle.cleanup_script.strip():
            argv = self.envman.provider.render("run", env_name=handle.env_name, root=handle.root_path,
                                               command=["sh", "cleanup.sh"])
            try:
                subprocess.run(argv, cwd=handle.scratch, capture_output=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                logger.warning("cleanup script failed for %s: %s", handle.env_name, exc)
        try:
            self.envman.destroy(handle)
        except Exception as exc:  # teardown failures are logged, never fatal here
            logger.warning("%s", exc)

    def synthesize(self, spec: ToolSpec, retrieved: list[RetrievedContext], task_id: str) -> SynthesisResult:
        reports: list[AttemptReport] = []
        source_key = retrieved[0].source_url if retrieved else spec.name
        sources = [(("README.md" if r.kind == "readme" else r.source_url), r.excerpt) for r in retrieved]
        metadata = inspect_metadata(sources)
        for attempt in range(1, self.max_attempts + 1):
            ctx = GenerationContext(spec, list(retrieved), list(reports))
            self.emit("scriptgen", "tool_call", {"tool": "generate_script", "tool_name": spec.name,
                                                 "attempt": attempt, "prior_attempts": len(reports)})
            try:
                bundle = generate(self.gateway, ctx)
            except BundleParseError as exc:
                reports.append(AttemptReport(attempt, f"bundle_parse_error: {', '.join(exc.issues)}"))
                self.emit("scriptgen", "error", {"attempt": attempt, "issues": exc.issues})
                continue
            self.emit("scriptgen", "observation", {"attempt": attempt, "bundle": bundle.to_dict()})
            issues = validate_bundle(bundle, self.envman.workdir)
            if issues:
                reports.append(AttemptReport(attempt, "static validation failed: " + ", ".join(issues)))
                self.emit("scriptgen", "error", {"attempt": attempt, "issues": issues})
                continue
            try:
                profile = plan_env(metadata, bundle, task_id, source_key)
            except PlanError as exc:
                reports.append(AttemptReport(attempt, f"plan_error: {exc}"))
                self.emit("envman", "error", {"attempt": attempt, "op": "plan_env", "message": str(exc)})
                continue
            self.emit("envman", "tool_call", {"tool": "provision", "attempt": attempt, "profile": profile.to_dict()})
            try:
                handle, profile, strategies = self.envman.provision_with_recovery(profile, bundle.tool_script)
            except RecoveryExhausted as exc:
                last = getattr(exc, "last_error", None)
                reports.append(AttemptReport(
                    attempt,
                    _error_summary(last.stderr_tail if last else "", f"environment provisioning failed: {exc}"),
                    "discard",
                ))
                continue
            strategy = strategies[-1].value if strategies else None
            args = spec.smoke_args()
            self.emit("runner", "tool_call", {"tool": "execute", "attempt": attempt, "env_name": handle.env_name,
                                              "entry_command": bundle.entry_command, "args": args})
            try:
                result = execute(self.envman, bundle, handle, args, self.timeout)
            except (SpawnError, EnvGone) as exc:
                reports.append(AttemptReport(attempt, f"spawn_error: {exc}", strategy))
                self._cleanup(bundle, handle)
                continue
            ok, verdict = validate(result, spec.validation_hint)
            self.emit("runner", "observation", {"attempt": attempt, "result": result.to_dict(),
                                                "validation": {"passed": ok, "report": verdict}})
            if ok:
                return SynthesisResult(bundle, profile, result, reports, handle)
            reports.append(AttemptReport(attempt, _error_summary(result.stderr, verdict), strategy))
            self._cleanup(bundle, handle)
        self.emit("runner", "error", {"tool_name": spec.name, "discarded": True,
                                      "reports": [r.to_dict() for r in reports]})
        raise ToolSynthesisFailed(spec.name, reports)


def synthesize_tool(spec: ToolSpec, retrieved: list[RetrievedContext], task_id: str, gateway: Gateway,
                    envman: EnvManager, **kwargs) -> SynthesisResult:
    return ToolSynthesizer(gateway, envman, **kwargs).synthesize(spec, retrieved, task_id)
