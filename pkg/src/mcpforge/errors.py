"""Exception hierarchy shared by every stage of the pipeline."""
from __future__ import annotations


class MCPForgeError(Exception):
    """Base class for all pipeline errors."""


# gateway
class InvalidRequest(MCPForgeError):
    pass


class ScriptExhausted(MCPForgeError):
    def __init__(self, role_slot: str, consumed: int):
        super().__init__(f"replay script has no entry left for role_slot={role_slot!r} (consumed {consumed})")
        self.role_slot = role_slot
        self.consumed = consumed


class ReplayMismatch(MCPForgeError):
    """A replay entry carried a prompt digest that does not match the actual prompt."""


class ProviderError(MCPForgeError):
    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class ParseError(MCPForgeError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# manager
class ActionParseError(MCPForgeError):
    pass


class LoopBudgetExceeded(MCPForgeError):
    def __init__(self, budget: int):
        super().__init__(f"no final answer after {budget} iterations")
        self.budget = budget


# brainstorm
class BrainstormParseError(MCPForgeError):
    pass


# webagent
class FetchError(MCPForgeError):
    def __init__(self, url: str, reason: str):
        super().__init__(f"cannot fetch {url}: {reason}")
        self.url = url


class BackendUnavailable(MCPForgeError):
    pass


class EmptyQuery(MCPForgeError):
    pass


# scriptgen
class BundleParseError(MCPForgeError):
    def __init__(self, issues: list[str]):
        super().__init__("cannot parse script bundle: " + ", ".join(issues))
        self.issues = list(issues)


# envman
class PlanError(MCPForgeError):
    pass


class ProvisionError(MCPForgeError):
    def __init__(self, step: int, exit_code: int | None, stderr_tail: str, command: str = ""):
        super().__init__(f"provisioning step {step} failed (exit {exit_code}): {stderr_tail[-300:]}")
        self.step = step
        self.exit_code = exit_code
        self.stderr_tail = stderr_tail
        self.command = command


class RecoveryExhausted(MCPForgeError):
    pass


class TeardownError(MCPForgeError):
    pass


# runner
class SpawnError(MCPForgeError):
    pass


class EnvGone(MCPForgeError):
    pass


class ToolSynthesisFailed(MCPForgeError):
    def __init__(self, tool_name: str, reports: list):
        super().__init__(f"tool {tool_name!r} discarded after {len(reports)} failed attempts")
        self.tool_name = tool_name
        self.reports = list(reports)


# mcpbox
class InvalidRecord(MCPForgeError):
    pass


class StorageError(MCPForgeError):
    pass


class PackFormatError(MCPForgeError):
    pass


class PartialImport(MCPForgeError):
    def __init__(self, imported: int, invalid: list[str]):
        super().__init__(f"imported {imported} records; {len(invalid)} invalid: {', '.join(invalid)}")
        self.imported = imported
        self.invalid = list(invalid)
