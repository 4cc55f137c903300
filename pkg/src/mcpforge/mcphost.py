"""Serve one registered tool as an MCP server over newline-delimited JSON-RPC on stdio.

Only ``initialize``, ``tools/list`` and ``tools/call`` are implemented;
notifications are accepted silently and anything else gets -32601.
"""
from __future__ import annotations

import json
import logging
import sys
from typing import IO, Any, Optional

from . import __version__
from .envman import EnvManager
from .errors import EnvGone, MCPForgeError, RecoveryExhausted, SpawnError
from .mcpbox import MCPRecord, Registry
from .runner import DEFAULT_TIMEOUT, ExecutionResult, execute
from .schema import params_to_argv
from .scriptgen import read_bundle

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "2024-11-05"
SERVER_NAME = "mcpforge"

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603

_JSON_TYPES = {"string": "string", "integer": "integer", "number": "number", "boolean": "boolean"}


def encode(msg: dict) -> str:
    return json.dumps(msg, ensure_ascii=False, separators=(",", ":"))


def tool_descriptor(record: MCPRecord) -> dict:
    props: dict[str, Any] = {}
    required = []
    for p in record.input_schema:
        prop: dict[str, Any] = {"type": _JSON_TYPES.get(p.type, "string")}
        if p.description:
            prop["description"] = p.description
        if p.default is not None:
            prop["default"] = p.default
        else:
            required.append(p.name)
        props[p.name] = prop
    schema: dict[str, Any] = {"type": "object", "properties": props}
    if required:
        schema["required"] = required
    return {"name": record.name, "description": record.description, "inputSchema": schema}


def check_arguments(record: MCPRecord, arguments: dict) -> Optional[str]:
    known = {p.name for p in record.input_schema}
    unknown = sorted(set(arguments) - known)
    if unknown:
        return f"unknown arguments: {', '.join(unknown)}"
    missing = [p.name for p in record.input_schema if p.required and p.name not in arguments]
    if missing:
        return f"missing required arguments: {', '.join(missing)}"
    return None


class ToolInvoker:
    """Runs a registered tool: lazy env provisioning, then execution through the runner."""

    def __init__(self, registry: Registry, envman: EnvManager, timeout: float = DEFAULT_TIMEOUT):
        self.registry = registry
        self.envman = envman
        self.timeout = timeout

    def invoke(self, record: MCPRecord, arguments: dict) -> ExecutionResult:
        bundle = read_bundle(self.registry.bundle_dir(record))
        handle, _, _ = self.envman.provision_with_recovery(record.env_profile, bundle.tool_script)
        argv = params_to_argv(record.input_schema, arguments)
        result = execute(self.envman, bundle, handle, argv, self.timeout)
        if result.status == "success":
            record.usage_count = self.registry.increment_usage(record.id)
        return result


def _tool_result(text: str, is_error: bool) -> dict:
    return {"content": [{"type": "text", "text": text}], "isError": is_error}


class McpSession:
    def __init__(self, registry: Registry, record_id: str, invoker: ToolInvoker):
        record = registry.get(record_id)
        if record is None:
            raise KeyError(f"no registered MCP {record_id!r}")
        self.registry = registry
        self.record = record
        self.invoker = invoker
        self.initialized = False

    def _ok(self, msg_id, result: dict) -> dict:
        return {"jsonrpc": "2.0", "id": msg_id, "result": result}

    def _err(self, msg_id, code: int, message: str) -> dict:
        return {"jsonrpc": "2.0", "id": msg_id, "error": {"code": code, "message": message}}

    def handle(self, msg: Any) -> Optional[dict]:
        if not isinstance(msg, dict) or msg.get("jsonrpc") != "2.0" or not isinstance(msg.get("method"), str):
            msg_id = msg.get("id") if isinstance(msg, dict) else None
            return self._err(msg_id, INVALID_REQUEST, "Invalid Request")
        is_notification = "id" not in msg
        msg_id = msg.get("id")
        method = msg["method"]
        params = msg.get("params") or {}
        if is_notification:
            if method == "notifications/initialized":
                self.initialized = True
            return None
        if method == "initialize":
            return self._ok(msg_id, {
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {"tools": {"listChanged": False}},
                "serverInfo": {"name": SERVER_NAME, "version": __version__},
            })
        if method == "tools/list":
            return self._ok(msg_id, {"tools": [tool_descriptor(self.record)]})
        if method == "tools/call":
            return self._call(msg_id, params)
        return self._err(msg_id, METHOD_NOT_FOUND, f"Method not found: {method}")

    def _call(self, msg_id, params: dict) -> dict:
        if not isinstance(params, dict) or params.get("name") != self.record.name:
            return self._err(msg_id, INVALID_PARAMS, f"unknown tool {params.get('name') if isinstance(params, dict) else params!r}")
        arguments = params.get("arguments")
        if arguments is None:
            arguments = {}
        if not isinstance(arguments, dict):
            return self._err(msg_id, INVALID_PARAMS, "arguments must be an object")
        problem = check_arguments(self.record, arguments)
        if problem:
            return self._err(msg_id, INVALID_PARAMS, problem)
        try:
            result = self.invoker.invoke(self.record, arguments)
        except RecoveryExhausted as exc:
            return self._ok(msg_id, _tool_result(f"environment provisioning failed: {exc}", True))
        except (SpawnError, EnvGone, OSError, MCPForgeError) as exc:
            return self._ok(msg_id, _tool_result(f"tool execution failed: {exc}", True))
        if result.status == "success":
            return self._ok(msg_id, _tool_result(result.stdout, False))
        detail = "timed out" if result.status == "timeout" else f"exited with code {result.exit_code}"
        return self._ok(msg_id, _tool_result(f"tool {detail}\n{result.stderr[-2000:]}", True))

    def serve(self, instream: IO[str] = None, outstream: IO[str] = None) -> None:
        """Read requests line by line until EOF, writing one response line per request."""
        instream = instream or sys.stdin
        outstream = outstream or sys.stdout
        for line in instream:
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                reply = self._err(None, PARSE_ERROR, "Parse error")
            else:
                try:
                    reply = self.handle(msg)
                except Exception as exc:  # keep the session alive on handler bugs
                    logger.exception("internal error handling %r", line)
                    reply = self._err(msg.get("id") if isinstance(msg, dict) else None, INTERNAL_ERROR, str(exc))
            if reply is not None:
                outstream.write(encode(reply) + "\n")
                outstream.flush()
