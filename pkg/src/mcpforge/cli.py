"""Command-line entry point.

Exit codes: 0 success, 1 pipeline failure, 2 usage or configuration error.
Answers go to stdout; diagnostics (transcript path, warnings) to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, build_envman, build_manager, load_config
from .errors import MCPForgeError, PackFormatError, PartialImport
from .manager import read_transcript
from .mcpbox import Registry
from .mcphost import McpSession, ToolInvoker
from .schema import Task

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file (default: ./mcpforge.toml or $ALITA_CONFIG)")
    p.add_argument("--workdir", help="working directory for transcripts, bundles and envs")
    p.add_argument("--registry", help="registry directory (default: <workdir>/registry)")
    p.add_argument("--provider", choices=("conda", "stub", "custom"), help="environment provider")
    p.add_argument("--wheelhouse", help="local package directory for the stub provider")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcpforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve a task")
    _common(run)
    src = run.add_mutually_exclusive_group()
    src.add_argument("--task", help="task text")
    src.add_argument("--task-file", help="file holding the task (plain text, or JSON with id/query/attachments)")
    run.add_argument("--offline", action="store_true", help="no network: replay LLM and web fixtures")
    run.add_argument("--replay", help="replay script for the LLM gateway")
    run.add_argument("--fixtures", help="offline web fixture directory")
    run.add_argument("--loop-budget", type=int)

    mcp = sub.add_parser("mcp", help="inspect, serve and move registered MCPs")
    msub = mcp.add_subparsers(dest="mcp_command", required=True)
    p = msub.add_parser("list", help="list registered MCPs")
    _common(p)
    p = msub.add_parser("serve", help="serve one MCP over stdio JSON-RPC")
    _common(p)
    p.add_argument("record", help="record id or name")
    p = msub.add_parser("export", help="write records to a pack archive")
    _common(p)
    p.add_argument("--all", action="store_true", help="export every record")
    p.add_argument("--id", action="append", default=[], dest="ids", help="record id (repeatable)")
    p.add_argument("dest")
    p = msub.add_parser("import", help="register the records of a pack archive")
    _common(p)
    p.add_argument("src")

    gc = sub.add_parser("env-gc", help="remove stale environments no record references")
    _common(gc)
    gc.add_argument("--ttl", type=float, default=86400.0, help="minimum age in seconds (default 1 day)")

    tr = sub.add_parser("transcript", help="show a task transcript")
    tsub = tr.add_subparsers(dest="transcript_command", required=True)
    p = tsub.add_parser("show")
    _common(p)
    p.add_argument("task_id")

    http = sub.add_parser("serve-http", help="run the HTTP service")
    _common(http)
    http.add_argument("--host", default="127.0.0.1")
    http.add_argument("--port", type=int, default=8000)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.workdir:
        cfg.workdir = Path(args.workdir)
    if args.registry:
        cfg.registry = Path(args.registry)
    if args.provider:
        cfg.provider_kind = args.provider
    if args.wheelhouse:
        cfg.wheelhouse = Path(args.wheelhouse)
    if getattr(args, "offline", False):
        cfg.offline = True
    if getattr(args, "replay", None):
        cfg.replay = Path(args.replay)
    if getattr(args, "fixtures", None):
        cfg.fixtures = Path(args.fixtures)
    if getattr(args, "loop_budget", None):
        cfg.loop_budget = args.loop_budget
    return cfg.validate()


def read_task(args) -> Task:
    if args.task:
        return Task(args.task)
    text = Path(args.task_file).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return Task(text.strip())
    if not isinstance(obj, dict):
        return Task(text.strip())
    return Task(obj["query"], obj.get("id", ""), list(obj.get("attachments", [])))


def cmd_run(args) -> int:
    if not args.task and not args.task_file:
        print("usage: mcpforge run (--task TEXT | --task-file PATH) [options]", file=sys.stderr)
        print("mcpforge run: error: one of --task or --task-file is required", file=sys.stderr)
        return EXIT_USAGE
    cfg = _config(args)
    try:
        task = read_task(args)
    except (OSError, KeyError, ValueError) as exc:
        print(f"mcpforge run: cannot read task: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manager = build_manager(cfg)
    transcript = cfg.workdir / "transcripts" / f"{task.id}.jsonl"
    try:
        answer = manager.run_task(task)
    except MCPForgeError as exc:
        print(f"pipeline failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        print(f"transcript: {transcript}", file=sys.stderr)
        return EXIT_FAIL
    if args.json:
        print(json.dumps({"task_id": task.id, "answer": answer.answer_text, "transcript": str(transcript)}))
    else:
        print(answer.answer_text)
    print(f"transcript: {transcript}", file=sys.stderr)
    return EXIT_OK


def cmd_mcp(args) -> int:
    cfg = _config(args)
    registry = Registry(cfg.registry_path)
    if args.mcp_command == "list":
        recs = registry.ordered()
        if args.json:
            print(json.dumps([{"id": r.id, "name": r.name, "usage_count": r.usage_count} for r in recs]))
        elif not recs:
            print("0 MCPs")
        else:
            for r in recs:
                print(f"{r.id}\t{r.name}\t{r.usage_count}")
        return EXIT_OK
    if args.mcp_command == "serve":
        invoker = ToolInvoker(registry, build_envman(cfg), cfg.exec_timeout)
        try:
            session = McpSession(registry, args.record, invoker)
        except KeyError as exc:
            print(f"mcpforge mcp serve: {exc.args[0]}", file=sys.stderr)
            return EXIT_FAIL
        session.serve(sys.stdin, sys.stdout)
        return EXIT_OK
    if args.mcp_command == "export":
        ids = [r.id for r in registry.ordered()] if args.all else args.ids
        if not ids and not args.all:
            print("mcpforge mcp export: give --all or at least one --id", file=sys.stderr)
            return EXIT_USAGE
        try:
            n = registry.export_pack(ids, args.dest)
        except (KeyError, OSError) as exc:
            print(f"export failed: {exc}", file=sys.stderr)
            return EXIT_FAIL
        print(json.dumps({"exported": n}) if args.json else f"exported {n}")
        return EXIT_OK
    try:
        n = registry.import_pack(args.src)
    except PartialImport as exc:
        print(f"imported {exc.imported}", file=sys.stdout)
        print(f"invalid records: {', '.join(exc.invalid)}", file=sys.stderr)
        return EXIT_FAIL
    except PackFormatError as exc:
        print(f"import failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({"imported": n}) if args.json else f"imported {n}")
    return EXIT_OK


def cmd_env_gc(args) -> int:
    cfg = _config(args)
    registry = Registry(cfg.registry_path)
    removed, failed = build_envman(cfg).gc(args.ttl, registry.referenced_envs())
    print(json.dumps({"removed": removed, "failed": failed}) if args.json else len(removed))
    if failed:
        print("orphaned environments: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_transcript(args) -> int:
    cfg = _config(args)
    path = cfg.workdir / "transcripts" / f"{args.task_id}.jsonl"
    if not path.is_file():
        print(f"no transcript for task {args.task_id}", file=sys.stderr)
        return EXIT_FAIL
    if args.json:
        sys.stdout.write(path.read_text(encoding="utf-8"))
        return EXIT_OK
    for ev in read_transcript(path):
        payload = ev["payload"]
        detail = payload.get("tool") or payload.get("op") or payload.get("answer") or ""
        print(f"{ev['seq']:>4} {ev['timestamp']} {ev['actor']:<10} {ev['kind']:<11} {detail}")
    return EXIT_OK


def cmd_serve_http(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(_config(args)), host=args.host, port=args.port)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "mcp":
            return cmd_mcp(args)
        if args.command == "env-gc":
            return cmd_env_gc(args)
        if args.command == "transcript":
            return cmd_transcript(args)
        return cmd_serve_http(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
