"""HTTP front end over the same core objects the CLI uses.

Each POST /tasks builds a fresh manager, so concurrent tasks keep separate
transcripts and share only the on-disk registry.
"""
from __future__ import annotations

from fastapi import FastAPI, HTTPException, Query
from fastapi.concurrency import run_in_threadpool

from . import __version__
from .config import RunConfig, build_envman, build_manager
from .errors import MCPForgeError
from .manager import read_transcript
from .mcpbox import REUSE_THRESHOLD, Registry
from .mcphost import ToolInvoker, check_arguments
from .schema import Task
from .schemas import (
    CallRequest,
    CallResponse,
    LookupHit,
    MCPDetail,
    MCPSummary,
    TaskRequest,
    TaskResponse,
    TranscriptEventOut,
)


def create_app(cfg: RunConfig) -> FastAPI:
    cfg.validate()
    app = FastAPI(title="mcpforge", version=__version__)

    def registry() -> Registry:
        return Registry(cfg.registry_path)

    def record_or_404(reg: Registry, key: str):
        rec = reg.get(key)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"no MCP {key!r}")
        return rec

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/tasks", response_model=TaskResponse)
    async def run_task(req: TaskRequest):
        task = Task(req.query, req.id or "", req.attachments)
        manager = build_manager(cfg)
        try:
            answer = await run_in_threadpool(manager.run_task, task)
        except MCPForgeError as exc:
            raise HTTPException(status_code=422, detail=f"{type(exc).__name__}: {exc}") from None
        return TaskResponse(task_id=task.id, answer=answer.answer_text,
                            supporting_event_seqs=answer.supporting_event_seqs,
                            transcript=str(answer.transcript_path))

    @app.get("/tasks/{task_id}/transcript", response_model=list[TranscriptEventOut])
    def transcript(task_id: str):
        path = cfg.workdir / "transcripts" / f"{task_id}.jsonl"
        if not path.is_file():
            raise HTTPException(status_code=404, detail=f"no transcript for {task_id}")
        return read_transcript(path)

    @app.get("/mcps", response_model=list[MCPSummary])
    def list_mcps():
        return [MCPSummary(id=r.id, name=r.name, description=r.description, usage_count=r.usage_count)
                for r in registry().ordered()]

    @app.get("/mcps/lookup", response_model=list[LookupHit])
    def lookup(q: str, threshold: float = Query(REUSE_THRESHOLD, ge=0, le=1)):
        reg = registry()
        return [LookupHit(id=rid, name=reg.records[rid].name, score=score) for rid, score in reg.lookup(q, threshold)]

    @app.get("/mcps/{key}", response_model=MCPDetail)
    def get_mcp(key: str):
        rec = record_or_404(registry(), key)
        return MCPDetail(id=rec.id, name=rec.name, description=rec.description, usage_count=rec.usage_count,
                         input_schema=[p.to_dict() for p in rec.input_schema], schema_hash=rec.schema_hash,
                         env_name=rec.env_profile.env_name, provenance=rec.provenance)

    @app.post("/mcps/{key}/call", response_model=CallResponse)
    async def call_mcp(key: str, req: CallRequest):
        reg = registry()
        rec = record_or_404(reg, key)
        problem = check_arguments(rec, req.arguments)
        if problem:
            raise HTTPException(status_code=422, detail=problem)
        invoker = ToolInvoker(reg, build_envman(cfg), cfg.exec_timeout)
        try:
            result = await run_in_threadpool(invoker.invoke, rec, req.arguments)
        except MCPForgeError as exc:
            raise HTTPException(status_code=502, detail=f"{type(exc).__name__}: {exc}") from None
        return CallResponse(status=result.status, exit_code=result.exit_code, stdout=result.stdout,
                            stderr=result.stderr, usage_count=rec.usage_count)

    return app
