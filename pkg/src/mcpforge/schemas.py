"""Request/response models for the HTTP service."""
from typing import Any, Optional

from pydantic import BaseModel, Field


class TaskRequest(BaseModel):
    query: str = Field(min_length=1)
    id: Optional[str] = None
    attachments: list[str] = []


class TaskResponse(BaseModel):
    task_id: str
    answer: str
    supporting_event_seqs: list[int]
    transcript: str


class TranscriptEventOut(BaseModel):
    seq: int
    timestamp: str
    actor: str
    kind: str
    payload: dict[str, Any]


class ParamOut(BaseModel):
    name: str
    type: str
    description: str = ""
    default: Optional[str] = None


class MCPSummary(BaseModel):
    id: str
    name: str
    description: str
    usage_count: int


class MCPDetail(MCPSummary):
    input_schema: list[ParamOut]
    schema_hash: str
    env_name: str
    provenance: dict[str, Any]


class LookupHit(BaseModel):
    id: str
    name: str
    score: float


class CallRequest(BaseModel):
    arguments: dict[str, Any] = {}


class CallResponse(BaseModel):
    status: str
    exit_code: Optional[int]
    stdout: str
    stderr: str
    usage_count: int
