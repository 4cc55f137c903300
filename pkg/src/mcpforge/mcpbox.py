"""Persistent flat-file registry of validated tools.

Layout::

    <registry>/mcps/<id>/record.json
    <registry>/mcps/<id>/bundle/{tool.*, env_setup.sh, cleanup.sh, entry.txt}
    <registry>/index.json

Record ids are content-derived (the first 16 hex of the schema hash), so a
record keeps its id across export/import.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import re
import shutil
import tarfile
import tempfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Iterable, Optional

from filelock import FileLock

from .envman import EnvProfile
from .errors import InvalidRecord, MCPForgeError, PackFormatError, PartialImport, StorageError
from .schema import Param, utcnow

logger = logging.getLogger(__name__)

PACK_FORMAT_VERSION = 1
REUSE_THRESHOLD = 0.35
SUMMARY_WIDTH = 120
BUNDLE_FILES = ("env_setup.sh", "cleanup.sh", "entry.txt")

_WORD_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> set[str]:
    return set(_WORD_RE.findall(text.lower()))


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def schema_hash(name: str, input_schema: list[Param]) -> str:
    body = json.dumps({"name": name, "input_schema": [p.to_dict() for p in input_schema]},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass
class MCPRecord:
    name: str
    description: str
    input_schema: list[Param]
    bundle_ref: str
    env_profile: EnvProfile
    provenance: dict = field(default_factory=dict)
    usage_count: int = 0
    id: str = ""
    schema_hash: str = ""

    def __post_init__(self):
        if not self.schema_hash:
            self.schema_hash = schema_hash(self.name, self.input_schema)
        if not self.id:
            self.id = self.schema_hash[:16]

    @property
    def created_at(self) -> str:
        return self.provenance.get("created_at", "")

    def consistent(self) -> bool:
        return self.schema_hash == schema_hash(self.name, self.input_schema)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "input_schema": [p.to_dict() for p in self.input_schema],
            "bundle_ref": self.bundle_ref,
            "env_profile": self.env_profile.to_dict(),
            "provenance": dict(self.provenance),
            "usage_count": self.usage_count,
            "schema_hash": self.schema_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MCPRecord":
        return cls(
            name=d["name"],
            description=d.get("description", ""),
            input_schema=[Param.from_dict(p) for p in d.get("input_schema", [])],
            bundle_ref=d.get("bundle_ref", ""),
            env_profile=EnvProfile.from_dict(d["env_profile"]),
            provenance=dict(d.get("provenance", {})),
            usage_count=int(d.get("usage_count", 0)),
            id=d.get("id", ""),
            schema_hash=d.get("schema_hash", ""),
        )


def _bundle_ok(path: Path) -> bool:
    return path.is_dir() and len(list(path.glob("tool.*"))) == 1 and all((path / f).is_file() for f in BUNDLE_FILES)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.name)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class Registry:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.mcps = self.root / "mcps"
        self.mcps.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))
        self.records: dict[str, MCPRecord] = {}
        self.token_index: dict[str, set[str]] = {}
        self.reload()

    # -- reading -------------------------------------------------------
    def reload(self) -> None:
        records = {}
        for d in sorted(self.mcps.iterdir()):
            if d.name.startswith(".") or not (d / "record.json").is_file():
                continue
            try:
                rec = MCPRecord.from_dict(json.loads((d / "record.json").read_text(encoding="utf-8")))
            except (ValueError, KeyError, MCPForgeError) as exc:
                logger.warning("skipping unreadable record %s: %s", d.name, exc)
                continue
            records[rec.id] = rec
        self.records = records
        self.token_index = self._build_index()
        if self._index_stale():
            with self._lock:
                self._write_index()

    def _build_index(self) -> dict[str, set[str]]:
        index: dict[str, set[str]] = {}
        for rec in self.records.values():
            for w in words(rec.description):
                index.setdefault(w, set()).add(rec.id)
        return index

    def _index_doc(self) -> dict:
        return {
            "records": [{"id": r.id, "name": r.name, "created_at": r.created_at} for r in self.ordered()],
            "tokens": {w: sorted(ids) for w, ids in sorted(self.token_index.items())},
        }

    def _index_stale(self) -> bool:
        path = self.root / "index.json"
        try:
            return json.loads(path.read_text(encoding="utf-8")) != self._index_doc()
        except (OSError, ValueError):
            return True

    def _write_index(self) -> None:
        _atomic_write(self.root / "index.json", json.dumps(self._index_doc(), indent=2) + "\n")

    def ordered(self) -> list[MCPRecord]:
        return sorted(self.records.values(), key=lambda r: (r.created_at, r.id))

    def __len__(self) -> int:
        return len(self.records)

    def get(self, key: str) -> Optional[MCPRecord]:
        """Find a record by id or by name."""
        if key in self.records:
            return self.records[key]
        for rec in self.ordered():
            if rec.name == key:
                return rec
        return None

    def bundle_dir(self, record: MCPRecord) -> Path:
        return self.root / record.bundle_ref

    # -- writing -------------------------------------------------------
    def register(self, candidate: MCPRecord, bundle_dir: Optional[str | Path] = None) -> str:
        """Persist a validated record and its bundle; equal schema hashes dedup to the existing id."""
        if not candidate.name or not candidate.name.strip():
            raise InvalidRecord("record name must be non-empty")
        if not candidate.consistent():
            raise InvalidRecord(f"{candidate.name}: schema_hash does not match name/input_schema")
        src = Path(bundle_dir) if bundle_dir is not None else Path(candidate.bundle_ref)
        if not _bundle_ok(src):
            raise InvalidRecord(f"{candidate.name}: bundle files missing under {src}")
        with self._lock:
            self.reload()
            for rec in self.records.values():
                if rec.schema_hash == candidate.schema_hash:
                    return rec.id
            rec = MCPRecord.from_dict(candidate.to_dict())
            rec.id = rec.schema_hash[:16]
            rec.bundle_ref = f"mcps/{rec.id}/bundle"
            rec.provenance.setdefault("created_at", utcnow())
            tmp = Path(tempfile.mkdtemp(dir=self.mcps, prefix=".tmp-"))
            try:
                shutil.copytree(src, tmp / "bundle")
                (tmp / "record.json").write_text(json.dumps(rec.to_dict(), indent=2) + "\n", encoding="utf-8")
                os.rename(tmp, self.mcps / rec.id)
            except OSError as exc:
                shutil.rmtree(tmp, ignore_errors=True)
                raise StorageError(f"cannot store {rec.name}: {exc}") from exc
            self.records[rec.id] = rec
            self.token_index = self._build_index()
            self._write_index()
            return rec.id

    def increment_usage(self, record_id: str) -> int:
        with self._lock:
            path = self.mcps / record_id / "record.json"
            data = json.loads(path.read_text(encoding="utf-8"))
            data["usage_count"] = int(data.get("usage_count", 0)) + 1
            _atomic_write(path, json.dumps(data, indent=2) + "\n")
            if record_id in self.records:
                self.records[record_id].usage_count = data["usage_count"]
            return data["usage_count"]

    # -- queries -------------------------------------------------------
    def lookup(self, query: str, threshold: float = REUSE_THRESHOLD) -> list[tuple[str, float]]:
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must be within [0, 1]")
        q = words(query)
        if not q:
            return []
        if threshold > 0:
            candidates = set().union(*(self.token_index.get(w, set()) for w in q))
        else:
            candidates = set(self.records)
        scored = []
        for rid in candidates:
            rec = self.records[rid]
            score = jaccard(q, words(rec.description))
            if score >= threshold:
                scored.append((rec, score))
        scored.sort(key=lambda x: (-x[1], x[0].created_at, x[0].id))
        return [(rec.id, score) for rec, score in scored]

    def summarize(self) -> str:
        if not self.records:
            return "Registered MCPs: none"
        lines = []
        for rec in self.ordered():
            desc = " ".join(rec.description.split())
            if len(desc) > SUMMARY_WIDTH:
                desc = desc[:SUMMARY_WIDTH] + "…"
            lines.append(f"{rec.name}: {desc}")
        return "\n".join(lines)

    def referenced_envs(self) -> set[str]:
        return {r.env_profile.env_name for r in self.records.values()}

    # -- packs ---------------------------------------------------------
    def export_pack(self, ids: Iterable[str], dest: str | Path) -> int:
        ids = list(dict.fromkeys(ids))
        missing = [i for i in ids if i not in self.records]
        if missing:
            raise KeyError(f"unknown record ids: {', '.join(missing)}")
        manifest = {"format_version": PACK_FORMAT_VERSION, "created_at": utcnow(), "records": ids}
        dest = Path(dest)
        tmp = dest.with_name(f".{dest.name}.tmp")
        with tarfile.open(tmp, "w:gz") as tar:
            data = json.dumps(manifest, indent=2).encode("utf-8")
            info = tarfile.TarInfo("manifest.json")
            info.size = len(data)
            tar.addfile(info, io.BytesIO(data))
            for rid in ids:
                tar.add(self.mcps / rid / "record.json", arcname=f"mcps/{rid}/record.json")
                tar.add(self.mcps / rid / "bundle", arcname=f"mcps/{rid}/bundle")
        os.replace(tmp, dest)
        return len(ids)

    def import_pack(self, src: str | Path) -> int:
        """Register every record of a pack; returns the number of new records."""
        try:
            tar = tarfile.open(src, "r:gz")
        except (OSError, tarfile.TarError) as exc:
            raise PackFormatError(f"{src}: not a gzip tar pack ({exc})") from None
        with tar, tempfile.TemporaryDirectory() as tmpdir:
            for member in tar.getmembers():
                p = PurePosixPath(member.name)
                if p.is_absolute() or ".." in p.parts:
                    raise PackFormatError(f"unsafe member path {member.name!r}")
            try:
                tar.extractall(tmpdir, filter="data")
            except (tarfile.TarError, OSError) as exc:
                raise PackFormatError(f"cannot extract pack: {exc}") from None
            base = Path(tmpdir)
            try:
                manifest = json.loads((base / "manifest.json").read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise PackFormatError(f"missing or unreadable manifest.json: {exc}") from None
            version = manifest.get("format_version")
            if not isinstance(version, int) or version < 1:
                raise PackFormatError(f"bad format_version {version!r}")
            if version > PACK_FORMAT_VERSION:
                raise PackFormatError(f"pack format_version {version} is newer than supported {PACK_FORMAT_VERSION}")
            imported, invalid = 0, []
            for rid in manifest.get("records", []):
                rdir = base / "mcps" / str(rid)
                try:
                    rec = MCPRecord.from_dict(json.loads((rdir / "record.json").read_text(encoding="utf-8")))
                    before = len(self.records)
                    self.register(rec, rdir / "bundle")
                    imported += len(self.records) - before
                except (OSError, ValueError, KeyError, TypeError, MCPForgeError) as exc:
                    logger.warning("pack record %s rejected: %s", rid, exc)
                    invalid.append(str(rid))
            if invalid:
                raise PartialImport(imported, invalid)
            return imported
