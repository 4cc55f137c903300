"""Plan, provision, recover and tear down isolated tool environments.

Providers are four command templates (create, install, run, teardown) with
the placeholders ``{env_name}``, ``{root}``, ``{packages}``, ``{command}`` and
``{python}``.  Templates are rendered token-wise: values are shell-quoted,
substituted, then split with :func:`shlex.split` and executed without a shell.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
import shlex
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from filelock import FileLock

from .errors import PlanError, ProvisionError, RecoveryExhausted, TeardownError
from .schema import utcnow

logger = logging.getLogger(__name__)

MAX_RECOVERY_ROUNDS = 2
STDERR_TAIL = 2000
CREATE_STEP = "create-env"
INSTALL_STEP = "install-deps"

Emit = Callable[[str, str, dict], None]


class RecoveryStrategy(str, enum.Enum):
    RELAX_VERSIONS = "relax_versions"
    MINIMAL_DEPS = "minimal_deps"
    DISCARD = "discard"


LADDER = (RecoveryStrategy.RELAX_VERSIONS, RecoveryStrategy.MINIMAL_DEPS, RecoveryStrategy.DISCARD)

_NAME = r"[A-Za-z0-9](?:[A-Za-z0-9._-]*[A-Za-z0-9])?"
_DEP_RE = re.compile(
    rf"^(?P<name>{_NAME})(?P<constraint>==\d+(?:\.\d+)*|~=\d+(?:\.\d+)+|>=\d+(?:\.\d+)*|<=\d+(?:\.\d+)*)?$"
)
_INSTALL_RE = re.compile(
    r"^\s*(?:sudo\s+)?(?:(?:python3?|py)\s+-m\s+pip|pip3?|conda|mamba|micromamba|uv\s+pip)\s+install\b(?P<rest>.*)$"
)
# installer flags that consume the next token
_FLAGS_WITH_ARG = {"-c", "--channel", "-n", "--name", "-p", "--prefix", "-i", "--index-url",
                   "--extra-index-url", "-r", "--requirement", "-f", "--find-links", "--target", "-t"}
_SKIP_LINE_RE = re.compile(r"^\s*(?:#|$|set\s+-|(?:conda|source)\s+(?:de)?activate\b|(?:conda|mamba)\s+create\b|cd\s+)")


@dataclass(frozen=True)
class Dependency:
    name: str
    constraint: str = ""

    def __post_init__(self):
        if not self.name:
            raise PlanError("dependency name must be non-empty")

    @property
    def spec(self) -> str:
        return self.name + self.constraint

    @property
    def normalized(self) -> str:
        return self.name.lower().replace("-", "_")

    def __str__(self) -> str:
        return self.spec


def parse_dependency(text: str) -> Dependency:
    compact = re.sub(r"\s+", "", text)
    m = _DEP_RE.match(compact)
    if not m:
        raise PlanError(f"dependency {text!r} does not match the constraint grammar")
    return Dependency(m["name"], m["constraint"] or "")


def relax(dep: Dependency) -> Dependency:
    """==X.Y.Z -> ~=X.Y ; ~=X.Y -> unpinned ; everything else unchanged."""
    c = dep.constraint
    if c.startswith("=="):
        parts = c[2:].split(".")
        return Dependency(dep.name, "~=" + ".".join(parts[:2]) if len(parts) >= 2 else "")
    if c.startswith("~="):
        return Dependency(dep.name, "")
    return dep


@dataclass
class MetadataBundle:
    readme_text: Optional[str] = None
    requirements_text: Optional[str] = None
    shell_script_texts: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.readme_text is None and self.requirements_text is None and not self.shell_script_texts


def inspect_metadata(sources: list[tuple[str, str]]) -> MetadataBundle:
    """Classify repository files by name: README*, requirements*, *.sh."""
    md = MetadataBundle()
    for path, content in sources:
        name = Path(path).name
        lower = name.lower()
        if lower.startswith("readme"):
            md.readme_text = content if md.readme_text is None else md.readme_text + "\n" + content
        elif lower.startswith("requirements"):
            md.requirements_text = content if md.requirements_text is None else md.requirements_text + "\n" + content
        elif lower.endswith(".sh"):
            md.shell_script_texts.append(content)
        else:
            logger.info("ignoring metadata source %s", path)
    return md


@dataclass
class EnvProfile:
    env_name: str
    dependencies: list[Dependency] = field(default_factory=list)
    setup_steps: list[str] = field(default_factory=lambda: [CREATE_STEP])
    provenance: list[str] = field(default_factory=list)
    recovery_round: int = 0

    def __post_init__(self):
        if not ENV_NAME_RE.match(self.env_name):
            raise PlanError(f"env name {self.env_name!r} does not follow the naming scheme")
        if not 0 <= self.recovery_round <= MAX_RECOVERY_ROUNDS:
            raise PlanError("recovery_round out of range")

    @property
    def residual_steps(self) -> list[str]:
        return [s for s in self.setup_steps if s not in (CREATE_STEP, INSTALL_STEP)]

    def digest(self) -> str:
        body = json.dumps({"deps": [d.spec for d in self.dependencies], "steps": self.setup_steps}, sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "env_name": self.env_name,
            "dependencies": [{"name": d.name, "constraint": d.constraint} for d in self.dependencies],
            "setup_steps": list(self.setup_steps),
            "provenance": list(self.provenance),
            "recovery_round": self.recovery_round,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvProfile":
        return cls(
            env_name=d["env_name"],
            dependencies=[Dependency(x["name"], x.get("constraint", "")) for x in d.get("dependencies", [])],
            setup_steps=list(d.get("setup_steps", [CREATE_STEP])),
            provenance=list(d.get("provenance", [])),
            recovery_round=d.get("recovery_round", 0),
        )


ENV_NAME_RE = re.compile(r"^alita-[0-9a-f]{12}$")


def derive_env_name(task_id: str, source_key: str) -> str:
    if not task_id or not source_key:
        raise ValueError("task_id and source_key must be non-empty")
    digest = hashlib.sha256(f"{task_id}\n{source_key}".encode("utf-8")).hexdigest()
    return "alita-" + digest[:12]


def _install_names(line: str) -> Optional[list[str]]:
    m = _INSTALL_RE.match(line)
    if not m:
        return None
    tokens = shlex.split(m["rest"], comments=True)
    names, skip = [], False
    for tok in tokens:
        if skip:
            skip = False
            continue
        if tok.startswith("-"):
            skip = tok in _FLAGS_WITH_ARG
            continue
        names.append(tok)
    return names


def _requirement_lines(text: str) -> list[str]:
    out = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("-"):
            logger.info("skipping requirements option line %r", line)
            continue
        out.append(line)
    return out


def build_setup_steps(deps: list[Dependency], residual: list[str]) -> list[str]:
    return [CREATE_STEP] + ([INSTALL_STEP] if deps else []) + list(residual)


def plan_env(metadata: MetadataBundle, bundle, task_id: str, source_key: Optional[str] = None) -> EnvProfile:
    """Derive the isolated environment for a bundle.

    Dependencies are the union (first occurrence wins) of requirement lines and
    ``<installer> install <names...>`` tokens from the bundle's env script and
    the metadata shell scripts.  Other env-script lines become setup steps,
    except env creation/activation which the provider handles.
    """
    found: list[Dependency] = []
    residual: list[str] = []

    def add(dep: Dependency):
        if all(d.name.lower() != dep.name.lower() for d in found):
            found.append(dep)

    if metadata.requirements_text:
        for line in _requirement_lines(metadata.requirements_text):
            add(parse_dependency(line))
    for line in bundle.env_setup_script.splitlines():
        names = _install_names(line)
        if names is not None:
            for n in names:
                add(parse_dependency(n))
        elif not _SKIP_LINE_RE.match(line) and not line.startswith("#!"):
            residual.append(line.strip())
    for script in metadata.shell_script_texts:
        for line in script.splitlines():
            for n in _install_names(line) or []:
                add(parse_dependency(n))
    key = source_key or shlex.join(bundle.entry_command) or "bundle"
    return EnvProfile(
        env_name=derive_env_name(task_id, key),
        dependencies=found,
        setup_steps=build_setup_steps(found, residual),
        provenance=[key],
    )


_IMPORT_PATTERNS = [
    re.compile(r"^\s*import\s+([\w.]+(?:\s*,\s*[\w.]+)*)", re.M),
    re.compile(r"^\s*from\s+([\w.]+)\s+import\b", re.M),
    re.compile(r"require\(\s*['\"]([^'\"]+)['\"]\s*\)"),
    re.compile(r"^\s*import\s+(?:[^'\"]*?\s+from\s+)?['\"]([^'\"]+)['\"]", re.M),
]


def import_tokens(script: str) -> set[str]:
    tokens: set[str] = set()
    for pat in _IMPORT_PATTERNS:
        for m in pat.finditer(script):
            for item in m.group(1).split(","):
                item = item.strip().lower().replace("-", "_")
                if item:
                    tokens.add(item)
                    tokens.add(item.split(".")[0].split("/")[0])
    return tokens


def recover(profile: EnvProfile, error: Optional[ProvisionError] = None, tool_script: str = "") -> EnvProfile:
    """Apply the next rung of the recovery ladder and return the rewritten profile."""
    if profile.recovery_round >= MAX_RECOVERY_ROUNDS:
        raise RecoveryExhausted(f"{profile.env_name}: recovery ladder exhausted after {profile.recovery_round} rounds")
    if error is not None:
        logger.info("recovering %s after step %s failure", profile.env_name, error.step)
    if profile.recovery_round == 0:
        deps = [relax(d) for d in profile.dependencies]
    else:
        used = import_tokens(tool_script)
        deps = [d for d in profile.dependencies if d.normalized in used]
    return EnvProfile(
        env_name=profile.env_name,
        dependencies=deps,
        setup_steps=build_setup_steps(deps, profile.residual_steps),
        provenance=list(profile.provenance),
        recovery_round=profile.recovery_round + 1,
    )


def strategy_for_round(round_no: int) -> RecoveryStrategy:
    return LADDER[round_no - 1]


@dataclass
class Provider:
    provider_id: str
    create: str
    install: str
    run: str
    teardown: str

    def render(self, which: str, *, env_name: str, root: Path, packages: list[str] = (), command: list[str] = ()) -> list[str]:
        template = getattr(self, which)
        text = template.format(
            env_name=shlex.quote(env_name),
            root=shlex.quote(str(root)),
            packages=" ".join(shlex.quote(p) for p in packages),
            command=shlex.join(command),
            python=shlex.quote(sys.executable),
        )
        return shlex.split(text)


def conda_provider() -> Provider:
    return Provider(
        provider_id="conda",
        create="conda create -y -q -n {env_name} python",
        install="conda run -n {env_name} python -m pip install {packages}",
        run="conda run --no-capture-output -n {env_name} {command}",
        teardown="conda env remove -y -q -n {env_name}",
    )


def stub_provider(wheelhouse: Optional[str | Path] = None) -> Provider:
    """Filesystem-only provider; packages come from a local wheelhouse directory."""
    wh = f" --wheelhouse {shlex.quote(str(Path(wheelhouse).resolve()))}" if wheelhouse else ""
    return Provider(
        provider_id="stub",
        create="{python} -m mcpforge.stubenv create {root} {env_name}",
        install="{python} -m mcpforge.stubenv install" + wh + " {root} {packages}",
        run="{python} -m mcpforge.stubenv run {root} -- {command}",
        teardown="{python} -m mcpforge.stubenv teardown {root}",
    )


@dataclass
class EnvHandle:
    env_name: str
    root_path: Path
    created_at: str
    provider_id: str

    @property
    def scratch(self) -> Path:
        return self.root_path / "scratch"

    @property
    def live(self) -> bool:
        return self.root_path.is_dir()


def _tail(text: str, n: int = STDERR_TAIL) -> str:
    return text[-n:]


class EnvManager:
    def __init__(self, workdir: str | Path, provider: Provider, *, setup_timeout: float = 600.0,
                 emit: Optional[Emit] = None):
        self.workdir = Path(workdir).resolve()
        self.envs_dir = self.workdir / "envs"
        self.provider = provider
        self.setup_timeout = setup_timeout
        self.emit = emit or (lambda actor, kind, payload: None)

    def root_for(self, env_name: str) -> Path:
        return self.envs_dir / env_name

    def _run(self, argv: list[str], cwd: Path, timeout: float) -> subprocess.CompletedProcess:
        try:
            return subprocess.run(argv, cwd=cwd, capture_output=True, text=True, timeout=timeout)
        except FileNotFoundError as exc:
            return subprocess.CompletedProcess(argv, 127, "", str(exc))
        except subprocess.TimeoutExpired as exc:
            err = exc.stderr.decode() if isinstance(exc.stderr, bytes) else (exc.stderr or "")
            return subprocess.CompletedProcess(argv, -9, "", err + f"\n[timed out after {timeout}s]")

    def _step_argv(self, step: str, profile: EnvProfile, root: Path) -> list[str]:
        kw = dict(env_name=profile.env_name, root=root)
        if step == CREATE_STEP:
            return self.provider.render("create", **kw)
        if step == INSTALL_STEP:
            return self.provider.render("install", packages=[d.spec for d in profile.dependencies], **kw)
        return self.provider.render("run", command=["sh", "-c", step], **kw)

    def provision(self, profile: EnvProfile) -> EnvHandle:
        root = self.root_for(profile.env_name)
        root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(root / ".lock")):
            marker = root / ".ready"
            if marker.is_file() and marker.read_text().strip() == profile.digest():
                created = (root / ".created").read_text().strip() if (root / ".created").is_file() else utcnow()
                return EnvHandle(profile.env_name, root, created, self.provider.provider_id)
            marker.unlink(missing_ok=True)
            (root / "scratch").mkdir(exist_ok=True)
            for index, step in enumerate(profile.setup_steps):
                argv = self._step_argv(step, profile, root)
                proc = self._run(argv, root, self.setup_timeout)
                self.emit("envman", "observation", {
                    "op": "provision_step",
                    "env_name": profile.env_name,
                    "step": index,
                    "command": step,
                    "exit_code": proc.returncode,
                    "stdout": _tail(proc.stdout),
                    "stderr": _tail(proc.stderr),
                })
                if proc.returncode != 0:
                    raise ProvisionError(index, proc.returncode, _tail(proc.stderr), step)
            created = utcnow()
            (root / ".created").write_text(created + "\n")
            (root / "profile.json").write_text(json.dumps(profile.to_dict(), indent=2) + "\n")
            marker.write_text(profile.digest() + "\n")
        return EnvHandle(profile.env_name, root, created, self.provider.provider_id)

    def provision_with_recovery(self, profile: EnvProfile, tool_script: str = "") -> tuple[EnvHandle, EnvProfile, list[RecoveryStrategy]]:
        """Provision, walking the recovery ladder on failure.

        Returns the handle, the profile that finally worked and the strategies
        applied.  Raises RecoveryExhausted (with ``strategies`` attached) once the
        ladder reaches discard.
        """
        applied: list[RecoveryStrategy] = []
        while True:
            try:
                return self.provision(profile), profile, applied
            except ProvisionError as exc:
                self._discard_partial(profile.env_name)
                try:
                    profile = recover(profile, exc, tool_script)
                except RecoveryExhausted as exhausted:
                    applied.append(RecoveryStrategy.DISCARD)
                    self.emit("envman", "error", {
                        "op": "recover", "env_name": profile.env_name,
                        "strategy": RecoveryStrategy.DISCARD.value, "stderr": exc.stderr_tail,
                    })
                    exhausted.strategies = applied
                    exhausted.last_error = exc
                    raise
                strategy = strategy_for_round(profile.recovery_round)
                applied.append(strategy)
                self.emit("envman", "observation", {
                    "op": "recover",
                    "env_name": profile.env_name,
                    "strategy": strategy.value,
                    "recovery_round": profile.recovery_round,
                    "dependencies": [d.spec for d in profile.dependencies],
                })

    def _discard_partial(self, env_name: str) -> None:
        root = self.root_for(env_name)
        if not root.exists():
            return
        argv = self.provider.render("teardown", env_name=env_name, root=root)
        self._run(argv, root, self.setup_timeout)
        shutil.rmtree(root, ignore_errors=True)

    def destroy(self, handle: EnvHandle) -> bool:
        """Tear the environment down; a second call is a no-op."""
        root = handle.root_path
        if not root.exists():
            return True
        with FileLock(str(root / ".lock")):
            argv = self.provider.render("teardown", env_name=handle.env_name, root=root)
            proc = self._run(argv, root, self.setup_timeout)
            if proc.returncode != 0:
                (root / ".orphaned").write_text(utcnow() + "\n")
                (root / ".ready").unlink(missing_ok=True)
                raise TeardownError(f"teardown of {handle.env_name} failed: {_tail(proc.stderr, 300)}")
        shutil.rmtree(root, ignore_errors=True)
        return True

    def gc(self, ttl: float, referenced: set[str] = frozenset(), now: Optional[float] = None) -> tuple[list[str], list[str]]:
        """Remove env roots older than ``ttl`` seconds that no registry record references."""
        now = time.time() if now is None else now
        removed, failed = [], []
        if not self.envs_dir.is_dir():
            return removed, failed
        for root in sorted(p for p in self.envs_dir.iterdir() if p.is_dir()):
            if root.name in referenced:
                continue
            stamp = root / ".created"
            age = now - (stamp.stat().st_mtime if stamp.exists() else root.stat().st_mtime)
            if age <= ttl:
                continue
            if (root / ".orphaned").exists():
                # teardown already failed once; only the files are left to reclaim
                shutil.rmtree(root, ignore_errors=True)
                removed.append(root.name)
                continue
            try:
                self.destroy(EnvHandle(root.name, root, "", self.provider.provider_id))
                removed.append(root.name)
            except TeardownError as exc:
                logger.warning("%s", exc)
                failed.append(root.name)
        return removed, failed
