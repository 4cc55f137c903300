"""Run configuration: one TOML document plus ALITA_* environment overrides.

Example ``mcpforge.toml``::

    workdir = ".mcpforge"
    offline = true
    replay = "fixtures/case_a.jsonl"
    fixtures = "fixtures/web"

    [provider]
    kind = "stub"               # conda | stub | custom
    wheelhouse = "fixtures/wheelhouse"

    [models]
    manager = "claude-3-7-sonnet"
    scriptgen = "gpt-4o"

Provider credentials are never read from this file; they come from
ALITA_PROVIDER_URL / ALITA_PROVIDER_KEY (optionally suffixed per role slot).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomli

from .envman import EnvManager, Provider, conda_provider, stub_provider
from .errors import MCPForgeError, ParseError
from .gateway import ROLE_SLOTS, Gateway, HttpBackend, ReplayBackend, load_replay
from .manager import Manager
from .mcpbox import REUSE_THRESHOLD, Registry
from .webagent import VIEWPORT_SIZE, HttpFetcher, HttpSearch, WebAgent

DEFAULT_CONFIG_NAME = "mcpforge.toml"
PROVIDER_KINDS = ("conda", "stub", "custom")


class ConfigError(MCPForgeError):
    pass


@dataclass
class RunConfig:
    workdir: Path = Path(".mcpforge")
    registry: Optional[Path] = None
    provider_kind: Optional[str] = None  # None: stub when offline, conda otherwise
    provider_templates: dict = field(default_factory=dict)
    wheelhouse: Optional[Path] = None
    model_ids: dict = field(default_factory=dict)
    loop_budget: int = 12
    viewport_size: int = VIEWPORT_SIZE
    reuse_threshold: float = REUSE_THRESHOLD
    exec_timeout: float = 120.0
    setup_timeout: float = 600.0
    llm_timeout: float = 120.0
    offline: bool = False
    replay: Optional[Path] = None
    fixtures: Optional[Path] = None
    search_endpoints: dict = field(default_factory=dict)

    @property
    def registry_path(self) -> Path:
        return self.registry or self.workdir / "registry"

    def validate(self) -> "RunConfig":
        if self.offline:
            # offline runs never touch the network, so default to the filesystem-only provider
            # and look for web fixtures and the wheelhouse next to the replay script
            if self.fixtures is None and self.replay is not None:
                self.fixtures = self.replay.parent
            if self.provider_kind is None:
                self.provider_kind = "stub"
            if self.wheelhouse is None and self.fixtures is not None and (self.fixtures / "wheelhouse").is_dir():
                self.wheelhouse = self.fixtures / "wheelhouse"
        if self.provider_kind is None:
            self.provider_kind = "conda"
        if self.offline and (self.replay is None or self.fixtures is None):
            raise ConfigError("offline mode needs both a replay script and a web fixture directory")
        for name in ("loop_budget", "viewport_size", "exec_timeout", "setup_timeout", "llm_timeout"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.reuse_threshold <= 1:
            raise ConfigError("reuse_threshold must be within [0, 1]")
        if self.provider_kind not in PROVIDER_KINDS:
            raise ConfigError(f"provider kind must be one of {', '.join(PROVIDER_KINDS)}")
        if self.provider_kind == "custom":
            missing = [k for k in ("create", "install", "run", "teardown") if k not in self.provider_templates]
            if missing:
                raise ConfigError(f"custom provider lacks templates: {', '.join(missing)}")
        unknown = set(self.model_ids) - set(ROLE_SLOTS)
        if unknown:
            raise ConfigError(f"unknown role slots in [models]: {', '.join(sorted(unknown))}")
        return self


_CREDENTIAL_NAMES = {"key", "api_key", "apikey", "token", "password", "secret"}


def _credential_keys(data: dict, prefix: str = "") -> list[str]:
    found = []
    for k, v in data.items():
        if isinstance(v, dict):
            found += _credential_keys(v, f"{prefix}{k}.")
        elif k.lower() in _CREDENTIAL_NAMES:
            found.append(prefix + k)
    return found


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


def load_config(path: Optional[str | Path] = None, environ: Optional[dict] = None) -> RunConfig:
    env = os.environ if environ is None else environ
    path = path or env.get("ALITA_CONFIG")
    if path is None and Path(DEFAULT_CONFIG_NAME).is_file():
        path = DEFAULT_CONFIG_NAME
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            data = tomli.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        base = p.resolve().parent
        leaked = _credential_keys(data)
        if leaked:
            raise ConfigError(f"{p}: credentials are not read from config files ({', '.join(leaked)}); "
                              "set ALITA_PROVIDER_KEY instead")

    def rel(value) -> Optional[Path]:
        if value in (None, ""):
            return None
        v = Path(value).expanduser()
        return v if v.is_absolute() else base / v

    cfg = RunConfig()
    try:
        if "workdir" in data:
            cfg.workdir = rel(data["workdir"])
        cfg.registry = rel(data.get("registry"))
        cfg.offline = bool(data.get("offline", False))
        cfg.replay = rel(data.get("replay"))
        cfg.fixtures = rel(data.get("fixtures"))
        cfg.loop_budget = int(data.get("loop_budget", cfg.loop_budget))
        cfg.viewport_size = int(data.get("viewport_size", cfg.viewport_size))
        cfg.reuse_threshold = float(data.get("reuse_threshold", cfg.reuse_threshold))
        timeouts = data.get("timeouts", {})
        cfg.exec_timeout = float(timeouts.get("execution", cfg.exec_timeout))
        cfg.setup_timeout = float(timeouts.get("setup", cfg.setup_timeout))
        cfg.llm_timeout = float(timeouts.get("llm", cfg.llm_timeout))
        provider = dict(data.get("provider", {}))
        cfg.provider_kind = provider.pop("kind", cfg.provider_kind)
        cfg.wheelhouse = rel(provider.pop("wheelhouse", None))
        cfg.provider_templates = provider
        cfg.model_ids = dict(data.get("models", {}))
        cfg.search_endpoints = dict(data.get("search", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None

    if "ALITA_WORKDIR" in env:
        cfg.workdir = Path(env["ALITA_WORKDIR"])
    if "ALITA_REGISTRY" in env:
        cfg.registry = Path(env["ALITA_REGISTRY"])
    if "ALITA_OFFLINE" in env:
        cfg.offline = _truthy(env["ALITA_OFFLINE"])
    if "ALITA_REPLAY" in env:
        cfg.replay = Path(env["ALITA_REPLAY"])
    if "ALITA_FIXTURES" in env:
        cfg.fixtures = Path(env["ALITA_FIXTURES"])
    if "ALITA_PROVIDER" in env:
        cfg.provider_kind = env["ALITA_PROVIDER"]
    if "ALITA_WHEELHOUSE" in env:
        cfg.wheelhouse = Path(env["ALITA_WHEELHOUSE"])
    for slot in ROLE_SLOTS:
        key = f"ALITA_MODEL_{slot.upper()}"
        if key in env:
            cfg.model_ids[slot] = env[key]
    return cfg


def build_provider(cfg: RunConfig) -> Provider:
    if cfg.provider_kind == "stub":
        return stub_provider(cfg.wheelhouse)
    if cfg.provider_kind == "conda":
        return conda_provider()
    t = cfg.provider_templates
    return Provider(t.get("id", "custom"), t["create"], t["install"], t["run"], t["teardown"])


def build_envman(cfg: RunConfig) -> EnvManager:
    return EnvManager(cfg.workdir, build_provider(cfg), setup_timeout=cfg.setup_timeout)


def build_gateway(cfg: RunConfig) -> Gateway:
    if cfg.replay is not None:
        try:
            script = load_replay(cfg.replay)
        except (OSError, ParseError) as exc:
            raise ConfigError(f"cannot read replay script: {exc}") from None
        return Gateway(ReplayBackend(script), cfg.model_ids)
    return Gateway(HttpBackend.from_env(timeout=cfg.llm_timeout), cfg.model_ids)


def build_webagent(cfg: RunConfig) -> WebAgent:
    if cfg.offline or cfg.fixtures is not None and not cfg.search_endpoints:
        if cfg.fixtures is None:
            raise ConfigError("no web fixtures configured")
        return WebAgent.offline(cfg.fixtures, cfg.viewport_size)
    return WebAgent(HttpFetcher(), HttpSearch(cfg.search_endpoints), cfg.viewport_size)


def build_manager(cfg: RunConfig) -> Manager:
    cfg.validate()
    return Manager(
        build_gateway(cfg),
        Registry(cfg.registry_path),
        build_envman(cfg),
        build_webagent(cfg),
        cfg.workdir,
        loop_budget=cfg.loop_budget,
        reuse_threshold=cfg.reuse_threshold,
        exec_timeout=cfg.exec_timeout,
    )
