from pathlib import Path

import pytest

from mcpforge.config import ConfigError, RunConfig, build_gateway, build_provider, build_webagent, load_config
from mcpforge.gateway import HttpBackend, ReplayBackend
from mcpforge.webagent import FixtureFetcher

from conftest import CASE_A_REPLAY, FIXTURES, WHEELHOUSE


def write(tmp_path, text):
    path = tmp_path / "mcpforge.toml"
    path.write_text(text)
    return path


def test_defaults_without_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = load_config(environ={})
    assert cfg.loop_budget == 12 and cfg.viewport_size == 8192 and cfg.reuse_threshold == 0.35
    assert cfg.validate().provider_kind == "conda"


def test_file_values_and_relative_paths(tmp_path):
    path = write(tmp_path, """
workdir = "state"
loop_budget = 5
[timeouts]
execution = 9.5
[provider]
kind = "stub"
wheelhouse = "wh"
[models]
manager = "big-model"
""")
    cfg = load_config(path, environ={})
    assert cfg.workdir == tmp_path / "state"
    assert cfg.registry_path == tmp_path / "state" / "registry"
    assert cfg.loop_budget == 5 and cfg.exec_timeout == 9.5
    assert cfg.provider_kind == "stub" and cfg.wheelhouse == tmp_path / "wh"
    assert cfg.model_ids == {"manager": "big-model"}


def test_environment_overrides_file(tmp_path):
    path = write(tmp_path, 'workdir = "state"\n[models]\nmanager = "a"\n')
    cfg = load_config(path, environ={"ALITA_WORKDIR": "/elsewhere", "ALITA_MODEL_MANAGER": "b",
                                     "ALITA_OFFLINE": "yes", "ALITA_REPLAY": str(CASE_A_REPLAY)})
    assert cfg.workdir == Path("/elsewhere")
    assert cfg.model_ids["manager"] == "b"
    assert cfg.offline and cfg.replay == CASE_A_REPLAY


def test_config_path_from_environment(tmp_path):
    path = write(tmp_path, "loop_budget = 3\n")
    assert load_config(environ={"ALITA_CONFIG": str(path)}).loop_budget == 3


@pytest.mark.parametrize("text", [
    'api_key = "sk-123"',
    '[provider]\nkind = "stub"\ntoken = "abc"',
    '[search.web]\nkey = "abc"',
])
def test_credentials_in_file_rejected(tmp_path, text):
    with pytest.raises(ConfigError, match="ALITA_PROVIDER_KEY"):
        load_config(write(tmp_path, text), environ={})


@pytest.mark.parametrize("text,needle", [
    ("loop_budget = [", "mcpforge.toml"),
    ('loop_budget = "many"', "bad config value"),
    ("loop_budget = 0", "loop_budget"),
    ("reuse_threshold = 1.5", "reuse_threshold"),
    ('[provider]\nkind = "docker"', "provider kind"),
    ('[provider]\nkind = "custom"\ncreate = "x"', "lacks templates"),
    ('[models]\noracle = "m"', "unknown role slots"),
])
def test_bad_values(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(write(tmp_path, text), environ={}).validate()


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/no/such/file.toml", environ={})


def test_offline_defaults_follow_replay():
    cfg = RunConfig(offline=True, replay=CASE_A_REPLAY).validate()
    assert cfg.fixtures == FIXTURES
    assert cfg.provider_kind == "stub"
    assert cfg.wheelhouse == WHEELHOUSE
    assert isinstance(build_gateway(cfg).backend, ReplayBackend)
    assert isinstance(build_webagent(cfg).browser.fetcher, FixtureFetcher)
    assert build_provider(cfg).provider_id == "stub"


def test_offline_needs_replay():
    with pytest.raises(ConfigError, match="replay"):
        RunConfig(offline=True).validate()


def test_online_gateway_uses_env_credentials(monkeypatch):
    monkeypatch.setenv("ALITA_PROVIDER_URL", "http://127.0.0.1:9/v1")
    gw = build_gateway(RunConfig().validate())
    assert isinstance(gw.backend, HttpBackend)


def test_unreadable_replay(tmp_path):
    bad = tmp_path / "r.jsonl"
    bad.write_text("{oops\n")
    with pytest.raises(ConfigError, match="replay"):
        build_gateway(RunConfig(offline=True, replay=bad, fixtures=tmp_path).validate())
