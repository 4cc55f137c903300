import json
import socket
from pathlib import Path

import pytest

from mcpforge.config import RunConfig, build_manager
from mcpforge.envman import EnvManager, EnvProfile, derive_env_name, stub_provider
from mcpforge.gateway import Gateway, ReplayBackend, ReplayEntry, ReplayScript
from mcpforge.mcpbox import MCPRecord
from mcpforge.schema import Param, Task
from mcpforge.scriptgen import ScriptBundle, write_bundle

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
CASE_A_REPLAY = FIXTURES / "case_a.jsonl"
CASE_A_TASK = FIXTURES / "case_a.task"
WHEELHOUSE = FIXTURES / "wheelhouse"


def replay_gateway(*entries):
    """Gateway over an in-memory script; entries are (role_slot, response) pairs."""
    return Gateway(ReplayBackend(ReplayScript([ReplayEntry(slot, text) for slot, text in entries])))


def case_a_task() -> Task:
    obj = json.loads(CASE_A_TASK.read_text())
    return Task(obj["query"], obj["id"], obj.get("attachments", []))


def case_a_config(workdir) -> RunConfig:
    return RunConfig(workdir=Path(workdir), offline=True, replay=CASE_A_REPLAY).validate()


def run_case_a(workdir):
    """Run the golden case once; returns (FinalAnswer, Manager)."""
    manager = build_manager(case_a_config(workdir))
    return manager.run_task(case_a_task()), manager


def make_wheelhouse(root: Path, packages: dict) -> Path:
    """packages: {"dist-name": ["1.2.5", ...]}; each version gets an importable module."""
    for dist, versions in packages.items():
        module = dist.replace("-", "_")
        for v in versions:
            pkg = root / f"{dist}-{v}" / module
            pkg.mkdir(parents=True, exist_ok=True)
            (pkg / "__init__.py").write_text(f"VERSION = {v!r}\n")
    return root


def python_bundle(code: str, env: str = "echo ready\n") -> ScriptBundle:
    return ScriptBundle(tool_script=code, env_setup_script=env, entry_command=["python", "tool.py"])


def make_record(tmp_path: Path, name: str, description: str, params=None, task_id="t-fixture") -> MCPRecord:
    """A registrable record whose bundle prints its name and arguments."""
    params = params if params is not None else [Param("text", "string", "input text", "hello")]
    code = (
        "import sys\n"
        f"print({name!r}, ' '.join(sys.argv[1:]))\n"
    )
    bundle_dir = write_bundle(python_bundle(code), tmp_path / "src-bundles" / name)
    profile = EnvProfile(derive_env_name(task_id, name))
    return MCPRecord(name=name, description=description, input_schema=params, bundle_ref=str(bundle_dir),
                     env_profile=profile, provenance={"task_id": task_id})


@pytest.fixture
def stub_envman(tmp_path):
    return EnvManager(tmp_path / "work", stub_provider(WHEELHOUSE))


@pytest.fixture
def no_network(monkeypatch):
    """Fail any attempt to open an outbound socket connection."""
    calls = []

    def guard(self, address, *args, **kwargs):
        calls.append(address)
        raise AssertionError(f"network access attempted: {address!r}")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket.socket, "connect_ex", guard)
    return calls
