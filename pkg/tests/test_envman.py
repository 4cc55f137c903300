import hashlib
import os
import threading
import time

import pytest

from mcpforge.envman import (
    CREATE_STEP,
    INSTALL_STEP,
    Dependency,
    EnvHandle,
    EnvManager,
    EnvProfile,
    MetadataBundle,
    Provider,
    RecoveryStrategy,
    derive_env_name,
    import_tokens,
    inspect_metadata,
    parse_dependency,
    plan_env,
    recover,
    relax,
    stub_provider,
)
from mcpforge.errors import PlanError, ProvisionError, RecoveryExhausted, TeardownError
from mcpforge.scriptgen import ScriptBundle

from conftest import make_wheelhouse


def name_oracle(task_id, source_key):
    return "alita-" + hashlib.sha256((task_id + "\n" + source_key).encode()).hexdigest()[:12]


def bundle_with_env(env: str, tool: str = "print(1)\n") -> ScriptBundle:
    return ScriptBundle(tool_script=tool, env_setup_script=env, entry_command=["python", "tool.py"])


def profile(name_seed: str, deps=(), residual=(), round_no=0) -> EnvProfile:
    deps = [parse_dependency(d) for d in deps]
    steps = [CREATE_STEP] + ([INSTALL_STEP] if deps else []) + list(residual)
    return EnvProfile(derive_env_name("t", name_seed), deps, steps, recovery_round=round_no)


# -- metadata ---------------------------------------------------------------

def test_inspect_readme():
    assert inspect_metadata([("README.md", "hello")]).readme_text == "hello"


def test_inspect_empty():
    md = inspect_metadata([])
    assert md.empty
    assert md.readme_text is None and md.requirements_text is None and md.shell_script_texts == []


def test_inspect_shell_scripts_keep_order():
    md = inspect_metadata([("setup.sh", "a"), ("docs/notes.txt", "ignored"), ("install.sh", "b")])
    assert md.shell_script_texts == ["a", "b"]


def test_inspect_requirements_by_basename():
    md = inspect_metadata([("repo/requirements-dev.txt", "pytest\n")])
    assert md.requirements_text == "pytest\n"


# -- planning ---------------------------------------------------------------

def test_case_a_install_line():
    prof = plan_env(MetadataBundle(), bundle_with_env("pip install youtube-transcript-api\n"), "task-042")
    assert prof.dependencies == [Dependency("youtube-transcript-api", "")]
    assert prof.setup_steps == [CREATE_STEP, INSTALL_STEP]


def test_case_a_env_script_activation_lines_are_provider_business():
    env = ("conda create -n youtube_transcript python -y\nconda activate youtube_transcript\n"
           "pip install youtube-transcript-api\n")
    prof = plan_env(MetadataBundle(), bundle_with_env(env), "task-042")
    assert prof.setup_steps == [CREATE_STEP, INSTALL_STEP]


def test_minimal_profile():
    prof = plan_env(MetadataBundle(), bundle_with_env("echo nothing to install\n"), "t")
    assert prof.dependencies == []
    assert prof.setup_steps == [CREATE_STEP, "echo nothing to install"]
    prof = plan_env(MetadataBundle(), bundle_with_env("# just a comment\n"), "t")
    assert prof.setup_steps == [CREATE_STEP]


def test_requirements_text_hand_parsed():
    md = MetadataBundle(requirements_text="a==1.2.3\n# note\nb>=2\n")
    prof = plan_env(md, bundle_with_env("true\n"), "t")
    assert [d.spec for d in prof.dependencies] == ["a==1.2.3", "b>=2"]


def test_dependency_union_first_occurrence_wins():
    md = MetadataBundle(requirements_text="requests==2.31.0\n", shell_script_texts=["pip install -q numpy requests\n"])
    prof = plan_env(md, bundle_with_env("pip3 install --upgrade Requests pandas~=2.1\n"), "t")
    assert [d.spec for d in prof.dependencies] == ["requests==2.31.0", "pandas~=2.1", "numpy"]


@pytest.mark.parametrize("line,names", [
    ("python -m pip install -i https://mirror/simple foo bar==1.0", ["foo", "bar==1.0"]),
    ("conda install -c conda-forge -y ffmpeg", ["ffmpeg"]),
    ("uv pip install httpx  # fast", ["httpx"]),
])
def test_installer_variants(line, names):
    prof = plan_env(MetadataBundle(), bundle_with_env(line + "\n"), "t")
    assert [d.spec for d in prof.dependencies] == names


@pytest.mark.parametrize("text", ["pkg>1", "pkg==", "pkg~=1", "==1.0", "pkg[extra]==1.0", "pkg==1.0; python_version<'3'"])
def test_dependency_grammar_rejects(text):
    with pytest.raises(PlanError):
        parse_dependency(text)


@pytest.mark.parametrize("text,name,constraint", [
    ("pkg", "pkg", ""), ("pkg==1.2.3", "pkg", "==1.2.3"), ("pkg ~= 1.2", "pkg", "~=1.2"),
    ("pkg>=2", "pkg", ">=2"), ("pkg<=3.1", "pkg", "<=3.1"), ("my.pkg-name_x==0.1", "my.pkg-name_x", "==0.1"),
])
def test_dependency_grammar_accepts(text, name, constraint):
    assert parse_dependency(text) == Dependency(name, constraint)


def test_env_name_oracle():
    assert derive_env_name("task-042", "github.com/jdepoix/youtube-transcript-api") == \
        name_oracle("task-042", "github.com/jdepoix/youtube-transcript-api")


def test_env_name_deterministic_and_distinct():
    assert derive_env_name("t1", "s") == derive_env_name("t1", "s")
    assert derive_env_name("t1", "s") != derive_env_name("t2", "s")
    with pytest.raises(ValueError):
        derive_env_name("", "s")


def test_profile_rejects_foreign_names():
    with pytest.raises(PlanError):
        EnvProfile("youtube_transcript")


# -- recovery ladder --------------------------------------------------------

@pytest.mark.parametrize("before,after", [
    ("pkg==1.2.3", "pkg~=1.2"), ("pkg==1.2", "pkg~=1.2"), ("pkg==4", "pkg"),
    ("pkg~=1.2", "pkg"), ("pkg>=2", "pkg>=2"), ("pkg", "pkg"),
])
def test_relax_rule(before, after):
    assert relax(parse_dependency(before)).spec == after


def test_round_zero_relaxes():
    p = recover(profile("r", ["pkg==1.2.3"], ["echo hi"]))
    assert [d.spec for d in p.dependencies] == ["pkg~=1.2"]
    assert p.recovery_round == 1
    assert p.setup_steps == [CREATE_STEP, INSTALL_STEP, "echo hi"]


def test_round_one_keeps_imported_deps_only():
    p = recover(profile("r", ["used-lib", "unused-lib"], round_no=1), tool_script="import used_lib\nprint(1)\n")
    assert [d.spec for d in p.dependencies] == ["used-lib"]
    assert p.recovery_round == 2


def test_round_one_can_drop_install_step():
    p = recover(profile("r", ["unused-lib"], round_no=1), tool_script="print(1)\n")
    assert p.dependencies == [] and p.setup_steps == [CREATE_STEP]


def test_round_two_exhausted():
    with pytest.raises(RecoveryExhausted):
        recover(profile("r", ["x"], round_no=2))


def test_import_tokens():
    script = ("import os, sys\nfrom youtube_transcript_api import YouTubeTranscriptApi\n"
              "import numpy.linalg\nconst ax = require('axios')\nimport fs from 'node-fetch'\n")
    assert {"os", "sys", "youtube_transcript_api", "numpy", "axios", "node_fetch"} <= import_tokens(script)


# -- provisioning -----------------------------------------------------------

@pytest.fixture
def wheelhouse(tmp_path):
    return make_wheelhouse(tmp_path / "wh", {"alpha": ["1.2.5"], "beta": ["2.0.0"], "used-lib": ["0.3.0"]})


def test_happy_path(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    prof = profile("happy", ["alpha"])
    handle = mgr.provision(prof)
    assert handle.env_name == prof.env_name
    assert handle.root_path.is_dir() and handle.live
    assert (handle.root_path / "site" / "alpha" / "__init__.py").is_file()
    assert (handle.root_path / ".ready").read_text().strip() == prof.digest()


def test_ready_marker_reuses_environment(tmp_path, wheelhouse):
    events = []
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse), emit=lambda *a: events.append(a))
    prof = profile("reuse", ["alpha"])
    mgr.provision(prof)
    n = len(events)
    mgr.provision(prof)
    assert len(events) == n


def test_failing_step_two(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    prof = profile("fail", ["alpha"], ["echo boom >&2; exit 3"])
    with pytest.raises(ProvisionError) as info:
        mgr.provision(prof)
    assert info.value.step == 2
    assert info.value.exit_code == 3
    assert "boom" in info.value.stderr_tail


def test_install_failure_is_step_one(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    with pytest.raises(ProvisionError) as info:
        mgr.provision(profile("missing", ["gamma"]))
    assert info.value.step == 1
    assert "No matching distribution found for gamma" in info.value.stderr_tail


def test_missing_provider_binary_is_a_failed_step(tmp_path):
    mgr = EnvManager(tmp_path / "w", Provider("ghost", "no-such-binary-xyz {root}", "x", "x", "x"))
    with pytest.raises(ProvisionError) as info:
        mgr.provision(profile("ghost"))
    assert info.value.step == 0 and info.value.exit_code == 127


def test_recovery_relax_then_success(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    handle, final, applied = mgr.provision_with_recovery(profile("relax", ["alpha==1.2.3"]))
    assert applied == [RecoveryStrategy.RELAX_VERSIONS]
    assert [d.spec for d in final.dependencies] == ["alpha~=1.2"]
    assert handle.live


def test_recovery_minimal_then_success(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    handle, final, applied = mgr.provision_with_recovery(
        profile("minimal", ["used-lib==0.3.0", "unused-lib==9.9.9"]), "import used_lib\n")
    assert applied == [RecoveryStrategy.RELAX_VERSIONS, RecoveryStrategy.MINIMAL_DEPS]
    assert [d.spec for d in final.dependencies] == ["used-lib~=0.3"]


def test_recovery_exhausted_discards(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    prof = profile("hopeless", ["gamma==1.0.0"])
    with pytest.raises(RecoveryExhausted) as info:
        mgr.provision_with_recovery(prof, "import gamma\n")
    assert info.value.strategies == [RecoveryStrategy.RELAX_VERSIONS, RecoveryStrategy.MINIMAL_DEPS,
                                     RecoveryStrategy.DISCARD]
    assert not mgr.root_for(prof.env_name).exists()


def test_destroy_is_idempotent(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    handle = mgr.provision(profile("gone"))
    assert mgr.destroy(handle) is True
    assert not handle.root_path.exists()
    assert mgr.destroy(handle) is True


def test_teardown_failure_marks_orphan(tmp_path, wheelhouse):
    base = stub_provider(wheelhouse)
    failing = Provider("stub", base.create, base.install, base.run, "sh -c 'echo nope >&2; exit 1'")
    mgr = EnvManager(tmp_path / "w", failing)
    handle = mgr.provision(profile("orphan"))
    with pytest.raises(TeardownError):
        mgr.destroy(handle)
    assert (handle.root_path / ".orphaned").is_file()
    # gc reclaims the orphan once it is old enough
    removed, failed = mgr.gc(ttl=0, now=time.time() + 10)
    assert removed == [handle.env_name] and failed == []
    assert not handle.root_path.exists()


def test_gc_respects_ttl_and_references(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    old = mgr.provision(profile("old"))
    kept = mgr.provision(profile("kept"))
    fresh = mgr.provision(profile("fresh"))
    past = time.time() - 3 * 86400
    for h in (old, kept):
        os.utime(h.root_path / ".created", (past, past))
    removed, failed = mgr.gc(ttl=86400, referenced={kept.env_name})
    assert removed == [old.env_name] and failed == []
    assert kept.root_path.exists() and fresh.root_path.exists()


def test_gc_without_envs(tmp_path):
    assert EnvManager(tmp_path / "nothing", stub_provider()).gc(ttl=0) == ([], [])


def test_four_concurrent_provisions_are_isolated(tmp_path, wheelhouse):
    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse))
    profiles = [profile(f"par-{i}", [["alpha", "beta", "used-lib", "alpha"][i]]) for i in range(4)]
    handles, errors = [None] * 4, []

    def work(i):
        try:
            handles[i] = mgr.provision(profiles[i])
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert len({h.env_name for h in handles}) == 4
    assert len({h.root_path for h in handles}) == 4
    for h, p in zip(handles, profiles):
        installed = (h.root_path / "site" / "INSTALLED").read_text().split()
        assert [line.split("==")[0] for line in installed] == [p.dependencies[0].name]


def test_same_profile_in_parallel_provisions_once(tmp_path, wheelhouse):
    events = []
    lock = threading.Lock()

    def emit(actor, kind, payload):
        with lock:
            events.append(payload)

    mgr = EnvManager(tmp_path / "w", stub_provider(wheelhouse), emit=emit)
    prof = profile("shared", ["alpha"])
    threads = [threading.Thread(target=mgr.provision, args=(prof,)) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len([e for e in events if e.get("op") == "provision_step"]) == len(prof.setup_steps)
    assert (mgr.root_for(prof.env_name) / "site" / "INSTALLED").read_text().count("alpha") == 1


def test_handle_scratch_path(tmp_path):
    h = EnvHandle("alita-000000000000", tmp_path, "now", "stub")
    assert h.scratch == tmp_path / "scratch"
