"""Filesystem-only environment backend used by the stub provider.

    python -m mcpforge.stubenv create <root> [<env_name>]
    python -m mcpforge.stubenv install [--wheelhouse DIR] <root> <spec>...
    python -m mcpforge.stubenv run <root> -- <argv>...
    python -m mcpforge.stubenv teardown <root>

A wheelhouse is a directory of ``<dist-name>-<version>/`` folders whose
contents are copied into ``<root>/site`` on install.  ``run`` puts that
directory on PYTHONPATH and maps a leading ``python`` to this interpreter.
"""
from __future__ import annotations

import argparse
import os
import shutil
import sys
from pathlib import Path

from packaging.requirements import InvalidRequirement, Requirement
from packaging.utils import canonicalize_name
from packaging.version import InvalidVersion, Version


def _available(wheelhouse: Path) -> dict[str, list[tuple[Version, Path]]]:
    found: dict[str, list[tuple[Version, Path]]] = {}
    if not wheelhouse.is_dir():
        return found
    for entry in wheelhouse.iterdir():
        if not entry.is_dir() or "-" not in entry.name:
            continue
        name, _, ver = entry.name.rpartition("-")
        try:
            found.setdefault(canonicalize_name(name), []).append((Version(ver), entry))
        except InvalidVersion:
            continue
    return found


def cmd_create(args) -> int:
    root = Path(args.root)
    (root / "site").mkdir(parents=True, exist_ok=True)
    (root / "scratch").mkdir(exist_ok=True)
    print(f"created environment {args.env_name or root.name}")
    return 0


def cmd_install(args) -> int:
    root = Path(args.root)
    site = root / "site"
    if not site.is_dir():
        print("ERROR: environment not created", file=sys.stderr)
        return 1
    available = _available(Path(args.wheelhouse)) if args.wheelhouse else {}
    for spec in args.specs:
        try:
            req = Requirement(spec)
        except InvalidRequirement as exc:
            print(f"ERROR: invalid requirement {spec!r}: {exc}", file=sys.stderr)
            return 1
        candidates = sorted(
            (c for c in available.get(canonicalize_name(req.name), []) if req.specifier.contains(c[0], prereleases=True)),
            key=lambda c: c[0],
        )
        if not candidates:
            print(f"ERROR: No matching distribution found for {spec}", file=sys.stderr)
            return 1
        version, src = candidates[-1]
        shutil.copytree(src, site, dirs_exist_ok=True)
        with open(site / "INSTALLED", "a", encoding="utf-8") as fh:
            fh.write(f"{canonicalize_name(req.name)}=={version}\n")
        print(f"installed {req.name} {version}")
    return 0


def cmd_run(args) -> int:
    root = Path(args.root).resolve()
    argv = list(args.argv)
    if argv and argv[0] == "--":
        argv = argv[1:]
    if not argv:
        print("ERROR: nothing to run", file=sys.stderr)
        return 2
    if argv[0] in ("python", "python3"):
        argv[0] = sys.executable
    env = dict(os.environ)
    site = str(root / "site")
    env["PYTHONPATH"] = site + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    env["STUBENV_ROOT"] = str(root)
    sys.stdout.flush()
    try:
        os.execvpe(argv[0], argv, env)
    except OSError as exc:
        print(f"ERROR: cannot execute {argv[0]}: {exc}", file=sys.stderr)
        return 127


def cmd_teardown(args) -> int:
    shutil.rmtree(Path(args.root) / "site", ignore_errors=True)
    print("environment removed")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stubenv")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("create")
    p.add_argument("root")
    p.add_argument("env_name", nargs="?")
    p.set_defaults(fn=cmd_create)
    p = sub.add_parser("install")
    p.add_argument("root")
    p.add_argument("--wheelhouse")
    p.add_argument("specs", nargs="*")
    p.set_defaults(fn=cmd_install)
    p = sub.add_parser("run")
    p.add_argument("root")
    p.add_argument("argv", nargs=argparse.REMAINDER)
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("teardown")
    p.add_argument("root")
    p.set_defaults(fn=cmd_teardown)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
