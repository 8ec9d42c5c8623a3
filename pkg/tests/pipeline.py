"""Drives the whole toy pipeline through the CLI in one directory."""

import contextlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from buildmend import cli

import gitfixtures

CUTOFF = "2024-01-01T00:00:00Z"


@dataclass
class Run:
    root: Path
    topo: gitfixtures.Topology
    outputs: dict = field(default_factory=dict)

    @property
    def out(self) -> Path:
        return self.root / "out"

    @property
    def repo(self) -> Path:
        return self.topo.repo.path

    def cli(self, *args) -> tuple[int, dict | None, str]:
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            status = cli.main(["--out", str(self.out), *map(str, args)])
        text = stdout.getvalue()
        return status, json.loads(text) if text.strip() else None, stderr.getvalue()

    def step(self, name, *args) -> dict:
        status, result, err = self.cli(name, *args)
        if status != 0:
            raise AssertionError(f"{name} exited {status}: {err}")
        self.outputs[name] = result
        return result


def prepare(root: Path) -> Run:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    topo = gitfixtures.toy_repo(root / "blinky")
    gitfixtures.write_toy_cassette(root / "cassette", topo)
    (root / "replay.json").write_text(json.dumps({"responses": [
        {"text": "```c\n" + gitfixtures.toy_fixed_window() + "```\n"}]}))
    (root / "fix.txt").write_text(gitfixtures.toy_fixed_window())
    return Run(root, topo)


def run_to_classify(run: Run) -> str:
    """collect, reconstruct (with a local build), parse and classify; returns the run id."""
    run.step("collect", "--replay", run.root / "cassette", "--until", CUTOFF,
             "--clone", f"{gitfixtures.TOY_SLUG}={run.repo}")
    rec = run.step("reconstruct", "--workspace", run.repo, "--commit", run.topo.commits["A2"],
                   "--job", gitfixtures.TOY_JOB, "--project", gitfixtures.TOY_SLUG, "--execute")
    run.step("parse", "--run-id", rec["run_id"])
    run.step("classify")
    return rec["run_id"]


def full_pipeline(root: Path, provider: str = "replay") -> Run:
    run = prepare(root)
    run_to_classify(run)
    run.step("mine-fixes", "--repo", run.repo, "--baselines", run.out / "baselines.jsonl",
             "--diagnostics", run.out / "classified.jsonl")
    if provider == "replay":
        run.step("repair", "--change", f"{gitfixtures.TOY_SLUG}#1", "--provider", f"replay:{run.root / 'replay.json'}",
                 "--strategy", "random-all")
    else:
        run.step("repair", "--change", f"{gitfixtures.TOY_SLUG}#1", "--provider", provider,
                 "--answer", run.root / "fix.txt", "--strategy", "random-all", "--include-own-fix")
    run.step("report")
    return run
