"""Run a reconstructed build stage and capture its log."""

from __future__ import annotations

import base64
import logging
import os
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from .ciconfig import ReconstructionArtifacts, secret_matcher
from .core import RawLog, format_timestamp, parse_timestamp, utcnow, write_json
from .errors import PreconditionError, RuntimeUnavailableError

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 1800
DEFAULT_CONCURRENCY = 2
TIMEOUT_STATUS = 124
LAUNCH_FAILURE_STATUS = 127

_admission = threading.BoundedSemaphore(DEFAULT_CONCURRENCY)
_workspace_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def set_concurrency(limit: int) -> None:
    """Replace the admission gate; only call while no build is running."""
    global _admission
    if limit < 1:
        raise PreconditionError("concurrency limit must be at least 1")
    _admission = threading.BoundedSemaphore(limit)


def _workspace_lock(path: Path) -> threading.Lock:
    with _locks_guard:
        return _workspace_locks.setdefault(str(path.resolve()), threading.Lock())


@dataclass
class BuildResult:
    exit_status: int
    raw_log: RawLog
    duration: float
    environment: dict
    mode: str
    timed_out: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.exit_status == 0

    def to_json(self) -> dict:
        return {
            "run_id": self.raw_log.run_id,
            "exit_status": self.exit_status,
            "duration_s": round(self.duration, 3),
            "environment": self.environment,
            "mode": self.mode,
            "timed_out": self.timed_out,
            "log": base64.b64encode(self.raw_log.data).decode("ascii"),
        }


def write_build_log(path, result: BuildResult, extra: dict | None = None) -> Path:
    return write_json(path, {**result.to_json(), **(extra or {})})


def read_build_log(path) -> RawLog:
    """Load ``build_log.json`` into a :class:`RawLog`."""
    import json

    data = json.loads(Path(path).read_text(encoding="utf-8"))
    env = data.get("environment") or {}
    executed = env.get("executed_at")
    return RawLog(
        data=base64.b64decode(data.get("log", "")),
        run_id=str(data.get("run_id", "")),
        job_name=str(data.get("job", "")),
        fetched_at=parse_timestamp(executed) if executed else None,
        source=str(path),
    )


def _run(argv, cwd, env, timeout) -> tuple[int, bytes, bool]:
    """Run with stdout and stderr sharing one pipe so ordering is preserved."""
    proc = subprocess.Popen(
        argv, cwd=cwd, env=env, stdin=subprocess.DEVNULL,
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, start_new_session=True,
    )
    chunks: list[bytes] = []

    def pump():
        while True:
            chunk = proc.stdout.read1(65536) if hasattr(proc.stdout, "read1") else proc.stdout.read(65536)
            if not chunk:
                break
            chunks.append(chunk)

    reader = threading.Thread(target=pump, daemon=True)
    reader.start()
    timed_out = False
    try:
        proc.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()
    reader.join(timeout=5)
    proc.stdout.close()
    data = b"".join(chunks)
    if timed_out:
        data += f"\n[build timed out after {timeout}s]\n".encode()
        return TIMEOUT_STATUS, data, True
    return proc.returncode, data, False


def container_runtime() -> str | None:
    for name in ("docker", "podman"):
        if shutil.which(name):
            return name
    return None


def _execute_local(artifacts, workspace: Path, timeout, run_id):
    # host credentials (forge tokens included) never reach the build or its log
    is_secret = secret_matcher()
    env = {k: v for k, v in os.environ.items() if not is_secret(k)}
    env.update(artifacts.env)
    env["LC_ALL"] = "C"
    environment = {"image_identifier": "local:" + artifacts.metadata.get("image_identifier", ""),
                   "executed_at": format_timestamp(utcnow())}
    with tempfile.TemporaryDirectory(prefix="buildmend-run-") as scratch:
        copy = Path(scratch) / "workspace"
        shutil.copytree(workspace, copy, symlinks=True)
        script = Path(scratch) / "build.sh"
        script.write_text(artifacts.build_script, encoding="utf-8")
        start = time.monotonic()
        try:
            status, data, timed_out = _run(["/bin/sh", str(script)], copy, env, timeout)
        except OSError as exc:
            log.error("could not launch build: %s", exc)
            status, data, timed_out = LAUNCH_FAILURE_STATUS, f"launch failed: {exc}\n".encode(), False
        duration = time.monotonic() - start
    return status, data, timed_out, duration, environment


def _execute_container(artifacts, workspace: Path, timeout, run_id, runtime):
    tag = f"buildmend-recon:{(run_id or 'adhoc').lower()}"
    with tempfile.TemporaryDirectory(prefix="buildmend-ctx-") as ctx:
        Path(ctx, "Dockerfile").write_text(artifacts.container_recipe, encoding="utf-8")
        Path(ctx, "build.sh").write_text(artifacts.build_script, encoding="utf-8")
        status, data, timed_out = _run([runtime, "build", "-q", "-t", tag, ctx], None, None, timeout)
        if status != 0:
            return status, b"image build failed:\n" + data, timed_out, 0.0, {
                "image_identifier": artifacts.metadata.get("image_identifier", ""),
                "executed_at": format_timestamp(utcnow())}
    inspect = subprocess.run([runtime, "image", "inspect", "--format", "{{.Id}}", tag],
                             capture_output=True, text=True, check=False)
    image_id = inspect.stdout.strip() or tag
    environment = {"image_identifier": image_id, "executed_at": format_timestamp(utcnow())}
    start = time.monotonic()
    with tempfile.TemporaryDirectory(prefix="buildmend-run-") as scratch:
        copy = Path(scratch) / "workspace"
        shutil.copytree(workspace, copy, symlinks=True)
        argv = [runtime, "run", "--rm", "-v", f"{copy}:/workspace", "-w", "/workspace", tag]
        status, data, timed_out = _run(argv, None, None, timeout)
    return status, data, timed_out, time.monotonic() - start, environment


def execute(artifacts: ReconstructionArtifacts, workspace, mode: str = "local",
            timeout: float = DEFAULT_TIMEOUT, run_id: str = "") -> BuildResult:
    workspace = Path(workspace)
    if not workspace.is_dir():
        raise PreconditionError(f"workspace {workspace} does not exist")
    if mode not in ("local", "container"):
        raise PreconditionError(f"unknown execution mode {mode!r}")
    runtime = None
    if mode == "container":
        runtime = container_runtime()
        if runtime is None:
            raise RuntimeUnavailableError("no docker or podman executable on PATH")
    with _admission, _workspace_lock(workspace):
        if mode == "local":
            status, data, timed_out, duration, environment = _execute_local(artifacts, workspace, timeout, run_id)
        else:
            status, data, timed_out, duration, environment = _execute_container(
                artifacts, workspace, timeout, run_id, runtime)
    executed = parse_timestamp(environment["executed_at"])
    raw = RawLog(data=data, run_id=run_id, job_name=artifacts.metadata.get("job", ""),
                 fetched_at=executed, source=f"{mode}-build")
    log.info("build %s finished with status %d in %.1fs", run_id or "(adhoc)", status, duration)
    return BuildResult(status, raw, duration, environment, mode, timed_out)


def executed_at(result: BuildResult) -> datetime:
    return parse_timestamp(result.environment["executed_at"])
