"""Bounded propose / apply / rebuild repair loop against a pluggable model provider."""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import os
import re
import shutil
import string
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from . import sandbox
from .ciconfig import ReconstructionArtifacts
from .classify import ClassifiedError, percent_half_up
from .core import atomic_write, write_json
from .corpus import FixExample, SelectionStrategy, select_examples
from .errors import DriftError, MultiFileError, NoExamplesError, PreconditionError, ProviderError, RuntimeUnavailableError
from .gitops import ResolutionSize, resolution_size
from .logparse import NormalizedLog, parse_log
from .prompting import DEFAULT_BUDGET, ErroneousSnippet, Prompt, build_prompt, extract_snippet, log_excerpt, read_lines

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 5
REPAIRED = "repaired"
EXHAUSTED = "exhausted"
ABORTED = "aborted"

GARBAGE = "this is not a valid fix @@@\n"


# providers -------------------------------------------------------------------------


class ModelProvider(Protocol):
    name: str
    deterministic: bool

    def generate(self, prompt: Prompt, attempt: int, seed: int) -> str: ...


def prompt_sha256(prompt: Prompt | str) -> str:
    text = prompt.render() if isinstance(prompt, Prompt) else prompt
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ScriptedProvider:
    """Returns a fixed schedule of responses; an Exception entry is raised as a provider error."""

    deterministic = True

    def __init__(self, responses, name: str = "mock:scripted"):
        if not responses:
            raise PreconditionError("scripted provider needs at least one response")
        self.responses = list(responses)
        self.name = name
        self.calls: list[Prompt] = []

    def generate(self, prompt, attempt, seed):
        self.calls.append(prompt)
        item = self.responses[min(attempt, len(self.responses)) - 1]
        if isinstance(item, Exception):
            raise ProviderError(str(item))
        if not isinstance(item, str):
            raise ProviderError("scripted response is not text")
        return item


def success_at(answer: str, k: int | None) -> ScriptedProvider:
    """Garbage before attempt ``k``, ``answer`` from then on; ``k=None`` never succeeds."""
    if k is None:
        return ScriptedProvider([GARBAGE], name="mock:never")
    if k < 1:
        raise PreconditionError("success attempt must be >= 1")
    block = f"```\n{answer.rstrip(chr(10))}\n```\n"
    return ScriptedProvider([GARBAGE] * (k - 1) + [block], name=f"mock:success-at-{k}")


class ReplayProvider:
    """Recorded responses: ``{"responses": [{"prompt_sha256": ..., "text": ...}, ...]}``.

    Looked up by prompt hash first, then by attempt order."""

    deterministic = True

    def __init__(self, path):
        self.path = Path(path)
        self.name = f"replay:{self.path.name}"
        data = json.loads(self.path.read_text(encoding="utf-8"))
        entries = data["responses"] if isinstance(data, dict) else data
        self.ordered = [e["text"] if isinstance(e, dict) else str(e) for e in entries]
        self.by_hash = {e["prompt_sha256"]: e["text"] for e in entries if isinstance(e, dict) and e.get("prompt_sha256")}

    def generate(self, prompt, attempt, seed):
        text = self.by_hash.get(prompt_sha256(prompt))
        if text is None:
            if attempt > len(self.ordered):
                raise ProviderError(f"no recorded response for attempt {attempt}")
            text = self.ordered[attempt - 1]
        return text


class HttpProvider:
    """POSTs ``{"prompt": ...}`` and reads ``{"text": ...}``. Header values may use ``${ENV_VAR}``."""

    deterministic = False

    def __init__(self, endpoint: str, headers: dict[str, str] | None = None, timeout: float = 120.0, name: str = "http"):
        self.endpoint = endpoint
        self.header_template = dict(headers or {})
        self.timeout = timeout
        self.name = name

    def _headers(self) -> dict[str, str]:
        out = {"Content-Type": "application/json"}
        for k, v in self.header_template.items():
            out[k] = string.Template(v).safe_substitute(os.environ)
        return out

    def generate(self, prompt, attempt, seed):
        import requests

        try:
            resp = requests.post(self.endpoint, json={"prompt": prompt.render(), "seed": seed},
                                 headers=self._headers(), timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderError(f"request failed: {exc.__class__.__name__}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"provider answered HTTP {resp.status_code}")
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError("provider response lacks a text field") from exc
        if not isinstance(text, str) or not text.strip():
            raise ProviderError("provider returned empty text")
        return text


def make_provider(spec: str, answer: str | None = None, http_config: dict | None = None) -> ModelProvider:
    if spec == "mock:never":
        return success_at("", None)
    m = re.fullmatch(r"mock:success-at-(\d+)", spec)
    if m:
        if answer is None:
            raise PreconditionError("mock provider needs the human fix to replay")
        return success_at(answer, int(m.group(1)))
    if spec.startswith("replay:"):
        return ReplayProvider(spec.split(":", 1)[1])
    if spec == "http" or spec.startswith("http:"):
        cfg = http_config or {}
        if not cfg.get("endpoint"):
            raise PreconditionError("http provider needs an endpoint in the config file")
        return HttpProvider(cfg["endpoint"], cfg.get("headers"), float(cfg.get("timeout", 120)), name=spec)
    raise PreconditionError(f"unknown provider {spec!r}")


# candidates -------------------------------------------------------------------------

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)
_DIFF_FILE = re.compile(r"^(?:diff --git a/(\S+)|\+\+\+ (?:b/)?(\S+))", re.M)


def parse_candidate(text: str) -> str:
    paths = {a or b for a, b in _DIFF_FILE.findall(text)} - {"/dev/null"}
    if len(paths) > 1:
        raise MultiFileError(f"candidate touches {len(paths)} files")
    m = _FENCE.search(text)
    return m.group(1) if m else text


@dataclass
class CandidateFix:
    replacement_text: str
    target: ErroneousSnippet
    attempt_index: int

    def __post_init__(self):
        if not 1 <= self.attempt_index <= MAX_ATTEMPTS:
            raise PreconditionError(f"attempt index {self.attempt_index} outside 1..{MAX_ATTEMPTS}")


@dataclass
class PatchedWorkspace:
    path: Path
    file: str
    diff: str
    no_op: bool

    def cleanup(self):
        shutil.rmtree(self.path.parent, ignore_errors=True)


def apply_fix(workspace, fix: CandidateFix) -> PatchedWorkspace:
    workspace = Path(workspace)
    target = fix.target
    lines = read_lines(workspace / target.file)
    start, end = target.line_span
    if end > len(lines) or "".join(lines[start - 1:end]) != target.text:
        raise DriftError(f"{target.file}:{start}-{end} no longer matches the snippet")
    replacement = fix.replacement_text
    if replacement and target.text.endswith("\n") and not replacement.endswith("\n"):
        replacement += "\n"
    new_lines = lines[:start - 1] + replacement.splitlines(keepends=True) + lines[end:]
    scratch = Path(tempfile.mkdtemp(prefix="buildmend-patch-"))
    dest = scratch / "workspace"
    shutil.copytree(workspace, dest, symlinks=True)
    (dest / target.file).write_bytes("".join(new_lines).encode("utf-8"))
    diff = "".join(difflib.unified_diff(lines, new_lines, fromfile=f"a/{target.file}", tofile=f"b/{target.file}"))
    return PatchedWorkspace(dest, target.file, diff, not diff)


# sessions -----------------------------------------------------------------------------


@dataclass
class Attempt:
    index: int
    seed: int
    candidate: CandidateFix | None = None
    build: sandbox.BuildResult | None = None
    diff: str = ""
    no_op: bool = False
    error: str | None = None
    examples: list[str] = field(default_factory=list)
    prompt_sha256: str = ""
    log_file: str | None = None

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "replacement_text": self.candidate.replacement_text if self.candidate else None,
            "exit_status": self.build.exit_status if self.build else None,
            "duration_s": round(self.build.duration, 3) if self.build else None,
            "environment": self.build.environment if self.build else None,
            "diff": self.diff,
            "no_op": self.no_op,
            "error": self.error,
            "examples": self.examples,
            "prompt_sha256": self.prompt_sha256,
            "log_file": self.log_file,
        }


@dataclass
class RepairSession:
    failure_ref: tuple[str, int, str]
    attempts: list[Attempt]
    outcome: str
    resolution: ResolutionSize | None
    category: str
    provider: str = ""
    strategy: str = ""
    seed: int = 0
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.attempts) > MAX_ATTEMPTS:
            raise PreconditionError(f"session records {len(self.attempts)} attempts")
        last_ok = bool(self.attempts) and self.attempts[-1].build is not None and self.attempts[-1].build.exit_status == 0
        if (self.outcome == REPAIRED) != last_ok:
            raise PreconditionError("outcome must be repaired exactly when the last build passed")
        if (self.resolution is not None) != (self.outcome == REPAIRED):
            raise PreconditionError("resolution is recorded only for repaired sessions")

    @property
    def project(self) -> str:
        return self.failure_ref[0]

    @property
    def repaired(self) -> bool:
        return self.outcome == REPAIRED

    @property
    def session_id(self) -> str:
        repo, number, run_id = self.failure_ref
        raw = f"{repo}-{number}-{run_id}-{self.provider}-{self.strategy}-s{self.seed}"
        return re.sub(r"[^A-Za-z0-9._-]+", "_", raw)

    def to_json(self) -> dict:
        repo, number, run_id = self.failure_ref
        return {
            "id": self.session_id,
            "failure_ref": {"repo": repo, "number": number, "run_id": run_id},
            "outcome": self.outcome,
            "category": self.category,
            "provider": self.provider,
            "strategy": self.strategy,
            "seed": self.seed,
            "resolution": self.resolution.to_json() if self.resolution else None,
            "attempts": [a.to_json() for a in self.attempts],
            "notes": self.notes,
        }


def write_session(session: RepairSession, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    sid = session.session_id
    for a in session.attempts:
        if a.build is not None:
            rel = f"{sid}/attempt-{a.index}.build_log.json"
            sandbox.write_build_log(directory / rel, a.build)
            a.log_file = rel
    path = write_json(directory / f"{sid}.json", {**session.to_json(), **(extra or {})})
    if session.repaired:
        atomic_write(directory / f"{sid}.patch", session.attempts[-1].diff)
    return path


def load_session_summary(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _feedback(result: sandbox.BuildResult) -> str | None:
    parsed = parse_log(result.raw_log)
    d = parsed.first_fatal
    if d is None:
        return None
    where = f"{d.location}: " if d.location else ""
    return f"{where}{d.severity}: {d.message}"


def repair_loop(failure: ClassifiedError, workspace, artifacts: ReconstructionArtifacts, provider: ModelProvider,
                strategy: SelectionStrategy, corpus: list[FixExample], failure_ref: tuple[str, int, str],
                log: NormalizedLog | None = None, seed: int = 0, max_attempts: int = MAX_ATTEMPTS,
                mode: str = "local", timeout: float = sandbox.DEFAULT_TIMEOUT, budget: int = DEFAULT_BUDGET,
                exclude_origin: str | None = None, dump_prompt=None) -> RepairSession:
    if not 1 <= max_attempts <= MAX_ATTEMPTS:
        raise PreconditionError(f"max_attempts must be within 1..{MAX_ATTEMPTS}")
    workspace = Path(workspace)
    diag = failure.diagnostic
    snippet = extract_snippet(workspace, diag)
    source = "".join(read_lines(workspace / snippet.file))
    logs = log_excerpt(log, diag) if log is not None else [*diag.context_before, diag.message, *diag.context_after]
    project = failure_ref[0]
    attempts: list[Attempt] = []
    notes: list[str] = []
    outcome, resolution, feedback = EXHAUSTED, None, None

    for i in range(1, max_attempts + 1):
        attempt = Attempt(index=i, seed=seed + i)
        attempts.append(attempt)
        try:
            examples = select_examples(corpus, strategy, project, failure.category, seed + i, exclude_origin)
        except NoExamplesError as exc:
            examples = []
            if i == 1:
                notes.append(f"no examples available: {exc}")
        attempt.examples = [ex.digest for ex in examples]
        prompt = build_prompt(source, logs, snippet, examples, budget, feedback=feedback)
        attempt.prompt_sha256 = prompt_sha256(prompt)
        if dump_prompt is not None:
            atomic_write(Path(str(dump_prompt).replace("{attempt}", str(i))), prompt.render())
        try:
            replacement = parse_candidate(provider.generate(prompt, i, seed + i))
        except (ProviderError, MultiFileError) as exc:
            attempt.error = f"{exc.__class__.__name__}: {exc}"
            logger.warning("attempt %d: %s", i, attempt.error)
            continue
        attempt.candidate = CandidateFix(replacement, snippet, i)
        patched = apply_fix(workspace, attempt.candidate)
        try:
            attempt.diff = patched.diff
            if patched.no_op:
                attempt.no_op = True
                continue
            try:
                result = sandbox.execute(artifacts, patched.path, mode, timeout, run_id=f"{failure_ref[2]}-a{i}")
            except RuntimeUnavailableError as exc:
                attempt.error = f"RuntimeUnavailableError: {exc}"
                outcome = ABORTED
                break
            attempt.build = result
            if result.exit_status == 0:
                outcome = REPAIRED
                resolution = resolution_size(patched.diff)
                break
            feedback = _feedback(result)
        finally:
            patched.cleanup()

    return RepairSession(failure_ref, attempts, outcome, resolution, failure.category,
                         provider=getattr(provider, "name", type(provider).__name__), strategy=strategy.kind,
                         seed=seed, notes=notes)


# pass rates ---------------------------------------------------------------------------

GROUP_KEYS = ("provider", "strategy", "project", "category")


@dataclass
class PassRateTable:
    group_by: tuple[str, ...]
    rows: dict[tuple, tuple[int, int]]

    def percent(self, key: tuple) -> int:
        repaired, total = self.rows[key]
        return percent_half_up(repaired, total)

    def to_records(self) -> list[dict]:
        out = []
        for key, (repaired, total) in self.rows.items():
            rec = dict(zip(self.group_by, key))
            rec.update({"repaired": repaired, "total": total, "percent": percent_half_up(repaired, total)})
            out.append(rec)
        return out


def _session_field(session, key: str):
    if isinstance(session, dict):
        if key == "project":
            return session["failure_ref"]["repo"]
        return session[key]
    return getattr(session, key)


def pass_rate(sessions, group_by=("provider", "strategy", "project")) -> PassRateTable:
    group_by = tuple(group_by)
    for k in group_by:
        if k not in GROUP_KEYS:
            raise PreconditionError(f"cannot group by {k!r}")
    rows: dict[tuple, list[int]] = {}
    for s in sessions:
        key = tuple(_session_field(s, k) for k in group_by)
        cell = rows.setdefault(key, [0, 0])
        cell[0] += 1 if _session_field(s, "outcome") == REPAIRED else 0
        cell[1] += 1
    return PassRateTable(group_by, {k: (v[0], v[1]) for k, v in sorted(rows.items())})
