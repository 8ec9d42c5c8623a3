"""Human-fix examples mined from (buggy baseline, human fix) pairs, and the
selection strategies used to put them into prompts."""

from __future__ import annotations

import json
import logging
import random
import threading
from dataclasses import dataclass
from pathlib import Path, PurePosixPath

from .classify import CATEGORIES, ClassifiedError
from .core import atomic_write, content_hash
from .errors import NoExamplesError, PreconditionError, StaleDiagnosticError, UnminableError
from .gitops import BaselinePair, ResolutionSize, ZeroReason, diff_between, parse_unified_diff, resolution_size, show_file, tracked_files
from .logparse import DiagnosticRecord

log = logging.getLogger(__name__)

SAME_PROJECT = "same-project"
OTHER_PROJECTS = "other-projects"
RANDOM_ALL = "random-all"
STRATEGIES = (SAME_PROJECT, OTHER_PROJECTS, RANDOM_ALL)
DEFAULT_WINDOW = 2
DEFAULT_K = 2


@dataclass(frozen=True)
class FixExample:
    project: str
    category: str
    file: str
    line_span: tuple[int, int]
    erroneous_segment: str
    fixed_segment: str
    buggy_commit: str
    fix_commit: str
    resolution: ResolutionSize
    origin: str = ""

    def __post_init__(self):
        object.__setattr__(self, "line_span", tuple(self.line_span))
        start, end = self.line_span
        if start < 1 or start > end:
            raise PreconditionError(f"invalid line span {self.line_span}")
        if self.category not in CATEGORIES:
            raise PreconditionError(f"unknown category {self.category!r}")
        if self.erroneous_segment == self.fixed_segment and self.resolution.loc != 0:
            raise PreconditionError("fixed segment equals erroneous segment for a non-empty fix")

    @property
    def key(self) -> dict:
        return {"project": self.project, "fix_commit": self.fix_commit, "file": self.file,
                "line_span": list(self.line_span)}

    @property
    def digest(self) -> str:
        return content_hash(self.key)

    def to_json(self) -> dict:
        return {
            "project": self.project,
            "category": self.category,
            "file": self.file,
            "line_span": list(self.line_span),
            "erroneous_segment": self.erroneous_segment,
            "fixed_segment": self.fixed_segment,
            "buggy_commit": self.buggy_commit,
            "fix_commit": self.fix_commit,
            "resolution": self.resolution.to_json(),
            "origin": self.origin,
        }

    @classmethod
    def from_json(cls, data: dict) -> "FixExample":
        return cls(
            data["project"], data["category"], data["file"], tuple(data["line_span"]),
            data["erroneous_segment"], data["fixed_segment"], data["buggy_commit"], data["fix_commit"],
            ResolutionSize.from_json(data["resolution"]), data.get("origin", ""),
        )


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str
    k: int = DEFAULT_K

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise PreconditionError(f"unknown selection strategy {self.kind!r}")
        if self.k < 1:
            raise PreconditionError("k must be at least 1")


# mining ---------------------------------------------------------------------------


def _normalize_path(path: str) -> str:
    parts = [p for p in PurePosixPath(path.replace("\\", "/")).parts if p not in (".", "..", "/")]
    return "/".join(parts)


def resolve_repo_path(diagnostic_path: str, files: list[str]) -> str | None:
    """Map a path as printed in a log onto a tracked file (longest suffix match)."""
    wanted = _normalize_path(diagnostic_path)
    if wanted in files:
        return wanted
    best = None
    for f in files:
        if wanted.endswith("/" + f) or f.endswith("/" + wanted):
            if best is None or len(f) > len(best) or (len(f) == len(best) and f < best):
                best = f
    return best


def window_span(line: int, n_lines: int, window: int = DEFAULT_WINDOW) -> tuple[int, int]:
    return max(1, line - window), min(n_lines, line + window)


def _decode(data: bytes) -> list[str]:
    return data.decode("utf-8", errors="replace").splitlines(keepends=True)


def _alignment(hunks, n_old: int) -> list[tuple[int | None, int | None]]:
    """Old/new line pairs implied by zero-context hunks (None = absent side)."""
    seq: list[tuple[int | None, int | None]] = []
    o, n = 1, 1
    for h in sorted(hunks, key=lambda h: h.old_start):
        first_changed = h.old_start if h.old_len > 0 else h.old_start + 1
        while o < first_changed:
            seq.append((o, n))
            o += 1
            n += 1
        for _ in range(h.old_len):
            seq.append((o, None))
            o += 1
        for _ in range(h.new_len):
            seq.append((None, n))
            n += 1
    while o <= n_old:
        seq.append((o, n))
        o += 1
        n += 1
    return seq


def map_span(hunks, n_old: int, span: tuple[int, int]) -> tuple[list[int], bool]:
    """New-side line numbers covering an old-side span, and whether any change touches it."""
    start, end = span
    last_old = 0
    new_lines: list[int] = []
    touched = False
    for old, new in _alignment(hunks, n_old):
        if old is not None:
            last_old = old
            inside = start <= old <= end
        else:
            inside = start - 1 <= last_old <= end
        if not inside:
            continue
        if old is None or new is None:
            touched = True
        if new is not None:
            new_lines.append(new)
    return new_lines, touched


def mine_fix_example(pair: BaselinePair, diagnostic: ClassifiedError | DiagnosticRecord, repo_path,
                     project: str, category: str | None = None, window: int = DEFAULT_WINDOW,
                     origin: str = "") -> FixExample:
    if isinstance(diagnostic, ClassifiedError):
        category = category or diagnostic.category
        diag = diagnostic.diagnostic
    else:
        diag = diagnostic
    if category is None:
        raise PreconditionError("a category is required to mine a fix example")
    if not diag.file or not diag.line:
        raise UnminableError("diagnostic has no file/line location")
    buggy, fix = pair.buggy_baseline, pair.human_fix
    path = resolve_repo_path(diag.file, tracked_files(repo_path, buggy))
    if path is None:
        raise StaleDiagnosticError(f"{diag.file} does not exist at {buggy[:12]}")
    old_lines = _decode(show_file(repo_path, buggy, path) or b"")
    if diag.line > len(old_lines):
        raise StaleDiagnosticError(f"{path} has {len(old_lines)} lines, diagnostic points at {diag.line}")
    span = window_span(diag.line, len(old_lines), window)
    erroneous = "".join(old_lines[span[0] - 1:span[1]])

    diff = diff_between(repo_path, buggy, fix, path, context=0)
    files = [f for f in parse_unified_diff(diff) if path in (f.old_path, f.new_path)]
    if not files:
        raise UnminableError(f"human fix {fix[:12]} does not change {path}")
    fd = files[0]
    if fd.deleted_file:
        return FixExample(project, category, path, span, erroneous, "", buggy, fix,
                          ResolutionSize(0, ZeroReason.FILE_DELETION), origin)
    resolution = resolution_size(diff)
    if fd.binary:
        raise UnminableError(f"{path} changed as a binary file")
    new_numbers, touched = map_span(fd.hunks, len(old_lines), span)
    if not touched:
        raise UnminableError(f"human fix does not change lines {span[0]}-{span[1]} of {path}")
    new_lines = _decode(show_file(repo_path, fix, path) or b"")
    fixed = "".join(new_lines[min(new_numbers) - 1:max(new_numbers)]) if new_numbers else ""
    return FixExample(project, category, path, span, erroneous, fixed, buggy, fix, resolution, origin)


# storage -------------------------------------------------------------------------------


class CorpusStore:
    """One JSON file per example, named by the hash of its identity."""

    _lock = threading.Lock()

    def __init__(self, directory):
        self.directory = Path(directory)

    def add(self, example: FixExample) -> Path:
        path = self.directory / f"{example.digest}.json"
        with self._lock:
            if not path.exists():
                atomic_write(path, json.dumps(example.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    def load(self) -> list[FixExample]:
        if not self.directory.is_dir():
            return []
        return [FixExample.from_json(json.loads(p.read_text(encoding="utf-8")))
                for p in sorted(self.directory.glob("*.json"))]


# selection -------------------------------------------------------------------------------


def _sort_key(ex: FixExample):
    return (ex.project, ex.fix_commit, ex.file, ex.line_span)


def select_examples(corpus, strategy: SelectionStrategy, target: str, category: str | None = None,
                    seed: int = 0, exclude_origin: str | None = None) -> list[FixExample]:
    pool = sorted(corpus, key=_sort_key)
    if exclude_origin:
        pool = [ex for ex in pool if ex.origin != exclude_origin]
    if strategy.kind == SAME_PROJECT:
        pool = [ex for ex in pool if ex.project == target]
    elif strategy.kind == OTHER_PROJECTS:
        pool = [ex for ex in pool if ex.project != target]
    if not pool:
        raise NoExamplesError(strategy.kind)
    if category is not None:
        matching = [ex for ex in pool if ex.category == category]
        if len(matching) >= strategy.k:
            pool = matching
    rng = random.Random(seed)
    return rng.sample(pool, min(strategy.k, len(pool)))
