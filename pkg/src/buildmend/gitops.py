"""Git history analysis: merge strategies, buggy baselines, checkouts and diff size.

All repository access shells out to the ``git`` CLI.
"""

from __future__ import annotations

import json
import logging
import os
import re
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .core import atomic_write, is_commit_id
from .errors import (
    DiffParseError,
    EmptyDiffError,
    NotFoundError,
    ProvisioningError,
    TopologyMismatchError,
    UnresolvableIntegrationError,
)

log = logging.getLogger(__name__)


class MergeStrategy(str, Enum):
    CLASSIC_MERGE = "classic-merge"
    REBASE_FAST_FORWARD = "rebase-fast-forward"
    SQUASH_MERGE = "squash-merge"


@dataclass(frozen=True)
class BaselinePair:
    buggy_baseline: str
    human_fix: str
    strategy: MergeStrategy
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.buggy_baseline == self.human_fix:
            raise TopologyMismatchError("buggy baseline and human fix are the same commit")


class ZeroReason(str, Enum):
    PERMISSION_CHANGE = "permission-change"
    BINARY_CHANGE = "binary-change"
    FILE_DELETION = "file-deletion"


@dataclass(frozen=True)
class ResolutionSize:
    loc: int
    zero_reason: ZeroReason | None = None

    def __post_init__(self):
        if self.loc < 0:
            raise ValueError("loc must be non-negative")
        if (self.loc == 0) != (self.zero_reason is not None):
            raise ValueError("zero_reason must be set exactly when loc == 0")

    def to_json(self) -> dict:
        return {"loc": self.loc, "zero_reason": self.zero_reason.value if self.zero_reason else None}

    @classmethod
    def from_json(cls, data: dict) -> "ResolutionSize":
        reason = data.get("zero_reason")
        return cls(int(data["loc"]), ZeroReason(reason) if reason else None)


@dataclass(frozen=True)
class CheckoutSettings:
    fetch_depth: int | None = None
    submodules: bool = False
    workspace_manager: str | None = None


class GitError(Exception):
    def __init__(self, args, returncode, stderr):
        super().__init__(f"git {' '.join(args)} failed ({returncode}): {stderr.strip()}")
        self.returncode = returncode
        self.stderr = stderr


def git(repo, *args, check=True, input=None) -> str:
    proc = subprocess.run(
        ["git", "-c", "core.quotepath=off", *args],
        cwd=repo,
        input=input,
        capture_output=True,
        text=True,
        env={**os.environ, "GIT_TERMINAL_PROMPT": "0", "LC_ALL": "C"},
    )
    if check and proc.returncode != 0:
        raise GitError(list(args), proc.returncode, proc.stderr)
    return proc.stdout


def _rev_parse(repo, rev) -> str | None:
    out = git(repo, "rev-parse", "--verify", "--quiet", f"{rev}^{{commit}}", check=False).strip()
    return out or None


def main_ref(repo, default_branch: str) -> str:
    """Resolve the forge-reported default branch to a local ref."""
    for candidate in (f"refs/heads/{default_branch}", f"refs/remotes/origin/{default_branch}", default_branch):
        if _rev_parse(repo, candidate):
            return candidate
    raise UnresolvableIntegrationError(f"default branch {default_branch!r} not found in {repo}")


def first_parent_chain(repo, ref) -> list[str]:
    """Main-line commits from ``ref`` back to the root, newest first."""
    return git(repo, "rev-list", "--first-parent", ref).split()


def parents(repo, commit) -> list[str]:
    return git(repo, "rev-list", "--parents", "-n", "1", commit).split()[1:]


def patch_id(repo, base, tip) -> str | None:
    """Stable patch-id of ``git diff base tip``; None for an empty diff."""
    diff = git(repo, "diff", "--no-color", "--no-renames", base, tip)
    if not diff.strip():
        return None
    out = git(repo, "patch-id", "--stable", input=diff).split()
    return out[0] if out else None


def commit_patch_id(repo, commit) -> str | None:
    ps = parents(repo, commit)
    base = ps[0] if ps else _empty_tree(repo)
    return patch_id(repo, base, commit)


def _empty_tree(repo) -> str:
    return git(repo, "hash-object", "-t", "tree", "--stdin", input="").strip()


def branch_commits(repo, change) -> list[str]:
    """Commits of the change request's branch, oldest first."""
    base, head = change.base_commit, change.head_commit
    for sha in (base, head):
        if not _rev_parse(repo, sha):
            raise UnresolvableIntegrationError(f"commit {sha} of change #{change.number} not present")
    merge_base = git(repo, "merge-base", base, head).strip()
    return git(repo, "rev-list", "--reverse", f"{merge_base}..{head}").split()


def _integration_commit(repo, change) -> tuple[str, list[str]]:
    main = main_ref(repo, change.repo.default_branch)
    chain = first_parent_chain(repo, main)
    sha = change.merged_commit
    if not sha:
        raise UnresolvableIntegrationError(f"change #{change.number} has no integration commit")
    full = _rev_parse(repo, sha)
    if full is None or full not in chain:
        raise UnresolvableIntegrationError(f"integration commit {sha} not found on {main}")
    return full, chain


def identify_strategy(repo_path, change) -> MergeStrategy:
    repo = Path(repo_path)
    integration, _ = _integration_commit(repo, change)
    ps = parents(repo, integration)
    if len(ps) == 2:
        return MergeStrategy.CLASSIC_MERGE
    if len(ps) > 2:
        raise TopologyMismatchError("octopus merges are not supported")
    commits = branch_commits(repo, change)
    if commits:
        merge_base = git(repo, "merge-base", change.base_commit, change.head_commit).strip()
        aggregate = patch_id(repo, merge_base, change.head_commit)
        if aggregate is not None and aggregate == commit_patch_id(repo, integration):
            return MergeStrategy.SQUASH_MERGE
    return MergeStrategy.REBASE_FAST_FORWARD


def locate_baseline(repo_path, change, strategy: MergeStrategy) -> BaselinePair:
    repo = Path(repo_path)
    strategy = MergeStrategy(strategy)
    integration, chain = _integration_commit(repo, change)
    ps = parents(repo, integration)
    notes: list[str] = []

    if strategy is MergeStrategy.CLASSIC_MERGE:
        if len(ps) != 2:
            raise TopologyMismatchError(f"{integration[:12]} is not a two-parent merge commit")
        return BaselinePair(ps[0], integration, strategy)

    if len(ps) != 1:
        raise TopologyMismatchError(f"{integration[:12]} has {len(ps)} parents; expected 1 for {strategy.value}")

    if strategy is MergeStrategy.SQUASH_MERGE:
        pair = BaselinePair(ps[0], integration, strategy)
        notes.extend(_reintegrations(repo, change, chain, integration, {commit_patch_id(repo, integration)}))
        return BaselinePair(pair.buggy_baseline, pair.human_fix, strategy, tuple(notes))

    # rebase / fast-forward: walk back along main while commits correspond to branch commits
    branch_ids = {commit_patch_id(repo, c) for c in branch_commits(repo, change)}
    branch_ids.discard(None)
    if commit_patch_id(repo, integration) not in branch_ids:
        raise TopologyMismatchError(f"{integration[:12]} does not correspond to any commit of change #{change.number}")
    idx = chain.index(integration)
    start = idx
    while start + 1 < len(chain) and commit_patch_id(repo, chain[start + 1]) in branch_ids:
        start += 1
    if start + 1 >= len(chain):
        raise TopologyMismatchError("rebased series reaches the root commit; no baseline exists")
    first = chain[start]
    notes.extend(_reintegrations(repo, change, chain, integration, branch_ids))
    return BaselinePair(chain[start + 1], first, strategy, tuple(notes))


def _reintegrations(repo, change, chain, integration, ids, window=200) -> list[str]:
    """Flag later main commits carrying the same patch (revert and re-merge)."""
    idx = chain.index(integration)
    later = chain[max(0, idx - window):idx]
    flagged = []
    for sha in reversed(later):
        if len(parents(repo, sha)) == 1 and commit_patch_id(repo, sha) in ids:
            flagged.append(f"reintegrated-at:{sha}")
    if flagged:
        log.warning("change #%s integrated more than once; using the first integration", change.number)
    return flagged


def is_ancestor(repo_path, ancestor, descendant) -> bool:
    proc = subprocess.run(
        ["git", "merge-base", "--is-ancestor", ancestor, descendant], cwd=repo_path, capture_output=True
    )
    return proc.returncode == 0


_checkout_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def _repo_lock(repo) -> threading.Lock:
    key = str(Path(repo).resolve())
    with _locks_guard:
        return _checkout_locks.setdefault(key, threading.Lock())


def checkout_baseline(repo_path, commit, checkout_settings: CheckoutSettings | None = None, dest_root=None) -> Path:
    """Clone ``repo_path`` into a fresh directory and detach at ``commit``."""
    settings = checkout_settings or CheckoutSettings()
    repo = Path(repo_path).resolve()
    if not _rev_parse(repo, commit):
        raise NotFoundError(f"commit {commit} not found in {repo}")
    if dest_root is not None:
        Path(dest_root).mkdir(parents=True, exist_ok=True)
    with _repo_lock(repo):
        workspace = Path(tempfile.mkdtemp(prefix="ws-", dir=dest_root))
        git(workspace, "clone", "--quiet", "--no-checkout", str(repo), ".")
        git(workspace, "-c", "advice.detachedHead=false", "checkout", "--quiet", "--detach", commit)
        if settings.submodules:
            _init_submodules(workspace)
    return workspace


def _init_submodules(workspace: Path) -> None:
    gitmodules = workspace / ".gitmodules"
    if not gitmodules.exists():
        return
    entries = git(workspace, "config", "-f", ".gitmodules", "--get-regexp", r"^submodule\..*\.path$", check=False)
    for line in entries.splitlines():
        key, _, path = line.partition(" ")
        name = key[len("submodule."):-len(".path")]
        try:
            git(workspace, "submodule", "init", "--", path)
            git(workspace, "-c", "protocol.file.allow=always", "submodule", "update", "--recursive", "--", path)
        except GitError as exc:
            raise ProvisioningError(f"submodule {name!r} could not be fetched: {exc.stderr.strip()}", submodule=name) from exc


# unified diff parsing ---------------------------------------------------------

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


@dataclass
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: list[str] = field(default_factory=list)

    @property
    def added(self) -> int:
        return sum(1 for ln in self.lines if ln.startswith("+"))

    @property
    def deleted(self) -> int:
        return sum(1 for ln in self.lines if ln.startswith("-"))


@dataclass
class FileDiff:
    old_path: str | None
    new_path: str | None
    hunks: list[Hunk] = field(default_factory=list)
    deleted_file: bool = False
    new_file: bool = False
    binary: bool = False
    mode_change: bool = False
    rename: bool = False

    @property
    def path(self) -> str:
        return self.new_path or self.old_path or ""

    def zero_reason(self) -> ZeroReason | None:
        if self.deleted_file:
            return ZeroReason.FILE_DELETION
        if self.binary:
            return ZeroReason.BINARY_CHANGE
        if not self.hunks:
            if self.rename:
                return ZeroReason.FILE_DELETION
            if self.mode_change:
                return ZeroReason.PERMISSION_CHANGE
        return None

    def loc(self) -> int:
        return sum(h.added + h.deleted for h in self.hunks)


def _strip_prefix(path: str) -> str | None:
    path = path.split("\t", 1)[0].strip()
    if path == "/dev/null":
        return None
    if path.startswith('"') and path.endswith('"'):
        path = path[1:-1]
    if path[:2] in ("a/", "b/"):
        path = path[2:]
    return path


def parse_unified_diff(text: str) -> list[FileDiff]:
    """Parse git-style or plain unified diff text into per-file records."""
    files: list[FileDiff] = []
    cur: FileDiff | None = None
    hunk: Hunk | None = None
    remaining_old = remaining_new = 0
    git_header_open = False
    lines = text.splitlines()

    def close_hunk(lineno):
        nonlocal hunk
        if hunk is not None and (remaining_old or remaining_new):
            raise DiffParseError(
                f"hunk @@ -{hunk.old_start},{hunk.old_len} +{hunk.new_start},{hunk.new_len} @@ is truncated", lineno
            )
        hunk = None

    for i, line in enumerate(lines, start=1):
        if hunk is not None and (remaining_old or remaining_new):
            if line.startswith("\\"):
                continue
            tag = line[:1]
            if tag == " " or line == "":
                remaining_old -= 1
                remaining_new -= 1
            elif tag == "-":
                remaining_old -= 1
            elif tag == "+":
                remaining_new -= 1
            else:
                raise DiffParseError(f"unexpected line inside hunk: {line[:40]!r}", i)
            if remaining_old < 0 or remaining_new < 0:
                raise DiffParseError("hunk longer than its header declares", i)
            hunk.lines.append(line if line else " ")
            continue
        if line.startswith("\\"):
            continue
        if line.startswith("diff --git "):
            close_hunk(i)
            m = re.match(r'^diff --git ("?a/.+?"?) ("?b/.+"?)$', line)
            old, new = (_strip_prefix(m.group(1)), _strip_prefix(m.group(2))) if m else (None, None)
            cur = FileDiff(old, new)
            files.append(cur)
            git_header_open = True
            continue
        m = _HUNK_RE.match(line)
        if m:
            close_hunk(i)
            if cur is None:
                raise DiffParseError("hunk before any file header", i)
            old_len = int(m.group(2)) if m.group(2) is not None else 1
            new_len = int(m.group(4)) if m.group(4) is not None else 1
            hunk = Hunk(int(m.group(1)), old_len, int(m.group(3)), new_len)
            cur.hunks.append(hunk)
            remaining_old, remaining_new = old_len, new_len
            continue
        if line.startswith("--- "):
            close_hunk(i)
            nxt = lines[i] if i < len(lines) else ""
            if not nxt.startswith("+++ "):
                raise DiffParseError("'---' header not followed by '+++'", i + 1)
            old = _strip_prefix(line[4:])
            if cur is None or not git_header_open:
                cur = FileDiff(old, None)
                files.append(cur)
            git_header_open = False
            if old is None:
                cur.new_file = True
            elif not cur.rename:
                cur.old_path = old
            continue
        if line.startswith("+++ "):
            if cur is None:
                raise DiffParseError("'+++' header without '---'", i)
            new = _strip_prefix(line[4:])
            if new is None:
                cur.deleted_file = True
            else:
                cur.new_path = new
            continue
        if cur is None:
            if line.strip():
                raise DiffParseError(f"not a unified diff: {line[:40]!r}", i)
            continue
        if line.startswith("deleted file mode"):
            cur.deleted_file = True
        elif line.startswith("new file mode"):
            cur.new_file = True
        elif line.startswith(("old mode", "new mode")):
            cur.mode_change = True
        elif line.startswith(("rename from", "rename to", "copy from", "copy to")):
            cur.rename = True
            target = line.split(" ", 2)[2]
            if line.startswith(("rename from", "copy from")):
                cur.old_path = target
            else:
                cur.new_path = target
        elif line.startswith("Binary files") or line.startswith("GIT binary patch"):
            cur.binary = True
        elif line.startswith(("index ", "similarity index", "dissimilarity index")) or not line.strip():
            pass
        elif line.startswith(("literal ", "delta ")) and cur.binary:
            pass
        elif cur.binary:
            pass
        else:
            raise DiffParseError(f"unexpected line: {line[:40]!r}", i)
    close_hunk(len(lines) + 1)
    return files


_REASON_ORDER = (ZeroReason.FILE_DELETION, ZeroReason.BINARY_CHANGE, ZeroReason.PERMISSION_CHANGE)


def resolution_size(diff: str) -> ResolutionSize:
    """Lines added plus lines deleted, with non-textual changes counted as 0."""
    files = parse_unified_diff(diff)
    loc = 0
    reasons = set()
    for f in files:
        reason = f.zero_reason()
        if reason is not None:
            reasons.add(reason)
        else:
            loc += f.loc()
    if loc > 0:
        return ResolutionSize(loc)
    for reason in _REASON_ORDER:
        if reason in reasons:
            return ResolutionSize(0, reason)
    raise EmptyDiffError("diff changes no lines and carries no binary, mode or deletion marker")


def diff_between(repo_path, old, new, path=None, context=3) -> str:
    args = ["diff", "--no-color", "--no-renames", f"-U{context}", old, new]
    if path:
        args += ["--", path]
    return git(repo_path, *args)


def write_baselines(path, rows) -> Path:
    """Write ``baselines.jsonl`` rows: dicts with repo, number, strategy, buggy_baseline, human_fix."""
    lines = []
    for row in rows:
        rec = {
            "repo": row["repo"],
            "number": int(row["number"]),
            "strategy": MergeStrategy(row["strategy"]).value,
            "buggy_baseline": row["buggy_baseline"],
            "human_fix": row["human_fix"],
        }
        if not (is_commit_id(rec["buggy_baseline"]) and is_commit_id(rec["human_fix"])):
            raise ValueError("baseline rows must carry full commit ids")
        lines.append(json.dumps(rec, sort_keys=True))
    return atomic_write(path, "".join(line + "\n" for line in lines))


def show_file(repo_path, commit, path) -> bytes | None:
    """Blob contents of ``path`` at ``commit``; None when the path is absent."""
    proc = subprocess.run(
        ["git", "show", f"{commit}:{path}"],
        cwd=repo_path, capture_output=True,
        env={**os.environ, "GIT_TERMINAL_PROMPT": "0", "LC_ALL": "C"},
    )
    return proc.stdout if proc.returncode == 0 else None


def tracked_files(repo_path, commit) -> list[str]:
    return git(repo_path, "ls-tree", "-r", "--name-only", commit).splitlines()
