"""Erroneous-snippet extraction and repair-prompt assembly."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .corpus import DEFAULT_WINDOW, FixExample, resolve_repo_path, window_span
from .errors import BudgetTooSmallError, InconsistencyError, StaleDiagnosticError, UnextractableError
from .logparse import DiagnosticRecord, NormalizedLog

DEFAULT_BUDGET = 24_000
DEFAULT_LOG_LINES = 80

SECTION_LABELS = (
    "instruction",
    "full-source-file",
    "compilation-and-ci-logs",
    "erroneous-code-snippet",
    "human-fix-examples",
)
SECTION_HEADERS = {
    "instruction": "[Instruction]",
    "full-source-file": "[Full source file]",
    "compilation-and-ci-logs": "[Compilation and CI logs]",
    "erroneous-code-snippet": "[Erroneous code snippet]",
    "human-fix-examples": "[Examples of human fixes]",
}


@lru_cache(maxsize=1)
def default_instruction() -> str:
    return (resources.files("buildmend") / "data" / "prompt" / "instruction.txt").read_text(encoding="utf-8").strip()


@dataclass(frozen=True)
class ErroneousSnippet:
    file: str
    line_span: tuple[int, int]
    text: str

    def to_json(self) -> dict:
        return {"file": self.file, "line_span": list(self.line_span), "text": self.text}

    @classmethod
    def from_json(cls, data: dict) -> "ErroneousSnippet":
        return cls(data["file"], tuple(data["line_span"]), data["text"])


def _workspace_files(workspace: Path) -> list[str]:
    out = []
    for root, dirs, files in os.walk(workspace):
        dirs[:] = sorted(d for d in dirs if d != ".git")
        for name in files:
            out.append(Path(root, name).relative_to(workspace).as_posix())
    return sorted(out)


def read_lines(path: Path) -> list[str]:
    return path.read_bytes().decode("utf-8", errors="replace").splitlines(keepends=True)


def extract_snippet(workspace, diagnostic: DiagnosticRecord, window: int = DEFAULT_WINDOW) -> ErroneousSnippet:
    if not diagnostic.file:
        raise UnextractableError("diagnostic has no file")
    if not diagnostic.line:
        raise UnextractableError(f"diagnostic for {diagnostic.file} has no line number")
    workspace = Path(workspace)
    rel = resolve_repo_path(diagnostic.file, _workspace_files(workspace))
    if rel is None:
        raise StaleDiagnosticError(f"{diagnostic.file} not found in workspace")
    lines = read_lines(workspace / rel)
    if diagnostic.line > len(lines):
        raise StaleDiagnosticError(f"{rel} has only {len(lines)} lines")
    span = window_span(diagnostic.line, len(lines), window)
    return ErroneousSnippet(rel, span, "".join(lines[span[0] - 1:span[1]]))


def log_excerpt(log: NormalizedLog, diagnostic: DiagnosticRecord | None = None,
                max_lines: int = DEFAULT_LOG_LINES) -> list[str]:
    """Up to ``max_lines`` lines centred on the diagnostic (the tail if none)."""
    lines = log.lines
    if len(lines) <= max_lines:
        return list(lines)
    if diagnostic is None:
        return lines[-max_lines:]
    idx = log.line_at(diagnostic.byte_offset)
    start = max(0, min(idx - max_lines // 2, len(lines) - max_lines))
    return lines[start:start + max_lines]


@dataclass
class Prompt:
    sections: list[tuple[str, str]]
    token_budget: int
    truncation_report: dict[str, int] = field(default_factory=dict)

    def render(self) -> str:
        return render_sections(self.sections)

    def __str__(self):
        return self.render()

    def section(self, label: str) -> str:
        return dict(self.sections)[label]


def render_sections(sections) -> str:
    return "\n\n".join(f"{SECTION_HEADERS[label]}\n{content.rstrip(chr(10))}" for label, content in sections) + "\n"


def _render_examples(examples: list[FixExample]) -> str:
    if not examples:
        return "(none)"
    blocks = []
    for i, ex in enumerate(examples, 1):
        blocks.append(
            f"Example {i} ({ex.file}, lines {ex.line_span[0]}-{ex.line_span[1]}):\n"
            f"Erroneous code:\n```\n{ex.erroneous_segment.rstrip(chr(10))}\n```\n"
            f"Fixed code:\n```\n{ex.fixed_segment.rstrip(chr(10))}\n```"
        )
    return "\n\n".join(blocks)


def _centered(lines: list[str], span: tuple[int, int], keep: int) -> tuple[int, int]:
    """0-based [lo, hi) window of ``keep`` lines centred on a 1-based span."""
    n = len(lines)
    keep = max(0, min(keep, n))
    center = (span[0] - 1 + span[1]) // 2
    lo = max(0, min(center - keep // 2, n - keep))
    return lo, lo + keep


def _largest_fitting(lo: int, hi: int, fits) -> int:
    """Largest m in [lo, hi] with fits(m), assuming fits is monotone decreasing; lo - 1 if none."""
    if not fits(lo):
        return lo - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def build_prompt(source: str, logs, snippet: ErroneousSnippet, examples: list[FixExample],
                 budget: int = DEFAULT_BUDGET, instruction: str | None = None,
                 feedback: str | None = None) -> Prompt:
    if budget <= 0:
        raise BudgetTooSmallError("budget must be positive")
    instruction = instruction or default_instruction()
    src_lines = source.splitlines(keepends=True)
    start, end = snippet.line_span
    if start < 1 or end > len(src_lines) or "".join(src_lines[start - 1:end]) != snippet.text:
        raise InconsistencyError(f"snippet for {snippet.file}:{start}-{end} does not match the source text")
    log_lines = list(logs.lines if isinstance(logs, NormalizedLog) else logs)
    feedback_lines = []
    if feedback:
        feedback_lines = ["", "Previous attempt did not build; its first error was:", *feedback.splitlines()]
    snippet_body = f"File: {snippet.file}, lines {start}-{end}\n```\n{snippet.text.rstrip(chr(10))}\n```"

    def make(log_keep: int, src_keep: int, n_examples: int) -> list[tuple[str, str]]:
        shown_logs = log_lines[len(log_lines) - log_keep:] if log_keep else []
        log_text = "\n".join(shown_logs)
        if log_keep < len(log_lines):
            log_text = f"[... {len(log_lines) - log_keep} earlier log lines omitted ...]\n" + log_text
        log_text += "\n".join(["", *feedback_lines]) if feedback_lines else ""
        lo, hi = _centered(src_lines, snippet.line_span, src_keep)
        src_text = "".join(src_lines[lo:hi])
        if src_keep < len(src_lines):
            src_text = (f"[... lines 1-{lo} omitted ...]\n" if lo else "") + src_text
            if hi < len(src_lines):
                src_text = src_text.rstrip("\n") + f"\n[... lines {hi + 1}-{len(src_lines)} omitted ...]"
        return [
            ("instruction", instruction),
            ("full-source-file", src_text),
            ("compilation-and-ci-logs", log_text),
            ("erroneous-code-snippet", snippet_body),
            ("human-fix-examples", _render_examples(examples[:n_examples])),
        ]

    def size(*args) -> int:
        return len(render_sections(make(*args)))

    n_log, n_src, n_ex = len(log_lines), len(src_lines), len(examples)
    if size(0, 0, 0) > budget:
        raise BudgetTooSmallError(f"instruction and snippet alone need {size(0, 0, 0)} characters, budget is {budget}")
    log_keep, src_keep, ex_keep = n_log, n_src, n_ex
    if size(log_keep, src_keep, ex_keep) > budget:
        log_keep = max(0, _largest_fitting(0, n_log, lambda m: size(m, src_keep, ex_keep) <= budget))
    if size(log_keep, src_keep, ex_keep) > budget:
        src_keep = max(0, _largest_fitting(0, n_src, lambda m: size(log_keep, m, ex_keep) <= budget))
        while src_keep > 0 and size(log_keep, src_keep, ex_keep) > budget:
            src_keep -= 1
    while ex_keep > 0 and size(log_keep, src_keep, ex_keep) > budget:
        ex_keep -= 1
    dropped_example_lines = sum(
        ex.erroneous_segment.count("\n") + ex.fixed_segment.count("\n") for ex in examples[ex_keep:])
    report = {
        "instruction": 0,
        "full-source-file": n_src - src_keep,
        "compilation-and-ci-logs": n_log - log_keep,
        "erroneous-code-snippet": 0,
        "human-fix-examples": dropped_example_lines,
    }
    return Prompt(make(log_keep, src_keep, ex_keep), budget, report)
