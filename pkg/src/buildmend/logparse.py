"""Build-log parsing: tolerant decoding, build-system detection, prioritized
pattern extraction and first-fatal-error selection."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .core import RawLog, read_jsonl
from .errors import NoFatalErrorError, PreconditionError

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

REPLACEMENT = "�"
CONTEXT_LINES = 2

BUILD_SYSTEMS = ("west-cmake-ninja", "autotools-make", "make-buildroot", "scons-pio", "generic")
TOOLS = ("compiler", "linker", "build-tool", "configure", "unknown")
SEVERITIES = ("fatal", "error", "warning")
_TOOL_RANK = {t: i for i, t in enumerate(TOOLS)}

_ANSI = re.compile(r"\x1b\[[0-?]*[ -/]*[@-~]|\x1b\][^\x07\x1b]*(?:\x07|\x1b\\)|\x1b[@-Z\\-_]|\x1b")
_SURROGATES = re.compile("[\udc80-\udcff]+")


@dataclass
class NormalizedLog:
    lines: list[str]
    decode_replacements: int = 0
    stripped_artifacts: dict = field(default_factory=lambda: {"ansi": 0, "progress": 0, "backspace": 0,
                                                                  "timestamp": 0})

    def __post_init__(self):
        self.offsets = []
        pos = 0
        for line in self.lines:
            self.offsets.append(pos)
            pos += len(line.encode("utf-8")) + 1

    @property
    def text(self) -> str:
        return "\n".join(self.lines)

    def line_at(self, offset: int) -> int:
        """Index of the line containing byte ``offset``."""
        lo, hi = 0, len(self.offsets) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.offsets[mid] <= offset:
                lo = mid
            else:
                hi = mid - 1
        return lo


def _apply_backspaces(line: str) -> tuple[str, int]:
    if "\b" not in line:
        return line, 0
    out: list[str] = []
    count = 0
    for ch in line:
        if ch == "\b":
            count += 1
            if out:
                out.pop()
        else:
            out.append(ch)
    return "".join(out), count


def _collapse_cr(line: str) -> tuple[str, int]:
    if "\r" not in line:
        return line, 0
    segments = line.split("\r")
    kept = [s for s in segments if s]
    if not kept:
        return "", 0
    return kept[-1], len(kept) - 1


# hosted runners prefix every downloaded log line with an ISO-8601 UTC timestamp
_RUNNER_TIMESTAMP = re.compile(r"^\ufeff?\d{4}-\d\d-\d\dT\d\d:\d\d:\d\d(?:\.\d+)?Z ")


def normalize(raw: RawLog | bytes) -> NormalizedLog:
    data = raw.data if isinstance(raw, RawLog) else bytes(raw)
    text = data.decode("utf-8", errors="surrogateescape")
    replacements = 0

    def _replace(_m):
        nonlocal replacements
        replacements += 1
        return REPLACEMENT

    text = _SURROGATES.sub(_replace, text)
    counts = {"ansi": 0, "progress": 0, "backspace": 0, "timestamp": 0}
    lines = []
    physical = text.split("\n")
    if physical and physical[-1] == "":
        physical.pop()
    for line in physical:
        line, n = _RUNNER_TIMESTAMP.subn("", line)
        counts["timestamp"] += n
        line, n = _ANSI.subn("", line)
        counts["ansi"] += n
        line, n = _apply_backspaces(line)
        counts["backspace"] += n
        line, n = _collapse_cr(line)
        counts["progress"] += n
        lines.append(line)
    return NormalizedLog(lines, replacements, counts)


# build-system detection --------------------------------------------------------

_WEST = re.compile(r"^(?:-- west\b|west build\b)|\bwest build:", re.M)
_CONFIGURE = re.compile(r"^(?:configure:|checking for .*\.\.\.)", re.M)
_MAKE = re.compile(r"^(?:g?make(?:\[\d+\])?[: ]|make\b)", re.M)
_MAKE_NEST = re.compile(r"^g?make\[\d+\]", re.M)
_BUILDROOT = re.compile(r"^>>> \S+", re.M)
_PIO = re.compile(r"^scons: |\bpio run\b|\bplatformio run\b|\[env:[^\]]+\]|^Processing \S+ \(", re.M)


def _first_offset(rx, text, start=0) -> int | None:
    m = rx.search(text, start)
    return m.start() if m else None


def detect_build_system(log: NormalizedLog) -> str:
    """Earliest evidence wins; rule order breaks ties."""
    text = log.text
    evidence: list[tuple[int, int, str]] = []
    west = _first_offset(_WEST, text)
    if west is not None:
        evidence.append((west, 0, "west-cmake-ninja"))
    conf = _first_offset(_CONFIGURE, text)
    if conf is not None and _first_offset(_MAKE, text, conf) is not None:
        evidence.append((conf, 1, "autotools-make"))
    nest, br = _first_offset(_MAKE_NEST, text), _first_offset(_BUILDROOT, text)
    if nest is not None and br is not None:
        evidence.append((min(nest, br), 2, "make-buildroot"))
    pio = _first_offset(_PIO, text)
    if pio is not None:
        evidence.append((pio, 3, "scons-pio"))
    if not evidence:
        return "generic"
    return min(evidence)[2]


# pattern registry ----------------------------------------------------------------


@dataclass(frozen=True)
class Pattern:
    id: str
    tier: int
    tool: str
    expression: str
    systems: tuple[str, ...] = ()
    severity: str = "error"
    continuation: bool = False
    family: str = ""

    def __post_init__(self):
        if self.tier not in (1, 2, 3, 4):
            raise PreconditionError(f"pattern {self.id}: tier must be 1-4")
        if self.tool not in TOOLS:
            raise PreconditionError(f"pattern {self.id}: unknown tool {self.tool!r}")
        object.__setattr__(self, "_rx", re.compile(self.expression))

    @property
    def regex(self) -> re.Pattern:
        return self._rx

    @property
    def is_adapter(self) -> bool:
        return bool(self.systems)


class PatternRegistry:
    def __init__(self, patterns: list[Pattern]):
        ids = [p.id for p in patterns]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise PreconditionError(f"duplicate pattern ids: {sorted(dupes)}")
        self.patterns = list(patterns)
        self._by_id = {p.id: p for p in patterns}

    def __getitem__(self, pattern_id: str) -> Pattern:
        return self._by_id[pattern_id]

    def __len__(self):
        return len(self.patterns)

    @classmethod
    def from_directory(cls, directory) -> "PatternRegistry":
        patterns = []
        for path in sorted(Path(directory).glob("*.toml")):
            patterns.extend(_load_family(path.read_bytes()))
        return cls(patterns)

    @classmethod
    def builtin(cls) -> "PatternRegistry":
        return _builtin_registry()

    def ordered_for(self, system: str) -> list[Pattern]:
        """Active patterns in evaluation order: tier, adapters first, file order."""
        active = [p for p in self.patterns if not p.systems or system in p.systems]
        index = {p.id: i for i, p in enumerate(self.patterns)}
        return sorted(active, key=lambda p: (p.tier, not p.is_adapter, index[p.id]))


def _load_family(data: bytes) -> list[Pattern]:
    doc = tomllib.loads(data.decode("utf-8"))
    family = doc.get("family", "")
    return [
        Pattern(
            id=p["id"], tier=int(p["tier"]), tool=p["tool"], expression=p["expression"],
            systems=tuple(p.get("systems", ())), severity=p.get("severity", "error"),
            continuation=bool(p.get("continuation", False)), family=family,
        )
        for p in doc.get("pattern", [])
    ]


@lru_cache(maxsize=1)
def _builtin_registry() -> PatternRegistry:
    patterns = []
    root = resources.files("buildmend") / "data" / "patterns"
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".toml"):
            patterns.extend(_load_family(entry.read_bytes()))
    return PatternRegistry(patterns)


# extraction --------------------------------------------------------------------------

DIAGNOSTIC_FIELDS = ("tool", "file", "line", "column", "message", "severity",
                     "context_before", "context_after", "pattern_id", "byte_offset")


@dataclass
class DiagnosticRecord:
    tool: str
    file: str | None
    line: int | None
    column: int | None
    message: str
    severity: str
    context_before: list[str]
    context_after: list[str]
    pattern_id: str
    byte_offset: int

    def __post_init__(self):
        if len(self.context_before) > CONTEXT_LINES or len(self.context_after) > CONTEXT_LINES:
            raise PreconditionError("context window exceeds two lines")
        if self.severity not in SEVERITIES:
            raise PreconditionError(f"unknown severity {self.severity!r}")
        if self.tool not in TOOLS:
            raise PreconditionError(f"unknown tool {self.tool!r}")

    def to_json(self) -> dict:
        return {f: getattr(self, f) for f in DIAGNOSTIC_FIELDS}

    @classmethod
    def from_json(cls, data: dict) -> "DiagnosticRecord":
        return cls(**{f: data.get(f) for f in DIAGNOSTIC_FIELDS})

    @property
    def location(self) -> str:
        if not self.file:
            return ""
        return f"{self.file}:{self.line}" if self.line else self.file


def _severity(raw: str | None, default: str) -> str:
    if not raw:
        return default
    raw = raw.lower().strip()
    if raw.startswith("fatal"):
        return "fatal"
    return "warning" if raw.startswith("warn") else "error"


def _int(value) -> int | None:
    if value is None:
        return None
    n = int(value)
    return n if n > 0 else None


def extract_diagnostics(log: NormalizedLog, system: str | None = None,
                        registry: PatternRegistry | None = None) -> list[DiagnosticRecord]:
    registry = registry or PatternRegistry.builtin()
    system = system or detect_build_system(log)
    patterns = registry.ordered_for(system)
    lines = log.lines
    records = []
    consumed_until = -1
    for i, text in enumerate(lines):
        if i <= consumed_until or not text.strip():
            continue
        for pat in patterns:
            m = pat.regex.search(text)
            if not m:
                continue
            groups = m.groupdict()
            message = (groups.get("message") or "").strip()
            last = i
            if pat.continuation and not message:
                j = i + 1
                while j < len(lines) and not lines[j].strip():
                    j += 1
                if j < len(lines):
                    message = lines[j].strip()
                    last = j
            if not message:
                message = text.strip()
            records.append(DiagnosticRecord(
                tool=pat.tool,
                file=groups.get("file") or None,
                line=_int(groups.get("line")),
                column=_int(groups.get("column")),
                message=message,
                severity=_severity(groups.get("severity"), pat.severity),
                context_before=lines[max(0, i - CONTEXT_LINES):i],
                context_after=lines[last + 1:last + 1 + CONTEXT_LINES],
                pattern_id=pat.id,
                byte_offset=log.offsets[i],
            ))
            consumed_until = last
            break
    return records


def first_fatal(diagnostics: list[DiagnosticRecord]) -> DiagnosticRecord:
    if not diagnostics:
        raise PreconditionError("no diagnostics to choose from")
    errors = [d for d in diagnostics if d.severity in ("fatal", "error")]
    if not errors:
        raise NoFatalErrorError("no error-severity diagnostic; failure is not a compilation error")
    return min(errors, key=lambda d: (d.byte_offset, _TOOL_RANK[d.tool]))


@dataclass
class ParseResult:
    normalized: NormalizedLog
    build_system: str
    diagnostics: list[DiagnosticRecord]
    first_fatal: DiagnosticRecord | None
    run_id: str = ""


def parse_log(raw: RawLog | bytes, registry: PatternRegistry | None = None) -> ParseResult:
    norm = normalize(raw)
    system = detect_build_system(norm)
    diags = extract_diagnostics(norm, system, registry)
    try:
        fatal = first_fatal(diags)
    except (PreconditionError, NoFatalErrorError):
        fatal = None
    return ParseResult(norm, system, diags, fatal, raw.run_id if isinstance(raw, RawLog) else "")


def load_diagnostics(path) -> list[DiagnosticRecord]:
    return [DiagnosticRecord.from_json(d) for d in read_jsonl(path)]


def diagnostics_digest(records: list[DiagnosticRecord]) -> str:
    payload = "".join(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n" for r in records)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
