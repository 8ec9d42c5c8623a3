"""Rule-based classification of the first fatal build error into one of
five categories, plus per-project distributions."""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable

from .ciconfig import BuildStage
from .core import atomic_write
from .errors import PreconditionError, UnclassifiedError
from .logparse import DiagnosticRecord, NormalizedLog

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

ENVIRONMENT_SETUP = "environment-setup"
SYNTAX = "syntax"
HARDWARE = "hardware-dependency"
NON_HARDWARE = "non-hardware-dependency"
COMPILER_CONFIG = "compiler-configuration"

# display order used by tables; evaluation order comes from rule priorities
CATEGORIES = (ENVIRONMENT_SETUP, SYNTAX, HARDWARE, NON_HARDWARE, COMPILER_CONFIG)
CATEGORY_LABELS = {
    ENVIRONMENT_SETUP: "Environment Setup Failure",
    SYNTAX: "Syntax Error",
    HARDWARE: "Hardware Dependency Error",
    NON_HARDWARE: "Non-hardware Dependency Error",
    COMPILER_CONFIG: "Compiler Configuration Error",
}
PHASES = ("configuration", "compilation", "linking", "provisioning")


# build phase -------------------------------------------------------------------

_PROVISION_MARK = re.compile(
    r"\b(?:apt-get|apt|yum|dnf|apk|pacman|brew|pip3?|conda)\b.*\b(?:install|update|add)\b|^Get:\d+|^(?:Downloading|Installing|Unpacking|"
    r"Setting up|Collecting|Fetching|Reading package lists)|\b(?:curl|wget)\s|Tool Manager:|Platform Manager:|"
    r"Library Manager:|^E: |^apt-get: |\bwest (?:init|update)\b", re.I)
_CONFIGURE_MARK = re.compile(
    r"^-- (?!Build files have been written|Generating done)|^CMake (?:Error|Warning)|^checking |^configure:|"
    r"Kconfig|^Loading Zephyr|^Parsing .*Kconfig|devicetree|^\s*\$ cmake\b|^cmake\b")
_CONFIG_END = re.compile(r"^-- (?:Build files have been written|Generating done)")
_COMPILE_MARK = re.compile(
    r"^\[\d+/\d+\] (?:Building|Compiling)|^Compiling |^\s*(?:CC|CXX|AS)\s+\S|Building (?:C|CXX|ASM) object|"
    r"^(?:\S*/)?(?:[\w.+]+-)*(?:gcc|g\+\+|cc|c\+\+|clang|clang\+\+)(?:-\d+)?\s")
_LINK_MARK = re.compile(r"^\[\d+/\d+\] Linking|^Linking |^\s*(?:LD|CCLD|CXXLD)\s+\S|\s-o\s+\S+\.(?:elf|axf|out|exe|bin)\b|\bcollect2\b")


def infer_build_phase(diagnostic: DiagnosticRecord, log: NormalizedLog) -> str:
    if diagnostic.tool == "linker":
        return "linking"
    if diagnostic.tool == "configure":
        return "configuration"
    idx = log.line_at(diagnostic.byte_offset) if log.lines else 0
    before = log.lines[:idx]
    if not any(_COMPILE_MARK.search(line) for line in before):
        own = log.lines[idx] if log.lines else diagnostic.message
        if _PROVISION_MARK.search(own) or any(_PROVISION_MARK.search(line) for line in before):
            return "provisioning"
    for line in reversed(before):
        if _CONFIG_END.search(line):
            return "compilation"
        if _LINK_MARK.search(line):
            return "linking"
        if _COMPILE_MARK.search(line):
            return "compilation"
        if _CONFIGURE_MARK.search(line):
            return "configuration"
    return "compilation"


# context and predicates ----------------------------------------------------------


@dataclass
class HardwareTokens:
    identifiers: list[re.Pattern]
    headers: list[re.Pattern]
    paths: list[re.Pattern]
    context_keys: re.Pattern

    @classmethod
    def from_toml(cls, data: bytes) -> "HardwareTokens":
        doc = tomllib.loads(data.decode("utf-8"))
        return cls(
            [re.compile(p) for p in doc["identifiers"]],
            [re.compile(p, re.I) for p in doc["headers"]],
            [re.compile(p, re.I) for p in doc["paths"]],
            re.compile(doc["context_keys"]),
        )

    def symbol(self, name: str) -> bool:
        return any(p.search(name) for p in self.identifiers)

    def header(self, name: str) -> bool:
        return any(p.search(name) for p in self.headers)

    def path(self, name: str) -> bool:
        return any(p.search(name) for p in self.paths)


@dataclass
class ClassifyContext:
    """What the rules may look at besides the message."""

    env: dict = field(default_factory=dict)
    commands: list[str] = field(default_factory=list)

    @classmethod
    def from_stage(cls, stage: BuildStage | None) -> "ClassifyContext":
        if stage is None:
            return cls()
        env = {**stage.job.env, **{str(k): str(v) for k, v in stage.job.matrix.items()}}
        return cls(env, list(stage.preparatory_steps) + list(stage.build_commands))


_QUOTED = re.compile(r"[‘'\"`]([A-Za-z_]\w*)[’'\"`]")
_HEADER = re.compile(r"[‘'\"`<]?([\w./+-]+\.(?:h|hh|hpp|hxx|inc|H))[’'\"`>]?")
_INCLUDED_FROM = re.compile(r"(?:In file included from|from)\s+([^\s:]+)")


def _missing_header(diag, phase, ctx, tokens):
    if not re.search(r"No such file or directory|file not found|not found|cannot open source file", diag.message, re.I):
        return None
    m = _HEADER.search(diag.message)
    return [m.group(1)] if m else None


def _hardware_header(diag, phase, ctx, tokens):
    found = _missing_header(diag, phase, ctx, tokens)
    if found and tokens.header(found[0]):
        return [f"header {found[0]}"]
    return None


def _hardware_symbol(diag, phase, ctx, tokens):
    names = _QUOTED.findall(diag.message)
    m = re.search(r"(?:did you mean|suggest)", diag.message)
    if m:
        # the suggestion is a hint, not the failing symbol
        names = _QUOTED.findall(diag.message[: m.start()]) or names[:1]
    hits = [n for n in names if tokens.symbol(n)]
    return [f"symbol {n}" for n in hits] or None


def _hardware_path(diag, phase, ctx, tokens):
    candidates = [diag.file] if diag.file else []
    for line in diag.context_before:
        candidates.extend(_INCLUDED_FROM.findall(line))
    hits = [c for c in candidates if c and tokens.path(c)]
    return [f"path {h}" for h in hits] or None


def _structured_location(diag, phase, ctx, tokens):
    if diag.file and diag.line:
        return [f"{diag.file}:{diag.line}"]
    return None


def _board_context(diag, phase, ctx, tokens):
    hits = [f"{k}={v}" for k, v in sorted(ctx.env.items()) if tokens.context_keys.search(k) and v]
    return hits or None


PREDICATES: dict[str, Callable] = {
    "missing_header": _missing_header,
    "hardware_header": _hardware_header,
    "hardware_symbol": _hardware_symbol,
    "hardware_path": _hardware_path,
    "structured_location": _structured_location,
    "board_context": _board_context,
}


# rules ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    id: str
    priority: int
    category: str
    message_pattern: str = ""
    phase_constraint: tuple[str, ...] = ()
    context_predicates: tuple[str, ...] = ()
    tools: tuple[str, ...] = ()

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise PreconditionError(f"rule {self.id}: unknown category {self.category!r}")
        for p in self.phase_constraint:
            if p not in PHASES:
                raise PreconditionError(f"rule {self.id}: unknown phase {p!r}")
        for name in self.context_predicates:
            if name.lstrip("!") not in PREDICATES:
                raise PreconditionError(f"rule {self.id}: unknown predicate {name!r}")
        object.__setattr__(self, "_rx", re.compile(self.message_pattern) if self.message_pattern else None)

    def match(self, diag: DiagnosticRecord, phase: str, ctx: ClassifyContext, tokens: HardwareTokens) -> list[str] | None:
        """Evidence fragments when every condition holds, else None."""
        evidence: list[str] = []
        if self.phase_constraint:
            if phase not in self.phase_constraint:
                return None
            evidence.append(f"phase {phase}")
        if self.tools and diag.tool not in self.tools:
            return None
        if self._rx is not None:
            m = self._rx.search(diag.message)
            if not m:
                return None
            evidence.append(m.group(0))
        for name in self.context_predicates:
            negate = name.startswith("!")
            got = PREDICATES[name.lstrip("!")](diag, phase, ctx, tokens)
            if negate:
                if got:
                    return None
                continue
            if not got:
                return None
            evidence.extend(got)
        if not evidence:
            evidence.append(diag.message)
        return evidence


class RuleSet:
    def __init__(self, rules: Iterable[Rule], tokens: HardwareTokens):
        rules = list(rules)
        ids = [r.id for r in rules]
        if len(set(ids)) != len(ids):
            raise PreconditionError("duplicate classification rule ids")
        order = {r.id: i for i, r in enumerate(rules)}
        self.rules = sorted(rules, key=lambda r: (r.priority, order[r.id]))
        self.tokens = tokens

    @classmethod
    def from_toml(cls, rules_data: bytes, tokens_data: bytes) -> "RuleSet":
        doc = tomllib.loads(rules_data.decode("utf-8"))
        rules = [
            Rule(
                id=r["id"], priority=int(r["priority"]), category=r["category"],
                message_pattern=r.get("message_pattern", ""),
                phase_constraint=tuple(r.get("phase_constraint", ())),
                context_predicates=tuple(r.get("context_predicates", ())),
                tools=tuple(r.get("tools", ())),
            )
            for r in doc.get("rule", [])
        ]
        return cls(rules, HardwareTokens.from_toml(tokens_data))

    @classmethod
    def from_directory(cls, directory) -> "RuleSet":
        d = Path(directory)
        return cls.from_toml((d / "classification.toml").read_bytes(), (d / "hardware_tokens.toml").read_bytes())

    @classmethod
    def builtin(cls) -> "RuleSet":
        return _builtin_rules()

    def without(self, rule_id: str) -> "RuleSet":
        return RuleSet([r for r in self.rules if r.id != rule_id], self.tokens)

    def ids(self) -> list[str]:
        return [r.id for r in self.rules]


@lru_cache(maxsize=1)
def _builtin_rules() -> RuleSet:
    root = resources.files("buildmend") / "data" / "rules"
    return RuleSet.from_toml((root / "classification.toml").read_bytes(), (root / "hardware_tokens.toml").read_bytes())


@dataclass
class ClassifiedError:
    diagnostic: DiagnosticRecord
    category: str
    rule_id: str
    build_phase: str
    evidence: list[str]
    project: str = ""
    run_id: str = ""

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise PreconditionError(f"unknown category {self.category!r}")
        if not self.evidence:
            raise PreconditionError("classification evidence must be non-empty")

    def to_json(self) -> dict:
        return {
            "diagnostic": self.diagnostic.to_json(),
            "category": self.category,
            "rule_id": self.rule_id,
            "build_phase": self.build_phase,
            "evidence": list(self.evidence),
            "project": self.project,
            "run_id": self.run_id,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ClassifiedError":
        return cls(
            DiagnosticRecord.from_json(data["diagnostic"]), data["category"], data["rule_id"],
            data["build_phase"], list(data["evidence"]), data.get("project", ""), data.get("run_id", ""),
        )


def classify(diagnostic: DiagnosticRecord, phase: str, context: BuildStage | ClassifyContext | None = None,
             rules: RuleSet | None = None) -> ClassifiedError:
    if phase not in PHASES:
        raise PreconditionError(f"unknown build phase {phase!r}")
    rules = rules or RuleSet.builtin()
    ctx = context if isinstance(context, ClassifyContext) else ClassifyContext.from_stage(context)
    for rule in rules.rules:
        evidence = rule.match(diagnostic, phase, ctx, rules.tokens)
        if evidence is None:
            continue
        if rule.category == HARDWARE:
            evidence.extend(_board_context(diagnostic, phase, ctx, rules.tokens) or [])
        return ClassifiedError(diagnostic, rule.category, rule.id, phase, evidence)
    raise UnclassifiedError(diagnostic)


# distribution -------------------------------------------------------------------------


def percent_half_up(part: int, whole: int) -> int:
    if whole == 0:
        return 0
    value = Fraction(part * 100, whole) + Fraction(1, 2)
    return value.numerator // value.denominator


@dataclass
class CategoryHistogram:
    counts: dict[str, dict[str, int]]

    def groups(self) -> list[str]:
        return list(self.counts)

    def total(self, group: str | None = None) -> int:
        if group is not None:
            return sum(self.counts.get(group, {}).values())
        return sum(sum(c.values()) for c in self.counts.values())

    def category_total(self, category: str) -> int:
        return sum(c.get(category, 0) for c in self.counts.values())

    def fraction(self, group: str, category: str) -> Fraction:
        total = self.total(group)
        return Fraction(self.counts[group].get(category, 0), total) if total else Fraction(0)

    def percent(self, group: str, category: str) -> int:
        return percent_half_up(self.counts.get(group, {}).get(category, 0), self.total(group))

    def overall_percent(self, category: str) -> Fraction:
        total = self.total()
        return Fraction(self.category_total(category) * 100, total) if total else Fraction(0)

    def rows(self) -> list[dict]:
        out = []
        for group, counts in self.counts.items():
            for cat in CATEGORIES:
                out.append({"project": group, "category": cat, "count": counts.get(cat, 0),
                            "percent": self.percent(group, cat)})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["project", "category", "count", "percent"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        return atomic_write(path, self.to_csv())


def distribution(errors: Iterable[ClassifiedError], by_project: Callable[[ClassifiedError], str] | None = None) -> CategoryHistogram:
    key = by_project or (lambda e: e.project or "all")
    counts: dict[str, dict[str, int]] = {}
    for err in errors:
        group = counts.setdefault(key(err), {c: 0 for c in CATEGORIES})
        group[err.category] += 1
    if not counts:
        counts["all"] = {c: 0 for c in CATEGORIES}
    return CategoryHistogram(dict(sorted(counts.items())))


def histogram_from_counts(counts: dict[str, dict[str, int]]) -> CategoryHistogram:
    return CategoryHistogram({g: {c: int(v.get(c, 0)) for c in CATEGORIES} for g, v in counts.items()})
