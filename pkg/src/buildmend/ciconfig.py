"""CI configuration parsing and build-stage reconstruction.

Reads GitHub-Actions-style workflows (``.github/workflows/*.yml``) and
GitLab-CI-style pipelines (``.gitlab-ci.yml``), expands job matrices, picks
the job that compiles code and turns it into a container recipe plus a POSIX
build script. Everything here is static: no CI expression is evaluated except
matrix substitution, and no remote action or include is fetched.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
import shlex
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import yaml

from .core import atomic_write, format_timestamp, is_commit_id, utcnow
from .errors import AmbiguousJobError, CIParseError, MatrixLimitError, NoBuildStageError, NoCIError, NoImageError
from .gitops import CheckoutSettings

log = logging.getLogger(__name__)

GHA = "gha-style"
GITLAB = "gitlab-ci-style"

DEFAULT_MARKERS = ("cmake", "make", "ninja", "west build", "pio run", "platformio run")
DEFAULT_COMPILER_PATTERN = r"^(?:[\w.+]+-)*(?:gcc|g\+\+|clang|clang\+\+|cc|c\+\+)(?:-\d+(?:\.\d+)*)?$"
DEFAULT_SECRET_PATTERNS = ("TOKEN", "SECRET", "PASSWORD", "KEY", "CREDENTIAL")
DEFAULT_MATRIX_LIMIT = 64


@dataclass(frozen=True)
class ImageRef:
    name: str
    tag: str | None = None
    digest: str | None = None

    @classmethod
    def parse(cls, text: str) -> "ImageRef":
        text = text.strip()
        digest = None
        if "@" in text:
            text, digest = text.split("@", 1)
        tag = None
        last = text.rsplit("/", 1)[-1]
        if ":" in last:
            text, tag = text.rsplit(":", 1)
        return cls(text, tag, digest)

    @property
    def reference(self) -> str:
        """Pinned reference: the digest when known, else name:tag."""
        if self.digest:
            return f"{self.name}@{self.digest}"
        return f"{self.name}:{self.tag}" if self.tag else self.name

    def __str__(self):
        return self.reference


@dataclass
class JobSpec:
    name: str
    image: ImageRef | None
    env: dict[str, str]
    setup_commands: list[str]
    build_commands: list[str]
    checkout: CheckoutSettings = field(default_factory=CheckoutSettings)
    runs_on: str | None = None
    stage: str | None = None
    group: str = ""
    matrix: dict = field(default_factory=dict)
    source_file: str = ""

    @property
    def commands(self) -> list[str]:
        return [*self.setup_commands, *self.build_commands]


@dataclass
class CISpec:
    platform: str
    jobs: list[JobSpec]
    source_files: list[str]
    root: Path | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.jobs:
            raise NoCIError("CI configuration defines no jobs")
        if not self.source_files:
            raise NoCIError("CI configuration has no source files")


@dataclass
class BuildStage:
    job: JobSpec
    compiler_markers: list[str]
    preparatory_steps: list[str]
    build_commands: list[str]

    def __post_init__(self):
        if not self.compiler_markers:
            raise NoBuildStageError([])


@dataclass
class ProvisioningRecord:
    commands: list[str] = field(default_factory=list)
    toolchain_family: str = "unknown"
    version: str = "unknown"
    activation_method: str = "unknown"

    @property
    def is_empty(self) -> bool:
        return not self.commands


@dataclass
class ReconstructionArtifacts:
    container_recipe: str
    build_script: str
    metadata: dict
    env: dict[str, str] = field(default_factory=dict)

    @property
    def commit(self) -> str:
        return self.metadata["commit"]


# configuration ---------------------------------------------------------------


@dataclass
class MarkerSet:
    commands: tuple[str, ...] = DEFAULT_MARKERS
    compiler_pattern: str = DEFAULT_COMPILER_PATTERN

    def __post_init__(self):
        self._words = [tuple(m.split()) for m in self.commands]
        self._compiler = re.compile(self.compiler_pattern)

    def describe(self) -> list[str]:
        return [*self.commands, "direct compiler invocation"]

    def match_words(self, words: list[str]) -> str | None:
        if not words:
            return None
        head = [words[0].rsplit("/", 1)[-1], *words[1:]]
        for marker in self._words:
            if len(head) >= len(marker) and tuple(head[: len(marker)]) == marker:
                return " ".join(marker)
        if self._compiler.match(head[0]):
            return head[0]
        return None

    def scan(self, command: str, root: Path | None = None, _depth: int = 0) -> list[str]:
        """Markers invoked by ``command`` (and by local scripts it runs)."""
        found = []
        for words in simple_commands(command):
            marker = self.match_words(words)
            if marker:
                found.append(marker)
                continue
            script = _referenced_script(words, root)
            if script is not None and _depth < 3:
                try:
                    text = script.read_text(encoding="utf-8", errors="replace")
                except OSError:
                    continue
                found.extend(self.scan(text, root, _depth + 1))
        return found


_SEPARATORS = re.compile(r"&&|\|\||[;|()`]|\$\(")
_PREFIX_WORDS = {"sudo", "env", "time", "exec", "nohup", "command", "then", "do", "else", "!", "{"}
_ASSIGN = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*=")


def simple_commands(text: str) -> list[list[str]]:
    """Split shell text into simple commands and return each one's words,
    with leading assignments and wrappers such as ``sudo`` removed."""
    out = []
    joined = re.sub(r"\\\n", " ", text)
    for line in joined.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        for piece in _SEPARATORS.split(stripped):
            piece = piece.strip()
            if not piece:
                continue
            try:
                words = shlex.split(piece, comments=True)
            except ValueError:
                words = piece.split()
            while words and (words[0] in _PREFIX_WORDS or _ASSIGN.match(words[0]) or
                             (words[0].startswith("-") and out is not None and len(words) > 1 and words[0] != "-")):
                words = words[1:]
            if words:
                out.append(words)
    return out


def _referenced_script(words: list[str], root: Path | None) -> Path | None:
    if root is None:
        return None
    candidate = None
    if words[0] in ("sh", "bash", "source", ".") and len(words) > 1:
        candidate = words[1]
    elif "/" in words[0] or words[0].endswith(".sh"):
        candidate = words[0]
    if not candidate or candidate.startswith("-"):
        return None
    path = (root / candidate.lstrip("./") if candidate.startswith("./") else root / candidate)
    try:
        path = path.resolve()
        path.relative_to(root.resolve())
    except (OSError, ValueError):
        return None
    return path if path.is_file() else None


def secret_matcher(patterns=DEFAULT_SECRET_PATTERNS):
    rx = re.compile("|".join(re.escape(p) for p in patterns), re.IGNORECASE)
    return lambda key: bool(rx.search(key))


# YAML loading ------------------------------------------------------------------


class _Reference(list):
    """GitLab ``!reference [job, key]`` placeholder."""


class _CILoader(yaml.SafeLoader):
    pass


def _construct_reference(loader, node):
    return _Reference(loader.construct_sequence(node))


_CILoader.add_constructor("!reference", _construct_reference)


def _load_yaml(path: Path, root: Path | None = None):
    rel = str(path.relative_to(root)) if root and path.is_relative_to(root) else str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.load(fh, Loader=_CILoader)  # noqa: S506 - safe loader subclass
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise CIParseError(str(exc.problem or exc), rel, mark.line + 1 if mark else None) from exc
    except yaml.YAMLError as exc:
        raise CIParseError(str(exc), rel) from exc


# matrix handling -----------------------------------------------------------------


def expand_gha_matrix(matrix, limit: int = DEFAULT_MATRIX_LIMIT) -> list[dict]:
    """GitHub-style matrix expansion including ``include`` / ``exclude``."""
    if not matrix:
        return [{}]
    if not isinstance(matrix, dict):
        raise MatrixLimitError("matrix given as an expression cannot be expanded statically")
    axes = {k: v if isinstance(v, list) else [v] for k, v in matrix.items() if k not in ("include", "exclude")}
    combos = [dict(zip(axes, values)) for values in itertools.product(*axes.values())] if axes else []
    for ex in matrix.get("exclude") or []:
        combos = [c for c in combos if not all(c.get(k) == v for k, v in ex.items())]
    base_keys = set(axes)
    originals = [dict(c) for c in combos]
    for inc in matrix.get("include") or []:
        merged = False
        for orig, combo in zip(originals, combos):
            if all(orig.get(k) == v for k, v in inc.items() if k in base_keys):
                combo.update({k: v for k, v in inc.items() if k not in base_keys})
                merged = True
        if not merged:
            combos.append(dict(inc))
            originals.append(dict(inc))
    if not combos:
        combos = [{}]
    if len(combos) > limit:
        raise MatrixLimitError(f"matrix expands to {len(combos)} combinations (limit {limit})")
    return combos


def expand_gitlab_matrix(parallel, limit: int = DEFAULT_MATRIX_LIMIT) -> list[dict]:
    if not isinstance(parallel, dict) or "matrix" not in parallel:
        return [{}]
    combos = []
    for entry in parallel["matrix"]:
        axes = {k: v if isinstance(v, list) else [v] for k, v in entry.items()}
        combos.extend(dict(zip(axes, values)) for values in itertools.product(*axes.values()))
    if len(combos) > limit:
        raise MatrixLimitError(f"parallel matrix expands to {len(combos)} combinations (limit {limit})")
    return combos or [{}]


_MATRIX_EXPR = re.compile(r"\$\{\{\s*matrix\.([\w-]+)\s*\}\}")
_ANY_EXPR = re.compile(r"\$\{\{.*?\}\}")


def _matrix_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def _substitute(text: str, combo: dict) -> str:
    return _MATRIX_EXPR.sub(lambda m: _matrix_value(combo[m.group(1)]) if m.group(1) in combo else m.group(0), text)


def _as_str(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    return str(v)


# GitHub Actions style ------------------------------------------------------------


def _checkout_from_with(with_: dict | None) -> CheckoutSettings:
    with_ = with_ or {}
    depth = with_.get("fetch-depth", 1)
    try:
        depth = int(depth)
    except (TypeError, ValueError):
        depth = 1
    subs = str(with_.get("submodules", "false")).lower() in ("true", "recursive")
    return CheckoutSettings(fetch_depth=depth if depth > 0 else None, submodules=subs)


def _gha_job_name(job_id: str, job: dict, combo: dict) -> str:
    raw = job.get("name")
    if raw:
        name = _substitute(str(raw), combo)
        if combo and not _MATRIX_EXPR.search(str(raw)):
            name += " (" + ", ".join(_matrix_value(v) for v in combo.values()) + ")"
        return name
    if combo:
        return f"{job_id} (" + ", ".join(_matrix_value(v) for v in combo.values()) + ")"
    return job_id


def _filter_env(env: dict, is_secret, warnings: list, where: str) -> dict[str, str]:
    out = {}
    for k, v in (env or {}).items():
        key = str(k)
        value = _as_str(v)
        if is_secret(key) or "secrets." in value:
            continue
        if _ANY_EXPR.search(value):
            warnings.append(f"{where}: env {key} uses an unevaluated expression; dropped")
            continue
        out[key] = value
    return out


def _composite_commands(root: Path, ref: str, with_: dict, combo: dict, warnings: list, depth=0) -> list[str]:
    action_dir = (root / ref).resolve()
    for fname in ("action.yml", "action.yaml"):
        if (action_dir / fname).is_file():
            doc = _load_yaml(action_dir / fname, root) or {}
            break
    else:
        warnings.append(f"local action {ref} not found; replaced by no-op")
        return []
    runs = doc.get("runs") or {}
    if runs.get("using") != "composite":
        warnings.append(f"local action {ref} is not composite; replaced by no-op")
        return []
    inputs = {k: _as_str((v or {}).get("default")) for k, v in (doc.get("inputs") or {}).items()}
    inputs.update({k: _as_str(v) for k, v in (with_ or {}).items()})
    cmds = []
    for step in runs.get("steps") or []:
        if "run" in step:
            text = re.sub(r"\$\{\{\s*inputs\.([\w-]+)\s*\}\}", lambda m: inputs.get(m.group(1), m.group(0)),
                          _substitute(str(step["run"]), combo))
            cmds.append(text.rstrip("\n"))
        elif "uses" in step and str(step["uses"]).startswith("./") and depth < 3:
            cmds.extend(_composite_commands(root, str(step["uses"]), step.get("with"), combo, warnings, depth + 1))
        elif "uses" in step:
            cmds.append(f"# uses: {step['uses']} (remote action, not reproduced)")
            warnings.append(f"remote action {step['uses']} inside {ref} replaced by no-op")
    return cmds


def _parse_gha(root: Path, files: list[Path], is_secret, limit: int, warnings: list) -> list[JobSpec]:
    jobs: list[JobSpec] = []
    for path in files:
        rel = str(path.relative_to(root))
        doc = _load_yaml(path, root) or {}
        if not isinstance(doc, dict):
            raise CIParseError("workflow is not a mapping", rel)
        wf_env = doc.get("env") or {}
        for job_id, job in (doc.get("jobs") or {}).items():
            if not isinstance(job, dict):
                raise CIParseError(f"job {job_id!r} is not a mapping", rel)
            if "uses" in job:
                warnings.append(f"{rel}: job {job_id} calls reusable workflow {job['uses']}; skipped")
                continue
            strategy = job.get("strategy") or {}
            try:
                combos = expand_gha_matrix(strategy.get("matrix"), limit)
            except MatrixLimitError as exc:
                if "expression" in str(exc):
                    warnings.append(f"{rel}: job {job_id}: {exc}")
                    combos = [{}]
                else:
                    raise
            for combo in combos:
                jobs.append(_gha_job(root, rel, job_id, job, combo, wf_env, is_secret, warnings))
    return jobs


def _gha_job(root, rel, job_id, job, combo, wf_env, is_secret, warnings) -> JobSpec:
    where = f"{rel}:{job_id}"
    image = None
    container_env = {}
    container = job.get("container")
    if isinstance(container, str):
        image = ImageRef.parse(_substitute(container, combo))
    elif isinstance(container, dict) and container.get("image"):
        image = ImageRef.parse(_substitute(str(container["image"]), combo))
        container_env = container.get("env") or {}
    env_raw = {}
    for source in (wf_env, job.get("env") or {}, container_env):
        env_raw.update({k: _substitute(_as_str(v), combo) for k, v in source.items()})
    checkout = CheckoutSettings()
    commands: list[str] = []
    for step in job.get("steps") or []:
        if not isinstance(step, dict):
            continue
        for k, v in (step.get("env") or {}).items():
            env_raw.setdefault(k, _substitute(_as_str(v), combo))
        uses = str(step.get("uses", ""))
        if uses.startswith("actions/checkout"):
            checkout = _checkout_from_with(step.get("with"))
        elif uses.startswith("./"):
            commands.extend(_composite_commands(root, uses, step.get("with"), combo, warnings))
        elif uses:
            commands.append(f"# uses: {uses} (remote action, not reproduced)")
            warnings.append(f"{where}: remote action {uses} replaced by no-op")
        if "run" in step:
            text = _substitute(str(step["run"]), combo).rstrip("\n")
            wd = step.get("working-directory")
            if wd:
                text = f"(\ncd {_substitute(str(wd), combo)}\n{text}\n)"
            commands.append(text)
    runs_on = job.get("runs-on")
    runs_on = _substitute(runs_on, combo) if isinstance(runs_on, str) else None
    return JobSpec(
        name=_gha_job_name(job_id, job, combo),
        image=image,
        env=_filter_env(env_raw, is_secret, warnings, where),
        setup_commands=[],
        build_commands=commands,
        checkout=checkout,
        runs_on=runs_on,
        stage=None,
        group=job_id,
        matrix=dict(combo),
        source_file=rel,
    )


# GitLab CI style -------------------------------------------------------------------

_GITLAB_RESERVED = {
    "stages", "variables", "image", "services", "before_script", "after_script", "cache",
    "include", "default", "workflow", "pages",
}


def _gitlab_includes(root: Path, doc: dict, warnings: list, depth=0) -> dict:
    includes = doc.get("include")
    if not includes or depth > 5:
        return doc
    if not isinstance(includes, list):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        local = inc if isinstance(inc, str) and not inc.startswith("http") else (
            inc.get("local") if isinstance(inc, dict) else None)
        if not local:
            warnings.append(f"remote include {inc!r} not resolved")
            continue
        path = root / str(local).lstrip("/")
        if not path.is_file():
            warnings.append(f"local include {local} not found")
            continue
        sub = _load_yaml(path, root) or {}
        merged.update(_gitlab_includes(root, sub, warnings, depth + 1))
    merged.update({k: v for k, v in doc.items() if k != "include"})
    return merged


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _resolve_extends(job: dict, doc: dict, depth=0) -> dict:
    parents = job.get("extends")
    if not parents or depth > 10:
        return job
    if isinstance(parents, str):
        parents = [parents]
    base: dict = {}
    for name in parents:
        parent = doc.get(name)
        if isinstance(parent, dict):
            base = _deep_merge(base, _resolve_extends(parent, doc, depth + 1))
    merged = _deep_merge(base, {k: v for k, v in job.items() if k != "extends"})
    return merged


def _script_lines(value, doc, warnings) -> list[str]:
    if value is None:
        return []
    if isinstance(value, _Reference):
        target = doc
        for key in value:
            target = target.get(key) if isinstance(target, dict) else None
        if target is None:
            warnings.append(f"unresolved !reference {list(value)}")
            return []
        return _script_lines(target, doc, warnings)
    if isinstance(value, str):
        return [value.rstrip("\n")]
    out = []
    for item in value:
        out.extend(_script_lines(item, doc, warnings))
    return out


def _gitlab_image(value) -> ImageRef | None:
    if isinstance(value, str):
        return ImageRef.parse(value)
    if isinstance(value, dict) and value.get("name"):
        return ImageRef.parse(str(value["name"]))
    return None


def _gitlab_vars(value) -> dict:
    out = {}
    for k, v in (value or {}).items():
        out[k] = _as_str(v.get("value")) if isinstance(v, dict) else _as_str(v)
    return out


def _parse_gitlab(root: Path, path: Path, is_secret, limit: int, warnings: list) -> list[JobSpec]:
    rel = str(path.relative_to(root))
    doc = _load_yaml(path, root) or {}
    if not isinstance(doc, dict):
        raise CIParseError("pipeline file is not a mapping", rel)
    doc = _gitlab_includes(root, doc, warnings)
    default = doc.get("default") or {}
    global_image = _gitlab_image(default.get("image") or doc.get("image"))
    global_vars = _gitlab_vars(doc.get("variables"))
    global_before = default.get("before_script", doc.get("before_script"))
    jobs = []
    for key, job in doc.items():
        if key in _GITLAB_RESERVED or str(key).startswith(".") or not isinstance(job, dict):
            continue
        job = _resolve_extends(job, doc)
        if "script" not in job and "trigger" in job:
            continue
        for combo in expand_gitlab_matrix(job.get("parallel"), limit):
            variables = {**global_vars, **_gitlab_vars(job.get("variables")), **{k: _as_str(v) for k, v in combo.items()}}
            depth = variables.get("GIT_DEPTH")
            sub = variables.get("GIT_SUBMODULE_STRATEGY", "none").lower()
            checkout = CheckoutSettings(
                fetch_depth=int(depth) if depth and depth.isdigit() and int(depth) > 0 else None,
                submodules=sub in ("normal", "recursive"),
            )
            name = key if not combo else f"{key}: [" + ", ".join(_as_str(v) for v in combo.values()) + "]"
            before = job.get("before_script", global_before)
            jobs.append(JobSpec(
                name=name,
                image=_gitlab_image(job.get("image")) or global_image,
                env=_filter_env(variables, is_secret, warnings, f"{rel}:{key}"),
                setup_commands=_script_lines(before, doc, warnings),
                build_commands=_script_lines(job.get("script"), doc, warnings),
                checkout=checkout,
                stage=str(job.get("stage", "test")),
                group=key,
                matrix=dict(combo),
                source_file=rel,
            ))
    return jobs


# operations --------------------------------------------------------------------------


def parse_ci_spec(workspace, secret_patterns=DEFAULT_SECRET_PATTERNS, matrix_limit: int = DEFAULT_MATRIX_LIMIT) -> CISpec:
    root = Path(workspace).resolve()
    is_secret = secret_matcher(secret_patterns)
    warnings: list[str] = []
    wf_dir = root / ".github" / "workflows"
    gha_files = sorted(p for p in wf_dir.glob("*") if p.suffix in (".yml", ".yaml")) if wf_dir.is_dir() else []
    gitlab = root / ".gitlab-ci.yml"
    if gha_files:
        if gitlab.is_file():
            warnings.append(".gitlab-ci.yml also present; using GitHub-style workflows")
        jobs = _parse_gha(root, gha_files, is_secret, matrix_limit, warnings)
        return CISpec(GHA, jobs, [str(p.relative_to(root)) for p in gha_files], root, warnings)
    if gitlab.is_file():
        jobs = _parse_gitlab(root, gitlab, is_secret, matrix_limit, warnings)
        return CISpec(GITLAB, jobs, [".gitlab-ci.yml"], root, warnings)
    raise NoCIError(f"no .github/workflows/*.yml or .gitlab-ci.yml under {root}")


def _stage_for(job: JobSpec, markers: MarkerSet, root) -> BuildStage | None:
    commands = job.commands
    for i, cmd in enumerate(commands):
        if markers.scan(cmd, root):
            found: list[str] = []
            for later in commands[i:]:
                for m in markers.scan(later, root):
                    if m not in found:
                        found.append(m)
            return BuildStage(job, found, commands[:i], commands[i:])
    return None


def select_build_stage(spec: CISpec, failing_job_name: str | None = None, markers: MarkerSet | None = None) -> BuildStage:
    markers = markers or MarkerSet()
    if failing_job_name:
        named = [j for j in spec.jobs if j.name == failing_job_name]
        if not named:
            named = [j for j in spec.jobs if j.group == failing_job_name]
            if len(named) > 1:
                raise AmbiguousJobError(
                    f"{failing_job_name!r} names a matrix with {len(named)} combinations; give the full job name")
        for job in named:
            stage = _stage_for(job, markers, spec.root)
            if stage:
                return stage
        log.info("job %r has no compiler invocation; falling back to the first build job", failing_job_name)
    for job in spec.jobs:
        stage = _stage_for(job, markers, spec.root)
        if stage:
            siblings = [j for j in spec.jobs if j.group == job.group and j.source_file == job.source_file]
            if not failing_job_name and len(siblings) > 1 and job.matrix:
                raise AmbiguousJobError(
                    f"build job {job.group!r} is a matrix of {len(siblings)} combinations; "
                    "the failing job name is required")
            return stage
    raise NoBuildStageError(markers.describe())


# toolchain provisioning ----------------------------------------------------------------

_FAMILY_PATTERNS = [
    (re.compile(r"zephyr-sdk[-_]?v?(\d+(?:\.\d+)+)?"), "zephyr-sdk"),
    (re.compile(r"\bgcc-(arm-none-eabi|aarch64-linux-gnu|arm-linux-gnueabihf|riscv64-unknown-elf|riscv64-linux-gnu|avr|msp430)\b"), None),
    (re.compile(r"\b(arm-none-eabi)\b"), None),
    (re.compile(r"\b((?:arm|aarch64|riscv(?:32|64)?|xtensa|mips(?:el)?|powerpc|sparc|i386|x86_64|m68k|or1k|microblaze)"
                r"(?:-[a-z0-9_]+){1,3}?)-(?:gcc|g\+\+|binutils|toolchain|elf-gcc)\b"), None),
    (re.compile(r"\b(xtensa-[a-z0-9]+-elf)\b"), None),
    (re.compile(r"\b(platformio)\b"), None),
    (re.compile(r"\b(rtems-source-builder|rtems\d+)\b"), "rtems"),
    (re.compile(r"\b(llvm|clang)(?:-(\d+))?\b"), None),
    (re.compile(r"\b(gcc|g\+\+)(?:-(\d+))\b"), "gcc"),
]
_VERSION = re.compile(r"(?<![\w.])v?(\d+\.\d+(?:\.\d+)*)(?![\w])")
_PROVISION = re.compile(
    r"\b(apt-get|apt|yum|dnf|apk|pacman|brew|pip3?|pipx|conda|curl|wget|tar|unzip|export\s+PATH|source|"
    r"west\s+(?:init|update|sdk)|pio\s+(?:pkg|platform)|setup\.sh|install)\b|GITHUB_PATH|^\.\s|# uses: ")
_PATH_EXPORT = re.compile(r"export\s+PATH=|>>\s*\"?\$GITHUB_PATH|PATH=\S*:\$PATH")
_WRAPPER = re.compile(r"(?:^|[;&|]\s*)(?:source|\.)\s+\S+|\benv\.sh\b|zephyr-env\.sh|setup\.sh|activate\b")
_PACKAGE = re.compile(r"\b(apt-get|apt|yum|dnf|apk|pacman|brew|pip3?|pipx|conda)\s+(?:-\S+\s+)*(install|add|-S)\b")


def extract_toolchain_provisioning(stage: BuildStage) -> ProvisioningRecord:
    commands = [c for c in stage.preparatory_steps if _PROVISION.search(c)]
    if not commands:
        return ProvisioningRecord()
    family, version = "unknown", "unknown"
    for cmd in commands:
        for rx, fixed in _FAMILY_PATTERNS:
            m = rx.search(cmd)
            if not m:
                continue
            family = fixed or m.group(1)
            if fixed and m.groups() and m.group(m.lastindex or 1) and rx.groups >= 1 and fixed != "rtems":
                version = m.group(m.lastindex) if m.lastindex and re.match(r"\d", m.group(m.lastindex) or "") else version
            if version == "unknown" and rx.groups >= 2 and m.group(2):
                version = m.group(2)
            if version == "unknown":
                v = _VERSION.search(cmd[m.end():]) or _VERSION.search(cmd)
                if v:
                    version = v.group(1)
            break
        if family != "unknown":
            break
    joined = "\n".join(commands)
    if _PATH_EXPORT.search(joined):
        activation = "path-export"
    elif _WRAPPER.search(joined):
        activation = "wrapper-script"
    elif _PACKAGE.search(joined):
        activation = "package-install"
    else:
        activation = "unknown"
    return ProvisioningRecord(list(commands), family, version, activation)


# reconstruction ------------------------------------------------------------------------

_RUNNER_IMAGE = re.compile(r"^ubuntu-(\d+\.\d+|latest)$")


def resolve_image(job: JobSpec, default_image: str | None = None) -> ImageRef:
    if job.image is not None:
        return job.image
    if job.runs_on:
        m = _RUNNER_IMAGE.match(job.runs_on)
        if m:
            return ImageRef("ubuntu", m.group(1))
    if default_image:
        return ImageRef.parse(default_image)
    raise NoImageError(f"job {job.name!r} declares no image and no default image is configured")


def _env_line(key: str, value: str) -> str:
    return f"ENV {key}={json.dumps(value)}"


def emit_reconstruction(stage: BuildStage, commit: str, default_image: str | None = None,
                        secret_patterns=DEFAULT_SECRET_PATTERNS, generated_at: datetime | None = None,
                        warnings: list[str] | None = None) -> ReconstructionArtifacts:
    if not is_commit_id(commit):
        raise ValueError(f"not a commit id: {commit!r}")
    job = stage.job
    image = resolve_image(job, default_image)
    is_secret = secret_matcher(secret_patterns)
    env = {k: v for k, v in job.env.items() if not is_secret(k)}

    recipe = [f"FROM {image.reference}"]
    recipe += [_env_line(k, v) for k, v in env.items()]
    recipe += [
        "WORKDIR /workspace",
        "COPY build.sh /reconstruction/build.sh",
        'CMD ["/bin/sh", "/reconstruction/build.sh"]',
    ]

    script = ["#!/bin/sh", "set -e"]
    if job.checkout.fetch_depth:
        script.append(f"# checkout fetch-depth: {job.checkout.fetch_depth}")
    script.append(f"git -c advice.detachedHead=false checkout --quiet --detach {commit}")
    if job.checkout.submodules:
        script.append("git submodule update --init --recursive")
    for cmd in [*stage.preparatory_steps, *stage.build_commands]:
        script.append(cmd)

    metadata = {
        "image_identifier": image.reference,
        "generated_at": format_timestamp(generated_at or utcnow()),
        "commit": commit,
        "job": job.name,
        "source_file": job.source_file,
        "compiler_markers": list(stage.compiler_markers),
        "checkout": {"fetch_depth": job.checkout.fetch_depth, "submodules": job.checkout.submodules},
        "warnings": list(warnings or []),
    }
    return ReconstructionArtifacts("\n".join(recipe) + "\n", "\n".join(script) + "\n", metadata, env)


def write_reconstruction(artifacts: ReconstructionArtifacts, directory, extra_meta: dict | None = None) -> Path:
    directory = Path(directory)
    atomic_write(directory / "Dockerfile", artifacts.container_recipe)
    atomic_write(directory / "build.sh", artifacts.build_script)
    meta = {**artifacts.metadata, "env": artifacts.env, **(extra_meta or {})}
    atomic_write(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_reconstruction(directory) -> ReconstructionArtifacts:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    env = meta.pop("env", {})
    return ReconstructionArtifacts(
        (directory / "Dockerfile").read_text(encoding="utf-8"),
        (directory / "build.sh").read_text(encoding="utf-8"),
        meta,
        env,
    )


def stage_to_json(stage: BuildStage) -> dict:
    job = stage.job
    return {
        "job": {
            "name": job.name,
            "image": job.image.reference if job.image else None,
            "env": job.env,
            "setup_commands": job.setup_commands,
            "build_commands": job.build_commands,
            "checkout": {"fetch_depth": job.checkout.fetch_depth, "submodules": job.checkout.submodules,
                         "workspace_manager": job.checkout.workspace_manager},
            "runs_on": job.runs_on,
            "stage": job.stage,
            "group": job.group,
            "matrix": job.matrix,
            "source_file": job.source_file,
        },
        "compiler_markers": stage.compiler_markers,
        "preparatory_steps": stage.preparatory_steps,
        "build_commands": stage.build_commands,
    }


def stage_from_json(data: dict) -> BuildStage:
    j = data["job"]
    c = j.get("checkout") or {}
    job = JobSpec(
        name=j["name"],
        image=ImageRef.parse(j["image"]) if j.get("image") else None,
        env=dict(j.get("env") or {}),
        setup_commands=list(j.get("setup_commands") or []),
        build_commands=list(j.get("build_commands") or []),
        checkout=CheckoutSettings(c.get("fetch_depth"), bool(c.get("submodules")), c.get("workspace_manager")),
        runs_on=j.get("runs_on"),
        stage=j.get("stage"),
        group=j.get("group", ""),
        matrix=dict(j.get("matrix") or {}),
        source_file=j.get("source_file", ""),
    )
    return BuildStage(job, list(data["compiler_markers"]), list(data["preparatory_steps"]), list(data["build_commands"]))
