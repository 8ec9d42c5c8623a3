"""Pipeline configuration loaded from a TOML file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .ciconfig import DEFAULT_MARKERS, DEFAULT_MATRIX_LIMIT, DEFAULT_SECRET_PATTERNS, MarkerSet
from .core import Provenance, content_hash
from .errors import ConfigError

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_CONFIG_NAME = "buildmend.toml"


@dataclass
class PipelineConfig:
    github_token_env: str = "PF_GITHUB_TOKEN"
    gitlab_token_env: str = "PF_GITLAB_TOKEN"
    markers: list[str] = field(default_factory=lambda: list(DEFAULT_MARKERS))
    secret_patterns: list[str] = field(default_factory=lambda: list(DEFAULT_SECRET_PATTERNS))
    default_image: str | None = None
    matrix_limit: int = DEFAULT_MATRIX_LIMIT
    patterns_dir: str | None = None
    rules_dir: str | None = None
    sandbox_mode: str = "local"
    sandbox_concurrency: int = 2
    sandbox_timeout: float = 1800.0
    prompt_budget: int = 24_000
    log_lines: int = 80
    snippet_window: int = 2
    examples_per_prompt: int = 2
    seeds: dict = field(default_factory=lambda: {"selection": 0})
    providers: dict = field(default_factory=dict)
    output_dir: str = "out"
    source: str | None = None

    def __post_init__(self):
        for name in ("patterns_dir", "rules_dir"):
            value = getattr(self, name)
            if value and not Path(value).is_dir():
                raise ConfigError(f"{name} {value!r} does not exist")
        if self.sandbox_mode not in ("local", "container"):
            raise ConfigError(f"sandbox mode must be local or container, got {self.sandbox_mode!r}")
        if self.prompt_budget <= 0 or self.sandbox_concurrency < 1 or self.sandbox_timeout <= 0:
            raise ConfigError("budget, concurrency and timeout must be positive")

    @classmethod
    def load(cls, path=None) -> "PipelineConfig":
        """Read ``path``; a missing default file yields the built-in defaults."""
        explicit = path is not None
        path = Path(path or DEFAULT_CONFIG_NAME)
        if not path.exists():
            if explicit:
                raise ConfigError(f"config file {path} not found")
            return cls()
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent

        def rel(value):
            return str((base / value).resolve()) if value else None

        forge, ci, reg = doc.get("forge", {}), doc.get("ci", {}), doc.get("registry", {})
        sb, prompt, corpus = doc.get("sandbox", {}), doc.get("prompt", {}), doc.get("corpus", {})
        try:
            return cls(
                github_token_env=forge.get("github_token_env", "PF_GITHUB_TOKEN"),
                gitlab_token_env=forge.get("gitlab_token_env", "PF_GITLAB_TOKEN"),
                markers=list(ci.get("markers", DEFAULT_MARKERS)),
                secret_patterns=list(ci.get("secret_patterns", DEFAULT_SECRET_PATTERNS)),
                default_image=ci.get("default_image"),
                matrix_limit=int(ci.get("matrix_limit", DEFAULT_MATRIX_LIMIT)),
                patterns_dir=rel(reg.get("patterns")),
                rules_dir=rel(reg.get("rules")),
                sandbox_mode=sb.get("mode", "local"),
                sandbox_concurrency=int(sb.get("concurrency", 2)),
                sandbox_timeout=float(sb.get("timeout", 1800)),
                prompt_budget=int(prompt.get("budget", 24_000)),
                log_lines=int(prompt.get("log_lines", 80)),
                snippet_window=int(corpus.get("window", 2)),
                examples_per_prompt=int(corpus.get("k", 2)),
                seeds=dict(doc.get("seeds", {"selection": 0})),
                providers=dict(doc.get("providers", {})),
                output_dir=doc.get("output", {}).get("directory", "out"),
                source=str(path),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def marker_set(self) -> MarkerSet:
        return MarkerSet(tuple(self.markers))

    @property
    def config_hash(self) -> str:
        data = asdict(self)
        data.pop("source", None)
        return content_hash(data)

    def provenance(self, **seeds) -> Provenance:
        return Provenance(self.config_hash, {**self.seeds, **seeds}, __version__)
