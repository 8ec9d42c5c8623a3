"""Command-line entry point: one subcommand per pipeline stage, files in between."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict
from pathlib import Path

from . import ciconfig, gitops, sandbox
from .classify import ClassifiedError, ClassifyContext, RuleSet, classify, distribution, infer_build_phase
from .config import DEFAULT_CONFIG_NAME, PipelineConfig
from .core import RawLog, atomic_write, read_jsonl, write_json, write_jsonl
from .corpus import STRATEGIES, CorpusStore, SelectionStrategy, mine_fix_example
from .errors import BuildMendError, DependencyError, NotFoundError, PreconditionError, UnclassifiedError
from .forge import (
    DiscoveryCriteria, Forge, LiveTransport, ReplayTransport, SnapshotStore, discover_repos,
    fetch_change_requests, fetch_failed_build_log, make_client,
)
from .logparse import DiagnosticRecord, PatternRegistry, diagnostics_digest, first_fatal, load_diagnostics, normalize, parse_log
from .repair import make_provider, repair_loop, write_session
from .report import build_report

log = logging.getLogger("buildmend")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class _StructuredFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"stage": getattr(record, "stage", record.name.rsplit(".", 1)[-1]),
                           "level": record.levelname.lower(), "message": record.getMessage()})


class _StageFilter(logging.Filter):
    stage = "cli"

    def filter(self, record):
        if not hasattr(record, "stage"):
            record.stage = self.stage
        return True


def _setup_logging(verbose: bool, stage: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_StructuredFormatter())
    filt = _StageFilter()
    filt.stage = stage
    handler.addFilter(filt)
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _safe_id(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_") or "run"


class _Context:
    def __init__(self, args, config: PipelineConfig):
        self.args = args
        self.config = config
        self.out = Path(args.out or config.output_dir)
        self.dry_run = args.dry_run
        self.plan: list[str] = []

    def provenance(self, **seeds) -> dict:
        return asdict(self.config.provenance(**seeds))

    def write_json(self, path: Path, obj: dict, **seeds) -> None:
        if self.dry_run:
            self.plan.append(f"write {path}")
            return
        write_json(path, {**obj, "provenance": self.provenance(**seeds)})

    def write_with_sidecar(self, path: Path, writer, **seeds) -> None:
        """Write a JSONL/CSV artifact plus ``<name>.meta.json`` carrying provenance."""
        if self.dry_run:
            self.plan.append(f"write {path}")
            return
        writer(path)
        write_json(path.with_name(path.name + ".meta.json"), {"artifact": path.name, "provenance": self.provenance(**seeds)})

    def registry(self) -> PatternRegistry:
        return PatternRegistry.from_directory(self.config.patterns_dir) if self.config.patterns_dir else PatternRegistry.builtin()

    def rules(self) -> RuleSet:
        return RuleSet.from_directory(self.config.rules_dir) if self.config.rules_dir else RuleSet.builtin()


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DependencyError(str(path), hint)
    return path


# collect ---------------------------------------------------------------------------


def cmd_collect(ctx: _Context) -> dict:
    a = ctx.args
    forge = Forge(a.forge)
    if a.replay:
        transport = ReplayTransport(a.replay)
    elif ctx.dry_run:
        transport = ReplayTransport(ctx.out / "nonexistent")
    else:
        transport = LiveTransport()
    token_env = ctx.config.github_token_env if forge is Forge.GITHUB else ctx.config.gitlab_token_env
    import os
    client = make_client(forge, transport, base_url=a.api_url, token=os.environ.get(token_env),
                         require_token=not a.replay and not ctx.dry_run)
    criteria = DiscoveryCriteria(topic=a.topic, min_stars=a.min_stars)
    repos = discover_repos(criteria, client)
    if a.repo:
        wanted = set(a.repo)
        repos = [r for r in repos if r.slug in wanted]
    clones = dict(item.split("=", 1) for item in a.clone or [])
    store = SnapshotStore(ctx.out / "snapshot")
    baselines, failed_logs, n_changes = [], 0, 0
    for repo in repos:
        changes = fetch_change_requests(repo, a.until, client)
        n_changes += len(changes)
        if ctx.dry_run:
            ctx.plan.append(f"snapshot {repo.slug}: {len(changes)} change requests")
            continue
        store.save_repo(repo)
        cache = store.log_cache(repo)
        for change in changes:
            store.save_change(change)
            for run in change.ci_runs:
                if run.conclusion.value == "failure":
                    try:
                        fetch_failed_build_log(run, client, cache)
                        failed_logs += 1
                    except BuildMendError as exc:
                        log.warning("log for run %s unavailable: %s", run.run_id, exc)
        clone = clones.get(repo.slug)
        if clone is None:
            continue
        for change in changes:
            if change.merged_commit is None:
                continue
            try:
                strategy = gitops.identify_strategy(clone, change)
                pair = gitops.locate_baseline(clone, change, strategy)
            except BuildMendError as exc:
                log.warning("%s: no baseline: %s", change.ref, exc)
                continue
            baselines.append({"repo": repo.slug, "number": change.number, "strategy": pair.strategy.value,
                              "buggy_baseline": pair.buggy_baseline, "human_fix": pair.human_fix})
    path = ctx.out / "baselines.jsonl"
    ctx.write_with_sidecar(path, lambda p: gitops.write_baselines(p, baselines))
    return {"repos": len(repos), "change_requests": n_changes, "failed_logs": failed_logs,
            "baselines": len(baselines), "output": str(path)}


# reconstruct -------------------------------------------------------------------------


def cmd_reconstruct(ctx: _Context) -> dict:
    a = ctx.args
    cfg = ctx.config
    repo = Path(a.workspace)
    if not (repo / ".git").exists():
        raise PreconditionError(f"{repo} is not a git repository")
    commit = gitops.git(repo, "rev-parse", "--verify", f"{a.commit}^{{commit}}").strip()
    ws_root = ctx.out / "workspaces"
    workspace = gitops.checkout_baseline(repo, commit, dest_root=None if ctx.dry_run else ws_root)
    try:
        spec = ciconfig.parse_ci_spec(workspace, cfg.secret_patterns, cfg.matrix_limit)
        stage = ciconfig.select_build_stage(spec, a.job, cfg.marker_set())
        artifacts = ciconfig.emit_reconstruction(stage, commit, a.image or cfg.default_image,
                                                 cfg.secret_patterns, warnings=spec.warnings)
    except BaseException:
        if ctx.dry_run:
            import shutil
            shutil.rmtree(workspace, ignore_errors=True)
        raise
    run_id = _safe_id(a.run_id or f"{commit[:12]}-{stage.job.name}")
    directory = ctx.out / "reconstruction" / run_id
    summary = {"run_id": run_id, "commit": commit, "job": stage.job.name, "output": str(directory)}
    if ctx.dry_run:
        import shutil
        shutil.rmtree(workspace, ignore_errors=True)
        ctx.plan.append(f"write {directory}/{{Dockerfile,build.sh,meta.json,stage.json}}")
        if a.execute:
            ctx.plan.append(f"run build in {a.mode or cfg.sandbox_mode} mode -> {directory}/build_log.json")
        return summary
    extra = {"run_id": run_id, "repo_path": str(repo.resolve()), "workspace": str(workspace),
             "project": a.project or repo.resolve().name, "provenance": ctx.provenance()}
    ciconfig.write_reconstruction(artifacts, directory, extra)
    write_json(directory / "stage.json", ciconfig.stage_to_json(stage))
    if a.execute:
        sandbox.set_concurrency(cfg.sandbox_concurrency)
        result = sandbox.execute(artifacts, workspace, a.mode or cfg.sandbox_mode, cfg.sandbox_timeout, run_id)
        sandbox.write_build_log(directory / "build_log.json", result, {"provenance": ctx.provenance()})
        summary["exit_status"] = result.exit_status
    return summary


# parse ------------------------------------------------------------------------------


def _load_raw(ctx: _Context) -> tuple[RawLog, str]:
    a = ctx.args
    if a.log:
        path = _require(Path(a.log), "pass an existing raw log file")
        return RawLog(path.read_bytes(), run_id=a.run_id or _safe_id(path.stem), source=str(path)), str(path)
    if a.build_log:
        path = _require(Path(a.build_log), "run `reconstruct --execute` first")
    elif a.run_id:
        path = _require(ctx.out / "reconstruction" / a.run_id / "build_log.json", "run `reconstruct --execute` first")
    else:
        raise PreconditionError("parse needs --log, --build-log or --run-id")
    raw = sandbox.read_build_log(path)
    if a.run_id:
        raw = RawLog(raw.data, a.run_id, raw.job_name, raw.fetched_at, raw.source)
    return raw, str(path)


def cmd_parse(ctx: _Context) -> dict:
    raw, source = _load_raw(ctx)
    run_id = _safe_id(raw.run_id or "log")
    result = parse_log(raw, ctx.registry())
    directory = ctx.out / "parsed" / run_id
    recon = ctx.out / "reconstruction" / run_id / "meta.json"
    project = ctx.args.project or (json.loads(recon.read_text(encoding="utf-8")).get("project", "") if recon.exists() else "")
    summary = {
        "run_id": run_id,
        "source": source,
        "project": project,
        "build_system": result.build_system,
        "diagnostics": len(result.diagnostics),
        "diagnostics_sha256": diagnostics_digest(result.diagnostics),
        "decode_replacements": result.normalized.decode_replacements,
        "first_fatal": result.first_fatal.to_json() if result.first_fatal else None,
    }
    ctx.write_with_sidecar(directory / "diagnostics.jsonl",
                           lambda p: write_jsonl(p, [d.to_json() for d in result.diagnostics]))
    if not ctx.dry_run:
        atomic_write(directory / "normalized.log", result.normalized.text)
    ctx.write_json(directory / "parse.json", summary)
    if result.first_fatal is None:
        log.warning("run %s: no error-severity diagnostic found", run_id)
    return {**summary, "output": str(directory)}


# classify -----------------------------------------------------------------------------


def _parsed_runs(ctx: _Context) -> list[Path]:
    root = ctx.out / "parsed"
    runs = [root / r for r in ctx.args.run_id] if ctx.args.run_id else sorted(p for p in root.glob("*") if p.is_dir())
    if not runs:
        raise DependencyError(str(root / "<run_id>" / "diagnostics.jsonl"), "run `parse` first")
    for run in runs:
        _require(run / "diagnostics.jsonl", "run `parse` first")
    return runs


def cmd_classify(ctx: _Context) -> dict:
    rules = ctx.rules()
    classified, unclassified = [], []
    for run in _parsed_runs(ctx):
        run_id = run.name
        meta_path = run / "parse.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        diags = load_diagnostics(run / "diagnostics.jsonl")
        try:
            fatal = first_fatal(diags)
        except BuildMendError as exc:
            log.warning("run %s: %s", run_id, exc)
            unclassified.append({"run_id": run_id, "reason": str(exc)})
            continue
        norm_path = run / "normalized.log"
        norm = normalize(norm_path.read_bytes()) if norm_path.exists() else None
        phase = infer_build_phase(fatal, norm) if norm is not None else "compilation"
        stage_path = ctx.out / "reconstruction" / run_id / "stage.json"
        context = ClassifyContext.from_stage(
            ciconfig.stage_from_json(json.loads(stage_path.read_text(encoding="utf-8"))) if stage_path.exists() else None)
        try:
            err = classify(fatal, phase, context, rules)
        except UnclassifiedError as exc:
            log.warning("run %s: %s", run_id, exc)
            unclassified.append({"run_id": run_id, "reason": str(exc)})
            continue
        project = ctx.args.project or meta.get("project", "")
        classified.append(ClassifiedError(err.diagnostic, err.category, err.rule_id, err.build_phase,
                                          err.evidence, project, run_id))
    hist = distribution(classified, (lambda e: e.project or "all") if classified else None)
    ctx.write_with_sidecar(ctx.out / "classified.jsonl", lambda p: write_jsonl(p, [e.to_json() for e in classified]))
    ctx.write_with_sidecar(ctx.out / "distribution.csv", hist.write_csv)
    if unclassified:
        ctx.write_with_sidecar(ctx.out / "unclassified.jsonl", lambda p: write_jsonl(p, unclassified))
    return {"classified": len(classified), "unclassified": len(unclassified),
            "categories": {e.run_id: e.category for e in classified}}


# mine-fixes ---------------------------------------------------------------------------


def _parse_change(ref: str) -> tuple[str, int]:
    m = re.fullmatch(r"(.+)#(\d+)", ref or "")
    if not m:
        raise PreconditionError(f"change reference must look like owner/name#N, got {ref!r}")
    return m.group(1), int(m.group(2))


def _load_failure_records(path: Path) -> list[ClassifiedError | DiagnosticRecord]:
    out = []
    for row in read_jsonl(path):
        out.append(ClassifiedError.from_json(row) if "category" in row and "diagnostic" in row
                   else DiagnosticRecord.from_json(row))
    return out


def _first_failure(records):
    classified = [r for r in records if isinstance(r, ClassifiedError)]
    if classified:
        return classified[0]
    return first_fatal([r for r in records if isinstance(r, DiagnosticRecord)])


def cmd_mine_fixes(ctx: _Context) -> dict:
    a = ctx.args
    baselines = read_jsonl(_require(Path(a.baselines), "run `collect` first"))
    records = _load_failure_records(_require(Path(a.diagnostics), "run `parse` or `classify` first"))
    if not records:
        raise DependencyError(a.diagnostics, "file holds no diagnostics")
    failure = _first_failure(records)
    category = a.category
    if category is None and isinstance(failure, DiagnosticRecord):
        category = classify(failure, "compilation", None, ctx.rules()).category
    if a.change:
        slug, number = _parse_change(a.change)
        baselines = [b for b in baselines if b["repo"] == slug and int(b["number"]) == number]
        if not baselines:
            raise NotFoundError(f"{a.change} not present in {a.baselines}")
    store = CorpusStore(ctx.out / "corpus")
    written, skipped = [], []
    for row in baselines:
        pair = gitops.BaselinePair(row["buggy_baseline"], row["human_fix"], gitops.MergeStrategy(row["strategy"]))
        origin = f"{row['repo']}#{row['number']}"
        try:
            ex = mine_fix_example(pair, failure, a.repo, a.project or row["repo"], category,
                                  ctx.config.snippet_window, origin)
        except BuildMendError as exc:
            log.warning("%s: %s", origin, exc)
            skipped.append({"change": origin, "reason": str(exc)})
            continue
        if ctx.dry_run:
            ctx.plan.append(f"write {store.directory / (ex.digest + '.json')}")
        else:
            written.append(str(store.add(ex)))
    return {"examples": len(written), "skipped": skipped, "output": str(store.directory)}


# repair ---------------------------------------------------------------------------------


def _find_reconstruction(ctx: _Context, commit: str, run_id: str | None) -> Path:
    root = ctx.out / "reconstruction"
    if run_id:
        return _require(root / run_id / "meta.json", "run `reconstruct` first").parent
    for meta in sorted(root.glob("*/meta.json")):
        if json.loads(meta.read_text(encoding="utf-8")).get("commit") == commit:
            return meta.parent
    raise DependencyError(str(root / "<run_id>" / "meta.json"), f"no reconstruction for commit {commit[:12]}; run `reconstruct`")


def cmd_repair(ctx: _Context) -> dict:
    a, cfg = ctx.args, ctx.config
    slug, number = _parse_change(a.change)
    rows = [b for b in read_jsonl(_require(ctx.out / "baselines.jsonl", "run `collect` first"))
            if b["repo"] == slug and int(b["number"]) == number]
    if not rows:
        raise NotFoundError(f"{a.change} has no baseline in baselines.jsonl")
    row = rows[0]
    recon = _find_reconstruction(ctx, row["buggy_baseline"], a.run_id)
    run_id = recon.name
    artifacts = ciconfig.load_reconstruction(recon)
    classified = [ClassifiedError.from_json(r)
                  for r in read_jsonl(_require(ctx.out / "classified.jsonl", "run `classify` first"))]
    matching = [c for c in classified if c.run_id == run_id]
    if not matching:
        raise DependencyError(str(ctx.out / "classified.jsonl"), f"run {run_id} has no classified failure")
    failure = matching[0]
    norm_path = ctx.out / "parsed" / run_id / "normalized.log"
    norm = normalize(norm_path.read_bytes()) if norm_path.exists() else None
    answer = Path(a.answer).read_text(encoding="utf-8") if a.answer else None
    provider = make_provider(a.provider, answer, cfg.providers.get("http"))
    strategy = SelectionStrategy(a.strategy, cfg.examples_per_prompt)
    corpus = CorpusStore(ctx.out / "corpus").load()
    seed = cfg.seeds.get("selection", 0) if a.seed is None else a.seed
    mode = a.mode or cfg.sandbox_mode
    if ctx.dry_run:
        ctx.plan.append(f"repair {a.change} (run {run_id}) with {provider.name}, strategy {a.strategy}, "
                        f"seed {seed}, up to {a.max_attempts} attempts in {mode} mode")
        return {"run_id": run_id}
    repo_path = artifacts.metadata.get("repo_path")
    workspace = Path(a.workspace) if a.workspace else gitops.checkout_baseline(
        repo_path, row["buggy_baseline"], dest_root=ctx.out / "workspaces")
    sandbox.set_concurrency(cfg.sandbox_concurrency)
    session = repair_loop(
        failure, workspace, artifacts, provider, strategy, corpus, (slug, number, run_id), log=norm,
        seed=seed, max_attempts=a.max_attempts, mode=mode, timeout=cfg.sandbox_timeout,
        budget=cfg.prompt_budget, exclude_origin=None if a.include_own_fix else a.change,
        dump_prompt=a.dump_prompt,
    )
    path = write_session(session, ctx.out / "sessions", {"provenance": ctx.provenance(selection=seed)})
    return {"session": str(path), "outcome": session.outcome, "attempts": len(session.attempts),
            "resolution": session.resolution.to_json() if session.resolution else None}


# report --------------------------------------------------------------------------------


def cmd_report(ctx: _Context) -> dict:
    a = ctx.args
    classified_path = ctx.out / "classified.jsonl"
    classified = [ClassifiedError.from_json(r) for r in read_jsonl(classified_path)] if classified_path.exists() else []
    sessions = [json.loads(p.read_text(encoding="utf-8")) for p in sorted((ctx.out / "sessions").glob("*.json"))]
    for path in filter(None, (a.table, a.ranks)):
        _require(Path(path), "input file not found")
    if not (classified or sessions or a.table or a.ranks or a.reference_tables):
        raise DependencyError(str(classified_path), "nothing to report; run `classify`/`repair` or pass --table/--ranks")
    if ctx.dry_run:
        ctx.plan.append(f"write {ctx.out / 'report' / 'stats.json'} and tables/*.csv")
        return {}
    stats = build_report(ctx.out, classified, sessions, a.table, a.ranks, a.reference_tables, ctx.provenance())
    return {"output": str(ctx.out / "report"), "sections": sorted(k for k in stats if k != "provenance")}


# parser -----------------------------------------------------------------------------------

COMMANDS = {
    "collect": cmd_collect,
    "reconstruct": cmd_reconstruct,
    "parse": cmd_parse,
    "classify": cmd_classify,
    "mine-fixes": cmd_mine_fixes,
    "repair": cmd_repair,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="buildmend", description="Reproduce, classify and repair CI compilation failures.")
    p.add_argument("--config", help=f"pipeline config file (default ./{DEFAULT_CONFIG_NAME} if present)")
    p.add_argument("--out", help="output directory (overrides the config file)")
    p.add_argument("--dry-run", action="store_true", help="print the plan without writing anything")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("collect", help="snapshot change requests and CI logs, locate baselines")
    s.add_argument("--forge", choices=[f.value for f in Forge], default=Forge.GITHUB.value)
    s.add_argument("--replay", help="serve API responses from a recorded cassette directory")
    s.add_argument("--api-url", help="API base URL (defaults to the public forge)")
    s.add_argument("--repo", action="append", help="restrict to owner/name (repeatable)")
    s.add_argument("--topic", default="embedded")
    s.add_argument("--min-stars", type=float, default=20)
    s.add_argument("--until", required=True, help="collection cutoff timestamp (ISO 8601)")
    s.add_argument("--clone", action="append", metavar="SLUG=PATH", help="local clone used to locate baselines")

    s = sub.add_parser("reconstruct", help="emit a container recipe and build script for a commit")
    s.add_argument("--workspace", required=True, help="local git repository")
    s.add_argument("--commit", required=True)
    s.add_argument("--job", help="failing CI job name (required for multi-combination matrices)")
    s.add_argument("--run-id")
    s.add_argument("--project")
    s.add_argument("--image", help="fallback image when the job names none")
    s.add_argument("--execute", action="store_true", help="also run the build and record build_log.json")
    s.add_argument("--mode", choices=("local", "container"))

    s = sub.add_parser("parse", help="extract diagnostics from a build log")
    s.add_argument("--log", help="raw log file")
    s.add_argument("--build-log", help="build_log.json from the sandbox")
    s.add_argument("--run-id")
    s.add_argument("--project")

    s = sub.add_parser("classify", help="classify first fatal errors of parsed runs")
    s.add_argument("--run-id", action="append")
    s.add_argument("--project")

    s = sub.add_parser("mine-fixes", help="mine human fix examples into the corpus")
    s.add_argument("--repo", required=True)
    s.add_argument("--baselines", required=True)
    s.add_argument("--diagnostics", required=True, help="diagnostics.jsonl or classified.jsonl")
    s.add_argument("--change", help="only mine owner/name#N")
    s.add_argument("--project")
    s.add_argument("--category")

    s = sub.add_parser("repair", help="run the bounded repair loop for one change request")
    s.add_argument("--change", required=True, help="owner/name#N")
    s.add_argument("--provider", required=True, help="mock:never | mock:success-at-K | replay:PATH | http")
    s.add_argument("--answer", help="replacement text served by mock providers")
    s.add_argument("--strategy", choices=sorted(STRATEGIES), default="same-project")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-attempts", type=int, default=5)
    s.add_argument("--dump-prompt", help="write each rendered prompt; {attempt} expands to the attempt number")
    s.add_argument("--mode", choices=("local", "container"))
    s.add_argument("--run-id", help="reconstruction to use (default: the one at the buggy baseline)")
    s.add_argument("--workspace", help="use this checkout instead of a fresh one")
    s.add_argument("--include-own-fix", action="store_true", help="allow the change's own mined fix as an example")

    s = sub.add_parser("report", help="tables and statistical tests")
    s.add_argument("--table", help="CSV contingency table for a chi-square test")
    s.add_argument("--ranks", help="JSON rank matrix for a Friedman test")
    s.add_argument("--reference-tables", action="store_true", help="also test the bundled published tables")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    _setup_logging(args.verbose, args.command)
    try:
        config = PipelineConfig.load(args.config)
        ctx = _Context(args, config)
        result = COMMANDS[args.command](ctx)
    except BuildMendError as exc:
        log.error("%s: %s", exc.__class__.__name__, exc)
        return EXIT_DOMAIN
    except (ValueError, OSError) as exc:
        log.error("%s: %s", exc.__class__.__name__, exc)
        return EXIT_DOMAIN
    if ctx.dry_run:
        print(json.dumps({"dry_run": True, "plan": ctx.plan, **(result or {})}, indent=2, sort_keys=True))
    else:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
