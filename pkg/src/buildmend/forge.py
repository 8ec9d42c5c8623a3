"""Repository discovery and change-request ingestion from GitHub- and GitLab-style APIs.

Every request goes through a :class:`Transport`. Tests and offline runs use
:class:`ReplayTransport` over a directory of recorded responses;
:class:`LiveTransport` talks to the network and can record as it goes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterator, Protocol
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

from .core import RawLog, atomic_write, format_timestamp, is_commit_id, parse_timestamp, utcnow
from .errors import (
    CredentialError,
    LogUnavailableError,
    PreconditionError,
    RetryAfterError,
    SchemaError,
    TransportError,
)

log = logging.getLogger(__name__)

TOKEN_ENV = {"github-style": "PF_GITHUB_TOKEN", "gitlab-style": "PF_GITLAB_TOKEN"}
DEFAULT_API = {"github-style": "https://api.github.com", "gitlab-style": "https://gitlab.com/api/v4"}


class Forge(str, Enum):
    GITHUB = "github-style"
    GITLAB = "gitlab-style"


@dataclass(frozen=True)
class RepoRef:
    forge: Forge
    owner: str
    name: str
    default_branch: str
    stars: int = 0
    primary_language: str = ""
    topics: tuple[str, ...] = ()
    project_id: str | None = None  # numeric id on GitLab-style forges

    def __post_init__(self):
        object.__setattr__(self, "forge", Forge(self.forge))
        object.__setattr__(self, "topics", tuple(self.topics))
        if not self.default_branch:
            raise SchemaError("default_branch", f"{self.owner}/{self.name} has no default branch")
        if self.stars < 0:
            raise SchemaError("stars", "negative star count")

    @property
    def slug(self) -> str:
        return f"{self.owner}/{self.name}"

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.forge.value, self.owner, self.name)

    def to_json(self) -> dict:
        return {
            "forge": self.forge.value,
            "owner": self.owner,
            "name": self.name,
            "default_branch": self.default_branch,
            "stars": self.stars,
            "primary_language": self.primary_language,
            "topics": list(self.topics),
            "project_id": self.project_id,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RepoRef":
        return cls(
            forge=Forge(data["forge"]),
            owner=data["owner"],
            name=data["name"],
            default_branch=data["default_branch"],
            stars=int(data.get("stars", 0)),
            primary_language=data.get("primary_language", ""),
            topics=tuple(data.get("topics", ())),
            project_id=data.get("project_id"),
        )


class Conclusion(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    OTHER = "other"


@dataclass(frozen=True)
class CIRunRef:
    run_id: str
    job_name: str
    conclusion: Conclusion
    log_uri: str
    started_at: datetime | None = None

    def __post_init__(self):
        object.__setattr__(self, "conclusion", Conclusion(self.conclusion))
        if self.conclusion is Conclusion.FAILURE and not self.log_uri:
            raise SchemaError("log_uri", f"failed run {self.run_id} has no log location")

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "job_name": self.job_name,
            "conclusion": self.conclusion.value,
            "log_uri": self.log_uri,
            "started_at": format_timestamp(self.started_at) if self.started_at else None,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CIRunRef":
        started = data.get("started_at")
        return cls(
            str(data["run_id"]),
            data["job_name"],
            Conclusion(data["conclusion"]),
            data.get("log_uri", ""),
            parse_timestamp(started) if started else None,
        )


class ChangeState(str, Enum):
    OPEN = "open"
    MERGED = "merged"
    CLOSED = "closed"


@dataclass(frozen=True)
class ChangeRequest:
    repo: RepoRef
    number: int
    head_commit: str
    base_commit: str
    state: ChangeState
    ci_runs: tuple[CIRunRef, ...] = ()
    merged_commit: str | None = None
    created_at: datetime | None = None

    def __post_init__(self):
        object.__setattr__(self, "state", ChangeState(self.state))
        object.__setattr__(self, "ci_runs", tuple(self.ci_runs))
        if self.number <= 0:
            raise SchemaError("number", "change request number must be positive")
        for name in ("head_commit", "base_commit"):
            if not is_commit_id(getattr(self, name)):
                raise SchemaError(name, f"not a commit id: {getattr(self, name)!r}")
        if (self.state is ChangeState.MERGED) != (self.merged_commit is not None):
            raise SchemaError("merged_commit", "merged_commit must be present exactly when state is merged")
        if self.merged_commit is not None and not is_commit_id(self.merged_commit):
            raise SchemaError("merged_commit", f"not a commit id: {self.merged_commit!r}")

    @property
    def ref(self) -> str:
        return f"{self.repo.slug}#{self.number}"

    def to_json(self) -> dict:
        return {
            "repo": self.repo.to_json(),
            "number": self.number,
            "head_commit": self.head_commit,
            "base_commit": self.base_commit,
            "state": self.state.value,
            "ci_runs": [r.to_json() for r in self.ci_runs],
            "merged_commit": self.merged_commit,
            "created_at": format_timestamp(self.created_at) if self.created_at else None,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ChangeRequest":
        created = data.get("created_at")
        return cls(
            repo=RepoRef.from_json(data["repo"]),
            number=int(data["number"]),
            head_commit=data["head_commit"],
            base_commit=data["base_commit"],
            state=ChangeState(data["state"]),
            ci_runs=tuple(CIRunRef.from_json(r) for r in data.get("ci_runs", ())),
            merged_commit=data.get("merged_commit"),
            created_at=parse_timestamp(created) if created else None,
        )


@dataclass
class DiscoveryCriteria:
    topic: str = "embedded"
    languages: frozenset[str] = frozenset({"C", "C++"})
    min_stars: float = 20
    require_ci: bool = True

    def accepts(self, repo: RepoRef) -> bool:
        return (
            self.topic in repo.topics
            and repo.primary_language in self.languages
            and repo.stars > self.min_stars
        )


# transport ---------------------------------------------------------------------


@dataclass
class Response:
    status: int
    headers: dict[str, str]
    body: bytes

    def json(self):
        try:
            return json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaError("<body>", f"response is not JSON ({exc})") from exc

    def header(self, name: str, default=None):
        for k, v in self.headers.items():
            if k.lower() == name.lower():
                return v
        return default


class Transport(Protocol):
    requests: int

    def get(self, url: str, headers: dict[str, str] | None = None) -> Response: ...


def request_key(url: str) -> str:
    """Stable cassette key: the URL with its query string sorted."""
    parts = urlsplit(url)
    query = urlencode(sorted(parse_qsl(parts.query, keep_blank_values=True)))
    normalized = urlunsplit((parts.scheme, parts.netloc, parts.path, query, ""))
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()[:32]


class ReplayTransport:
    """Serve responses from a cassette directory written by :class:`LiveTransport`.

    Each recorded exchange is ``<key>.json`` (status, headers, url) next to
    ``<key>.body`` (raw bytes). Unknown URLs answer 404.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.requests = 0

    def get(self, url, headers=None) -> Response:
        self.requests += 1
        key = request_key(url)
        meta = self.directory / f"{key}.json"
        if not meta.exists():
            return Response(404, {}, b'{"message": "Not Found"}')
        info = json.loads(meta.read_text(encoding="utf-8"))
        body = (self.directory / f"{key}.body").read_bytes()
        return Response(int(info["status"]), dict(info.get("headers", {})), body)


def record_exchange(directory, url: str, response: Response) -> None:
    directory = Path(directory)
    key = request_key(url)
    atomic_write(directory / f"{key}.body", response.body)
    keep = {k: v for k, v in response.headers.items() if k.lower() in _RECORDED_HEADERS}
    atomic_write(
        directory / f"{key}.json",
        json.dumps({"url": url, "status": response.status, "headers": keep}, indent=2, sort_keys=True),
    )


_RECORDED_HEADERS = {"link", "x-next-page", "x-total", "retry-after", "x-ratelimit-remaining", "x-ratelimit-reset"}


class RateLimiter:
    """Serialize calls per host with a minimum spacing between them."""

    def __init__(self, min_interval: float = 0.0):
        self.min_interval = min_interval
        self._locks: dict[str, threading.Lock] = {}
        self._last: dict[str, float] = {}
        self._guard = threading.Lock()

    def acquire(self, host: str):
        with self._guard:
            lock = self._locks.setdefault(host, threading.Lock())
        lock.acquire()
        wait = self._last.get(host, 0.0) + self.min_interval - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        return lock

    def release(self, host: str, lock):
        self._last[host] = time.monotonic()
        lock.release()


GLOBAL_LIMITER = RateLimiter(min_interval=0.1)


class LiveTransport:
    def __init__(self, record_dir=None, timeout: float = 30.0, limiter: RateLimiter = GLOBAL_LIMITER):
        import requests  # deferred: offline use never needs it

        self._session = requests.Session()
        self._requests_mod = requests
        self.record_dir = Path(record_dir) if record_dir else None
        self.timeout = timeout
        self.limiter = limiter
        self.requests = 0

    def get(self, url, headers=None) -> Response:
        host = urlsplit(url).netloc
        lock = self.limiter.acquire(host)
        try:
            self.requests += 1
            r = self._session.get(url, headers=headers or {}, timeout=self.timeout)
        except self._requests_mod.RequestException as exc:
            raise TransportError(f"GET {urlsplit(url).path} failed: {exc.__class__.__name__}") from exc
        finally:
            self.limiter.release(host, lock)
        response = Response(r.status_code, dict(r.headers), r.content)
        if self.record_dir is not None and response.status < 500:
            record_exchange(self.record_dir, url, response)
        return response


# clients -------------------------------------------------------------------------


def _check(response: Response, url: str) -> Response:
    if response.status in (401,):
        raise CredentialError(f"authentication rejected for {urlsplit(url).path}")
    if response.status in (403, 429):
        retry = response.header("Retry-After")
        remaining = response.header("X-RateLimit-Remaining")
        reset = response.header("X-RateLimit-Reset")
        if retry is not None:
            raise RetryAfterError(float(retry))
        if remaining == "0" and reset is not None:
            raise RetryAfterError(max(0.0, float(reset) - time.time()))
        if response.status == 429:
            raise RetryAfterError(60.0)
        raise CredentialError(f"access forbidden for {urlsplit(url).path}")
    if response.status >= 500:
        raise TransportError(f"server error {response.status} for {urlsplit(url).path}")
    return response


def _field(obj, *path, required=True):
    cur = obj
    for name in path:
        if not isinstance(cur, dict) or name not in cur:
            if required:
                raise SchemaError(".".join(path))
            return None
        cur = cur[name]
    if required and cur is None:
        raise SchemaError(".".join(path))
    return cur


class _Client:
    forge: Forge

    def __init__(self, transport: Transport, base_url: str | None = None, token: str | None = None,
                 per_page: int = 100, require_token: bool | None = None):
        self.transport = transport
        self.base_url = (base_url or DEFAULT_API[self.forge.value]).rstrip("/")
        self.per_page = per_page
        self._token = token if token is not None else os.environ.get(TOKEN_ENV[self.forge.value])
        needs = isinstance(transport, LiveTransport) if require_token is None else require_token
        if needs and not self._token:
            raise CredentialError(f"no API token; set {TOKEN_ENV[self.forge.value]}")

    def _headers(self) -> dict[str, str]:
        return {}

    def _url(self, path: str, **params) -> str:
        url = path if path.startswith("http") else f"{self.base_url}{path}"
        if params:
            url += ("&" if "?" in url else "?") + urlencode(params)
        return url

    def get(self, path: str, **params) -> Response:
        url = self._url(path, **params)
        return _check(self.transport.get(url, self._headers()), url)

    def get_json(self, path: str, **params):
        return self.get(path, **params).json()

    def paginate(self, path: str, item_key: str | None = None, **params) -> Iterator[dict]:
        url = self._url(path, per_page=self.per_page, **params)
        seen = set()
        while url and url not in seen:
            seen.add(url)
            response = _check(self.transport.get(url, self._headers()), url)
            if response.status == 404:
                return
            data = response.json()
            items = data.get(item_key, None) if item_key else data
            if not isinstance(items, list):
                raise SchemaError(item_key or "<list>")
            yield from items
            url = self._next_url(response, url)

    def _next_url(self, response: Response, url: str) -> str | None:
        link = response.header("Link")
        if link:
            for part in link.split(","):
                m = re.search(r'<([^>]+)>\s*;\s*rel="next"', part)
                if m:
                    return m.group(1)
            return None
        nxt = response.header("X-Next-Page")
        if nxt:
            parts = urlsplit(url)
            query = dict(parse_qsl(parts.query))
            query["page"] = nxt
            return urlunsplit((parts.scheme, parts.netloc, parts.path, urlencode(query), ""))
        return None

    def fetch_log_bytes(self, run: CIRunRef) -> bytes:
        response = self.transport.get(self._url(run.log_uri), self._headers())
        if response.status in (404, 410):
            raise LogUnavailableError(f"log for run {run.run_id} has expired or was deleted")
        _check(response, run.log_uri)
        return response.body


class GitHubClient(_Client):
    forge = Forge.GITHUB

    def _headers(self):
        h = {"Accept": "application/vnd.github+json"}
        if self._token:
            h["Authorization"] = f"Bearer {self._token}"
        return h

    def search_repos(self, criteria: DiscoveryCriteria) -> Iterator[RepoRef]:
        q = f"topic:{criteria.topic}"
        if criteria.min_stars != float("inf"):
            q += f" stars:>{int(criteria.min_stars)}"
        for item in self.paginate("/search/repositories", "items", q=q):
            branch = item.get("default_branch")
            if not branch:
                log.info("skipping %s: no default branch", item.get("full_name"))
                continue
            yield RepoRef(
                forge=self.forge,
                owner=_field(item, "owner", "login"),
                name=_field(item, "name"),
                default_branch=branch,
                stars=int(_field(item, "stargazers_count")),
                primary_language=item.get("language") or "",
                topics=tuple(item.get("topics") or ()),
            )

    def has_ci(self, repo: RepoRef) -> bool:
        response = self.get(f"/repos/{repo.owner}/{repo.name}/contents/.github/workflows")
        if response.status != 200:
            return False
        entries = response.json()
        return any(str(e.get("name", "")).endswith((".yml", ".yaml")) for e in entries)

    def change_requests(self, repo: RepoRef, until: datetime) -> Iterator[ChangeRequest]:
        path = f"/repos/{repo.owner}/{repo.name}/pulls"
        for pr in self.paginate(path, state="all", sort="created", direction="asc"):
            created = parse_timestamp(_field(pr, "created_at"))
            if created > until:
                continue
            merged = pr.get("merged_at") is not None
            state = ChangeState.MERGED if merged else (
                ChangeState.OPEN if _field(pr, "state") == "open" else ChangeState.CLOSED)
            head = _field(pr, "head", "sha")
            yield ChangeRequest(
                repo=repo,
                number=int(_field(pr, "number")),
                head_commit=head,
                base_commit=_field(pr, "base", "sha"),
                state=state,
                ci_runs=tuple(self.ci_runs(repo, head)),
                merged_commit=_field(pr, "merge_commit_sha") if merged else None,
                created_at=created,
            )

    def ci_runs(self, repo: RepoRef, head_sha: str) -> Iterator[CIRunRef]:
        base = f"/repos/{repo.owner}/{repo.name}/actions"
        for run in self.paginate(f"{base}/runs", "workflow_runs", head_sha=head_sha):
            run_id = _field(run, "id")
            for job in self.paginate(f"{base}/runs/{run_id}/jobs", "jobs"):
                conclusion = {"success": Conclusion.SUCCESS, "failure": Conclusion.FAILURE}.get(
                    job.get("conclusion"), Conclusion.OTHER)
                started = job.get("started_at")
                yield CIRunRef(
                    run_id=str(_field(job, "id")),
                    job_name=_field(job, "name"),
                    conclusion=conclusion,
                    log_uri=f"{base}/jobs/{_field(job, 'id')}/logs",
                    started_at=parse_timestamp(started) if started else None,
                )


class GitLabClient(_Client):
    forge = Forge.GITLAB

    def _headers(self):
        return {"PRIVATE-TOKEN": self._token} if self._token else {}

    def search_repos(self, criteria: DiscoveryCriteria) -> Iterator[RepoRef]:
        for item in self.paginate("/projects", topic=criteria.topic, order_by="id", sort="asc"):
            branch = item.get("default_branch")
            if not branch:
                log.info("skipping %s: no default branch", item.get("path_with_namespace"))
                continue
            pid = _field(item, "id")
            languages = self.get_json(f"/projects/{pid}/languages") or {}
            primary = max(languages.items(), key=lambda kv: (kv[1], kv[0]))[0] if languages else ""
            yield RepoRef(
                forge=self.forge,
                owner=_field(item, "namespace", "full_path"),
                name=_field(item, "path"),
                default_branch=branch,
                stars=int(_field(item, "star_count")),
                primary_language=primary,
                topics=tuple(item.get("topics") or item.get("tag_list") or ()),
                project_id=str(pid),
            )

    def _pid(self, repo: RepoRef) -> str:
        if repo.project_id:
            return repo.project_id
        from urllib.parse import quote

        return quote(repo.slug, safe="")

    def has_ci(self, repo: RepoRef) -> bool:
        response = self.get(f"/projects/{self._pid(repo)}/repository/files/.gitlab-ci.yml", ref=repo.default_branch)
        return response.status == 200

    def change_requests(self, repo: RepoRef, until: datetime) -> Iterator[ChangeRequest]:
        pid = self._pid(repo)
        for mr in self.paginate(f"/projects/{pid}/merge_requests", state="all", order_by="created_at", sort="asc"):
            created = parse_timestamp(_field(mr, "created_at"))
            if created > until:
                continue
            raw_state = _field(mr, "state")
            state = {"merged": ChangeState.MERGED, "opened": ChangeState.OPEN}.get(raw_state, ChangeState.CLOSED)
            merged_commit = None
            if state is ChangeState.MERGED:
                merged_commit = mr.get("merge_commit_sha") or mr.get("squash_commit_sha") or _field(mr, "sha")
            iid = int(_field(mr, "iid"))
            yield ChangeRequest(
                repo=repo,
                number=iid,
                head_commit=_field(mr, "diff_refs", "head_sha"),
                base_commit=_field(mr, "diff_refs", "base_sha"),
                state=state,
                ci_runs=tuple(self.ci_runs(repo, iid)),
                merged_commit=merged_commit,
                created_at=created,
            )

    def ci_runs(self, repo: RepoRef, iid: int) -> Iterator[CIRunRef]:
        pid = self._pid(repo)
        for pipeline in self.paginate(f"/projects/{pid}/merge_requests/{iid}/pipelines"):
            for job in self.paginate(f"/projects/{pid}/pipelines/{_field(pipeline, 'id')}/jobs"):
                conclusion = {"success": Conclusion.SUCCESS, "failed": Conclusion.FAILURE}.get(
                    job.get("status"), Conclusion.OTHER)
                started = job.get("started_at")
                yield CIRunRef(
                    run_id=str(_field(job, "id")),
                    job_name=_field(job, "name"),
                    conclusion=conclusion,
                    log_uri=f"/projects/{pid}/jobs/{_field(job, 'id')}/trace",
                    started_at=parse_timestamp(started) if started else None,
                )


CLIENTS = {Forge.GITHUB: GitHubClient, Forge.GITLAB: GitLabClient}


def make_client(forge, transport: Transport, **kw) -> _Client:
    return CLIENTS[Forge(forge)](transport, **kw)


# operations ------------------------------------------------------------------------


def discover_repos(criteria: DiscoveryCriteria, clients) -> list[RepoRef]:
    """Repositories passing every discovery filter, sorted by (forge, owner, name)."""
    if isinstance(clients, _Client):
        clients = [clients]
    found = {}
    for client in clients:
        for repo in client.search_repos(criteria):
            if not criteria.accepts(repo):
                continue
            if criteria.require_ci and not client.has_ci(repo):
                log.info("skipping %s: no CI configuration", repo.slug)
                continue
            found[repo.key] = repo
    return [found[k] for k in sorted(found)]


def fetch_change_requests(repo: RepoRef, until, client: _Client) -> list[ChangeRequest]:
    until = parse_timestamp(until)
    changes = list(client.change_requests(repo, until))
    return sorted(changes, key=lambda c: c.number)


class LogCache:
    """Raw log bytes on disk, keyed by run id, with a metadata JSON alongside."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    @staticmethod
    def _safe(run_id: str) -> str:
        return re.sub(r"[^A-Za-z0-9_.-]", "_", run_id)

    def paths(self, run_id: str) -> tuple[Path, Path]:
        stem = self._safe(run_id)
        return self.directory / f"{stem}.log", self.directory / f"{stem}.meta.json"

    def get(self, run_id: str) -> RawLog | None:
        data_path, meta_path = self.paths(run_id)
        if not (data_path.exists() and meta_path.exists()):
            return None
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        return RawLog(
            data=data_path.read_bytes(),
            run_id=meta["run_id"],
            job_name=meta.get("job_name", ""),
            fetched_at=parse_timestamp(meta["fetched_at"]),
            source=meta.get("source", ""),
        )

    def put(self, raw: RawLog) -> RawLog:
        data_path, meta_path = self.paths(raw.run_id)
        atomic_write(data_path, raw.data)
        atomic_write(meta_path, json.dumps({
            "run_id": raw.run_id,
            "job_name": raw.job_name,
            "fetched_at": format_timestamp(raw.fetched_at or utcnow()),
            "source": raw.source,
            "bytes": len(raw.data),
        }, indent=2, sort_keys=True))
        return raw


def fetch_failed_build_log(run: CIRunRef, client: _Client, cache: LogCache | str | Path) -> RawLog:
    if run.conclusion is not Conclusion.FAILURE:
        raise PreconditionError(f"run {run.run_id} did not fail (conclusion {run.conclusion.value})")
    cache = cache if isinstance(cache, LogCache) else LogCache(cache)
    with cache._lock(run.run_id):
        hit = cache.get(run.run_id)
        if hit is not None:
            return hit
        data = client.fetch_log_bytes(run)
        raw = RawLog(data=data, run_id=run.run_id, job_name=run.job_name, fetched_at=utcnow(), source=run.log_uri)
        return cache.put(raw)


class SnapshotStore:
    """On-disk layout: ``<root>/<forge>/<owner>__<name>/changes/<n>.json`` and ``logs/``."""

    def __init__(self, root):
        self.root = Path(root)

    def repo_dir(self, repo: RepoRef) -> Path:
        return self.root / repo.forge.value / f"{repo.owner.replace('/', '__')}__{repo.name}"

    def save_repo(self, repo: RepoRef) -> Path:
        return atomic_write(self.repo_dir(repo) / "repo.json", json.dumps(repo.to_json(), indent=2, sort_keys=True))

    def save_change(self, change: ChangeRequest) -> Path:
        path = self.repo_dir(change.repo) / "changes" / f"{change.number}.json"
        return atomic_write(path, json.dumps(change.to_json(), indent=2, sort_keys=True))

    def load_changes(self, repo: RepoRef) -> list[ChangeRequest]:
        out = []
        for p in sorted((self.repo_dir(repo) / "changes").glob("*.json"), key=lambda p: int(p.stem)):
            out.append(ChangeRequest.from_json(json.loads(p.read_text(encoding="utf-8"))))
        return out

    def log_cache(self, repo: RepoRef) -> LogCache:
        return LogCache(self.repo_dir(repo) / "logs")
