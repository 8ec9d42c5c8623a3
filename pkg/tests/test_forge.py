import json
import logging
from datetime import datetime, timezone

import pytest
from hypothesis import given, strategies as st

from buildmend.errors import (
    CredentialError, LogUnavailableError, PreconditionError, RetryAfterError, SchemaError, TransportError,
)
from buildmend.forge import (
    ChangeRequest, CIRunRef, Conclusion, DiscoveryCriteria, Forge, GitHubClient, GitLabClient, LiveTransport, LogCache,
    ReplayTransport, RepoRef, Response, SnapshotStore, discover_repos, fetch_change_requests, fetch_failed_build_log,
    record_exchange, request_key,
)

SHA = "1" * 40
CUTOFF = datetime(2024, 1, 1, tzinfo=timezone.utc)
GH = "https://api.github.com"


class DictTransport:
    """In-memory transport keyed the same way as recorded cassettes."""

    def __init__(self):
        self.responses = {}
        self.requests = 0
        self.seen_headers = []

    def add(self, url, payload, status=200, headers=None):
        body = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.responses[request_key(url)] = Response(status, headers or {}, body)

    def get(self, url, headers=None):
        self.requests += 1
        self.seen_headers.append(headers or {})
        return self.responses.get(request_key(url), Response(404, {}, b"{}"))


def gh_repo(name, stars=50, language="C", topics=("embedded",), branch="main", owner="acme"):
    return {"full_name": f"{owner}/{name}", "owner": {"login": owner}, "name": name, "default_branch": branch,
            "stargazers_count": stars, "language": language, "topics": list(topics)}


def search_url(client, crit):
    return client._url("/search/repositories", per_page=client.per_page,
                       q=f"topic:{crit.topic} stars:>{int(crit.min_stars)}")


def with_workflows(t, client, *names):
    for n in names:
        t.add(client._url(f"/repos/acme/{n}/contents/.github/workflows"), [{"name": "ci.yml"}])


# discovery -----------------------------------------------------------------------------


def test_three_of_five_qualify():
    t = DictTransport()
    client = GitHubClient(t, token="")
    crit = DiscoveryCriteria()
    t.add(search_url(client, crit), {"items": [
        gh_repo("zeta"), gh_repo("alpha", language="C++"), gh_repo("web", language="JavaScript"),
        gh_repo("tiny", stars=20), gh_repo("mid", stars=21),
    ]})
    with_workflows(t, client, "zeta", "alpha", "web", "tiny", "mid")
    got = discover_repos(crit, client)
    assert [r.name for r in got] == ["alpha", "mid", "zeta"]


def test_infinite_star_threshold_is_empty():
    t = DictTransport()
    client = GitHubClient(t, token="")
    crit = DiscoveryCriteria(min_stars=float("inf"))
    t.add(client._url("/search/repositories", per_page=100, q="topic:embedded"), {"items": [gh_repo("a", stars=10**9)]})
    with_workflows(t, client, "a")
    assert discover_repos(crit, client) == []


def test_repo_without_default_branch_excluded():
    t = DictTransport()
    client = GitHubClient(t, token="")
    crit = DiscoveryCriteria()
    t.add(search_url(client, crit), {"items": [gh_repo("ok"), gh_repo("nobranch", branch=None)]})
    with_workflows(t, client, "ok", "nobranch")
    assert [r.name for r in discover_repos(crit, client)] == ["ok"]


def test_repo_without_ci_excluded():
    t = DictTransport()
    client = GitHubClient(t, token="")
    crit = DiscoveryCriteria()
    t.add(search_url(client, crit), {"items": [gh_repo("ok"), gh_repo("noci")]})
    with_workflows(t, client, "ok")
    assert [r.name for r in discover_repos(crit, client)] == ["ok"]


def test_gitlab_discovery():
    t = DictTransport()
    client = GitLabClient(t, token="")
    crit = DiscoveryCriteria()
    t.add(client._url("/projects", per_page=100, topic="embedded", order_by="id", sort="asc"), [
        {"id": 7, "path": "fw", "namespace": {"full_path": "grp/sub"}, "default_branch": "master",
         "star_count": 30, "topics": ["embedded"]},
    ])
    t.add(client._url("/projects/7/languages"), {"C": 80.0, "Python": 20.0})
    t.add(client._url("/projects/7/repository/files/.gitlab-ci.yml", ref="master"), {"file_name": ".gitlab-ci.yml"})
    [repo] = discover_repos(crit, client)
    assert (repo.forge, repo.owner, repo.name, repo.primary_language) == (Forge.GITLAB, "grp/sub", "fw", "C")


repo_items = st.lists(st.fixed_dictionaries({
    "stars": st.integers(0, 100), "language": st.sampled_from(["C", "C++", "Rust", "", "Python"]),
    "topics": st.lists(st.sampled_from(["embedded", "iot", "rtos"]), max_size=3, unique=True),
    "branch": st.sampled_from(["main", "master", None]), "ci": st.booleans(),
}), max_size=12)


@given(repo_items)
def test_filter_soundness(items):
    t = DictTransport()
    client = GitHubClient(t, token="")
    crit = DiscoveryCriteria()
    t.add(search_url(client, crit), {"items": [
        gh_repo(f"r{i}", it["stars"], it["language"], it["topics"], it["branch"]) for i, it in enumerate(items)]})
    for i, it in enumerate(items):
        if it["ci"]:
            with_workflows(t, client, f"r{i}")
    got = discover_repos(crit, client)
    for repo in got:
        src = items[int(repo.name[1:])]
        assert "embedded" in repo.topics and repo.primary_language in ("C", "C++") and repo.stars > 20
        assert src["branch"] and src["ci"]
    expected = [i for i, it in enumerate(items) if "embedded" in it["topics"] and it["language"] in ("C", "C++")
                and it["stars"] > 20 and it["branch"] and it["ci"]]
    assert sorted(int(r.name[1:]) for r in got) == sorted(expected)
    assert [r.key for r in got] == sorted(r.key for r in got)


# change requests ----------------------------------------------------------------------------


def pr(n, created, merged=True, head=None):
    return {"number": n, "state": "closed", "created_at": created, "merged_at": created if merged else None,
            "head": {"sha": head or f"{n:040x}"}, "base": {"sha": SHA}, "merge_commit_sha": f"{n + 100:040x}" if merged else None}


def seven_prs():
    dates = ["2023-01-05", "2023-03-01", "2023-06-30", "2023-09-09", "2023-12-31", "2024-02-01", "2024-06-01"]
    return [pr(i + 1, f"{d}T12:00:00Z", merged=i % 2 == 0) for i, d in enumerate(dates)]


def serve_prs(t, client, repo, prs, page_size):
    path = f"/repos/{repo.owner}/{repo.name}/pulls"
    pages = [prs[i:i + page_size] for i in range(0, len(prs), page_size)] or [[]]
    first = client._url(path, per_page=page_size, state="all", sort="created", direction="asc")
    urls = [first] + [f"{GH}{path}?page={i + 1}&per_page={page_size}" for i in range(1, len(pages))]
    for i, items in enumerate(pages):
        headers = {"Link": f'<{urls[i + 1]}>; rel="next"'} if i + 1 < len(pages) else {}
        t.add(urls[i], items, headers=headers)
    for p in prs:
        if "head" not in p:
            continue
        t.add(client._url(f"/repos/{repo.owner}/{repo.name}/actions/runs", per_page=page_size, head_sha=p["head"]["sha"]),
              {"workflow_runs": []})


REPO = RepoRef(Forge.GITHUB, "acme", "fw", "main", 50, "C", ("embedded",))


def test_cutoff_filters_two_of_seven():
    t = DictTransport()
    client = GitHubClient(t, token="")
    serve_prs(t, client, REPO, seven_prs(), 100)
    got = fetch_change_requests(REPO, CUTOFF, client)
    assert [c.number for c in got] == [1, 2, 3, 4, 5]
    assert all(c.ci_runs == () for c in got)
    assert [c.merged_commit is not None for c in got] == [True, False, True, False, True]


def test_epoch_cutoff_is_empty():
    t = DictTransport()
    client = GitHubClient(t, token="")
    serve_prs(t, client, REPO, seven_prs(), 100)
    assert fetch_change_requests(REPO, "1970-01-01T00:00:00Z", client) == []


@given(st.integers(1, 8))
def test_pagination_complete_for_any_page_size(page_size):
    t = DictTransport()
    client = GitHubClient(t, token="", per_page=page_size)
    serve_prs(t, client, REPO, seven_prs(), page_size)
    assert len(fetch_change_requests(REPO, CUTOFF, client)) == 5


def test_malformed_payload_names_field():
    t = DictTransport()
    client = GitHubClient(t, token="")
    bad = pr(1, "2023-01-01T00:00:00Z")
    del bad["head"]
    serve_prs(t, client, REPO, [bad], 100)
    with pytest.raises(SchemaError, match="head.sha"):
        fetch_change_requests(REPO, CUTOFF, client)


def test_change_request_invariants():
    with pytest.raises(SchemaError):
        ChangeRequest(REPO, 1, "nothex", SHA, "open")
    with pytest.raises(SchemaError):
        ChangeRequest(REPO, 1, SHA, SHA, "merged")
    with pytest.raises(SchemaError):
        ChangeRequest(REPO, 1, SHA, SHA, "open", merged_commit=SHA)
    with pytest.raises(SchemaError):
        RepoRef(Forge.GITHUB, "a", "b", "")
    c = ChangeRequest(REPO, 3, SHA, SHA, "merged", merged_commit=SHA)
    assert ChangeRequest.from_json(json.loads(json.dumps(c.to_json()))) == c


def test_snapshot_roundtrip(tmp_path):
    store = SnapshotStore(tmp_path)
    c = ChangeRequest(REPO, 2, SHA, SHA, "closed")
    store.save_repo(REPO)
    store.save_change(c)
    assert store.load_changes(REPO) == [c]


# errors ------------------------------------------------------------------------------------


@pytest.mark.parametrize("status, headers, exc", [
    (401, {}, CredentialError),
    (403, {"X-RateLimit-Remaining": "0", "X-RateLimit-Reset": "9999999999"}, RetryAfterError),
    (429, {"Retry-After": "30"}, RetryAfterError),
    (502, {}, TransportError),
])
def test_http_errors(status, headers, exc):
    t = DictTransport()
    client = GitHubClient(t, token="")
    crit = DiscoveryCriteria()
    t.add(search_url(client, crit), {"message": "x"}, status=status, headers=headers)
    with pytest.raises(exc) as info:
        discover_repos(crit, client)
    if status == 429:
        assert info.value.wait_seconds == 30.0


def test_live_transport_requires_token(monkeypatch):
    monkeypatch.delenv("PF_GITHUB_TOKEN", raising=False)
    with pytest.raises(CredentialError, match="PF_GITHUB_TOKEN"):
        GitHubClient(LiveTransport())


def test_token_from_environment_never_logged(monkeypatch, caplog):
    secret = "ghp_topsecretvalue123"
    monkeypatch.setenv("PF_GITHUB_TOKEN", secret)
    t = DictTransport()
    client = GitHubClient(t)
    crit = DiscoveryCriteria()
    t.add(search_url(client, crit), {"items": [gh_repo("x", branch=None)]})
    with caplog.at_level(logging.DEBUG):
        discover_repos(crit, client)
    assert t.seen_headers[0]["Authorization"] == f"Bearer {secret}"
    assert secret not in caplog.text


def test_gitlab_token_header(monkeypatch):
    monkeypatch.setenv("PF_GITLAB_TOKEN", "glpat-abc")
    t = DictTransport()
    client = GitLabClient(t)
    client.get("/projects")
    assert t.seen_headers[0] == {"PRIVATE-TOKEN": "glpat-abc"}


# logs -----------------------------------------------------------------------------------------


def run(conclusion=Conclusion.FAILURE, run_id="55"):
    return CIRunRef(run_id, "build (a)", conclusion, f"/repos/acme/fw/actions/jobs/{run_id}/logs")


def test_failed_log_cached(tmp_path):
    t = DictTransport()
    client = GitHubClient(t, token="")
    data = bytes(range(256)) * 4
    t.add(client._url(run().log_uri), data)
    raw = fetch_failed_build_log(run(), client, tmp_path)
    assert len(raw.data) == 1024 and raw.run_id == "55"
    before = t.requests
    again = fetch_failed_build_log(run(), client, LogCache(tmp_path))
    assert t.requests == before and again.data == data


def test_successful_run_rejected(tmp_path):
    with pytest.raises(PreconditionError):
        fetch_failed_build_log(run(Conclusion.SUCCESS), GitHubClient(DictTransport(), token=""), tmp_path)


def test_expired_log(tmp_path):
    with pytest.raises(LogUnavailableError):
        fetch_failed_build_log(run(), GitHubClient(DictTransport(), token=""), tmp_path)


def test_cassette_roundtrip(tmp_path):
    url = f"{GH}/repos/acme/fw/pulls?state=all&per_page=100"
    record_exchange(tmp_path, url, Response(200, {"Link": "<x>; rel=\"last\"", "Set-Cookie": "drop"}, b"[]"))
    t = ReplayTransport(tmp_path)
    r = t.get(f"{GH}/repos/acme/fw/pulls?per_page=100&state=all")
    assert r.status == 200 and r.body == b"[]" and "Set-Cookie" not in r.headers
    assert t.get(f"{GH}/nope").status == 404 and t.requests == 2


def test_replay_determinism(tmp_path):
    import gitfixtures

    topo = gitfixtures.toy_repo(tmp_path / "blinky")
    cassette = gitfixtures.write_toy_cassette(tmp_path / "cassette", topo)

    def snapshot():
        client = GitHubClient(ReplayTransport(cassette), token="")
        repos = discover_repos(DiscoveryCriteria(), client)
        changes = [c.to_json() for r in repos for c in fetch_change_requests(r, CUTOFF, client)]
        return [r.to_json() for r in repos], changes

    first = snapshot()
    assert first == snapshot()
    assert [r["name"] for r in first[0]] == ["blinky"]
    assert [c["number"] for c in first[1]] == [1, 2]
    failing = [r for c in first[1] for r in c["ci_runs"] if r["conclusion"] == "failure"]
    assert [r["run_id"] for r in failing] == ["120"]
