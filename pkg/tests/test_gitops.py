import dataclasses
import difflib
import random
import subprocess

import pytest
from hypothesis import given, strategies as st

from buildmend.errors import (
    DiffParseError, EmptyDiffError, NotFoundError, TopologyMismatchError, UnresolvableIntegrationError,
)
from buildmend.gitops import (
    CheckoutSettings, MergeStrategy, ResolutionSize, ZeroReason, checkout_baseline, identify_strategy, is_ancestor,
    locate_baseline, parse_unified_diff, resolution_size, write_baselines,
)
from buildmend.core import read_jsonl

from gitfixtures import TOPOLOGIES, Repo, classic_merge, squash_merge

EXPECTED = {"classic-merge": "M", "rebase-fast-forward": "B1'", "squash-merge": "S"}


@pytest.fixture(scope="module", params=sorted(TOPOLOGIES))
def topology(request, tmp_path_factory):
    return TOPOLOGIES[request.param](tmp_path_factory.mktemp(request.param) / "repo")


def file_diff(path, old, new):
    return "".join(difflib.unified_diff(old, new, f"a/{path}", f"b/{path}"))


# merge strategies -------------------------------------------------------------------------


def test_identify_strategy(topology):
    assert identify_strategy(topology.repo.path, topology.change).value == topology.strategy


def test_locate_baseline(topology):
    pair = locate_baseline(topology.repo.path, topology.change, MergeStrategy(topology.strategy))
    c = topology.commits
    assert pair.buggy_baseline == c["A2"]
    assert pair.human_fix == c[EXPECTED[topology.strategy]]
    assert pair.strategy.value == topology.strategy


def test_baseline_is_ancestor_on_main(topology):
    pair = locate_baseline(topology.repo.path, topology.change, identify_strategy(topology.repo.path, topology.change))
    assert pair.buggy_baseline != pair.human_fix
    assert is_ancestor(topology.repo.path, pair.buggy_baseline, pair.human_fix)
    assert is_ancestor(topology.repo.path, pair.human_fix, "main")


def test_wrong_strategy_is_topology_mismatch(tmp_path):
    t = classic_merge(tmp_path / "r")
    with pytest.raises(TopologyMismatchError):
        locate_baseline(t.repo.path, t.change, MergeStrategy.SQUASH_MERGE)


def test_integration_not_on_main(tmp_path):
    t = squash_merge(tmp_path / "r")
    r = t.repo
    r.git("checkout", "--quiet", "-b", "stray", t.commits["A1"])
    stray = r.commit("not on main", {"x.c": "int x;\n"})
    r.checkout("main")
    change = dataclasses.replace(t.change, merged_commit=stray)
    with pytest.raises(UnresolvableIntegrationError):
        identify_strategy(r.path, change)


def test_baselines_file(tmp_path, topology):
    pair = locate_baseline(topology.repo.path, topology.change, MergeStrategy(topology.strategy))
    row = {"repo": "acme/repo", "number": topology.change.number, "strategy": pair.strategy,
           "buggy_baseline": pair.buggy_baseline, "human_fix": pair.human_fix}
    path = write_baselines(tmp_path / "baselines.jsonl", [row])
    [row] = read_jsonl(path)
    assert row["buggy_baseline"] == pair.buggy_baseline and row["strategy"] == topology.strategy


# checkout ------------------------------------------------------------------------------------


def test_checkout_twice_gives_distinct_identical_trees(tmp_path, topology):
    a2 = topology.commits["A2"]
    one = checkout_baseline(topology.repo.path, a2, dest_root=tmp_path)
    two = checkout_baseline(topology.repo.path, a2, dest_root=tmp_path)
    assert one != two

    def tree(p):
        return {f.relative_to(p).as_posix(): f.read_bytes() for f in p.rglob("*") if f.is_file() and ".git" not in f.parts}

    assert tree(one) == tree(two) and tree(one)
    head = subprocess.run(["git", "rev-parse", "HEAD"], cwd=one, capture_output=True, text=True).stdout.strip()
    assert head == a2


def test_checkout_missing_commit(tmp_path, topology):
    with pytest.raises(NotFoundError):
        checkout_baseline(topology.repo.path, "0" * 40, dest_root=tmp_path)


def test_checkout_populates_submodule(tmp_path):
    sub = Repo(tmp_path / "sub")
    sub.commit("hal", {"hal.h": "#define HAL 1\n"})
    top = Repo(tmp_path / "top")
    top.commit("init", {"main.c": "int main(void){return 0;}\n"})
    top.git("-c", "protocol.file.allow=always", "submodule", "--quiet", "add", str(sub.path), "vendor/hal")
    head = top.commit("add hal submodule")
    ws = checkout_baseline(top.path, head, CheckoutSettings(submodules=True), dest_root=tmp_path / "ws")
    assert (ws / "vendor" / "hal" / "hal.h").read_text() == "#define HAL 1\n"
    bare = checkout_baseline(top.path, head, CheckoutSettings(submodules=False), dest_root=tmp_path / "ws")
    assert not (bare / "vendor" / "hal" / "hal.h").exists()


# resolution size -----------------------------------------------------------------------------


def test_one_line_modification_is_two():
    assert resolution_size(file_diff("x.c", ["a\n", "b\n"], ["a\n", "c\n"])) == ResolutionSize(2, None)


def test_single_added_line_is_one():
    assert resolution_size(file_diff("x.c", ["a\n"], ["a\n", "b\n"])).loc == 1


def test_single_deleted_line_is_one():
    assert resolution_size(file_diff("x.c", ["a\n", "b\n"], ["a\n"])).loc == 1


def test_full_file_deletion_is_zero():
    d = ("diff --git a/old.c b/old.c\ndeleted file mode 100644\nindex 3b18e51..0000000\n"
         "--- a/old.c\n+++ /dev/null\n@@ -1,3 +0,0 @@\n-int a;\n-int b;\n-int c;\n")
    assert resolution_size(d) == ResolutionSize(0, ZeroReason.FILE_DELETION)


def test_permission_change_is_zero():
    d = "diff --git a/run.sh b/run.sh\nold mode 100644\nnew mode 100755\n"
    assert resolution_size(d) == ResolutionSize(0, ZeroReason.PERMISSION_CHANGE)


def test_binary_change_is_zero():
    d = "diff --git a/logo.bin b/logo.bin\nindex 1a2b3c4..5d6e7f8 100644\nBinary files a/logo.bin and b/logo.bin differ\n"
    assert resolution_size(d) == ResolutionSize(0, ZeroReason.BINARY_CHANGE)


def test_empty_diff_is_an_error():
    with pytest.raises(EmptyDiffError):
        resolution_size("")


def test_truncated_hunk_reports_line():
    with pytest.raises(DiffParseError, match="line 5"):
        resolution_size("--- a/x\n+++ b/x\n@@ -1,2 +1,2 @@\n-a\n")


def test_zero_reason_iff_zero_loc():
    with pytest.raises(ValueError):
        ResolutionSize(0, None)
    with pytest.raises(ValueError):
        ResolutionSize(3, ZeroReason.BINARY_CHANGE)


def random_file(rng, n):
    return [f"line {rng.randint(0, 50)}\n" for _ in range(n)]


def random_edit(rng, lines):
    out = list(lines)
    for _ in range(rng.randint(1, 4)):
        op = rng.choice("ads")
        i = rng.randint(0, len(out))
        if op == "a" or not out:
            out.insert(i, f"new {rng.random():.6f}\n")
        elif op == "d":
            del out[min(i, len(out) - 1)]
        else:
            out[min(i, len(out) - 1)] = f"changed {rng.random():.6f}\n"
    return out


def test_additivity_over_disjoint_files_200():
    rng = random.Random(8)
    done = 0
    while done < 200:
        old1, old2 = random_file(rng, rng.randint(1, 30)), random_file(rng, rng.randint(1, 30))
        new1, new2 = random_edit(rng, old1), random_edit(rng, old2)
        d1, d2 = file_diff("src/one.c", old1, new1), file_diff("src/two.c", old2, new2)
        if not d1 or not d2:
            continue
        assert resolution_size(d1 + d2).loc == resolution_size(d1).loc + resolution_size(d2).loc
        done += 1


@given(st.lists(st.text("abc", min_size=1, max_size=3), min_size=6, max_size=40), st.randoms(use_true_random=False))
def test_invariant_under_hunk_reordering(words, rng):
    old = [w + "\n" for w in words]
    new = list(old)
    for i in range(0, len(new), 5):
        new[i] = "edited\n"
    diff = "".join(difflib.unified_diff(old, new, "a/f.c", "b/f.c", n=0))
    lines = diff.splitlines(keepends=True)
    header, hunks = lines[:2], []
    for line in lines[2:]:
        if line.startswith("@@"):
            hunks.append([])
        hunks[-1].append(line)
    if len(hunks) < 2:
        return
    rng.shuffle(hunks)
    shuffled = "".join(header) + "".join("".join(h) for h in hunks)
    assert resolution_size(shuffled).loc == resolution_size(diff).loc
    assert len(parse_unified_diff(shuffled)[0].hunks) == len(hunks)
