import pytest
from hypothesis import given, strategies as st

from buildmend.corpus import FixExample
from buildmend.errors import BudgetTooSmallError, InconsistencyError, StaleDiagnosticError, UnextractableError
from buildmend.gitops import ResolutionSize
from buildmend.logparse import DiagnosticRecord, normalize
from buildmend.prompting import (
    SECTION_HEADERS, SECTION_LABELS, ErroneousSnippet, build_prompt, extract_snippet, log_excerpt,
)

SOURCE = "".join(f"line {i}\n" for i in range(1, 41))


def diag(file="src/main.c", line=7):
    return DiagnosticRecord("compiler", file, line, None, "boom", "error", [], [], "test", 0)


def snippet_of(source, start, end, file="src/main.c"):
    lines = source.splitlines(keepends=True)
    return ErroneousSnippet(file, (start, end), "".join(lines[start - 1:end]))


def example(i):
    return FixExample("p", "syntax", f"f{i}.c", (1, 2), f"int x{i}\n", f"int y{i};\n", f"{i:040x}",
                      f"{i + 1:040x}", ResolutionSize(2, None))


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "src").mkdir()
    (tmp_path / "src" / "main.c").write_text(SOURCE)
    return tmp_path


def test_snippet_window_mid_file(workspace):
    s = extract_snippet(workspace, diag(line=7))
    assert s.line_span == (5, 9) and s.text == "line 5\nline 6\nline 7\nline 8\nline 9\n"


def test_snippet_window_clipped_at_start(workspace):
    assert extract_snippet(workspace, diag(line=1)).line_span == (1, 3)


def test_snippet_from_log_path(workspace):
    assert extract_snippet(workspace, diag("/home/runner/work/x/x/src/main.c", 40)).line_span == (38, 40)


def test_snippet_without_line(workspace):
    with pytest.raises(UnextractableError):
        extract_snippet(workspace, diag(line=None))
    with pytest.raises(UnextractableError):
        extract_snippet(workspace, diag(file=None))


def test_snippet_stale(workspace):
    with pytest.raises(StaleDiagnosticError):
        extract_snippet(workspace, diag(line=99))
    with pytest.raises(StaleDiagnosticError):
        extract_snippet(workspace, diag(file="other.c"))


def test_everything_fits():
    p = build_prompt(SOURCE, ["error: boom"], snippet_of(SOURCE, 5, 9), [example(1)])
    assert all(v == 0 for v in p.truncation_report.values())
    assert len(p.render()) <= 24000
    assert [label for label, _ in p.sections] == list(SECTION_LABELS)


def test_long_log_keeps_tail():
    logs = [f"log {i}" for i in range(5000)]
    p = build_prompt(SOURCE, logs, snippet_of(SOURCE, 5, 9), [], budget=24000)
    text = p.section("compilation-and-ci-logs")
    assert p.truncation_report["compilation-and-ci-logs"] > 0
    assert text.rstrip().endswith("log 4999")
    assert "log 0\n" not in text
    assert len(p.render()) <= 24000
    assert p.truncation_report["full-source-file"] == 0


def test_two_examples_rendered_with_headers():
    p = build_prompt(SOURCE, [], snippet_of(SOURCE, 1, 3), [example(1), example(2)])
    body = p.section("human-fix-examples")
    assert "Example 1 (f1.c" in body and "Example 2 (f2.c" in body
    assert "int y2;" in body
    rendered = p.render()
    positions = [rendered.index(SECTION_HEADERS[label]) for label in SECTION_LABELS]
    assert positions == sorted(positions)


def test_snippet_must_match_source():
    with pytest.raises(InconsistencyError):
        build_prompt(SOURCE, [], ErroneousSnippet("src/main.c", (5, 9), "something else\n"), [])
    with pytest.raises(InconsistencyError):
        build_prompt(SOURCE, [], ErroneousSnippet("src/main.c", (39, 45), "line 39\n"), [])


def test_budget_too_small():
    with pytest.raises(BudgetTooSmallError):
        build_prompt(SOURCE, [], snippet_of(SOURCE, 5, 9), [], budget=100)


def test_feedback_appended_to_logs():
    p = build_prompt(SOURCE, ["first"], snippet_of(SOURCE, 5, 9), [], feedback="main.c:7: error: still broken")
    assert "still broken" in p.section("compilation-and-ci-logs")


def test_log_excerpt_centred_on_diagnostic():
    text = "\n".join(f"l{i}" for i in range(200)) + "\nsrc/a.c:1:1: error: here\n" + "\n".join(
        f"t{i}" for i in range(200))
    log = normalize(text.encode())
    d = DiagnosticRecord("compiler", "src/a.c", 1, 1, "here", "error", [], [], "x", text.index("src/a.c"))
    lines = log_excerpt(log, d, max_lines=80)
    assert len(lines) == 80 and "src/a.c:1:1: error: here" in lines
    assert log_excerpt(log, None, 10) == log.lines[-10:]


source_text = st.lists(st.text(st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), max_size=60), min_size=1,
                       max_size=120).map(lambda ls: "".join(line + "\n" for line in ls))


@given(source_text, st.lists(st.text(max_size=80), max_size=300), st.integers(0, 4), st.integers(1500, 30000),
       st.data())
def test_prompt_properties(source, logs, n_examples, budget, data):
    n = source.count("\n")
    start = data.draw(st.integers(1, n))
    end = data.draw(st.integers(start, min(n, start + 4)))
    snip = snippet_of(source, start, end)
    exs = [example(i) for i in range(n_examples)]
    try:
        p = build_prompt(source, logs, snip, exs, budget)
    except BudgetTooSmallError:
        return
    rendered = p.render()
    assert len(rendered) <= budget
    assert snip.text.rstrip("\n") in p.section("erroneous-code-snippet")
    assert [label for label, _ in p.sections] == list(SECTION_LABELS)
    assert build_prompt(source, logs, snip, exs, budget).render() == rendered
    assert all(v >= 0 for v in p.truncation_report.values())
