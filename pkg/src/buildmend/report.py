"""Analysis tables, statistical tests and the resolution-size distribution."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .classify import CATEGORIES, CATEGORY_LABELS, ClassifiedError, distribution, histogram_from_counts, percent_half_up
from .core import atomic_write, to_jsonable, write_json
from .repair import REPAIRED, pass_rate
from .stats import ContingencyTable, RankMatrix, TestResult, chi_square_independence, friedman

PROJECTS = ("OpenIPC", "STM32", "RTEMS", "Zephyr")

# Reference study figures, used by ``report --reference-tables``.
REFERENCE_FAILURES = {  # project: (failed change requests, failed at build stage, compilation errors)
    "OpenIPC": (114, 10, 31),
    "STM32": (155, 40, 444),
    "RTEMS": (761, 225, 1784),
    "Zephyr": (8984, 725, 1989),
}
REFERENCE_CATEGORY_COUNTS = {
    "OpenIPC": {"environment-setup": 4, "syntax": 2, "hardware-dependency": 14, "non-hardware-dependency": 11},
    "STM32": {"environment-setup": 23, "syntax": 80, "hardware-dependency": 341},
    "RTEMS": {"environment-setup": 286, "syntax": 321, "hardware-dependency": 874,
              "non-hardware-dependency": 249, "compiler-configuration": 54},
    "Zephyr": {"environment-setup": 100, "syntax": 258, "hardware-dependency": 1372,
               "non-hardware-dependency": 179, "compiler-configuration": 80},
}
REFERENCE_PASS_RATES = {  # model: {strategy: per-project percentages in PROJECTS order}
    "CodeT5+": {"other-projects": (28, 31, 29, 33), "random-all": (30, 31, 28, 33), "same-project": (32, 35, 33, 37)},
    "CodeLlama": {"other-projects": (38, 39, 31, 41), "random-all": (38, 39, 35, 41), "same-project": (42, 43, 35, 45)},
    "Falcon": {"other-projects": (28, 29, 25, 30), "random-all": (28, 29, 27, 32), "same-project": (31, 33, 29, 33)},
    "Bloom": {"other-projects": (27, 28, 24, 28), "random-all": (27, 26, 25, 29), "same-project": (30, 31, 28, 32)},
}
REFERENCE_REPAIRED_BY_CATEGORY = {  # category: (repaired, total) summed over projects
    "environment-setup": (267, 413),
    "syntax": (346, 661),
    "hardware-dependency": (821, 2601),
    "non-hardware-dependency": (189, 439),
    "compiler-configuration": (46, 134),
}
REFERENCE_STATISTICS = {
    "build_failures": {"statistic": 402.6128, "df": 2},
    "example_strategy": {"statistic": 6.62, "p_value": 0.0366, "df": 2},
    "model_dependence": {"statistic": 140.1368, "df": 2},
    "category_dependence": {"statistic": 226.1664, "df": 2},
}


# resolution sizes ----------------------------------------------------------------


@dataclass
class SizeHistogram:
    counts: dict[str, Counter]

    def total(self, project: str | None = None) -> int:
        if project is not None:
            return sum(self.counts.get(project, Counter()).values())
        return sum(sum(c.values()) for c in self.counts.values())

    def overall(self) -> Counter:
        out: Counter = Counter()
        for c in self.counts.values():
            out.update(c)
        return out

    def share(self, loc: int, project: str | None = None) -> Fraction:
        total = self.total(project)
        if not total:
            return Fraction(0)
        bucket = self.counts.get(project, Counter()) if project is not None else self.overall()
        return Fraction(bucket.get(loc, 0), total)

    def share_percent(self, loc: int, project: str | None = None, digits: int = 1) -> float:
        return round(float(self.share(loc, project) * 100), digits)

    def rows(self) -> list[dict]:
        out = []
        for project, counter in self.counts.items():
            total = sum(counter.values())
            for loc in sorted(counter):
                out.append({"project": project, "loc": loc, "count": counter[loc],
                            "percent": round(float(Fraction(counter[loc] * 100, total)), 1)})
        return out


def _session_resolution(session):
    if isinstance(session, dict):
        if session.get("outcome") != REPAIRED or not session.get("resolution"):
            return None
        return session["failure_ref"]["repo"], int(session["resolution"]["loc"])
    if session.outcome != REPAIRED or session.resolution is None:
        return None
    return session.project, session.resolution.loc


def resolution_distribution(sessions) -> SizeHistogram:
    counts: dict[str, Counter] = {}
    for s in sessions:
        got = _session_resolution(s)
        if got is None:
            continue
        project, loc = got
        counts.setdefault(project, Counter())[loc] += 1
    return SizeHistogram(dict(sorted(counts.items())))


def size_histogram_from_values(values: dict[str, list[int]]) -> SizeHistogram:
    return SizeHistogram({p: Counter(v) for p, v in sorted(values.items())})


# tables -------------------------------------------------------------------------------


def _csv(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def failures_table(failures: dict[str, tuple[int, int, int]]) -> str:
    rows = []
    for project, (total, build, errors) in failures.items():
        rows.append({"project": project, "failed_total": total, "failed_build_stage": build,
                     "build_stage_percent": round(float(Fraction(build * 100, total)), 1) if total else 0.0,
                     "compilation_errors": errors})
    return _csv(rows, ["project", "failed_total", "failed_build_stage", "build_stage_percent", "compilation_errors"])


def failures_contingency(failures: dict[str, tuple[int, int, int]]) -> ContingencyTable:
    """Projects x (failed at build stage, failed elsewhere)."""
    return ContingencyTable(list(failures), ["build-stage", "other-stage"],
                            [[b, t - b] for t, b, _ in failures.values()])


def category_table(hist) -> str:
    """Category rows, one count/percent column pair per project plus the overall share."""
    groups = hist.groups()
    fields = ["category"] + [f"{g}{suffix}" for g in groups for suffix in ("", " %")] + ["total %"]
    rows = []
    for cat in CATEGORIES:
        row = {"category": CATEGORY_LABELS[cat]}
        for g in groups:
            row[g] = hist.counts[g].get(cat, 0)
            row[f"{g} %"] = hist.percent(g, cat)
        row["total %"] = round(float(hist.overall_percent(cat)), 1)
        rows.append(row)
    return _csv(rows, fields)


def strategy_table(table) -> str:
    """Pass rates keyed by (provider, strategy, project)."""
    rows = [dict(r) for r in table.to_records()]
    return _csv(rows, [*table.group_by, "repaired", "total", "percent"])


def category_pass_table(repaired_by_category: dict[str, tuple[int, int]]) -> str:
    rows = [{"category": CATEGORY_LABELS[c], "repaired": r, "total": t, "percent": percent_half_up(r, t)}
            for c, (r, t) in repaired_by_category.items()]
    return _csv(rows, ["category", "repaired", "total", "percent"])


def category_contingency(repaired_by_category: dict[str, tuple[int, int]]) -> ContingencyTable:
    return ContingencyTable([CATEGORY_LABELS[c] for c in repaired_by_category], ["repaired", "not-repaired"],
                            [[r, t - r] for r, t in repaired_by_category.values()])


def model_contingency(rates: dict[str, dict[str, tuple[int, ...]]], errors: list[int],
                      strategy: str = "random-all") -> ContingencyTable:
    """Models x (repaired, not repaired), converting per-project percentages into counts
    over each project's compilation errors (half-up per cell)."""
    rows = []
    for model, by_strategy in rates.items():
        repaired = sum(percent_to_count(pct, n) for pct, n in zip(by_strategy[strategy], errors))
        rows.append([repaired, sum(errors) - repaired])
    return ContingencyTable(list(rates), ["repaired", "not-repaired"], rows)


def percent_to_count(pct: int, n: int) -> int:
    value = Fraction(pct * n, 100) + Fraction(1, 2)
    return value.numerator // value.denominator


def strategy_matrix(rates: dict[str, tuple[int, ...]], projects=PROJECTS) -> RankMatrix:
    """Projects (blocks) x strategies (conditions)."""
    return RankMatrix.from_conditions({k: list(v) for k, v in rates.items()}, list(projects))


def result_json(result: TestResult, **extra) -> dict:
    return {**to_jsonable(result), **extra}


def reference_statistics() -> dict:
    """Recompute every test on the reference figures and record how each table was built."""
    out = {}
    build = chi_square_independence(failures_contingency(REFERENCE_FAILURES))
    ref = REFERENCE_STATISTICS["build_failures"]
    build.notes.append(
        f"reference value {ref['statistic']} was stated with df={ref['df']}; a "
        f"{len(REFERENCE_FAILURES)}x2 table has df=({len(REFERENCE_FAILURES)}-1)(2-1)={build.degrees_of_freedom}")
    out["build_failures"] = result_json(build, reference=ref, relative_gap=_gap(build.statistic, ref["statistic"]),
                                        construction="projects x (failed at build stage, failed elsewhere)")

    fr = friedman(strategy_matrix({k: REFERENCE_PASS_RATES["CodeLlama"][k]
                                   for k in ("other-projects", "random-all", "same-project")}))
    out["example_strategy"] = result_json(fr, reference=REFERENCE_STATISTICS["example_strategy"],
                                          construction="4 projects (blocks) x 3 example strategies, best model's pass rates")

    errors = [REFERENCE_FAILURES[p][2] for p in PROJECTS]
    models = chi_square_independence(model_contingency(REFERENCE_PASS_RATES, errors, "random-all"))
    ref = REFERENCE_STATISTICS["model_dependence"]
    models.notes.append("table construction for the reference value is unspecified; this is the closest tried")
    out["model_dependence"] = result_json(
        models, reference=ref, relative_gap=_gap(models.statistic, ref["statistic"]),
        construction="4 models x (repaired, not repaired); random-example condition; counts = pass % x "
                     "compilation errors per project, rounded half-up per cell, summed over projects")

    cats = chi_square_independence(category_contingency(REFERENCE_REPAIRED_BY_CATEGORY))
    ref = REFERENCE_STATISTICS["category_dependence"]
    cats.notes.append(f"reference value was stated with df={ref['df']}; a 5x2 table has df={cats.degrees_of_freedom}")
    out["category_dependence"] = result_json(
        cats, reference=ref, relative_gap=_gap(cats.statistic, ref["statistic"]),
        construction="5 error categories x (repaired, not repaired), totals over projects")
    return out


def _gap(value: float, reference: float) -> float:
    return round((value - reference) / reference, 6)


def write_reference_tables(directory) -> list[Path]:
    directory = Path(directory)
    paths = [atomic_write(directory / "build_failures.csv", failures_table(REFERENCE_FAILURES))]
    hist = histogram_from_counts(REFERENCE_CATEGORY_COUNTS)
    paths.append(atomic_write(directory / "error_categories.csv", category_table(hist)))
    rows = []
    for model, by_strategy in REFERENCE_PASS_RATES.items():
        for strategy, values in by_strategy.items():
            for project, pct in zip(PROJECTS, values):
                rows.append({"provider": model, "strategy": strategy, "project": project, "percent": pct})
    paths.append(atomic_write(directory / "pass_rate_by_strategy.csv",
                              _csv(rows, ["provider", "strategy", "project", "percent"])))
    paths.append(atomic_write(directory / "pass_rate_by_category.csv",
                              category_pass_table(REFERENCE_REPAIRED_BY_CATEGORY)))
    return paths


def build_report(out_dir, classified: list[ClassifiedError], sessions: list[dict], table_csv=None,
                 ranks_json=None, reference: bool = False, provenance: dict | None = None) -> dict:
    """Write ``report/stats.json`` and ``report/tables/*.csv`` from pipeline outputs."""
    report_dir = Path(out_dir) / "report"
    tables = report_dir / "tables"
    stats: dict = {}
    if classified:
        hist = distribution(classified)
        atomic_write(tables / "error_categories.csv", category_table(hist))
    if sessions:
        atomic_write(tables / "pass_rate_by_strategy.csv",
                     strategy_table(pass_rate(sessions, ("provider", "strategy", "project"))))
        by_cat = pass_rate(sessions, ("category",))
        atomic_write(tables / "pass_rate_by_category.csv",
                     _csv([dict(r) for r in by_cat.to_records()], ["category", "repaired", "total", "percent"]))
        sizes = resolution_distribution(sessions)
        atomic_write(tables / "resolution_sizes.csv", _csv(sizes.rows(), ["project", "loc", "count", "percent"]))
        stats["resolution_sizes"] = {
            "repaired_sessions": sizes.total(),
            "share_loc_2_percent": sizes.share_percent(2),
            "share_loc_0_percent": sizes.share_percent(0),
            "histogram": {p: dict(sorted(c.items())) for p, c in sizes.counts.items()},
        }
        cat_rows = {r["category"]: (r["repaired"], r["total"]) for r in by_cat.to_records()}
        if len(cat_rows) >= 2:
            try:
                stats["category_dependence"] = result_json(chi_square_independence(
                    ContingencyTable(list(cat_rows), ["repaired", "not-repaired"],
                                     [[r, t - r] for r, t in cat_rows.values()])))
            except Exception as exc:  # degenerate tables are reported, not fatal
                stats["category_dependence"] = {"error": str(exc)}
    if table_csv:
        stats["table"] = result_json(chi_square_independence(ContingencyTable.from_csv(table_csv)), source=str(table_csv))
    if ranks_json:
        data = json.loads(Path(ranks_json).read_text(encoding="utf-8"))
        if isinstance(data, dict) and "observations" in data:
            matrix = RankMatrix(data["observations"], data.get("blocks", []), data.get("conditions", []))
        elif isinstance(data, dict):
            matrix = RankMatrix.from_conditions(data)
        else:
            matrix = RankMatrix(data)
        stats["ranks"] = result_json(friedman(matrix), source=str(ranks_json))
    if reference:
        stats["reference"] = reference_statistics()
        write_reference_tables(tables / "reference")
    if provenance is not None:
        stats["provenance"] = provenance
    write_json(report_dir / "stats.json", stats)
    return stats
