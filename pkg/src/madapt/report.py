"""Aggregate metrics reports into ABX-vs-budget series and ladder averages.

Series rows average over seeds and target languages for each
(method, layer, budget); the ladder table averages those rows over every
budget except zero-shot (budget 0).  Output is CSV for external plotting.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from pathlib import Path

from madapt.evaluation import MetricsReport

CONDITIONS = ("within", "across")


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def series(reports: list[MetricsReport], layer: int | None = None) -> list[dict]:
    groups: dict[tuple, list[MetricsReport]] = defaultdict(list)
    for r in reports:
        if layer is None or r.layer == layer:
            groups[(r.method, r.layer, float(r.budget))].append(r)
    rows = []
    for condition in CONDITIONS:
        for (method, lay, budget), rs in sorted(groups.items()):
            rows.append({
                "condition": condition, "method": method, "layer": lay, "budget": budget,
                "abx": _mean(getattr(r, f"abx_{condition}") for r in rs),
                "pnmi": _mean(r.pnmi for r in rs), "per": _mean(r.per for r in rs), "n": len(rs),
            })
    return rows


def ladder_table(rows: list[dict]) -> list[dict]:
    """Mean of each series over its non-zero budgets."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for row in rows:
        if row["budget"] > 0:
            groups[(row["method"], row["layer"], row["condition"])].append(row)
    return [{"method": m, "layer": lay, "condition": cond, "abx": _mean(r["abx"] for r in rs),
             "budgets": " ".join(f"{r['budget']:g}" for r in rs)}
            for (m, lay, cond), rs in sorted(groups.items())]


def missing_cells(reports: list[MetricsReport], layer: int | None = None) -> list[str]:
    """Grid cells (method, layer, budget, language, seed) absent from ``reports``."""
    reports = [r for r in reports if layer is None or r.layer == layer]
    present = {(r.method, r.layer, float(r.budget), r.language, r.seed) for r in reports}
    axes = [sorted({c[i] for c in present}) for i in range(5)]
    return [f"method={m} layer={lay} budget={b:g} language={g} seed={s}"
            for m, lay, b, g, s in itertools.product(*axes) if (m, lay, b, g, s) not in present]


def _write_csv(path: Path, header: list[str], rows: list[dict]):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[h]) if isinstance(row[h], float) else str(row[h]) for h in header) + "\n")


def write_report(reports: list[MetricsReport], out_dir, layer: int | None = None) -> dict:
    out_dir = Path(out_dir)
    rows = series(reports, layer)
    table = ladder_table(rows)
    missing = missing_cells(reports, layer)
    _write_csv(out_dir / "series.csv", ["condition", "method", "layer", "budget", "abx", "pnmi", "per", "n"], rows)
    _write_csv(out_dir / "ladder.csv", ["method", "layer", "condition", "abx", "budgets"], table)
    (out_dir / "missing.txt").write_text("".join(m + "\n" for m in missing))
    return {"files": ["series.csv", "ladder.csv", "missing.txt"], "missing": missing,
            "series": rows, "table": table}
