"""Report tables built from saved evaluation reports."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .evaluation.protocols import LONG_METRICS, SINGLE_METRICS, EvalReport


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def metric_table(reports: Sequence[EvalReport], metrics: Sequence[str] = SINGLE_METRICS) -> tuple[list, list]:
    """One row per model (and memory mode, for long-horizon reports) with each metric's aggregate."""
    long = any(r.protocol == "long" for r in reports)
    header = ["model", *(["memory"] if long else []), *metrics, "n"]
    rows = [[r.model, *([("on" if r.memory else "off")] if long else []), *(r.aggregates.get(m) for m in metrics),
             r.aggregates.get("n")] for r in reports]
    return header, rows


def history_grid(reports: Sequence[EvalReport], metric: str = "R") -> tuple[list, list]:
    """Completion against history length, one row per (model, memory) pair."""
    lengths = sorted({int(L) for r in reports for L in r.grid}, key=int)
    header = ["model", "memory", *(f"L{L}" for L in lengths)]
    rows = []
    for r in reports:
        mem = "on" if r.memory else "off"
        rows.append([r.model, mem, *(r.grid.get(str(L), {}).get(metric) for L in lengths)])
    return header, rows


def relative_by_category(rows: Sequence[dict], key: str, metric: str) -> dict[str, float]:
    """Category mean minus the overall mean for one metric over non-excluded rows."""
    vals = [(r[key], r["metrics"][metric]) for r in rows
            if not r["excluded"] and r["metrics"].get(metric) is not None]
    if not vals:
        return {}
    overall = sum(v for _, v in vals) / len(vals)
    groups: dict[str, list[float]] = defaultdict(list)
    for k, v in vals:
        groups[k].append(v)
    return {k: round(sum(g) / len(g) - overall, 6) for k, g in sorted(groups.items())}


def theme_relative_table(reports: Sequence[EvalReport], metric: str = "A") -> tuple[list, list]:
    per_model = {r.model: relative_by_category(r.scenarios, "theme", metric) for r in reports}
    themes = sorted({t for d in per_model.values() for t in d})
    return ["model", *themes], [[m, *(d.get(t) for t in themes)] for m, d in per_model.items()]


def kind_relative_table(reports: Sequence[EvalReport], metric: str = "A") -> tuple[list, list]:
    """Explicit versus implicit accuracy relative to the model's overall accuracy."""
    header = ["model", "explicit", "implicit"]
    rows = []
    for r in reports:
        base = r.aggregates.get(metric)
        e, i = r.aggregates.get(f"{metric}_e"), r.aggregates.get(f"{metric}_i")
        rows.append([r.model, None if base is None or e is None else round(e - base, 6),
                     None if base is None or i is None else round(i - base, 6)])
    return header, rows


def write_tables(out_dir, single: Sequence[EvalReport], long: Sequence[EvalReport]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        "metric_table.csv": metric_table(single),
        "long_metric_table.csv": metric_table(long, LONG_METRICS),
        "history_grid.csv": history_grid(long),
        "theme_relative.csv": theme_relative_table(single),
        "kind_relative.csv": kind_relative_table(single),
    }
    written = []
    for name, (header, rows) in tables.items():
        p = out_dir / name
        p.write_text(to_csv(header, rows))
        written.append(p)
    return written
