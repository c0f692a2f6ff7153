"""Pure metric arithmetic: accuracies, scale maps, JSD, Krippendorff's alpha, ratios."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


def scalar_to_100(rating: int) -> float:
    """Map a 1..5 judge rating linearly onto [0, 100]."""
    if isinstance(rating, bool) or not isinstance(rating, (int, np.integer)) or not 1 <= rating <= 5:
        raise ValueError(f"rating must be an integer in 1..5, got {rating!r}")
    return 25.0 * (int(rating) - 1)


def _mean(xs: Sequence[float]) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def item_accuracy(binaries: Sequence[int], kinds: Sequence[str]) -> dict[str, float | None]:
    """Mean of per-item binaries overall and per kind; a kind with no items is None."""
    if len(binaries) != len(kinds):
        raise ValueError("one binary per checklist item")
    if any(b not in (0, 1) for b in binaries):
        raise ValueError("binaries must be 0 or 1")
    b = np.asarray(binaries, dtype=float)
    k = np.asarray(kinds)
    return {
        "all": _mean(b),
        "explicit": _mean(b[k == "explicit"]),
        "implicit": _mean(b[k == "implicit"]),
    }


def preference_recovery(predicted: Mapping[str, str], gold: Mapping[str, str]) -> float:
    """Share of gold dimensions predicted exactly; a missing prediction counts as wrong."""
    if not gold:
        raise ValueError("no gold preference dimensions")
    return sum(predicted.get(d) == v for d, v in gold.items()) / len(gold)


def persona_alignment(binaries: Sequence[int]) -> float:
    if not binaries:
        raise ValueError("no preference dimensions to score")
    if any(b not in (0, 1) for b in binaries):
        raise ValueError("binaries must be 0 or 1")
    return 100.0 * sum(binaries) / len(binaries)


def ensemble_mean(values: Sequence[float | None]) -> float | None:
    """Mean over judges; judges that returned no value are skipped."""
    if len(values) == 0:
        raise ValueError("judge ensemble needs at least one judge")
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def proactive_inquiry_ratio(assistant_texts: Sequence[str]) -> float | None:
    if not assistant_texts:
        return None
    return sum(t.rstrip().endswith("?") for t in assistant_texts) / len(assistant_texts)


def rigid_ratio(labels: Sequence[bool | None]) -> tuple[float | None, int]:
    """Share of rigid labels among parseable ones, plus the number excluded."""
    ok = [x for x in labels if x is not None]
    excluded = len(labels) - len(ok)
    return (sum(ok) / len(ok) if ok else None), excluded


# --- distributions ------------------------------------------------------------------

def _as_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("histogram must be a non-negative 1-D array with positive mass")
    return p / p.sum()


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    m = p > 0  # 0 log 0 := 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; inputs are normalized first."""
    p, q = _as_distribution(p), _as_distribution(q)
    if p.shape != q.shape:
        raise ValueError("histograms must share bin edges")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def krippendorff_alpha(ratings, level: str = "nominal") -> float:
    """Krippendorff's alpha from the coincidence matrix.

    ``ratings`` is units x raters with NaN (or None) for missing values.
    Returns NaN, with a warning, when expected disagreement is zero.
    """
    data = np.array([[np.nan if v is None else v for v in row] for row in ratings], dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError("need a units x raters matrix with at least 2 raters")
    values = np.unique(data[~np.isnan(data)])
    index = {v: i for i, v in enumerate(values)}
    c = len(values)
    o = np.zeros((c, c))
    for row in data:
        vals = row[~np.isnan(row)]
        m = len(vals)
        if m < 2:
            continue
        counts = np.zeros(c)
        for v in vals:
            counts[index[v]] += 1
        o += (np.outer(counts, counts) - np.diag(counts)) / (m - 1)
    n_c = o.sum(axis=1)
    n = n_c.sum()
    if n == 0:
        raise ValueError("no unit has two or more ratings")
    delta = _delta2(values, n_c, level)
    d_o = float(np.sum(o * delta)) / n
    d_e = float(np.sum(np.outer(n_c, n_c) * delta)) / (n * (n - 1))
    if d_e == 0:
        log.warning("Krippendorff alpha undefined: expected disagreement is zero")
        return float("nan")
    return 1.0 - d_o / d_e


def _delta2(values: np.ndarray, n_c: np.ndarray, level: str) -> np.ndarray:
    c = len(values)
    if level == "nominal":
        return 1.0 - np.eye(c)
    if level == "interval":
        return np.subtract.outer(values, values) ** 2
    if level == "ordinal":
        cum = np.concatenate([[0.0], np.cumsum(n_c)])
        d = np.zeros((c, c))
        for g in range(c):
            for h in range(c):
                lo, hi = min(g, h), max(g, h)
                d[g, h] = (cum[hi + 1] - cum[lo] - (n_c[g] + n_c[h]) / 2.0) ** 2
        return d
    raise ValueError(f"unknown level {level!r}; use nominal, ordinal or interval")


def histogram(values: Sequence[float], edges: Sequence[float]) -> np.ndarray:
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=np.asarray(edges, dtype=float))
    return counts.astype(float)


HOUR_EDGES = np.arange(25)
GAP_EDGES_DAYS = np.array([0, 0.25, 0.5, 1, 2, 3, 5, 7, 14, 30, 1e9])


def temporal_fidelity(real_hours, sim_hours, real_gaps_days, sim_gaps_days) -> dict:
    """JSD (nats) between real and simulated hour-of-day and inter-event-gap histograms."""
    def _jsd(a, b, edges):
        ha, hb = histogram(a, edges), histogram(b, edges)
        return jsd(ha, hb) if ha.sum() and hb.sum() else None

    return {"base": "e", "hour_of_day": _jsd(real_hours, sim_hours, HOUR_EDGES),
            "inter_event_gap": _jsd(real_gaps_days, sim_gaps_days, GAP_EDGES_DAYS)}


def temporal_histogram_rows(real_hours, sim_hours, real_gaps_days, sim_gaps_days) -> list[list]:
    """Normalized histograms behind temporal_fidelity, one row per bin: feature, lo, hi, real, sim."""
    rows = []
    for feature, a, b, edges in (("hour_of_day", real_hours, sim_hours, HOUR_EDGES),
                                 ("inter_event_gap_days", real_gaps_days, sim_gaps_days, GAP_EDGES_DAYS)):
        ha, hb = histogram(a, edges), histogram(b, edges)
        ha = ha / ha.sum() if ha.sum() else ha
        hb = hb / hb.sum() if hb.sum() else hb
        for lo, hi, x, y in zip(edges[:-1], edges[1:], ha, hb):
            rows.append([feature, float(lo), float(hi), round(float(x), 9), round(float(y), 9)])
    return rows
