"""User profiles, IPF raking and weighted user sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .records import RecordError, dumps, read_jsonl

log = logging.getLogger(__name__)

LEVELS = ("low", "high")

# Default fixture schema; the attribute and dimension sets are data, not code.
DEFAULT_DEMOGRAPHICS = {
    "gender": ["Male", "Female"],
    "age": ["Youth (18-35 years old)", "Middle-aged (36-55 years old)", "Senior (56+ years old)"],
    "race": ["White Alone", "Black Alone", "Asian Alone", "Hispanic", "Other"],
    "education": ["High school", "Bachelor's degree", "Graduate degree"],
    "residence": ["Cities", "Suburbs", "Rural"],
    "income": ["Low Income", "Middle Income", "High Income"],
    "employment": ["Working now", "Not working", "Student", "Retired"],
    "marital_status": ["Never married", "Married", "Divorced", "Widowed"],
    "religion": ["Christianity", "Islam", "Buddhism", "Not religious", "Other"],
    "household_size": ["1", "2", "3-4", "5+"],
    "has_children": ["yes", "no"],
    "health_status": ["Excellent", "Good", "Fair"],
    "political_leaning": ["Liberal", "Moderate", "Conservative"],
    "language": ["English", "English and another language"],
    "region": ["Northeast", "South", "Midwest", "West"],
}

DEFAULT_PREFERENCE_DIMENSIONS = [
    "need for autonomy",
    "preference for concise communication",
    "need for emotional support",
    "preference for structured plans",
    "sensitivity to physical environment quality",
    "desire for social affiliation",
    "avoidance of conflict",
    "need for achievement",
    "preference for novelty",
    "attention to safety and risk",
]

BIG_FIVE_ADJECTIVES = {
    "openness": ("curious", "conventional"),
    "conscientiousness": ("organized", "spontaneous"),
    "extraversion": ("outgoing", "reserved"),
    "agreeableness": ("warm", "blunt"),
    "neuroticism": ("anxious", "emotionally stable"),
}


@dataclass(frozen=True)
class UserProfile:
    id: str
    demographics: Mapping[str, str]
    traits: tuple[str, ...] = ()
    preferences: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("profile id is empty")
        if not self.demographics:
            raise ValueError(f"profile {self.id}: demographics empty")
        object.__setattr__(self, "demographics", dict(self.demographics))
        object.__setattr__(self, "traits", tuple(self.traits))
        object.__setattr__(self, "preferences", dict(self.preferences))
        for dim, level in self.preferences.items():
            if level not in LEVELS:
                raise ValueError(f"profile {self.id}: preference {dim!r} level {level!r} not in {LEVELS}")

    @property
    def narrative(self) -> str:
        return render_narrative(self)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "demographics": dict(self.demographics),
            "traits": list(self.traits),
            "preferences": dict(self.preferences),
            "narrative": self.narrative,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "UserProfile":
        missing = [k for k in ("id", "demographics") if not rec.get(k)]
        if missing:
            raise ValueError(f"missing field {missing[0]!r}")
        if not isinstance(rec["demographics"], Mapping):
            raise ValueError("demographics must be an object")
        return cls(
            id=str(rec["id"]),
            demographics={str(k): str(v) for k, v in rec["demographics"].items()},
            traits=tuple(rec.get("traits") or ()),
            preferences=dict(rec.get("preferences") or {}),
        )


def render_narrative(profile: UserProfile) -> str:
    demo = ", ".join(f"{v}" if k in ("gender", "age", "race") else f"{k.replace('_', ' ')}: {v}"
                     for k, v in profile.demographics.items())
    parts = [demo + "."]
    if profile.traits:
        parts.append("Personality traits include: " + ", ".join(profile.traits) + ".")
    if profile.preferences:
        prefs = "; ".join(f"{level} {dim}" for dim, level in profile.preferences.items())
        parts.append("Preferences expressed in daily life and interactions include: " + prefs + ".")
    return " ".join(parts)


@dataclass
class ProfilePool:
    profiles: list[UserProfile]
    marginals: dict[str, dict[str, float]] | None = None

    def __post_init__(self):
        seen = set()
        for p in self.profiles:
            if p.id in seen:
                raise ValueError(f"duplicate profile id {p.id!r}")
            seen.add(p.id)
        if self.marginals:
            check_targets(self.marginals)
        self._by_id = {p.id: p for p in self.profiles}

    def __len__(self):
        return len(self.profiles)

    def __iter__(self):
        return iter(self.profiles)

    def get(self, pid: str) -> UserProfile:
        return self._by_id[pid]

    def categories(self, attribute: str) -> np.ndarray:
        try:
            return np.array([p.demographics[attribute] for p in self.profiles], dtype=object)
        except KeyError:
            bad = next(p.id for p in self.profiles if attribute not in p.demographics)
            raise KeyError(f"attribute {attribute!r} missing on profile {bad}") from None

    def dumps(self) -> str:
        return "".join(dumps(p.to_record()) + "\n" for p in self.profiles)


def load_profiles(source) -> ProfilePool:
    """Parse one profile record per line; reject malformed lines and duplicate ids."""
    name = str(source) if isinstance(source, (str, Path)) else None
    profiles, seen = [], set()
    for line, rec in read_jsonl(source):
        try:
            prof = UserProfile.from_record(rec)
        except (ValueError, TypeError) as e:
            raise RecordError(str(e), line, name) from None
        if prof.id in seen:
            raise RecordError(f"duplicate id {prof.id!r}", line, name)
        seen.add(prof.id)
        profiles.append(prof)
    if not profiles:
        log.warning("profile source %s is empty", name or "<stream>")
    log.info("loaded %d profiles", len(profiles))
    return ProfilePool(profiles)


# --- IPF --------------------------------------------------------------------

def check_targets(targets: Mapping[str, Mapping[str, float]]):
    for attr, dist in targets.items():
        total = sum(dist.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"target marginal for {attr!r} sums to {total!r}, not 1")
        if any(v < 0 for v in dist.values()):
            raise ValueError(f"target marginal for {attr!r} has a negative entry")


def weighted_marginal(pool: ProfilePool, weights: np.ndarray, attribute: str) -> dict[str, float]:
    cats = pool.categories(attribute)
    total = float(np.sum(weights))
    return {c: float(np.sum(weights[cats == c]) / total) for c in sorted(set(cats))}


def _marginal_residual(cats_by_attr, masks, weights, targets) -> float:
    total = weights.sum()
    worst = 0.0
    for attr, dist in targets.items():
        l1 = sum(abs(weights[masks[attr][c]].sum() / total - t) for c, t in dist.items())
        # pool categories absent from the targets have target 0
        extra = ~np.isin(cats_by_attr[attr], list(dist))
        l1 += weights[extra].sum() / total
        worst = max(worst, l1)
    return float(worst)


@dataclass
class IPFResult:
    weights: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residual_history: list[float]


def ipf_balance(
    pool: ProfilePool,
    targets: Mapping[str, Mapping[str, float]],
    max_iters: int = 100,
    tol: float = 1e-6,
    base_weights: Sequence[float] | None = None,
) -> IPFResult:
    """Rake per-profile weights until every weighted 1-D marginal matches its target.

    The residual is the largest L1 gap between a weighted marginal and its
    target, measured after each full sweep over the attributes. Returned
    weights sum to 1.
    """
    check_targets(targets)
    n = len(pool)
    if n == 0:
        raise ValueError("cannot balance an empty pool")
    w = np.ones(n) if base_weights is None else np.array(base_weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("base weights must be non-negative, one per profile, not all zero")
    w = w / w.sum()

    cats_by_attr, masks = {}, {}
    for attr, dist in targets.items():
        cats = pool.categories(attr)
        cats_by_attr[attr] = cats
        masks[attr] = {c: cats == c for c in dist}
        for c, t in dist.items():
            if t > 0 and w[masks[attr][c]].sum() == 0:
                raise ValueError(f"target category {attr}={c!r} has zero pool support")

    history: list[float] = []
    residual = _marginal_residual(cats_by_attr, masks, w, targets)
    it = 0
    while residual > tol and it < max_iters:
        it += 1
        for attr, dist in targets.items():
            extra = ~np.isin(cats_by_attr[attr], list(dist))
            w[extra] = 0.0
            total = w.sum()
            for c, t in dist.items():
                m = masks[attr][c]
                cur = w[m].sum() / total
                if cur > 0:
                    w[m] *= t / cur
            w /= w.sum()
        residual = _marginal_residual(cats_by_attr, masks, w, targets)
        history.append(residual)
    if residual > tol:
        log.warning("IPF stopped at max_iters=%d with residual %.3g", max_iters, residual)
    return IPFResult(w, it, residual, residual <= tol, history)


def sample_users(
    pool: ProfilePool,
    weights: Sequence[float] | None,
    n: int,
    seed: int,
    replace: bool = False,
) -> list[UserProfile]:
    """Draw ``n`` profiles with probability proportional to ``weights``."""
    m = len(pool)
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (m,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per profile, not all zero")
    if not replace and n > m:
        raise ValueError(f"cannot draw {n} profiles without replacement from a pool of {m}")
    if not replace and n > np.count_nonzero(w):
        raise ValueError(f"only {np.count_nonzero(w)} profiles have positive weight; cannot draw {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(m, size=n, replace=replace, p=w / w.sum())
    return [pool.profiles[i] for i in idx]


def marginals_from_config(doc: Mapping) -> dict[str, dict[str, float]]:
    """Accept ``{attr: {cat: share}}`` or ``{"marginals": {...}}``; shares are normalized."""
    raw = doc.get("marginals", doc)
    out = {}
    for attr, dist in raw.items():
        total = float(sum(dist.values()))
        out[attr] = {str(c): float(v) / total for c, v in dist.items()}
    return out
