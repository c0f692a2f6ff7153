"""Event-desire pool: construction from raw queries and top-k retrieval."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .gateway import ChatBackend, ChatRequest, Embedder, as_bool, ask_structured, l2_normalize
from .prompts import EXAMPLES, render_prompt
from .records import dumps, read_jsonl, write_json

log = logging.getLogger(__name__)

THEMES = {
    "exercise_fitness": "Exercise & Fitness",
    "diet_nutrition": "Diet & Nutrition",
    "mental_health": "Mental Health Counseling",
    "parenting_childcare": "Parenting & Childcare",
    "elderly_care": "Elderly Care",
    "learning_education": "Learning & Education",
    "travel_tourism": "Travel & Tourism",
    "leisure_entertainment": "Leisure & Entertainment",
}
_THEME_LOOKUP = {**{k: k for k in THEMES}, **{v.lower(): k for k, v in THEMES.items()}}

INTENT_PREFIX = "The user wants to"
EXACT_SCAN_LIMIT = 50_000
DEFAULT_DEDUP_THRESHOLD = 0.9


class DesireError(ValueError):
    pass


def theme_slug(theme: str) -> str:
    slug = _THEME_LOOKUP.get(theme.strip().lower())
    if slug is None:
        raise DesireError(f"unknown theme {theme!r}; expected one of {sorted(THEMES)}")
    return slug


@dataclass
class DesireDraft:
    theme: str
    intent_text: str
    source_text: str = ""
    event_contexts: list[str] = field(default_factory=list)
    tags: dict | None = None
    embedding: np.ndarray | None = None

    @property
    def index_text(self) -> str:
        return "\n".join(self.event_contexts) if self.event_contexts else self.intent_text


@dataclass(frozen=True, eq=False)
class DesireEntry:
    id: str
    theme: str
    intent_text: str
    event_contexts: tuple[str, ...]
    tags: dict
    embedding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theme", theme_slug(self.theme))
        object.__setattr__(self, "event_contexts", tuple(self.event_contexts))
        if not 1 <= len(self.event_contexts) <= 3:
            raise DesireError(f"{self.id}: needs 1-3 event contexts, got {len(self.event_contexts)}")
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or abs(np.linalg.norm(emb) - 1.0) > 1e-6:
            raise DesireError(f"{self.id}: embedding is not unit-norm")
        object.__setattr__(self, "embedding", emb)

    @property
    def index_text(self) -> str:
        return "\n".join(self.event_contexts)

    @property
    def event_text(self) -> str:
        return self.event_contexts[0]

    def to_record(self) -> dict:
        return {"id": self.id, "theme": self.theme, "intent_text": self.intent_text,
                "event_contexts": list(self.event_contexts), "tags": self.tags}


def _float32_unit(mat: np.ndarray) -> np.ndarray:
    """Round to float32 storage precision, then renormalize, so save/load is lossless."""
    m = l2_normalize(np.asarray(mat, dtype=np.float32).astype(np.float64))
    return m.astype(np.float32).astype(np.float64)


class _IVFIndex:
    """Coarse k-means partition; probes the nearest ``nprobe`` cells."""

    def __init__(self, matrix: np.ndarray, n_cells: int | None = None, nprobe: int = 8, seed: int = 0):
        n = len(matrix)
        self.n_cells = n_cells or max(1, int(np.sqrt(n)))
        self.nprobe = min(nprobe, self.n_cells)
        rng = np.random.default_rng(seed)
        cent = matrix[rng.choice(n, self.n_cells, replace=False)]
        for _ in range(10):
            assign = np.argmax(matrix @ cent.T, axis=1)
            for c in range(self.n_cells):
                members = matrix[assign == c]
                if len(members):
                    cent[c] = members.mean(axis=0)
            cent = l2_normalize(cent)
        self.centroids = cent
        assign = np.argmax(matrix @ cent.T, axis=1)
        self.cells = [np.flatnonzero(assign == c) for c in range(self.n_cells)]

    def candidates(self, q: np.ndarray) -> np.ndarray:
        best = np.argsort(-(self.centroids @ q))[: self.nprobe]
        return np.concatenate([self.cells[c] for c in best])


class DesirePool:
    """Immutable collection of desire entries with a cosine index."""

    def __init__(self, entries: Sequence[DesireEntry], approximate: bool = False):
        self.entries = list(entries)
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DesireError("duplicate desire ids in pool")
        dim = {e.embedding.shape[0] for e in self.entries}
        if len(dim) > 1:
            raise DesireError(f"mixed embedding dimensions {sorted(dim)}")
        self.dim = dim.pop() if dim else 0
        self.matrix = (np.stack([e.embedding for e in self.entries]) if self.entries
                       else np.zeros((0, self.dim)))
        self._id_rank = np.argsort(np.argsort(np.array(ids, dtype=object)))
        self._by_id = dict(zip(ids, self.entries))
        self.theme_counts = {t: 0 for t in THEMES}
        for e in self.entries:
            self.theme_counts[e.theme] += 1
        self._ivf = None
        if approximate and len(self.entries) > EXACT_SCAN_LIMIT:
            self._ivf = _IVFIndex(self.matrix)

    def __len__(self):
        return len(self.entries)

    def get(self, entry_id: str) -> DesireEntry:
        return self._by_id[entry_id]

    @property
    def exact(self) -> bool:
        return self._ivf is None

    def search(self, query: np.ndarray, k: int) -> list[tuple[DesireEntry, float]]:
        if not self.entries:
            raise DesireError("desire pool is empty")
        q = l2_normalize(query)[0]
        rows = np.arange(len(self.entries)) if self._ivf is None else self._ivf.candidates(q)
        scores = self.matrix[rows] @ q
        order = np.lexsort((self._id_rank[rows], -scores))[:k]
        return [(self.entries[rows[i]], float(scores[i])) for i in order]

    def retrieve(self, query_text: str, k: int, embedder: Embedder) -> list[tuple[DesireEntry, float]]:
        return self.search(embedder.embed([query_text])[0], k)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "entries.jsonl", "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(dumps(e.to_record()) + "\n")
        self.matrix.astype("<f4").tofile(d / "embeddings.f32")
        write_json(d / "pool.json", {"count": len(self.entries), "dim": self.dim,
                                     "theme_counts": self.theme_counts})
        return d

    @classmethod
    def load(cls, directory, approximate: bool = False) -> "DesirePool":
        d = Path(directory)
        meta = json.loads((d / "pool.json").read_text())
        records = [rec for _, rec in read_jsonl(d / "entries.jsonl")]
        mat = np.fromfile(d / "embeddings.f32", dtype="<f4").astype(np.float64)
        if len(records) != meta["count"] or mat.size != meta["count"] * meta["dim"]:
            raise DesireError(f"{d}: entries, embeddings and pool.json disagree")
        mat = mat.reshape(meta["count"], meta["dim"]) if meta["count"] else mat.reshape(0, meta["dim"])
        entries = [DesireEntry(id=r["id"], theme=r["theme"], intent_text=r["intent_text"],
                               event_contexts=tuple(r["event_contexts"]), tags=r.get("tags") or {},
                               embedding=mat[i])
                   for i, r in enumerate(records)]
        return cls(entries, approximate=approximate)


# --- construction steps ------------------------------------------------------

def normalize_query(raw_text: str, theme: str, chat: ChatBackend) -> DesireDraft | None:
    slug = theme_slug(theme)
    prompt = render_prompt("intent_normalization", theme=THEMES[slug],
                           examples=EXAMPLES["intent_normalization"], content=raw_text)
    req = ChatRequest.single(prompt, tag="normalize", meta={"content": raw_text, "theme": slug})
    out = ask_structured(chat, req)
    if not isinstance(out, dict) or "is_valid_intent" not in out:
        raise DesireError("normalize: reply lacks is_valid_intent")
    if not as_bool(out["is_valid_intent"]):
        return None
    intent = str(out.get("intent", "")).strip()
    if not intent.startswith(INTENT_PREFIX):
        raise DesireError(f"normalize: intent must begin {INTENT_PREFIX!r}, got {intent[:40]!r}")
    return DesireDraft(theme=slug, intent_text=intent, source_text=raw_text)


def passes_ambiguity_filter(draft: DesireDraft, chat: ChatBackend) -> bool:
    prompt = render_prompt("ambiguity_filter", theme=THEMES[draft.theme], content=draft.intent_text)
    out = ask_structured(chat, ChatRequest.single(prompt, tag="ambiguity", meta={"intent": draft.intent_text}))
    return as_bool(out.get("keep")) if isinstance(out, dict) else False


def generate_trigger_events(draft: DesireDraft, chat: ChatBackend) -> list[str]:
    if not draft.intent_text:
        raise DesireError("trigger events: draft has no intent text")
    prompt = render_prompt("trigger_events", theme=THEMES[draft.theme],
                           examples=EXAMPLES["trigger_events"], content=draft.intent_text)
    out = ask_structured(chat, ChatRequest.single(prompt, tag="trigger_events",
                                                  meta={"intent": draft.intent_text, "theme": draft.theme}))
    if not isinstance(out, list) or not all(isinstance(x, str) and x.strip() for x in out):
        raise DesireError("trigger events: expected a JSON array of strings")
    if len(out) != 3:
        raise DesireError(f"trigger events: expected 3 events, got {len(out)}")
    events = [x.strip() for x in out]
    if len(set(events)) != 3:
        raise DesireError("trigger events: distinctness violated")
    draft.event_contexts = events
    return events


def tag_entry(draft: DesireDraft, chat: ChatBackend) -> dict:
    prompt = render_prompt("entry_tagging", event=draft.index_text, intent=draft.intent_text)
    out = ask_structured(chat, ChatRequest.single(prompt, tag="tag_entry",
                                                  meta={"intent": draft.intent_text, "event": draft.index_text}))
    if not isinstance(out, dict):
        raise DesireError("tag entry: expected a JSON object")
    for key in ("keywords", "location", "time"):
        if key not in out:
            raise DesireError(f"tag entry: missing field {key!r}")
    if not isinstance(out["keywords"], list):
        raise DesireError("tag entry: keywords must be a list")
    tags = {"keywords": [str(k) for k in out["keywords"]], "location": str(out["location"]),
            "time": str(out["time"])}
    draft.tags = tags
    return tags


def dedup(entries: Sequence, threshold: float = DEFAULT_DEDUP_THRESHOLD) -> list:
    """Greedy semantic dedup in input order: drop any item whose cosine to an
    already kept item is >= threshold."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    kept, kept_vecs = [], []
    for item in entries:
        v = np.asarray(item.embedding, dtype=np.float64)
        if kept_vecs and np.max(np.stack(kept_vecs) @ v) >= threshold:
            continue
        kept.append(item)
        kept_vecs.append(v)
    return kept


# --- pipeline ---------------------------------------------------------------

@dataclass
class BuildReport:
    theme: str
    ingested: int = 0
    rejected: dict = field(default_factory=lambda: {"filtered": 0, "invalid": 0, "ambiguous": 0, "error": 0})
    dedup_removed: int = 0
    kept: int = 0

    def balanced(self) -> bool:
        return self.ingested - sum(self.rejected.values()) - self.dedup_removed == self.kept

    def to_dict(self) -> dict:
        return {"theme": self.theme, "ingested": self.ingested, "rejected": dict(self.rejected),
                "dedup_removed": self.dedup_removed, "kept": self.kept}


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def build_entries(
    raw_queries: Iterable[str],
    theme: str,
    chat: ChatBackend,
    embedder: Embedder,
    *,
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD,
    ambiguity_filter: bool = False,
    content_filter: Callable[[str], bool] | None = None,
    id_prefix: str | None = None,
    start_index: int = 0,
    workers: int = 1,
) -> tuple[list[DesireEntry], BuildReport]:
    slug = theme_slug(theme)
    queries = list(raw_queries)
    report = BuildReport(theme=slug, ingested=len(queries))

    allowed = [q for q in queries if content_filter is None or content_filter(q)]
    report.rejected["filtered"] = len(queries) - len(allowed)

    def _normalize(q):
        try:
            return normalize_query(q, slug, chat)
        except Exception as e:  # one bad reply must not sink the whole build
            log.warning("normalize failed for %r: %s", q[:60], e)
            return e

    drafts = []
    for res in _pmap(_normalize, allowed, workers):
        if isinstance(res, Exception):
            report.rejected["error"] += 1
        elif res is None:
            report.rejected["invalid"] += 1
        else:
            drafts.append(res)

    if ambiguity_filter:
        keep = _pmap(lambda d: passes_ambiguity_filter(d, chat), drafts, workers)
        report.rejected["ambiguous"] = keep.count(False)
        drafts = [d for d, k in zip(drafts, keep) if k]

    if drafts:
        for d, v in zip(drafts, _float32_unit(embedder.embed([d.intent_text for d in drafts]))):
            d.embedding = v
    before = len(drafts)
    drafts = dedup(drafts, dedup_threshold)
    report.dedup_removed = before - len(drafts)

    def _enrich(d):
        try:
            generate_trigger_events(d, chat)
            return d
        except Exception as e:
            log.warning("trigger events failed for %r: %s", d.intent_text[:60], e)
            return e

    enriched = []
    for res in _pmap(_enrich, drafts, workers):
        if isinstance(res, Exception):
            report.rejected["error"] += 1
        else:
            enriched.append(res)
    drafts = enriched
    if drafts:
        for d, v in zip(drafts, _float32_unit(embedder.embed([d.index_text for d in drafts]))):
            d.embedding = v
    drafts = dedup(drafts, dedup_threshold)
    report.dedup_removed += len(enriched) - len(drafts)

    def _tag(d):
        try:
            tag_entry(d, chat)
            return d
        except Exception as e:
            log.warning("tagging failed for %r: %s", d.intent_text[:60], e)
            return e

    tagged = [r for r in _pmap(_tag, drafts, workers)]
    report.rejected["error"] += sum(isinstance(r, Exception) for r in tagged)
    drafts = [r for r in tagged if not isinstance(r, Exception)]

    prefix = id_prefix or slug
    entries = [DesireEntry(id=f"{prefix}-{start_index + i:06d}", theme=slug, intent_text=d.intent_text,
                           event_contexts=tuple(d.event_contexts), tags=d.tags or {}, embedding=d.embedding)
               for i, d in enumerate(drafts)]
    report.kept = len(entries)
    return entries, report
