"""Mobility trajectories: check-in ingestion, weather, pseudo-profiles, matching."""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gateway import ChatBackend, ChatRequest, Embedder, ParseError, ask_structured, l2_normalize
from .prompts import EXAMPLES, render_prompt
from .records import RecordError, dumps, read_jsonl

log = logging.getLogger(__name__)

WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
CITY_BY_ZONE = {-240: "New York", -300: "New York", 540: "Tokyo"}
CHECKIN_FIELDS = ("user_id", "poi", "timestamp", "zone")


@dataclass(frozen=True)
class Weather:
    summary: str
    avg_c: float | None = None
    high_c: float | None = None
    low_c: float | None = None

    def __post_init__(self):
        if self.high_c is not None and self.low_c is not None and self.high_c < self.low_c:
            raise ValueError(f"weather high {self.high_c} below low {self.low_c}")

    @classmethod
    def unknown(cls) -> "Weather":
        return cls("unknown")

    def describe(self) -> str:
        if self.avg_c is None:
            return self.summary
        return f"{self.summary}, average {self.avg_c:g}°C (high {self.high_c:g}°C, low {self.low_c:g}°C)"

    def to_record(self) -> dict:
        return {"summary": self.summary, "avg_c": self.avg_c, "high_c": self.high_c, "low_c": self.low_c}


@dataclass(frozen=True)
class Environment:
    """One service point: UTC time, local offset in minutes, POI, weather."""

    time: datetime
    location: str
    zone: int = 0
    weather: Weather | None = None

    def __post_init__(self):
        if self.time.tzinfo is None:
            raise ValueError("environment time must be timezone-aware")

    @property
    def local_time(self) -> datetime:
        return self.time.astimezone(timezone(timedelta(minutes=self.zone)))

    @property
    def local_date(self) -> str:
        return self.local_time.strftime("%Y-%m-%d")

    def render_time(self) -> str:
        lt = self.local_time
        return f"{lt:%Y-%m-%d %H:%M:%S}, {WEEKDAYS[lt.weekday()]}"

    def describe(self) -> str:
        lines = [f"Time: {self.render_time()}", f"Location: {self.location}"]
        if self.weather is not None:
            lines.append(f"Weather: {self.weather.describe()}")
        return "\n".join(lines)

    def to_record(self) -> dict:
        rec = {"timestamp": format_utc(self.time), "zone": self.zone, "location": self.location}
        if self.weather is not None:
            rec["weather"] = self.weather.to_record()
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "Environment":
        w = rec.get("weather")
        return cls(time=parse_timestamp(rec["timestamp"]), location=rec["location"], zone=int(rec.get("zone", 0)),
                   weather=Weather(**w) if w else None)


@dataclass
class Trajectory:
    id: str
    checkins: list[Environment]
    city: str = ""
    pseudo_profile: str | None = None
    embedding: np.ndarray | None = None

    def __post_init__(self):
        for a, b in zip(self.checkins, self.checkins[1:]):
            if b.time < a.time:
                raise ValueError(f"trajectory {self.id}: check-ins out of time order")

    def __len__(self):
        return len(self.checkins)

    @property
    def zone(self) -> int:
        return self.checkins[0].zone if self.checkins else 0

    def top_pois(self, n: int = 5) -> list[str]:
        counts = Counter(c.location for c in self.checkins)
        return [p for p, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]

    def to_record(self) -> dict:
        return {"id": self.id, "city": self.city, "pseudo_profile": self.pseudo_profile,
                "checkins": [c.to_record() for c in self.checkins]}

    @classmethod
    def from_record(cls, rec: Mapping) -> "Trajectory":
        return cls(id=rec["id"], city=rec.get("city", ""), pseudo_profile=rec.get("pseudo_profile"),
                   checkins=[Environment.from_record(c) for c in rec["checkins"]])


# --- time helpers ---------------------------------------------------------------

def parse_timestamp(text: str) -> datetime:
    """ISO timestamp to an aware UTC datetime; naive values are taken as UTC."""
    s = str(text).strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    t = datetime.fromisoformat(s)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def _offset_minutes(text: str) -> int:
    s = str(text).strip().replace("Z", "+00:00")
    off = datetime.fromisoformat(s).utcoffset()
    return int(off.total_seconds() // 60) if off is not None else 0


def format_utc(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_zone(value) -> int:
    """Minutes east of UTC, from an int or a '+HH:MM' string."""
    if value is None or value == "":
        return 0
    if isinstance(value, (int, float)):
        return int(value)
    s = str(value).strip()
    if s[0] in "+-" and ":" in s:
        sign = -1 if s[0] == "-" else 1
        hh, mm = s[1:].split(":")
        return sign * (int(hh) * 60 + int(mm))
    return int(s)


# --- ingestion ----------------------------------------------------------------

def read_checkins_csv(source) -> list[dict]:
    """Rows of a check-in file with header ``user_id,poi,timestamp[,zone]``."""
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, (str, Path)) else source.read()
    rows = []
    for i, row in enumerate(csv.DictReader(io.StringIO(text)), 2):
        row["_line"] = i
        rows.append(row)
    return rows


def ingest_checkins(records: Iterable[Mapping], registry: Sequence[str] | None = None,
                    source: str | None = None) -> tuple[list[Trajectory], list[str]]:
    """Group check-ins by user and sort them in time.

    With a closed ``registry`` any check-in at an unknown POI is rejected;
    otherwise the registry is built from the data. Returns trajectories
    sorted by id and the sorted POI registry.
    """
    closed = set(registry) if registry is not None else None
    groups: dict[str, list[tuple[datetime, int, Environment]]] = {}
    seen_pois = set()
    for n, rec in enumerate(records, 1):
        line = rec.get("_line", n)
        missing = [k for k in ("user_id", "poi", "timestamp") if not rec.get(k)]
        if missing:
            raise RecordError(f"check-in missing {missing[0]!r}", line, source)
        try:
            t = parse_timestamp(rec["timestamp"])
        except ValueError:
            raise RecordError(f"unparsable timestamp {rec['timestamp']!r} for user {rec['user_id']}", line,
                              source) from None
        poi = str(rec["poi"])
        if closed is not None and poi not in closed:
            raise RecordError(f"unknown POI {poi!r} for user {rec['user_id']}", line, source)
        zone = parse_zone(rec.get("zone")) if rec.get("zone") not in (None, "") else _offset_minutes(rec["timestamp"])
        seen_pois.add(poi)
        uid = str(rec["user_id"])
        groups.setdefault(uid, []).append((t, n, Environment(time=t, location=poi, zone=zone)))
    trajs = []
    for uid in sorted(groups):
        items = sorted(groups[uid], key=lambda x: (x[0], x[1]))
        zone = items[0][2].zone
        envs = [replace(e, zone=zone) for _, _, e in items]
        trajs.append(Trajectory(id=uid, checkins=envs, city=CITY_BY_ZONE.get(zone, f"UTC{zone:+d}min")))
    return trajs, sorted(closed if closed is not None else seen_pois)


def checkins_csv(trajectories: Sequence[Trajectory]) -> str:
    """Canonical check-in CSV: sorted by user then time, UTC timestamps."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CHECKIN_FIELDS)
    for tr in sorted(trajectories, key=lambda t: t.id):
        for c in tr.checkins:
            w.writerow((tr.id, c.location, format_utc(c.time), c.zone))
    return buf.getvalue()


def save_trajectories(path, trajectories: Sequence[Trajectory]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(dumps(t.to_record()) + "\n" for t in trajectories), encoding="utf-8")
    return path


def load_trajectories(path) -> list[Trajectory]:
    out = []
    for line, rec in read_jsonl(path):
        try:
            out.append(Trajectory.from_record(rec))
        except (KeyError, ValueError, TypeError) as e:
            raise RecordError(f"bad trajectory record: {e}", line, str(path)) from None
    return out


# --- weather ------------------------------------------------------------------

class WeatherSource:
    def lookup(self, location: str, date: str) -> Weather | None:
        raise NotImplementedError


class FileWeatherSource(WeatherSource):
    """Line-delimited weather records keyed by (location, date)."""

    def __init__(self, path):
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"weather source unreachable: {p}")
        self._table = {}
        for _, rec in read_jsonl(p):
            key = (rec["location"], rec["date"])
            self._table[key] = Weather(rec["summary"], rec.get("avg_c"), rec.get("high_c"), rec.get("low_c"))

    def lookup(self, location: str, date: str) -> Weather | None:
        return self._table.get((location, date))


def enrich_weather(traj: Trajectory, source: WeatherSource) -> tuple[Trajectory, int]:
    """Fill weather on every check-in, keyed by (city, local date). Returns the
    enriched trajectory and the number of misses, each filled with 'unknown'."""
    misses = 0
    envs = []
    for c in traj.checkins:
        w = source.lookup(traj.city, c.local_date)
        if w is None:
            misses += 1
            log.warning("no weather for %s on %s (trajectory %s)", traj.city, c.local_date, traj.id)
            w = Weather.unknown()
        envs.append(replace(c, weather=w))
    return replace(traj, checkins=envs), misses


# --- pseudo-profiles and matching -------------------------------------------------

def render_trajectory(traj: Trajectory, limit: int = 40) -> str:
    return "\n".join(f"{c.render_time()} - {c.location}" for c in traj.checkins[:limit])


def pseudo_profile(traj: Trajectory, chat: ChatBackend) -> str:
    if not traj.checkins:
        raise ValueError("empty trajectory")
    prompt = render_prompt("pseudo_profile", trajectory=render_trajectory(traj), examples=EXAMPLES["pseudo_profile"])
    req = ChatRequest.single(prompt, tag="pseudo_profile", meta={"traj_id": traj.id, "pois": traj.top_pois()})
    out = ask_structured(chat, req)
    if not isinstance(out, dict) or not isinstance(out.get("profile"), str) or not out["profile"].strip():
        raise ParseError("pseudo profile: expected an object with a non-empty 'profile'", raw=str(out))
    traj.pseudo_profile = out["profile"]
    return traj.pseudo_profile


def embed_pseudo_profiles(trajectories: Sequence[Trajectory], embedder: Embedder):
    todo = [t for t in trajectories if t.pseudo_profile]
    if todo:
        for t, v in zip(todo, embedder.embed([t.pseudo_profile for t in todo])):
            t.embedding = v


def match_scores(profile_vec: np.ndarray, trajectories: Sequence[Trajectory]) -> np.ndarray:
    if not trajectories:
        raise ValueError("no trajectories to match against")
    missing = [t.id for t in trajectories if t.embedding is None]
    if missing:
        raise ValueError(f"trajectory {missing[0]} has no pseudo-profile embedding")
    mat = l2_normalize(np.stack([t.embedding for t in trajectories]))
    return mat @ l2_normalize(profile_vec)[0]


def match_vector(profile_vec: np.ndarray, trajectories: Sequence[Trajectory]) -> tuple[Trajectory, float]:
    """Argmax cosine; ties go to the lowest trajectory id."""
    scores = match_scores(profile_vec, trajectories)
    best = min(range(len(trajectories)), key=lambda i: (-scores[i], trajectories[i].id))
    return trajectories[best], float(scores[best])


def match_profile(profile, trajectories: Sequence[Trajectory], embedder: Embedder) -> tuple[Trajectory, float]:
    return match_vector(embedder.embed_one(profile.narrative), trajectories)
