"""End-to-end run: pool, trajectories, events, benchmark, simulate, evaluate, report.

Each stage writes into its own directory under the output root together with
a ``_manifest.json`` recording the config hash, the seed, a key derived from
its inputs, and the sha256 of every file it wrote. A stage whose key is
unchanged and whose files still match is skipped on rerun; a file that no
longer matches its manifest stops the run with the file named.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import desires, profiles, trajectory
from .behavior import Conversation
from .config import RunConfig
from .events import LifeEvent, TriggerConfig, generate_life_trajectory
from .evaluation import krippendorff_alpha
from .evaluation.benchmark import build_user_scenarios
from .evaluation.judges import EVENT_TEMPLATES, intention_quality, score_event_sequence
from .evaluation.metrics import temporal_fidelity, temporal_histogram_rows
from .evaluation.protocols import (EvalReport, evaluate_long, evaluate_single, simulate_long, simulate_single)
from .gateway import CallLog, make_chat, make_embedder
from .records import RecordError, file_hash, read_jsonl, write_json, write_jsonl
from .rng import derive_seed
from .scenario import benchmark_lines, load_benchmark
from .tables import write_tables

log = logging.getLogger(__name__)

STAGES = ("pool", "trajectories", "events", "benchmark", "simulate", "evaluate", "report")
MANIFEST = "_manifest.json"
# config sections each stage depends on; upstream outputs are chained in separately
STAGE_SECTIONS = {
    "pool": ("seed", "pool", "backends", "paths"),
    "trajectories": ("seed", "simulation", "backends", "paths"),
    "events": ("seed", "simulation", "backends"),
    "benchmark": ("seed", "backends"),
    "simulate": ("seed", "eval", "backends"),
    "evaluate": ("seed", "eval", "backends"),
    "report": ("eval",),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "model"


def _pmap(fn: Callable, items, workers: int) -> list:
    items = list(items)
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class StageResult:
    stage: str
    skipped: bool
    outputs: dict = field(default_factory=dict)


class Pipeline:
    def __init__(self, cfg: RunConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out) if out is not None else cfg.path("out")
        self.calls = CallLog()
        self._chats: dict = {}
        self._embedder = None

    # --- provenance and manifests ---------------------------------------------------

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.cfg.config_hash, "seed": self.cfg.seed}

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def _input_files(self, stage: str) -> list[Path]:
        c = self.cfg
        keys = {"pool": ("pool",) if c.paths.pool else ("queries",),
                "trajectories": ("profiles", "marginals", "checkins", "weather")}.get(stage, ())
        files = [c.path(k) for k in keys if c.path(k) is not None]
        if "backends" in STAGE_SECTIONS[stage]:
            roles = ["user", "builder", "embedder"]
            specs = [c.backend(r) for r in roles]
            specs += [c.backend("assistants", i) for i in range(len(c.backends.assistants))]
            specs += [c.backend("judges", i) for i in range(len(c.backends.judges))]
            files += [Path(s.fixture) for s in specs if s.fixture]
        return files

    def stage_key(self, stage: str) -> str:
        h = hashlib.sha256()
        h.update(stage.encode())
        h.update(self.cfg.section_hash(*STAGE_SECTIONS[stage]).encode())
        for f in self._input_files(stage):
            h.update(str(f.name).encode())
            h.update(file_hash(f).encode())
        for up in STAGES[:STAGES.index(stage)]:
            m = self.read_manifest(up)
            if m is not None:
                h.update(json.dumps(m["outputs"], sort_keys=True).encode())
        return h.hexdigest()[:16]

    def read_manifest(self, stage: str) -> dict | None:
        p = self.stage_dir(stage) / MANIFEST
        if not p.exists():
            return None
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            raise StageError(stage, f"{p}: manifest is corrupted") from None

    def verify(self, stage: str) -> dict:
        """Check a finished stage's files against its manifest; names the first bad file."""
        m = self.read_manifest(stage)
        if m is None:
            raise StageError(stage, f"{self.stage_dir(stage)}: stage has not been run")
        for rel, digest in m["outputs"].items():
            p = self.stage_dir(stage) / rel
            if not p.exists():
                raise StageError(stage, f"{p}: intermediate file is missing")
            if file_hash(p) != digest:
                raise StageError(stage, f"{p}: intermediate file is corrupted (content differs from manifest)")
        return m

    def _write_manifest(self, stage: str, key: str):
        d = self.stage_dir(stage)
        outputs = {str(p.relative_to(d)): file_hash(p) for p in sorted(d.rglob("*"))
                   if p.is_file() and p.name != MANIFEST}
        write_json(d / MANIFEST, {"stage": stage, **self.provenance, "key": key, "outputs": outputs})
        return outputs

    # --- backends --------------------------------------------------------------------

    def chat(self, role: str, index: int = 0):
        k = (role, index)
        if k not in self._chats:
            self._chats[k] = make_chat(self.cfg.backend(role, index), self.calls)
        return self._chats[k]

    @property
    def embedder(self):
        if self._embedder is None:
            self._embedder = make_embedder(self.cfg.backend("embedder"), self.calls)
        return self._embedder

    def assistants(self) -> list:
        return [self.chat("assistants", i) for i in range(len(self.cfg.backends.assistants))]

    def judges(self) -> list:
        return [self.chat("judges", i) for i in range(len(self.cfg.backends.judges))]

    # --- driver ----------------------------------------------------------------------

    def run(self, through: str | None = None, force: bool = False) -> list[StageResult]:
        if through is not None and through not in STAGES:
            raise ValueError(f"unknown stage {through!r}; expected one of {', '.join(STAGES)}")
        last = STAGES.index(through) if through else len(STAGES) - 1
        results = []
        for stage in STAGES[:last + 1]:
            results.append(self.run_stage(stage, force=force))
        return results

    def run_stage(self, stage: str, force: bool = False) -> StageResult:
        for up in STAGES[:STAGES.index(stage)]:
            self.verify(up)
        key = self.stage_key(stage)
        m = self.read_manifest(stage)
        if m is not None and m.get("key") == key and not force:
            self.verify(stage)
            log.info("stage %s: up to date, skipped", stage)
            return StageResult(stage, True, m["outputs"])
        d = self.stage_dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        log.info("stage %s: running", stage)
        getattr(self, f"stage_{stage}")(d)
        return StageResult(stage, False, self._write_manifest(stage, key))

    # --- stages ----------------------------------------------------------------------

    def stage_pool(self, d: Path):
        c = self.cfg
        if c.paths.pool:
            pool = desires.DesirePool.load(c.path("pool"))
            reports = []
        else:
            chat = self.chat("builder")
            by_theme: dict[str, list[str]] = {}
            src = str(c.path("queries"))
            for line, rec in read_jsonl(src):
                if "theme" not in rec or "text" not in rec:
                    raise RecordError("query record needs 'theme' and 'text'", line, src)
                by_theme.setdefault(desires.theme_slug(rec["theme"]), []).append(rec["text"])
            entries, reports = [], []
            for slug in sorted({desires.theme_slug(t) for t in c.pool.themes}):
                got, rep = desires.build_entries(
                    by_theme.get(slug, []), slug, chat, self.embedder, dedup_threshold=c.pool.dedup_threshold,
                    ambiguity_filter=c.pool.ambiguity_filter, workers=c.workers)
                entries += got
                reports.append(rep.to_dict())
            pool = desires.DesirePool(entries)
        pool.save(d)
        write_json(d / "build_report.json", {"provenance": self.provenance, "themes": reports,
                                             "kept": len(pool)})

    def stage_trajectories(self, d: Path):
        c = self.cfg
        pool = profiles.load_profiles(c.path("profiles"))
        weights, ipf = None, None
        if c.path("marginals") is not None:
            import yaml

            targets = profiles.marginals_from_config(yaml.safe_load(c.path("marginals").read_text()))
            res = profiles.ipf_balance(pool, targets)
            weights = res.weights
            ipf = {"iterations": res.iterations, "residual": res.residual, "converged": res.converged}
        users = profiles.sample_users(pool, weights, c.simulation.n_users, derive_seed(c.seed, "users"))
        write_jsonl(d / "users.jsonl", [u.to_record() for u in users])

        src = c.path("checkins")
        trajs, registry = trajectory.ingest_checkins(trajectory.read_checkins_csv(src), source=str(src))
        misses = 0
        if c.path("weather") is not None:
            ws = trajectory.FileWeatherSource(c.path("weather"))
            enriched = []
            for t in trajs:
                t, n = trajectory.enrich_weather(t, ws)
                enriched.append(t)
                misses += n
            trajs = enriched
        chat = self.chat("builder")
        _pmap(lambda t: trajectory.pseudo_profile(t, chat), trajs, c.workers)
        trajectory.embed_pseudo_profiles(trajs, self.embedder)
        trajectory.save_trajectories(d / "trajectories.jsonl", trajs)
        matches = []
        for u in users:
            t, score = trajectory.match_profile(u, trajs, self.embedder)
            matches.append({"user_id": u.id, "trajectory_id": t.id, "score": round(score, 9)})
        write_jsonl(d / "matches.jsonl", matches)
        write_json(d / "summary.json", {"provenance": self.provenance, "n_users": len(users),
                                        "n_trajectories": len(trajs), "n_pois": len(registry),
                                        "weather_misses": misses, "ipf": ipf})

    def _load_users(self) -> dict:
        d = self.stage_dir("trajectories")
        return {p.id: p for p in (profiles.UserProfile.from_record(r) for _, r in read_jsonl(d / "users.jsonl"))}

    def _load_matches(self) -> list[dict]:
        return [r for _, r in read_jsonl(self.stage_dir("trajectories") / "matches.jsonl")]

    def stage_events(self, d: Path):
        c = self.cfg
        s = c.simulation
        users = self._load_users()
        trajs = {t.id: t for t in trajectory.load_trajectories(self.stage_dir("trajectories") / "trajectories.jsonl")}
        pool = desires.DesirePool.load(self.stage_dir("pool"), approximate=c.pool.approximate)
        trig = TriggerConfig(scale=s.scale, offset=s.offset, dt_unit=s.dt_unit)
        chat = self.chat("builder")
        matches = self._load_matches()

        def one(m: dict):
            trace: list = []
            evs = generate_life_trajectory(
                users[m["user_id"]], trajs[m["trajectory_id"]].checkins, pool=pool, chat=chat,
                embedder=self.embedder, seed=derive_seed(c.seed, "events", m["user_id"]), cfg=trig,
                n_max=s.n_max, max_events=s.max_events, goal=s.goal, trace=trace)
            return evs, trace

        results = _pmap(one, matches, c.workers)
        ev_rows, trace_rows = [], []
        real_h, sim_h, real_g, sim_g = [], [], [], []
        for m, (evs, trace) in zip(matches, results):
            for ev in evs:
                ev_rows.append({"user_id": m["user_id"], "trajectory_id": m["trajectory_id"], **ev.to_record()})
            for row in trace:
                trace_rows.append({"user_id": m["user_id"], "step": row["step"], "p": round(row["p"], 12),
                                   "t_prev": trajectory.format_utc(row["t_prev"]), "outcome": row["outcome"]})
            real = trajs[m["trajectory_id"]].checkins
            real_h += [e.local_time.hour for e in real]
            real_g += [(b.time - a.time).total_seconds() / 86400 for a, b in zip(real, real[1:])]
            sim_h += [e.env.local_time.hour for e in evs]
            sim_g += [(b.env.time - a.env.time).total_seconds() / 86400 for a, b in zip(evs, evs[1:])]
        write_jsonl(d / "events.jsonl", ev_rows)
        write_jsonl(d / "trace.jsonl", trace_rows)
        fid = temporal_fidelity(real_h, sim_h, real_g, sim_g)
        with open(d / "temporal_histograms.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["feature", "bin_lo", "bin_hi", "real", "simulated"])
            w.writerows(temporal_histogram_rows(real_h, sim_h, real_g, sim_g))
        fid = {k: (round(v, 9) if isinstance(v, float) else v) for k, v in fid.items()}
        counts = {uid: sum(r["user_id"] == uid for r in ev_rows) for uid in (m["user_id"] for m in matches)}
        write_json(d / "summary.json", {"provenance": self.provenance, "n_events": len(ev_rows),
                                        "events_per_user": counts, "temporal_fidelity_jsd_nats": fid})

    def _load_events(self) -> dict[str, list[LifeEvent]]:
        out: dict[str, list[LifeEvent]] = {}
        src = self.stage_dir("events") / "events.jsonl"
        for line, rec in read_jsonl(src):
            try:
                out.setdefault(rec["user_id"], []).append(LifeEvent.from_record(rec))
            except (KeyError, ValueError, TypeError) as e:
                raise RecordError(f"bad event record: {e}", line, str(src)) from None
        return out

    def stage_benchmark(self, d: Path):
        c = self.cfg
        users = self._load_users()
        events = self._load_events()
        chat = self.chat("builder")
        order = [m["user_id"] for m in self._load_matches() if m["user_id"] in events]

        def one(uid: str):
            try:
                return build_user_scenarios(users[uid], events[uid], chat), None
            except Exception as e:
                log.warning("user %s dropped from benchmark: %s", uid, e)
                return [], f"{type(e).__name__}: {e}"

        built = _pmap(one, order, c.workers)
        scenarios = [sc for scs, _ in built for sc in scs]
        dropped = {uid: err for uid, (_, err) in zip(order, built) if err}
        (d / "benchmark.jsonl").write_text(benchmark_lines(scenarios), encoding="utf-8")
        write_json(d / "audit.json", {"provenance": self.provenance, "n_scenarios": len(scenarios),
                                      "dropped_users": dropped, **self._audit(users, events, scenarios, order)})

    def _audit(self, users, events, scenarios, order) -> dict:
        """Judge-side quality checks on the generated events and checklists."""
        judges = self.judges()
        seq_scores = {}
        for metric in EVENT_TEMPLATES:
            grid = []
            for uid in order:
                if not events.get(uid):
                    continue
                row = []
                for j in judges:
                    try:
                        _, v = score_event_sequence(users[uid].narrative, [e.event_text for e in events[uid]],
                                                    metric, j, ref=uid)
                    except Exception as e:
                        log.warning("event judge %s failed for %s: %s", j.name, uid, e)
                        v = None
                    row.append(v)
                grid.append(row)
            vals = [v for r in grid for v in r if v is not None]
            alpha = None
            if len(grid) and len(judges) >= 2:
                try:
                    a = krippendorff_alpha(grid, "ordinal")
                    alpha = None if np.isnan(a) else round(a, 9)
                except ValueError:
                    alpha = None
            seq_scores[metric] = {"mean": round(float(np.mean(vals)), 6) if vals else None,
                                  "krippendorff_alpha_ordinal": alpha}
        quality = {"explicit": [0, 0], "implicit": [0, 0]}
        if judges:
            for sc in scenarios:
                try:
                    for kind, ok in intention_quality(sc, judges[0]):
                        quality[kind][0] += int(ok)
                        quality[kind][1] += 1
                except Exception as e:
                    log.warning("intention judge failed for %s: %s", sc.id, e)
        rates = {k: (round(100.0 * a / b, 6) if b else None) for k, (a, b) in quality.items()}
        return {"event_sequence": seq_scores, "intention_reasonable_pct": rates}

    def _benchmark(self):
        return load_benchmark(self.stage_dir("benchmark") / "benchmark.jsonl")

    def stage_simulate(self, d: Path):
        c = self.cfg
        bench = self._benchmark()
        user = self.chat("user")
        for a in self.assistants():
            md = d / safe_name(a.name)
            if "single" in c.eval.protocols:
                convs = simulate_single(bench, a, user_chat=user, embedder=self.embedder, seed=c.seed,
                                        max_turns=c.eval.single_max_turns, workers=c.workers, theta=c.eval.theta)
                for sc, conv in zip(bench, convs):
                    conv.save(md / "single" / f"{sc.id}.jsonl")
            if "long" in c.eval.protocols:
                for mem in c.eval.memory_modes:
                    sub = md / f"long_memory_{'on' if mem else 'off'}"
                    convs, records = simulate_long(bench, a, user_chat=user, embedder=self.embedder, memory=mem,
                                                   seed=c.seed, max_turns=c.eval.long_max_turns,
                                                   workers=c.workers, theta=c.eval.theta)
                    for sid in sorted(convs):
                        convs[sid].save(sub / f"{sid}.jsonl")
                    write_jsonl(sub / "memory_records.jsonl", records)

    def _conversation(self, path: Path) -> Conversation:
        try:
            return Conversation.from_lines(path)
        except Exception as e:
            raise StageError("evaluate", f"{path}: cannot read conversation ({e})") from None

    def stage_evaluate(self, d: Path):
        c = self.cfg
        bench = self._benchmark()
        judges = self.judges()
        sim = self.stage_dir("simulate")
        for a in self.assistants():
            md = sim / safe_name(a.name)
            od = d / safe_name(a.name)
            if "single" in c.eval.protocols:
                convs = [self._conversation(md / "single" / f"{sc.id}.jsonl") for sc in bench]
                rep = evaluate_single(bench, convs, a, judges, seed=c.seed, workers=c.workers)
                write_json(od / "single.json", {"provenance": self.provenance, **rep.to_dict()})
            if "long" in c.eval.protocols:
                for mem in c.eval.memory_modes:
                    tag = f"long_memory_{'on' if mem else 'off'}"
                    convs = {sc.id: self._conversation(md / tag / f"{sc.id}.jsonl") for sc in bench}
                    records = [r for _, r in read_jsonl(md / tag / "memory_records.jsonl")]
                    rep = evaluate_long(bench, convs, records, a, judges, memory=mem, seed=c.seed,
                                        workers=c.workers)
                    write_json(od / f"{tag}.json", {"provenance": self.provenance, **rep.to_dict()})

    def load_reports(self) -> tuple[list[EvalReport], list[EvalReport]]:
        single, long = [], []
        ev = self.stage_dir("evaluate")
        for a in self.assistants():
            for p in sorted((ev / safe_name(a.name)).glob("*.json")):
                try:
                    rep = EvalReport.from_dict(json.loads(p.read_text()))
                except (json.JSONDecodeError, KeyError) as e:
                    raise StageError("report", f"{p}: cannot read evaluation report ({e})") from None
                (single if rep.protocol == "single" else long).append(rep)
        return single, long

    def stage_report(self, d: Path):
        single, long = self.load_reports()
        write_tables(d, single, long)
        audit = json.loads((self.stage_dir("benchmark") / "audit.json").read_text())
        events = json.loads((self.stage_dir("events") / "summary.json").read_text())
        write_json(d / "report.json", {
            "provenance": self.provenance,
            "single": {r.model: r.aggregates for r in single},
            "long": {f"{r.model}/memory_{'on' if r.memory else 'off'}": {"aggregates": r.aggregates, "grid": r.grid}
                     for r in long},
            "benchmark_audit": {k: audit[k] for k in ("n_scenarios", "event_sequence", "intention_reasonable_pct")},
            "temporal_fidelity_jsd_nats": events["temporal_fidelity_jsd_nats"],
        })


def tree_digest(root) -> dict[str, str]:
    """sha256 of every file under ``root`` keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
