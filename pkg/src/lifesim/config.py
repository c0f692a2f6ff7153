"""Run configuration: loading, validation and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .desires import THEMES, theme_slug
from .gateway import BackendSpec


class ConfigError(ValueError):
    """Raised with every violation found, one per line."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("\n".join(self.violations))


@dataclass
class PathsConfig:
    profiles: str | None = None
    marginals: str | None = None
    checkins: str | None = None
    weather: str | None = None
    queries: str | None = None
    pool: str | None = None  # a prebuilt pool directory; skips the build when set
    out: str = "out"


@dataclass
class PoolConfig:
    themes: list[str] = field(default_factory=lambda: list(THEMES))
    dedup_threshold: float = 0.9
    ambiguity_filter: bool = True
    approximate: bool = False


@dataclass
class SimulationConfig:
    n_users: int = 10
    max_events: int = 10
    n_max: int | None = None
    scale: float = 1.0
    offset: float = 0.0
    dt_unit: str = "days"
    goal: str | None = None


@dataclass
class EvalConfig:
    single_max_turns: int = 20
    long_max_turns: int = 3
    theta: float = 0.7
    memory_modes: list[bool] = field(default_factory=lambda: [False, True])
    protocols: list[str] = field(default_factory=lambda: ["single", "long"])


@dataclass
class BackendsConfig:
    user: Any = "scripted:synthetic#user"
    assistants: list = field(default_factory=lambda: ["scripted:synthetic#assistant"])
    judges: list = field(default_factory=lambda: ["scripted:synthetic#judge-a", "scripted:synthetic#judge-b",
                                                  "scripted:synthetic#judge-c"])
    builder: Any = None  # pool, pseudo profiles, events and checklists; defaults to the user backend
    embedder: Any = "scripted"


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    base_dir: str = "."

    def path(self, key: str) -> Path | None:
        value = getattr(self.paths, key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def section_hash(self, *keys: str) -> str:
        """Hash of the named config sections; ``workers`` and the output path never count."""
        d = self.to_dict()
        d["paths"].pop("out")
        picked = {k: d[k] for k in keys} if keys else {k: v for k, v in d.items() if k != "workers"}
        return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def config_hash(self) -> str:
        return self.section_hash()

    def backend(self, role: str, index: int = 0) -> BackendSpec:
        raw = getattr(self.backends, role)
        if role in ("assistants", "judges"):
            raw = raw[index]
        if role == "builder" and raw is None:
            raw = self.backends.user
        spec = backend_spec(raw, self.base_dir)
        if spec.kind == "scripted" and spec.responder and not (isinstance(raw, Mapping) and "seed" in raw):
            # each role gets its own synthetic stream, derived from the run seed
            spec.seed = int(hashlib.sha256(f"{self.seed}:{role}:{index}:{spec.name}".encode()).hexdigest()[:8], 16)
        return spec


def backend_spec(raw, base_dir: str = ".") -> BackendSpec:
    if isinstance(raw, BackendSpec):
        return raw
    if isinstance(raw, str):
        spec = BackendSpec.parse(raw)
    elif isinstance(raw, Mapping):
        spec = BackendSpec(**raw)
    else:
        raise ValueError(f"backend must be a string or mapping, got {type(raw).__name__}")
    if spec.fixture and not Path(spec.fixture).is_absolute():
        spec.fixture = str(Path(base_dir) / spec.fixture)
    return spec


def _build(cls, data: Mapping | None, where: str, errors: list[str]):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    for k in sorted(set(data) - known):
        errors.append(f"{where}.{k}: unknown key")
        data.pop(k)
    try:
        return cls(**data)
    except TypeError as e:
        errors.append(f"{where}: {e}")
        return cls()


def from_dict(doc: Mapping, base_dir: str = ".") -> RunConfig:
    """Parse a config mapping; structural problems are collected and raised together."""
    errors: list[str] = []
    doc = dict(doc or {})
    sections = {"paths": PathsConfig, "pool": PoolConfig, "simulation": SimulationConfig, "eval": EvalConfig,
                "backends": BackendsConfig}
    kw = {name: _build(cls, doc.pop(name, None), name, errors) for name, cls in sections.items()}
    for k in ("seed", "workers"):
        if k in doc:
            kw[k] = doc.pop(k)
    for k in sorted(doc):
        errors.append(f"{k}: unknown key")
    cfg = RunConfig(**kw, base_dir=str(base_dir))
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: not valid YAML ({e})"]) from None
    if doc is not None and not isinstance(doc, Mapping):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return from_dict(doc or {}, base_dir=str(path.parent))


def validate_config(cfg: RunConfig, check_paths: bool = True) -> list[str]:
    """Every violation found, as human-readable strings; an empty list means valid."""
    v: list[str] = []
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        v.append("seed: must be an integer")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        v.append("workers: must be an integer >= 1")

    e = cfg.eval
    if not 0.0 < e.theta < 1.0:
        v.append(f"eval.theta: θ out of range (0, 1) (got {e.theta})")
    for key in ("single_max_turns", "long_max_turns"):
        if not isinstance(getattr(e, key), int) or getattr(e, key) < 1:
            v.append(f"eval.{key}: must be an integer >= 1")
    if not e.memory_modes or any(not isinstance(m, bool) for m in e.memory_modes):
        v.append("eval.memory_modes: must be a non-empty list of booleans")
    for p in e.protocols:
        if p not in ("single", "long"):
            v.append(f"eval.protocols: unknown protocol {p!r}")

    s = cfg.simulation
    if not isinstance(s.n_users, int) or s.n_users < 1:
        v.append("simulation.n_users: must be an integer >= 1")
    if not isinstance(s.max_events, int) or s.max_events < 1:
        v.append("simulation.max_events: must be an integer >= 1")
    if s.n_max is not None and (not isinstance(s.n_max, int) or s.n_max < 1):
        v.append("simulation.n_max: must be null or an integer >= 1")
    if not isinstance(s.scale, (int, float)) or not s.scale > 0:
        v.append("simulation.scale: must be > 0")
    if s.dt_unit not in ("hours", "days"):
        v.append("simulation.dt_unit: must be hours|days")

    pc = cfg.pool
    if not 0.0 <= pc.dedup_threshold <= 1.0:
        v.append(f"pool.dedup_threshold: cosine threshold out of range [0, 1] (got {pc.dedup_threshold})")
    if not pc.themes:
        v.append("pool.themes: at least one theme required")
    for t in pc.themes:
        try:
            theme_slug(t)
        except ValueError:
            v.append(f"pool.themes: unknown theme {t!r}")

    b = cfg.backends
    roles = [("user", b.user), ("embedder", b.embedder)]
    if b.builder is not None:
        roles.append(("builder", b.builder))
    if not b.assistants:
        v.append("backends.assistants: at least one assistant required")
    if not b.judges:
        v.append("backends.judges: at least one judge required")
    roles += [(f"assistants[{i}]", x) for i, x in enumerate(b.assistants or [])]
    roles += [(f"judges[{i}]", x) for i, x in enumerate(b.judges or [])]
    names = {}
    for role, raw in roles:
        if isinstance(raw, Mapping) and any(k in raw for k in ("api_key", "key", "token")):
            env = raw.get("api_key_env", "LIFESIM_API_KEY")
            v.append(f"backends.{role}: credentials may not live in config; set {env}")
            continue
        try:
            spec = backend_spec(raw, cfg.base_dir)
        except (TypeError, ValueError) as err:
            v.append(f"backends.{role}: {err}")
            continue
        if check_paths and spec.fixture and not Path(spec.fixture).exists():
            v.append(f"backends.{role}.fixture: file not found: {spec.fixture}")
        if role.startswith(("assistants", "judges")):
            if spec.name in names:
                v.append(f"backends.{role}: duplicate backend name {spec.name!r} (also {names[spec.name]})")
            names[spec.name] = role

    if check_paths:
        if cfg.paths.pool is None:
            required = ("profiles", "checkins", "queries")
        else:
            required = ("profiles", "checkins", "pool")
        for key in required:
            p = cfg.path(key)
            if p is None:
                v.append(f"paths.{key}: required path missing")
            elif not p.exists():
                v.append(f"paths.{key}: path not found: {p}")
        for key in ("marginals", "weather"):
            p = cfg.path(key)
            if p is not None and not p.exists():
                v.append(f"paths.{key}: path not found: {p}")
    return v
