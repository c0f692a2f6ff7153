"""Command-line entry point: ``lifesim <command> ...``.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure,
3 a backend exhausted its retry budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import desires, profiles, trajectory
from .config import ConfigError, load_config, validate_config
from .gateway import BackendExhausted, BackendSpec, CallLog, ChatRequest, make_chat, make_embedder
from .records import RecordError, dumps

log = logging.getLogger("lifesim")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_BACKEND = 0, 1, 2, 3
DEFAULT_CHAT = "scripted:synthetic"
DEFAULT_EMBED = "scripted"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _chat(spec: str, seed: int = 0, calls: CallLog | None = None):
    s = BackendSpec.parse(spec)
    if s.kind == "scripted" and s.responder:
        s.seed = seed
    return make_chat(s, calls)


def _embedder(spec: str):
    return make_embedder(BackendSpec.parse(spec))


def _out(text: str, path: str | None):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --- profiles -----------------------------------------------------------------------

def cmd_profiles_validate(a):
    pool = profiles.load_profiles(a.file)
    print(f"{len(pool.profiles)} profiles OK")


def cmd_profiles_sample(a):
    pool = profiles.load_profiles(a.file)
    weights = None
    if a.marginals:
        import yaml

        targets = profiles.marginals_from_config(yaml.safe_load(Path(a.marginals).read_text()))
        res = profiles.ipf_balance(pool, targets)
        log.info("IPF: %d iterations, residual %.3g", res.iterations, res.residual)
        weights = res.weights
    users = profiles.sample_users(pool, weights, a.n, a.seed, replace=a.replace)
    _out("".join(dumps(u.to_record()) + "\n" for u in users), a.out)


# --- desire pool --------------------------------------------------------------------

def _read_queries(path: str) -> list[str]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            out.append(str(json.loads(line)["text"]))
        else:
            out.append(line.strip())
    return out


def cmd_pool_build(a):
    chat = _chat(a.backend, a.seed)
    embedder = _embedder(a.embedder)
    slug = desires.theme_slug(a.theme)
    entries, report = desires.build_entries(_read_queries(a.inp), slug, chat, embedder,
                                            dedup_threshold=a.threshold, ambiguity_filter=a.ambiguity_filter,
                                            workers=a.workers)
    out = Path(a.out)
    if (out / "pool.json").exists():
        # rebuilding a theme replaces its entries and keeps the others
        prior = [e for e in desires.DesirePool.load(out).entries if e.theme != slug]
        entries = sorted(prior + entries, key=lambda e: e.id)
    desires.DesirePool(entries).save(out)
    print(json.dumps(report.to_dict()))


def cmd_pool_query(a):
    pool = desires.DesirePool.load(a.pool)
    for e, score in pool.retrieve(a.text, a.k, _embedder(a.embedder)):
        print(f"{e.id}\t{score:.6f}\t{e.intent_text}")


# --- trajectories --------------------------------------------------------------------

def cmd_traj_ingest(a):
    registry = None
    if a.registry:
        registry = [x.strip() for x in Path(a.registry).read_text().splitlines() if x.strip()]
    trajs, reg = trajectory.ingest_checkins(trajectory.read_checkins_csv(a.inp), registry, source=a.inp)
    misses = 0
    if a.weather:
        ws = trajectory.FileWeatherSource(a.weather)
        done = []
        for t in trajs:
            t, n = trajectory.enrich_weather(t, ws)
            done.append(t)
            misses += n
        trajs = done
    if a.out:
        trajectory.save_trajectories(a.out, trajs)
    else:
        sys.stdout.write(trajectory.checkins_csv(trajs))
    log.info("%d trajectories, %d POIs, %d weather misses", len(trajs), len(reg), misses)


def cmd_traj_profile(a):
    trajs = trajectory.load_trajectories(a.inp)
    chat = _chat(a.backend, a.seed)
    for t in trajs:
        trajectory.pseudo_profile(t, chat)
    trajectory.save_trajectories(a.out or a.inp, trajs)


def cmd_traj_match(a):
    trajs = trajectory.load_trajectories(a.traj)
    embedder = _embedder(a.embedder)
    trajectory.embed_pseudo_profiles(trajs, embedder)
    rows = []
    for p in profiles.load_profiles(a.profiles).profiles:
        t, score = trajectory.match_profile(p, trajs, embedder)
        rows.append({"user_id": p.id, "trajectory_id": t.id, "score": round(score, 9)})
    _out("".join(dumps(r) + "\n" for r in rows), a.out)


# --- events ----------------------------------------------------------------------------

def _pick_profile(path: str, user: str | None) -> profiles.UserProfile:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("{") and "\n" not in text:
        return profiles.UserProfile.from_record(json.loads(text))
    pool = profiles.load_profiles(path)
    if user:
        return pool.get(user)
    if len(pool.profiles) != 1:
        raise ValueError(f"{path} holds {len(pool.profiles)} profiles; pick one with --user")
    return pool.profiles[0]


def cmd_simulate_events(a):
    from .events import TriggerConfig, generate_life_trajectory

    profile = _pick_profile(a.profile, a.user)
    trajs = trajectory.load_trajectories(a.traj)
    embedder = _embedder(a.embedder)
    if a.traj_id:
        traj = next((t for t in trajs if t.id == a.traj_id), None)
        if traj is None:
            raise ValueError(f"trajectory {a.traj_id!r} not in {a.traj}")
    elif len(trajs) == 1:
        traj = trajs[0]
    else:
        trajectory.embed_pseudo_profiles(trajs, embedder)
        traj, _ = trajectory.match_profile(profile, trajs, embedder)
    pool = desires.DesirePool.load(a.pool)
    evs = generate_life_trajectory(profile, traj.checkins, pool=pool, chat=_chat(a.backend, a.seed),
                                   embedder=embedder, seed=a.seed,
                                   cfg=TriggerConfig(a.scale, a.offset, a.dt_unit), max_events=a.n)
    _out("".join(dumps({"user_id": profile.id, "trajectory_id": traj.id, **e.to_record()}) + "\n" for e in evs),
         a.out)


# --- evaluation ---------------------------------------------------------------------------

def cmd_eval(a):
    from .evaluation.protocols import run_long_horizon_eval, run_single_scenario_eval
    from .scenario import load_benchmark

    bench = load_benchmark(a.benchmark)
    if not bench:
        raise ValueError(f"{a.benchmark}: empty benchmark")
    calls = CallLog()
    assistant = _chat(a.assistant, a.seed + 1, calls)
    judges = [_chat(j, a.seed + 10 + i, calls) for i, j in enumerate(a.judge or [DEFAULT_CHAT + "#judge"])]
    user = _chat(a.user, a.seed + 2, calls)
    embedder = _embedder(a.embedder)
    if a.protocol == "single":
        rep = run_single_scenario_eval(bench, assistant, judges, user_chat=user, embedder=embedder, seed=a.seed,
                                       max_turns=a.max_turns or 20, workers=a.workers)
    else:
        rep = run_long_horizon_eval(bench, assistant, judges, user_chat=user, embedder=embedder,
                                    memory=a.memory == "on", seed=a.seed, max_turns=a.max_turns or 3,
                                    workers=a.workers)
    if a.out:
        rep.save(a.out)
    print(json.dumps(rep.aggregates))


# --- gateway --------------------------------------------------------------------------------

def cmd_gateway_ping(a):
    calls = CallLog()
    chat = _chat(a.backend, 0, calls)
    t0 = time.perf_counter()
    reply = chat.chat(ChatRequest.single("Reply with the single word: pong", tag="ping", max_tokens=8))
    print(f"{chat.name}: {reply.strip()!r} in {time.perf_counter() - t0:.3f}s, retries={calls.retries()}")


# --- pipeline ----------------------------------------------------------------------------------

def _config(a):
    cfg = load_config(a.config)
    if getattr(a, "seed", None) is not None:
        cfg.seed = a.seed
    if getattr(a, "out", None):
        cfg.paths.out = str(Path(a.out).resolve())
    if getattr(a, "workers", None):
        cfg.workers = a.workers
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def cmd_validate_config(a):
    _config(a)
    print("config OK")


def cmd_run(a):
    from .pipeline import Pipeline

    cfg = _config(a)
    pipe = Pipeline(cfg)
    for r in pipe.run(through=a.stage, force=a.force):
        print(f"{r.stage}: {'skipped (up to date)' if r.skipped else 'done'}")
    print(f"config {cfg.config_hash} seed {cfg.seed} -> {pipe.out}")


def cmd_report(a):
    from .pipeline import Pipeline

    cfg = _config(a)
    r = Pipeline(cfg).run_stage("report", force=True)
    print(f"report: {len(r.outputs)} files")


# --- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lifesim", description="User simulation and assistant evaluation.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def backend_args(q, chat=True, embed=True):
        if chat:
            q.add_argument("--backend", default=DEFAULT_CHAT, help="chat backend spec or YAML file")
        if embed:
            q.add_argument("--embedder", default=DEFAULT_EMBED, help="embedding backend spec")

    prof = sub.add_parser("profiles").add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = prof.add_parser("validate")
    q.add_argument("file")
    q.set_defaults(fn=cmd_profiles_validate)
    q = prof.add_parser("sample")
    q.add_argument("file")
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--marginals")
    q.add_argument("--replace", action="store_true")
    q.add_argument("--out")
    q.set_defaults(fn=cmd_profiles_sample)

    pool = sub.add_parser("pool").add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = pool.add_parser("build")
    q.add_argument("--theme", required=True)
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--threshold", type=float, default=desires.DEFAULT_DEDUP_THRESHOLD)
    q.add_argument("--ambiguity-filter", action="store_true")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    backend_args(q)
    q.set_defaults(fn=cmd_pool_build)
    q = pool.add_parser("query")
    q.add_argument("text")
    q.add_argument("--pool", default="pool")
    q.add_argument("--k", type=int, default=3)
    backend_args(q, chat=False)
    q.set_defaults(fn=cmd_pool_query)

    traj = sub.add_parser("traj").add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = traj.add_parser("ingest")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out")
    q.add_argument("--registry")
    q.add_argument("--weather")
    q.set_defaults(fn=cmd_traj_ingest)
    q = traj.add_parser("profile")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out")
    q.add_argument("--seed", type=int, default=0)
    backend_args(q, embed=False)
    q.set_defaults(fn=cmd_traj_profile)
    q = traj.add_parser("match")
    q.add_argument("--profiles", required=True)
    q.add_argument("--traj", required=True)
    q.add_argument("--out")
    backend_args(q, chat=False)
    q.set_defaults(fn=cmd_traj_match)

    q = sub.add_parser("simulate-events")
    q.add_argument("--profile", required=True)
    q.add_argument("--user")
    q.add_argument("--traj", required=True)
    q.add_argument("--traj-id")
    q.add_argument("--pool", required=True)
    q.add_argument("--n", type=int, default=10, help="maximum number of events")
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--scale", type=float, default=1.0)
    q.add_argument("--offset", type=float, default=0.0)
    q.add_argument("--dt-unit", default="days")
    q.add_argument("--out")
    backend_args(q)
    q.set_defaults(fn=cmd_simulate_events)

    ev = sub.add_parser("eval").add_subparsers(dest="protocol", required=True, parser_class=_Parser)
    for name in ("single", "long"):
        q = ev.add_parser(name)
        q.add_argument("--benchmark", required=True)
        q.add_argument("--assistant", default=DEFAULT_CHAT + "#assistant")
        q.add_argument("--judge", action="append", help="repeat for an ensemble")
        q.add_argument("--user", default=DEFAULT_CHAT + "#user")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--max-turns", type=int)
        q.add_argument("--workers", type=int, default=1)
        q.add_argument("--out")
        if name == "long":
            q.add_argument("--memory", choices=("on", "off"), default="off")
        backend_args(q, chat=False)
        q.set_defaults(fn=cmd_eval)

    gw = sub.add_parser("gateway").add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = gw.add_parser("ping")
    q.add_argument("--backend", default=DEFAULT_CHAT)
    q.set_defaults(fn=cmd_gateway_ping)

    for name, fn in (("run", cmd_run), ("validate-config", cmd_validate_config), ("report", cmd_report)):
        q = sub.add_parser(name)
        q.add_argument("config")
        q.add_argument("--out")
        if name != "validate-config":
            q.add_argument("--seed", type=int)
            q.add_argument("--workers", type=int)
        if name == "run":
            q.add_argument("--stage", help="run every stage up to and including this one")
            q.add_argument("--force", action="store_true", help="rerun stages even when up to date")
        q.set_defaults(fn=fn)
    return p


def _in_chain(exc: BaseException, kind: type) -> bool:
    seen = set()
    while exc is not None and id(exc) not in seen:
        if isinstance(exc, kind):
            return True
        seen.add(id(exc))
        exc = getattr(exc, "cause", None) or exc.__cause__ or exc.__context__
    return False


def exit_code(exc: BaseException) -> int:
    if _in_chain(exc, BackendExhausted):
        return EXIT_BACKEND
    if isinstance(exc, (UsageError, ConfigError, RecordError, desires.DesireError, FileNotFoundError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as e:  # noqa: BLE001 - mapped onto exit codes
        code = exit_code(e)
        if code == EXIT_RUNTIME and args.verbose:
            log.exception("failed")
        print(f"error: {e}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
