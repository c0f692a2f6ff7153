"""Regenerate the synthetic input corpus under tests/fixtures.

Everything here is seeded; rerunning produces byte-identical files.
"""

import argparse
from pathlib import Path

import yaml

from lifesim.desires import THEMES
from lifesim.records import write_jsonl
from lifesim.synthetic import synthetic_checkins, synthetic_profiles, synthetic_queries, synthetic_weather
from lifesim.trajectory import checkins_csv, ingest_checkins

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "tests" / "fixtures"))
    ap.add_argument("--seed", type=int, default=7)
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    write_jsonl(out / "profiles.jsonl", [p.to_record() for p in synthetic_profiles(120, a.seed)])
    (out / "marginals.yaml").write_text(yaml.safe_dump({"marginals": {
        "gender": {"Male": 0.49, "Female": 0.51},
        "age": {"Youth (18-35 years old)": 0.30, "Middle-aged (36-55 years old)": 0.34,
                "Senior (56+ years old)": 0.36},
    }}, sort_keys=True))

    rows = synthetic_checkins(24, a.seed)
    trajs, _ = ingest_checkins(rows)
    (out / "checkins.csv").write_text(checkins_csv(trajs))

    # leave the last date of each city without weather so misses are exercised
    by_city: dict[str, set] = {}
    for t in trajs:
        by_city.setdefault(t.city, set()).update(c.local_date for c in t.checkins)
    weather = []
    for city, dates in sorted(by_city.items()):
        weather += synthetic_weather([city], sorted(dates)[:-1], a.seed)
    write_jsonl(out / "weather.jsonl", weather)

    queries = []
    for i, theme in enumerate(THEMES):
        queries += [{"theme": theme, "text": q} for q in synthetic_queries(theme, 30, a.seed + i)]
    write_jsonl(out / "queries.jsonl", queries)
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
