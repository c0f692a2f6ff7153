"""Run the golden configuration and compare the output tree with tests/golden/tree.

    python3 scripts/run_golden.py            # compare, exit 1 on any difference
    python3 scripts/run_golden.py --update   # regenerate the checked-in tree
"""

import argparse
import shutil
import sys
import tempfile
import time
from pathlib import Path

from lifesim.config import load_config
from lifesim.pipeline import Pipeline, tree_digest

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "tests" / "golden"


def run(out: Path, workers: int | None = None) -> float:
    cfg = load_config(GOLDEN / "config.yaml")
    if workers:
        cfg.workers = workers
    t0 = time.perf_counter()
    Pipeline(cfg, out).run()
    return time.perf_counter() - t0


def compare(a: Path, b: Path) -> list[str]:
    da, db = tree_digest(a), tree_digest(b)
    problems = [f"missing: {k}" for k in sorted(set(db) - set(da))]
    problems += [f"unexpected: {k}" for k in sorted(set(da) - set(db))]
    problems += [f"differs: {k}" for k in sorted(set(da) & set(db)) if da[k] != db[k]]
    return problems


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--update", action="store_true")
    ap.add_argument("--workers", type=int)
    a = ap.parse_args()
    tree = GOLDEN / "tree"
    if a.update:
        if tree.exists():
            shutil.rmtree(tree)
        secs = run(tree, a.workers)
        print(f"golden tree regenerated in {secs:.1f}s: {len(tree_digest(tree))} files")
        return 0
    with tempfile.TemporaryDirectory() as tmp:
        secs = run(Path(tmp) / "out", a.workers)
        problems = compare(Path(tmp) / "out", tree)
    for p in problems:
        print(p)
    print(f"{'FAIL' if problems else 'PASS'} golden run ({secs:.1f}s, {len(problems)} differences)")
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
