"""MB-URS of the full model, DT4Rec-R and the no-contrastive ablation over several seeds.

    python3 scripts/retention_comparison.py --seeds 0 1 2 3 4 --out runs/retention
"""

import argparse
import json
import time
from pathlib import Path

from dt4rec.config import apply_override
from dt4rec.experiments import desk_config, retention_comparison, set_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    ap.add_argument("--out", default="runs/retention")
    args = ap.parse_args()
    set_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for seed in args.seeds:
        run = desk_config(seed)
        for assignment in args.set:
            apply_override(run, assignment)
        t0 = time.time()
        rows[seed] = retention_comparison(run.validate())
        print(seed, {k: round(v, 3) for k, v in rows[seed].items()}, f"{time.time() - t0:.0f}s", flush=True)
    wins = {
        "full > no_reward": sum(r["full"] > r["no_reward"] for r in rows.values()),
        "max prompt > zero prompt": sum(r["full"] > r["full@zero"] for r in rows.values()),
        "full > no_contrastive": sum(r["full"] > r["no_contrastive"] for r in rows.values()),
    }
    for name, n in wins.items():
        print(f"{name}: {n}/{len(rows)} seeds")
    (out / "retention.json").write_text(json.dumps({"seeds": rows, "wins": wins}, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
