"""Original-vs-Data-B and high-reward-share experiments on the desk world.

    python3 scripts/ood_and_bc.py --seed 0 --jobs 2
"""

import argparse
import json

from dt4rec.config import apply_override
from dt4rec.experiments import bc_experiment, desk_config, fit_reward_model, ood_experiment, set_threads, synth_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    args = ap.parse_args()
    set_threads(1)
    run = desk_config(args.seed)
    for assignment in args.set:
        apply_override(run, assignment)
    data = synth_dataset(run.validate())
    rm = fit_reward_model(data, run)
    result = {"ood": ood_experiment(data, run, rm, jobs=args.jobs), "bc": bc_experiment(data, run, rm, jobs=args.jobs)}
    print(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
