"""Train one model on the desk world and report each metric over N user splits of the test set.

    python3 scripts/variance_splits.py --splits 5 --seed 0
"""

import argparse
import json

from dt4rec.config import apply_override
from dt4rec.experiments import desk_config, evaluate_checkpoint, fit_reward_model, set_threads, synth_dataset, train_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splits", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    args = ap.parse_args()
    set_threads(1)
    run = desk_config(args.seed)
    run.eval.variance_splits = args.splits
    for assignment in args.set:
        apply_override(run, assignment)
    data = synth_dataset(run.validate())
    rm = fit_reward_model(data, run)
    report, _ = evaluate_checkpoint(train_variant(data, run), data, rm, run)
    print(json.dumps({"metrics": report.values, "variance": report.variance}, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
