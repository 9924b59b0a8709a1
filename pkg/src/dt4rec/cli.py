"""Command-line entry point: ``dt4rec <command> [options]``.

Every command reads one run configuration (defaults, then ``--config``, then
``--seed``/``--set`` overrides), echoes the resolved configuration into its output
directory and writes deterministic, versioned artifacts there.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from .config import ABLATIONS, RunConfig, apply_override
from .errors import EXIT_IO, CompatibilityError, ConfigError, DT4RecError
from .experiments import (
    PreparedData, bc_experiment, evaluate_checkpoint, fit_reward_model, ood_experiment, set_threads,
    train_variant,
)
from .evaluation import METRICS, load_reward_model, reward_model_checkpoint
from .inference import write_rollouts
from .ingest import (
    events_to_trajectories, parse_log, read_bundle, split_dataset, synth_generate, write_bundle,
)
from .training import Checkpoint

log = logging.getLogger("dt4rec")

OUT_ENV = "DT4REC_OUT"
OUTPUT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def resolve_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run.synth.seed = args.seed
        run.data.split_seed = args.seed
        run.train.seed = args.seed
        run.eval.variance_seed = args.seed
    for assignment in args.set or ():
        apply_override(run, assignment)
    if getattr(args, "variance", None) is not None:
        run.eval.variance_splits = args.variance
    if getattr(args, "proportions", None):
        run.eval.bc_proportions = tuple(int(p) if float(p).is_integer() else p for p in args.proportions)
    if getattr(args, "ablate", None):
        run.train.ablations = tuple(dict.fromkeys(run.train.ablations + tuple(args.ablate)))
    return run.validate()


def output_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(out: Path, run: RunConfig, command: str, extra: dict | None = None):
    (out / "config.json").write_text(run.dumps() + "\n")
    (out / "run.json").write_text(_dumps({"command": command, "output_version": OUTPUT_VERSION, **(extra or {})}))


def _prepared(bundle_path, run: RunConfig) -> PreparedData:
    bundle = read_bundle(bundle_path)
    if bundle.K != run.data.K:
        raise CompatibilityError(f"bundle was built with K={bundle.K}, config has K={run.data.K}")
    return PreparedData(bundle.split, bundle.vocab, bundle.K)


def _bundle_summary(path: Path) -> dict:
    return json.loads((path / "stats.json").read_text())


# ---------------------------------------------------------------- commands

def cmd_synth(args, run: RunConfig, out: Path) -> dict:
    world = synth_generate(run.synth)
    trajs, vocab = events_to_trajectories(world.events, run.data, run.train.max_trajectory_length,
                                          horizon=world.horizon, state_window=run.model.state_len)
    split = split_dataset(trajs, run.data.fractions, run.data.split_seed)
    write_bundle(out, split, vocab, run.data.K, world=world, n_events=len(world.events))
    echo_config(out, run, "synth")
    return _bundle_summary(out)


def cmd_ingest(args, run: RunConfig, out: Path) -> dict:
    path = args.log or run.data.log_path
    if not path:
        raise ConfigError("no interaction log given (--log or data.log_path)")
    events = parse_log(path, delimiter=run.data.delimiter)
    if not events:
        raise ConfigError(f"interaction log {path} holds no events")
    trajs, vocab = events_to_trajectories(events, run.data, run.train.max_trajectory_length,
                                          state_window=run.model.state_len)
    if not trajs:
        raise ConfigError("no user has a complete recommendation round after filtering")
    split = split_dataset(trajs, run.data.fractions, run.data.split_seed)
    write_bundle(out, split, vocab, run.data.K, n_events=len(events))
    echo_config(out, run, "ingest", {"log": str(path)})
    return _bundle_summary(out)


def cmd_train(args, run: RunConfig, out: Path) -> dict:
    data = _prepared(args.data, run)
    ckpt = train_variant(data, run, run.train.ablations, log_path=out / "train_log.jsonl",
                         checkpoint_dir=out / "checkpoints")
    ckpt.save(out / "model.ckpt")
    echo_config(out, run, "train", {"data": str(args.data)})
    return {"variant": ckpt.meta["variant"], "final_loss": ckpt.loss_history[-1]["loss"],
            "checkpoint": str(out / "model.ckpt")}


def _reward_model(args, data: PreparedData, run: RunConfig, out: Path):
    if args.reward_model:
        rm = load_reward_model(Checkpoint.load(args.reward_model))
        if rm.vocab_hash != data.vocab.digest():
            raise CompatibilityError("reward model was trained on a different vocabulary")
        return rm
    rm = fit_reward_model(data, run)
    reward_model_checkpoint(rm).save(out / "reward_model.ckpt")
    return rm


def cmd_evaluate(args, run: RunConfig, out: Path) -> dict:
    data = _prepared(args.data, run)
    ckpt = Checkpoint.load(args.checkpoint)
    if ckpt.vocab_hash != data.vocab.digest():
        raise CompatibilityError(
            f"checkpoint vocabulary {ckpt.vocab_hash} does not match dataset vocabulary {data.vocab.digest()}")
    rm = _reward_model(args, data, run, out)
    report, records = evaluate_checkpoint(ckpt, data, rm, run, prompt_value=args.prompt)
    report.write(out)
    write_rollouts(records, out / "rollouts.jsonl")
    echo_config(out, run, "evaluate", {"data": str(args.data), "checkpoint": str(args.checkpoint),
                                       "prompt": args.prompt})
    return report.values


def _table(rows: list[tuple[str, dict]], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", *columns])
    for name, values in rows:
        w.writerow([name, *("" if values.get(c) is None else f"{values[c]:.10g}" for c in columns)])
    return buf.getvalue()


def _rounded(obj):
    if isinstance(obj, float):
        return float(f"{obj:.10g}")
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    return obj


def cmd_ood(args, run: RunConfig, out: Path) -> dict:
    data = _prepared(args.data, run)
    rm = _reward_model(args, data, run, out)
    result = _rounded(ood_experiment(data, run, rm, jobs=args.jobs))
    (out / "ood.json").write_text(_dumps(result))
    rows = [(name, dict(vals, samples=result["samples"][name])) for name, vals in result["runs"].items()]
    (out / "ood.csv").write_text(_table(rows, ("samples", *METRICS)))
    echo_config(out, run, "ood", {"data": str(args.data)})
    return result


def cmd_bc(args, run: RunConfig, out: Path) -> dict:
    data = _prepared(args.data, run)
    rm = _reward_model(args, data, run, out)
    result = _rounded(bc_experiment(data, run, rm, jobs=args.jobs))
    (out / "bc.json").write_text(_dumps(result))
    (out / "bc.csv").write_text(_table(list(result["proportions"].items()), ("samples", *METRICS)))
    echo_config(out, run, "bc", {"data": str(args.data)})
    return result


def cmd_report(args, run: RunConfig, out: Path) -> dict:
    """Collect metrics.json files below the given run directories into one table."""
    rows = []
    for root in args.runs:
        root = Path(root)
        if not root.exists():
            raise FileNotFoundError(f"run directory not found: {root}")
        for path in sorted(root.rglob("metrics.json")):
            body = json.loads(path.read_text())
            rows.append((str(path.parent), body["metrics"]))
    if not rows:
        raise ConfigError("no metrics.json found under the given run directories")
    (out / "report.csv").write_text(_table(rows, METRICS))
    (out / "report.json").write_text(_dumps({name: vals for name, vals in rows}))
    return {"runs": len(rows)}


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate,
    "ood": cmd_ood, "bc": cmd_bc, "report": cmd_report,
}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run configuration")
    common.add_argument("--seed", type=int, help="seed for world, split, training and variance partitions")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    common.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one configuration field; repeatable")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dt4rec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="simulate a synthetic world and write a dataset bundle")
    p = sub.add_parser("ingest", parents=[common], help="turn an interaction log into a dataset bundle")
    p.add_argument("--log", help="delimited user,item,timestamp log")

    def with_data(p):
        p.add_argument("--data", required=True, help="dataset bundle directory")

    def with_rm(p):
        p.add_argument("--reward-model", help="reuse a saved reward model instead of fitting one")

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset bundle")
    with_data(p)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, help="ablation flag; repeatable")
    p = sub.add_parser("evaluate", parents=[common], help="roll out a checkpoint and compute all metrics")
    with_data(p)
    with_rm(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variance", type=int, metavar="N", help="also report metrics on N user splits")
    p.add_argument("--prompt", type=float, help="fixed reward prompt for every step")
    p = sub.add_parser("ood", parents=[common], help="original vs Data-B training comparison")
    with_data(p)
    with_rm(p)
    p = sub.add_parser("bc", parents=[common], help="vary the share of high-reward training steps")
    with_data(p)
    with_rm(p)
    p.add_argument("--proportions", type=float, nargs="+", metavar="PCT")
    p = sub.add_parser("report", parents=[common], help="tabulate metrics from finished runs")
    p.add_argument("runs", nargs="+", help="run directories to scan for metrics.json")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_threads(1)
    try:
        run = resolve_config(args)
        out = output_dir(args)
        summary = COMMANDS[args.command](args, run, out)
    except DT4RecError as exc:
        print(f"dt4rec {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"dt4rec {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"dt4rec {args.command}: malformed JSON: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    print(json.dumps(_rounded(summary), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
