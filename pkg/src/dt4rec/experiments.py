"""Experiment drivers shared by the CLI, scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .datamodel import ItemVocabulary
from .evaluation import MetricReport, RewardModel, evaluate_records, mb_urs, train_reward_model
from .ingest import (
    DatasetSplit, SyntheticWorld, events_to_trajectories, filter_low_reward_steps,
    resample_high_proportion, split_dataset, synth_generate,
)
from .inference import RecommendationPolicy, rollout
from .training import Checkpoint, train

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    split: DatasetSplit
    vocab: ItemVocabulary
    K: int
    world: SyntheticWorld | None = None
    n_events: int | None = None


def synth_dataset(run: RunConfig) -> PreparedData:
    run.validate()
    world = synth_generate(run.synth)
    trajs, vocab = events_to_trajectories(world.events, run.data, run.train.max_trajectory_length,
                                          horizon=world.horizon, state_window=run.model.state_len)
    split = split_dataset(trajs, run.data.fractions, run.data.split_seed)
    return PreparedData(split, vocab, run.data.K, world, len(world.events))


def train_variant(data: PreparedData, run: RunConfig, ablations: Sequence[str] = (),
                  train_split=None, log_path=None, checkpoint_dir=None) -> Checkpoint:
    tcfg = dataclasses.replace(run.train, ablations=tuple(ablations))
    split = data.split if train_split is None else dataclasses.replace(data.split, train=list(train_split))
    return train(split, run.model, tcfg, len(data.vocab), data.K, data.vocab.digest(),
                 log_path=log_path, checkpoint_dir=checkpoint_dir)


def fit_reward_model(data: PreparedData, run: RunConfig) -> RewardModel:
    ev = run.eval
    return train_reward_model(data.split.validation, len(data.vocab), run.model,
                              run.train.max_trajectory_length, data.K, epochs=ev.reward_model_epochs,
                              lr=ev.reward_model_lr, batch_size=ev.reward_model_batch_size,
                              seed=run.train.seed, weight_decay=run.train.weight_decay,
                              vocab_hash=data.vocab.digest(), holdout=ev.reward_model_holdout)


def make_policy(ckpt: Checkpoint, run: RunConfig, prompt_value=None) -> RecommendationPolicy:
    return RecommendationPolicy.from_checkpoint(ckpt, rule=run.eval.target_rule, prompt_value=prompt_value,
                                                feedback=run.eval.feedback_rollout)


def evaluate_checkpoint(ckpt: Checkpoint, data: PreparedData, reward_model: RewardModel, run: RunConfig,
                        prompt_value=None) -> tuple[MetricReport, list]:
    policy = make_policy(ckpt, run, prompt_value)
    records = rollout(policy, data.split.test, vocab_hash=data.vocab.digest())
    report = evaluate_records(records, data.split.test, reward_model, data.K, run.eval,
                              config_echo={"variant": ckpt.meta.get("variant"),
                                           "prompt_value": prompt_value,
                                           "target_rule": run.eval.target_rule})
    return report, records


def mb_urs_of(ckpt: Checkpoint, data: PreparedData, reward_model: RewardModel, run: RunConfig,
              prompt_value=None) -> float:
    policy = make_policy(ckpt, run, prompt_value)
    records = rollout(policy, data.split.test, vocab_hash=data.vocab.digest())
    return mb_urs(records, data.split.test, reward_model)


def retention_comparison(run: RunConfig, variants=("full", "no_reward", "no_contrastive")) -> dict:
    """MB-URS of several trained variants (and the zero prompt) on one synthetic world."""
    data = synth_dataset(run)
    rm = fit_reward_model(data, run)
    out = {}
    for v in variants:
        ckpt = train_variant(data, run, () if v == "full" else (v,))
        out[v] = mb_urs_of(ckpt, data, rm, run)
        if v == "full":
            out["full@zero"] = mb_urs_of(ckpt, data, rm, run, prompt_value=0.0)
    return out


def _train_and_evaluate(job):
    data, run, ablations, train_set, rm = job
    ckpt = train_variant(data, run, ablations, train_split=train_set)
    report, _ = evaluate_checkpoint(ckpt, data, rm, run)
    return report.values


def run_jobs(fn, jobs_list, jobs: int = 1) -> list:
    """Apply ``fn`` to each job, optionally in worker processes; results keep job order."""
    if jobs <= 1 or len(jobs_list) <= 1:
        return [fn(j) for j in jobs_list]
    with ProcessPoolExecutor(max_workers=jobs, initializer=set_threads) as pool:
        return list(pool.map(fn, jobs_list))


def ood_experiment(data: PreparedData, run: RunConfig, reward_model: RewardModel | None = None,
                   jobs: int = 1) -> dict:
    """Train on the original data and on Data-B (low-reward steps removed) and evaluate both."""
    rm = reward_model or fit_reward_model(data, run)
    data_b = filter_low_reward_steps(data.split.train, run.eval.ood_threshold)
    sets = {"original": data.split.train, "data_b": data_b}
    values = run_jobs(_train_and_evaluate,
                      [(data, run, ("no_contrastive",), ts, rm) for ts in sets.values()], jobs)
    return {"threshold": run.eval.ood_threshold,
            "samples": {k: sum(len(t) for t in ts) for k, ts in sets.items()},
            "runs": dict(zip(sets, values))}


def bc_experiment(data: PreparedData, run: RunConfig, reward_model: RewardModel | None = None,
                  jobs: int = 1) -> dict:
    """Vary the share of high-reward steps in training and evaluate each model."""
    rm = reward_model or fit_reward_model(data, run)
    sets = [resample_high_proportion(data.split.train, p, run.eval.bc_high_min, seed=run.train.seed)
            for p in run.eval.bc_proportions]
    values = run_jobs(_train_and_evaluate, [(data, run, (), ts, rm) for ts in sets], jobs)
    rows = {str(p): dict(v, samples=sum(len(t) for t in ts))
            for p, ts, v in zip(run.eval.bc_proportions, sets, values)}
    return {"high_min": run.eval.bc_high_min, "proportions": rows}


def desk_config(seed: int = 0) -> RunConfig:
    """Desk-scale configuration used by the direction-of-effect experiments.

    Satisfaction is driven by a hidden per-item quality flag, which gives the reward
    model an action effect it can learn from about 50 validation users. The
    contrastive weight is small because the raw dot-product similarity of d=32
    decoder states swamps the cross-entropy at larger values.
    """
    run = RunConfig()
    run.synth = dataclasses.replace(run.synth, n_users=200, n_items=100, n_genres=10, n_days=90,
                                    preference_sharpness=5.0, popularity_exponent=1.0,
                                    quality_weight=1.0, quality_share=0.5, link_min=0.05, link_max=0.95,
                                    seed=seed)
    run.data.split_seed = seed
    run.model = dataclasses.replace(run.model, d=32, n_heads=4, last_valid_state=True)
    run.train = dataclasses.replace(run.train, epochs=30, batch_size=4, learning_rate=0.003, beta=0.003,
                                    seed=seed)
    run.eval = dataclasses.replace(run.eval, reward_model_lr=0.003, reward_model_batch_size=8,
                                   reward_model_epochs=12, variance_seed=seed)
    return run


def set_threads(n: int = 1):
    torch.set_num_threads(n)
    np.seterr(all="ignore")
