import numpy as np
import pytest
import torch

from dt4rec.config import TrainConfig
from dt4rec.datamodel import BOS, EOS, PAD
from dt4rec.errors import CompatibilityError, ConfigError, InputShapeError
from dt4rec.inference import RecommendationPolicy, read_rollouts, recommend, rollout, write_rollouts
from dt4rec.training import train

from helpers import random_trajectories, split_of


@pytest.fixture(scope="module")
def ckpt():
    from dt4rec.config import ModelConfig
    cfg = ModelConfig(d=8, n_buckets=4, n_heads=2, n_layers=1, dropout=0.0, state_len=4, action_len=4)
    tcfg = TrainConfig(max_trajectory_length=10, epochs=2, batch_size=4, n_neg=1, seed=0)
    data = split_of(random_trajectories(np.random.default_rng(0), 8, 10, 15))
    return train(data, cfg, tcfg, 15, 7, vocab_hash="vh")


def test_prompt_rules(ckpt):
    pol = RecommendationPolicy.from_checkpoint(ckpt)
    assert pol.prompts([], 1) == [70.0]
    assert pol.prompts([5, 2], 3) == [70.0, 63.0, 56.0]
    dec = RecommendationPolicy.from_checkpoint(ckpt, rule="decrementing_return_to_go")
    assert dec.prompts([5, 2], 3) == [70.0, 65.0, 63.0]
    fixed = RecommendationPolicy.from_checkpoint(ckpt, prompt_value=0.0)
    assert fixed.prompts([5], 2) == [0.0, 0.0]
    with pytest.raises(ConfigError):
        RecommendationPolicy.from_checkpoint(ckpt, rule="median")


def test_recommend(ckpt):
    pol = RecommendationPolicy.from_checkpoint(ckpt)
    items = recommend(pol, [], [3, 4], vocab_hash="vh")
    assert len(items) <= pol.N
    assert not {PAD, BOS, EOS} & set(items)
    assert items == recommend(pol, [], [3, 4])
    with pytest.raises(CompatibilityError):
        recommend(pol, [], [3], vocab_hash="other")
    with pytest.raises(InputShapeError):
        recommend(pol, [(1, [3], [4])] * 10, [3])


def test_rollout_counts_and_agreement_with_recommend(ckpt):
    pol = RecommendationPolicy.from_checkpoint(ckpt)
    trajs = random_trajectories(np.random.default_rng(7), 5, 4, 15)
    recs = rollout(pol, trajs, vocab_hash="vh", batch_size=2)
    assert len(recs) == 20
    for r in recs:
        assert len(r.generated) <= pol.N and not {PAD, BOS, EOS} & set(r.generated)
    t = trajs[1]
    history = [(t.rewards[i], t.states[i], t.actions[i]) for i in range(2)]
    single = recommend(pol, history, t.states[2])
    assert single == [r for r in recs if r.user == t.user_id and r.round == 3][0].generated
    one_step = [x.truncated(1) for x in trajs]
    assert [r.round for r in rollout(pol, one_step)] == [1] * 5


def test_rollouts_are_reproducible_and_serializable(ckpt, tmp_path):
    trajs = random_trajectories(np.random.default_rng(7), 3, 3, 15)
    a = rollout(RecommendationPolicy.from_checkpoint(ckpt), trajs)
    b = rollout(RecommendationPolicy.from_checkpoint(ckpt), trajs)
    assert a == b
    write_rollouts(a, tmp_path / "r.jsonl")
    assert read_rollouts(tmp_path / "r.jsonl") == a
    write_rollouts(b, tmp_path / "r2.jsonl")
    assert (tmp_path / "r.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()


def test_feedback_rollout(ckpt):
    trajs = random_trajectories(np.random.default_rng(3), 2, 3, 15)
    recs = rollout(RecommendationPolicy.from_checkpoint(ckpt, feedback=True), trajs)
    assert len(recs) == 6
    logged = rollout(RecommendationPolicy.from_checkpoint(ckpt), trajs)
    # the first round has no history, so both modes agree there
    assert [r.generated for r in recs if r.round == 1] == [r.generated for r in logged if r.round == 1]
