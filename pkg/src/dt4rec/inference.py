"""Recommendation by prompting with a target reward, and offline rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import torch

from .datamodel import Trajectory
from .errors import CompatibilityError, ConfigError, InputShapeError
from .model import DT4Rec, collate
from .training import Checkpoint

RULES = ("max_constant", "decrementing_return_to_go")


@dataclass
class RecommendationPolicy:
    model: DT4Rec
    vocab_hash: str
    K: int
    max_steps: int
    rule: str = "max_constant"
    N: int | None = None
    allow_eos: bool = True
    prompt_value: float | None = None   # fixed prompt for every step, overrides the rule
    feedback: bool = False

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown target-reward rule {self.rule!r}")
        if self.N is None:
            self.N = self.model.cfg.action_len

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **kw) -> "RecommendationPolicy":
        return cls(ckpt.build_model(), ckpt.vocab_hash, ckpt.K,
                   ckpt.train_config["max_trajectory_length"], **kw)

    def check_vocab(self, vocab_hash: str | None):
        if vocab_hash is not None and vocab_hash != self.vocab_hash:
            raise CompatibilityError(
                f"checkpoint vocabulary {self.vocab_hash} does not match dataset vocabulary {vocab_hash}")

    def prompts(self, observed_rewards: Sequence[int], n_steps: int) -> list[float]:
        """Prompt values for steps 1..n_steps given the rewards logged so far."""
        if self.prompt_value is not None:
            return [float(self.prompt_value)] * n_steps
        if self.rule == "max_constant":
            return [float(self.K * (self.max_steps - i)) for i in range(n_steps)]
        out, g = [], float(self.K * self.max_steps)
        for i in range(n_steps):
            out.append(g)
            if i < len(observed_rewards):
                g -= observed_rewards[i]
        return out


@dataclass
class RolloutRecord:
    user: object
    round: int
    generated: list
    logged: list
    logged_reward: int


def _prefix_trajectory(history, current_state, user=None) -> Trajectory:
    from .datamodel import Step
    steps = [Step(0, tuple(s), tuple(a)) for _, s, a in history]
    steps.append(Step(0, tuple(current_state), ()))
    rewards = [int(r) for r, _, _ in history] + [0]
    return Trajectory(user, tuple(steps), tuple(rewards))


@torch.no_grad()
def _step_predictions(policy: RecommendationPolicy, trajs: Sequence[Trajectory]) -> torch.Tensor:
    model = policy.model
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = collate(trajs, model.cfg.state_len, model.cfg.action_len, dtype=dtype)
    T = batch.rtg.shape[1]
    for b, t in enumerate(trajs):
        batch.rtg[b, : len(t)] = torch.tensor(policy.prompts(t.rewards, len(t)), dtype=dtype)
    s, a = model.encode(batch)
    return model.action_embeddings(batch.rtg, s, a, batch.step_mask), batch.step_mask, T


def recommend(policy: RecommendationPolicy, history, current_state, vocab_hash: str | None = None) -> list[int]:
    """Items for the next round. ``history`` holds (logged reward, state, action) triples."""
    policy.check_vocab(vocab_hash)
    if len(history) >= policy.max_steps:
        raise InputShapeError(f"history of {len(history)} steps leaves no room within T={policy.max_steps}")
    traj = _prefix_trajectory(history, current_state)
    a_tilde, _, _ = _step_predictions(policy, [traj])
    return policy.model.decoder.greedy(a_tilde[:, len(history)], policy.N, policy.allow_eos)[0]


def rollout(policy: RecommendationPolicy, trajectories: Sequence[Trajectory],
            vocab_hash: str | None = None, batch_size: int = 64) -> list[RolloutRecord]:
    """One generated list per (user, round), conditioned on the logged history."""
    policy.check_vocab(vocab_hash)
    trajs = [t.truncated(policy.max_steps) for t in trajectories]
    if policy.feedback:
        return _feedback_rollout(policy, trajs)
    out = []
    for i in range(0, len(trajs), batch_size):
        chunk = trajs[i:i + batch_size]
        a_tilde, mask, _ = _step_predictions(policy, chunk)
        flat = a_tilde[mask]
        gen = policy.model.decoder.greedy(flat, policy.N, policy.allow_eos)
        k = 0
        for t in chunk:
            for r in range(len(t)):
                out.append(RolloutRecord(t.user_id, r + 1, gen[k], list(t.actions[r]), int(t.rewards[r])))
                k += 1
    return out


def _feedback_rollout(policy: RecommendationPolicy, trajs) -> list[RolloutRecord]:
    out = []
    for t in trajs:
        history = []
        for r in range(len(t)):
            items = recommend(policy, history, t.states[r])
            out.append(RolloutRecord(t.user_id, r + 1, items, list(t.actions[r]), int(t.rewards[r])))
            history.append((t.rewards[r], t.states[r], items[: policy.N - 1]))
    return out


def write_rollouts(records: Sequence[RolloutRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True, separators=(",", ":")) + "\n")
    return path


def read_rollouts(path) -> list[RolloutRecord]:
    with Path(path).open() as fh:
        return [RolloutRecord(**json.loads(line)) for line in fh if line.strip()]
