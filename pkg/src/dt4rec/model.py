"""The assembled sequence model and trajectory batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .action_decoder import ActionDecoder, make_targets
from .config import ModelConfig
from .datamodel import PAD, Trajectory
from .decision_block import DecisionBlock
from .encoders import StateActionEncoder
from .reward_prompt import AutoDiscretizedPrompt, NaivePrompt


@dataclass
class Batch:
    rtg: torch.Tensor           # (B, T) return-to-go
    rewards: torch.Tensor       # (B, T) per-step rewards
    states: torch.Tensor        # (B, T, state_len)
    actions: torch.Tensor       # (B, T, action_len)
    targets: torch.Tensor       # (B, T, action_len) items + eos + pad
    step_mask: torch.Tensor     # (B, T)
    users: list
    neg_rtg: torch.Tensor | None = None    # (B, n_neg, T)
    neg_kappa: torch.Tensor | None = None  # (B, n_neg)

    @property
    def target_mask(self) -> torch.Tensor:
        """Real-item and eos positions of valid steps."""
        return (self.targets != PAD) & self.step_mask.unsqueeze(-1)


def _fit_state(state: Sequence[int], n: int) -> list[int]:
    s = list(state)[-n:]
    return s + [PAD] * (n - len(s))


def collate(trajectories: Sequence[Trajectory], state_len: int, action_len: int,
            negatives: Sequence[Sequence] | None = None, dtype=torch.float32) -> Batch:
    """Left-aligned batch of trajectories. Actions longer than ``action_len - 1`` are cut."""
    B = len(trajectories)
    T = max(len(t) for t in trajectories)
    rtg = torch.zeros(B, T, dtype=dtype)
    rewards = torch.zeros(B, T, dtype=torch.long)
    states = torch.full((B, T, state_len), PAD, dtype=torch.long)
    actions = torch.full((B, T, action_len), PAD, dtype=torch.long)
    targets = torch.full((B, T, action_len), PAD, dtype=torch.long)
    mask = torch.zeros(B, T, dtype=torch.bool)
    for b, traj in enumerate(trajectories):
        n = len(traj)
        rtg[b, :n] = torch.tensor(traj.returns_to_go, dtype=dtype)
        rewards[b, :n] = torch.tensor(traj.rewards)
        mask[b, :n] = True
        for t, step in enumerate(traj.steps):
            states[b, t] = torch.tensor(_fit_state(step.state, state_len))
            act = list(step.action)[: action_len - 1]
            actions[b, t] = torch.tensor(act + [PAD] * (action_len - len(act)))
            targets[b, t] = torch.tensor(make_targets(act, action_len))
    neg_rtg = neg_kappa = None
    if negatives is not None:
        n_neg = len(negatives[0])
        neg_rtg = torch.zeros(B, n_neg, T, dtype=dtype)
        neg_kappa = torch.zeros(B, n_neg, dtype=dtype)
        for b, negs in enumerate(negatives):
            for j, neg in enumerate(negs):
                neg_rtg[b, j, : len(neg.replaced_rewards)] = torch.tensor(neg.replaced_rewards, dtype=dtype)
                neg_kappa[b, j] = neg.kappa
    return Batch(rtg, rewards, states, actions, targets, mask,
                 [t.user_id for t in trajectories], neg_rtg, neg_kappa)


class DT4Rec(nn.Module):
    def __init__(self, vocab_size: int, cfg: ModelConfig, max_steps: int = 50,
                 ablations: Sequence[str] = ()):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.ablations = tuple(ablations)
        d = cfg.d
        scale = 1.0 / cfg.prompt_max if cfg.normalize_prompt and cfg.prompt_max > 0 else 1.0
        self.encoder = StateActionEncoder(vocab_size, d, cfg.state_len, cfg.action_len,
                                          share=cfg.share_encoders,
                                          last_valid_state=cfg.last_valid_state)
        if "naive_prompt" in self.ablations:
            self.prompt = NaivePrompt(d, scale)
        else:
            self.prompt = AutoDiscretizedPrompt(d, cfg.n_buckets, cfg.alpha, cfg.leaky_slope, scale)
        if "no_reward" in self.ablations:
            self.reward_token = nn.Parameter(torch.randn(d) * 0.02)
        self.block = DecisionBlock(d, cfg.n_layers, cfg.n_heads, max_steps, cfg.dropout)
        self.decoder = ActionDecoder(self.encoder.embedding, d, vocab_size)

    @property
    def uses_reward(self) -> bool:
        return "no_reward" not in self.ablations

    def reward_embeddings(self, rtg: torch.Tensor) -> torch.Tensor:
        if not self.uses_reward:
            return self.reward_token.expand(*rtg.shape, -1)
        return self.prompt(rtg)

    def encode(self, batch: Batch):
        return self.encoder(batch.states, "state"), self.encoder(batch.actions, "action")

    def action_embeddings(self, rtg, state_embs, action_embs, step_mask=None) -> torch.Tensor:
        """Predicted action embeddings, one per step, read at the state tokens."""
        tok = self.block.interleave(self.reward_embeddings(rtg), state_embs, action_embs,
                                    step_mask=step_mask)
        return self.block(tok, read="state")

    def decode_train(self, a_tilde: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        return self.decoder.teacher_forced(a_tilde, targets)

    def forward(self, batch: Batch, rtg: torch.Tensor | None = None, encoded=None):
        """Teacher-forced predicted item embeddings (B, T, N, d) and their logits."""
        s, a = encoded if encoded is not None else self.encode(batch)
        a_tilde = self.action_embeddings(batch.rtg if rtg is None else rtg, s, a, batch.step_mask)
        V = self.decode_train(a_tilde, batch.targets)
        return V, self.decoder.logits(V)
