"""Reward prompt: maps a scalar return-to-go to a d-dimensional embedding.

The auto-discretized prompt scores ``B`` learnable meta-embeddings from the raw reward
and returns their softmax-weighted mix, so nearby rewards get nearby embeddings.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .errors import NumericError


class AutoDiscretizedPrompt(nn.Module):
    def __init__(self, d: int, n_buckets: int = 10, alpha: float = 0.1,
                 leaky_slope: float = 0.01, scale: float = 1.0):
        super().__init__()
        self.alpha = alpha
        self.leaky_slope = leaky_slope
        self.scale = scale
        # zero-mean uniform init, bound 1/sqrt(fan_in)
        self.w = nn.Parameter(torch.empty(1, n_buckets).uniform_(-1.0, 1.0))
        bound = 1.0 / math.sqrt(n_buckets)
        self.W = nn.Parameter(torch.empty(n_buckets, n_buckets).uniform_(-bound, bound))
        self.M = nn.Parameter(torch.empty(n_buckets, d).uniform_(-bound, bound))

    @property
    def n_buckets(self) -> int:
        return self.M.shape[0]

    def weights(self, r_hat: torch.Tensor) -> torch.Tensor:
        """Bucket weights ``z`` with shape ``r_hat.shape + (B,)``."""
        r_hat = torch.as_tensor(r_hat, dtype=self.w.dtype, device=self.w.device)
        if not torch.isfinite(r_hat).all():
            raise NumericError("reward prompt received a non-finite return-to-go")
        h = F.leaky_relu(r_hat.unsqueeze(-1) * self.scale * self.w[0], self.leaky_slope)
        return torch.softmax(h @ self.W.T + self.alpha * h, dim=-1)

    def forward(self, r_hat: torch.Tensor) -> torch.Tensor:
        return self.weights(r_hat) @ self.M


class NaivePrompt(nn.Module):
    """Single affine layer 1 -> d, the ablation baseline."""

    def __init__(self, d: int, scale: float = 1.0):
        super().__init__()
        self.scale = scale
        self.linear = nn.Linear(1, d)

    def forward(self, r_hat: torch.Tensor) -> torch.Tensor:
        r_hat = torch.as_tensor(r_hat, dtype=self.linear.weight.dtype)
        return self.linear(r_hat.unsqueeze(-1) * self.scale)


def reward_weights(r_hat, params: AutoDiscretizedPrompt) -> torch.Tensor:
    return params.weights(r_hat)


def embed_reward(r_hat, params: AutoDiscretizedPrompt) -> torch.Tensor:
    return params(r_hat)


def naive_prompt(r_hat, params: NaivePrompt) -> torch.Tensor:
    return params(r_hat)
