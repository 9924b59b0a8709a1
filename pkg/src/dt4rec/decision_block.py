"""Causal transformer over interleaved (reward, state, action) tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InputShapeError, NumericError

KINDS = {"reward": 0, "state": 1, "action": 2}
DEFAULT_ORDER = ("reward", "state", "action")


@dataclass
class TokenizedTrajectory:
    tokens: torch.Tensor          # (B, L, d), position and kind embeddings included
    timestep: torch.Tensor        # (L,)
    kinds: torch.Tensor           # (L,)
    attention_mask: torch.Tensor  # (B, L, L) True where attention is allowed
    order: tuple = DEFAULT_ORDER

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    def positions(self, kind: str) -> torch.Tensor:
        return (self.kinds == KINDS[kind]).nonzero().squeeze(-1)


def interleave_raw(groups: dict, order=DEFAULT_ORDER):
    """Lay out per-kind (B, T_k, d) tensors step by step in ``order``.

    Only the last kind may be one step short (an inference prefix).
    Returns (tokens, timestep, kinds).
    """
    T = groups[order[0]].shape[1]
    for k in order[:-1]:
        if groups[k].shape[1] != T:
            raise InputShapeError(f"{k} sequence has {groups[k].shape[1]} steps, expected {T}")
    if groups[order[-1]].shape[1] not in (T, T - 1):
        raise InputShapeError(
            f"{order[-1]} sequence must have {T} or {T - 1} steps, got {groups[order[-1]].shape[1]}")
    B, _, d = groups[order[0]].shape
    stacked = torch.stack([groups[k][:, :T] if groups[k].shape[1] == T
                           else F.pad(groups[k], (0, 0, 0, 1)) for k in order], dim=2)
    tokens = stacked.reshape(B, 3 * T, d)
    timestep = torch.arange(T).repeat_interleave(3)
    kinds = torch.tensor([KINDS[k] for k in order]).repeat(T)
    if groups[order[-1]].shape[1] == T - 1:
        tokens, timestep, kinds = tokens[:, :-1], timestep[:-1], kinds[:-1]
    return tokens, timestep, kinds


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d % n_heads:
            raise InputShapeError(f"{n_heads} heads do not divide d={d}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.attn_drop = nn.Dropout(dropout)
        self.last_weights = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.view(B, L, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        scores = (q @ k.transpose(-2, -1)) / hd ** 0.5
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        out = self.attn_drop(weights) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, d))


class TransformerLayer(nn.Module):
    """Pre-norm layer: x + Attn(LN(x)), then x + FFN(LN(x)) with a GELU FFN."""

    def __init__(self, d: int, n_heads: int, dropout: float = 0.1, ffn_mult: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, n_heads, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, ffn_mult * d)
        self.fc2 = nn.Linear(ffn_mult * d, d)
        self.drop = nn.Dropout(dropout)

    def ffn(self, x):
        return self.fc2(F.gelu(self.fc1(x)))

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.ln1(x), mask))
        return x + self.drop(self.ffn(self.ln2(x)))


class DecisionBlock(nn.Module):
    def __init__(self, d: int, n_layers: int = 2, n_heads: int = 8, max_steps: int = 50,
                 dropout: float = 0.1, order=DEFAULT_ORDER):
        super().__init__()
        self.order = tuple(order)
        self.max_steps = max_steps
        self.position = nn.Embedding(max_steps, d)
        self.kind = nn.Embedding(3, d)
        nn.init.normal_(self.position.weight, std=0.02)
        nn.init.normal_(self.kind.weight, std=0.02)
        self.layers = nn.ModuleList(TransformerLayer(d, n_heads, dropout) for _ in range(n_layers))

    def interleave(self, reward_embs=None, state_embs=None, action_embs=None,
                   step_mask: torch.Tensor | None = None, **extra) -> TokenizedTrajectory:
        groups = {"reward": reward_embs, "state": state_embs, "action": action_embs}
        tokens, timestep, kinds = interleave_raw(groups, self.order)
        T = int(timestep.max()) + 1
        if T > self.max_steps:
            raise InputShapeError(f"{T} steps exceed the position table ({self.max_steps})")
        tokens = tokens + self.position(timestep) + self.kind(kinds)
        L = tokens.shape[1]
        mask = torch.ones(L, L, dtype=torch.bool).tril()
        mask = mask.unsqueeze(0).expand(tokens.shape[0], L, L)
        if step_mask is not None:
            key_ok = step_mask.to(torch.bool)[:, timestep]           # (B, L)
            mask = mask & key_ok.unsqueeze(1)
            # fully padded query rows keep their diagonal so softmax stays defined
            mask = mask | torch.eye(L, dtype=torch.bool).unsqueeze(0)
        return TokenizedTrajectory(tokens, timestep, kinds, mask, self.order)

    def hidden(self, tok: TokenizedTrajectory) -> torch.Tensor:
        x = tok.tokens
        for i, layer in enumerate(self.layers):
            x = layer(x, tok.attention_mask)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after decision layer {i}")
        return x

    def forward(self, tok: TokenizedTrajectory, read: str = "state") -> torch.Tensor:
        """Per-step outputs read at the ``read`` token positions, shape (B, T, d)."""
        return self.hidden(tok)[:, tok.positions(read)]

    def attention_weights(self) -> list:
        return [layer.attn.last_weights for layer in self.layers]
