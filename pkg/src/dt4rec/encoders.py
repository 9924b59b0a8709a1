"""Item embeddings and the GRU encoders for state and action item sequences."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .datamodel import PAD
from .errors import ConfigError, InputShapeError, VocabularyError


def default_lengths(state_max: int | None = None, action_max: int | None = None) -> tuple[int, int]:
    state_max = 30 if state_max is None else state_max
    action_max = 20 if action_max is None else action_max
    if state_max < 1 or action_max < 1:
        raise ConfigError(f"sequence lengths must be >= 1, got ({state_max}, {action_max})")
    return state_max, action_max


class ItemEmbedding(nn.Embedding):
    """Embedding table whose pad row is zero and receives no gradient."""

    def __init__(self, vocab_size: int, d: int):
        super().__init__(vocab_size, d, padding_idx=PAD)
        nn.init.normal_(self.weight, std=d ** -0.5)
        with torch.no_grad():
            self.weight[PAD].zero_()


class SequenceEncoder(nn.Module):
    """One-layer GRU over a zero-padded item sequence."""

    def __init__(self, d: int, last_valid_state: bool = False):
        super().__init__()
        self.gru = nn.GRU(d, d, batch_first=True)
        self.last_valid_state = last_valid_state

    def forward(self, embedded: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        out, h_n = self.gru(embedded)
        if not self.last_valid_state or lengths is None:
            return h_n[0]
        # hidden state after the last real item; empty sequences fall back to H_N
        idx = (lengths.clamp_min(1) - 1).view(-1, 1, 1).expand(-1, 1, out.shape[-1])
        last = out.gather(1, idx).squeeze(1)
        return torch.where((lengths > 0).unsqueeze(-1), last, h_n[0])


class StateActionEncoder(nn.Module):
    def __init__(self, vocab_size: int, d: int, state_len: int = 30, action_len: int = 20,
                 share: bool = False, last_valid_state: bool = False):
        super().__init__()
        self.state_len, self.action_len = default_lengths(state_len, action_len)
        self.embedding = ItemEmbedding(vocab_size, d)
        self.state_encoder = SequenceEncoder(d, last_valid_state)
        self.action_encoder = self.state_encoder if share else SequenceEncoder(d, last_valid_state)

    def encoder(self, role: str) -> SequenceEncoder:
        if role == "state":
            return self.state_encoder
        if role == "action":
            return self.action_encoder
        raise ValueError(f"role must be 'state' or 'action', got {role!r}")

    def max_len(self, role: str) -> int:
        return self.state_len if role == "state" else self.action_len

    def forward(self, items: torch.Tensor, role: str) -> torch.Tensor:
        """Encode a (..., N) tensor of right-padded item indices into (..., d)."""
        lead = items.shape[:-1]
        flat = items.reshape(-1, items.shape[-1])
        lengths = (flat != PAD).sum(-1)
        h = self.encoder(role)(self.embedding(flat), lengths)
        return h.reshape(*lead, h.shape[-1])


def pad_items(items: Sequence[int], max_len: int) -> list[int]:
    if len(items) > max_len:
        raise InputShapeError(f"sequence of length {len(items)} exceeds max_len {max_len}")
    return list(items) + [PAD] * (max_len - len(items))


def encode_sequence(items: Sequence[int], role: str, encoder: StateActionEncoder,
                    max_len: int | None = None) -> torch.Tensor:
    max_len = encoder.max_len(role) if max_len is None else max_len
    vocab_size = encoder.embedding.num_embeddings
    for i in items:
        if not 0 < i < vocab_size:
            raise VocabularyError(f"item index {i} outside vocabulary of size {vocab_size}")
    x = torch.tensor([pad_items(items, max_len)], dtype=torch.long)
    return encoder(x, role)[0]
