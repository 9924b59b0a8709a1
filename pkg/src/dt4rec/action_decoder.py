"""GRU action decoder: expands a predicted action embedding into an item sequence."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .datamodel import BOS, EOS, PAD
from .errors import InputShapeError


def make_targets(items: Sequence[int], N: int) -> list[int]:
    """Truth items, then eos, then pad up to N."""
    if len(items) > N - 1:
        raise InputShapeError(f"{len(items)} truth items leave no room for eos within N={N}")
    return list(items) + [EOS] + [PAD] * (N - 1 - len(items))


class ActionDecoder(nn.Module):
    def __init__(self, embedding: nn.Embedding, d: int, vocab_size: int):
        super().__init__()
        self.embedding = embedding
        self.gru = nn.GRU(2 * d, d, batch_first=True)
        self.v0 = nn.Parameter(torch.randn(d) * 0.1)
        self.head = nn.Linear(d, vocab_size)

    def _initial(self, batch: int) -> torch.Tensor:
        return self.v0.expand(1, batch, -1).contiguous()

    def teacher_forced(self, a_tilde: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Predicted embeddings ``(…, N, d)`` for eos-terminated, padded ``targets (…, N)``.

        Step n sees bos and the truth items before n, each concatenated with ``a_tilde``.
        """
        lead, N = targets.shape[:-1], targets.shape[-1]
        tg = targets.reshape(-1, N)
        a = a_tilde.reshape(-1, a_tilde.shape[-1])
        inputs = torch.cat([torch.full_like(tg[:, :1], BOS), tg[:, :-1]], dim=1)
        x = torch.cat([self.embedding(inputs), a.unsqueeze(1).expand(-1, N, -1)], dim=-1)
        out, _ = self.gru(x, self._initial(tg.shape[0]))
        return out.reshape(*lead, N, out.shape[-1])

    def logits(self, V: torch.Tensor) -> torch.Tensor:
        return self.head(V)

    def project_vocab(self, V: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.head(V), dim=-1)

    @torch.no_grad()
    def greedy(self, a_tilde: torch.Tensor, N: int, allow_eos: bool = True) -> list[list[int]]:
        """Argmax decode for a batch of ``a_tilde (B, d)``; stops at eos or N items."""
        B = a_tilde.shape[0]
        h = self._initial(B)
        prev = torch.full((B,), BOS, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        out: list[list[int]] = [[] for _ in range(B)]
        blocked = [PAD, BOS] + ([] if allow_eos else [EOS])
        for _ in range(N):
            x = torch.cat([self.embedding(prev), a_tilde], dim=-1).unsqueeze(1)
            o, h = self.gru(x, h)
            logits = self.head(o[:, 0])
            logits[:, blocked] = float("-inf")
            nxt = logits.argmax(-1)
            for b in range(B):
                if done[b]:
                    continue
                tok = int(nxt[b])
                if tok == EOS:
                    done[b] = True
                else:
                    out[b].append(tok)
            if done.all():
                break
            prev = nxt
        return out


def decode_teacher_forced(decoder: ActionDecoder, a_tilde: torch.Tensor, truth_items: Sequence[int],
                          N: int) -> torch.Tensor:
    tg = torch.tensor(make_targets(truth_items, N), dtype=torch.long)
    return decoder.teacher_forced(a_tilde, tg)


def decode_autoregressive(decoder: ActionDecoder, a_tilde: torch.Tensor, N: int,
                          allow_eos: bool = True) -> list[int]:
    return decoder.greedy(a_tilde.reshape(1, -1), N, allow_eos)[0]


def project_vocab(decoder: ActionDecoder, V: torch.Tensor) -> torch.Tensor:
    return decoder.project_vocab(V)
