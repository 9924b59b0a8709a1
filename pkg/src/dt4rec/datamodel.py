"""Domain types and the pure transforms from interaction rounds to trajectories."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

from .errors import InputShapeError, OrderingError, VocabularyError

STATE_WINDOW = 30

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3


@dataclass(frozen=True)
class InteractionEvent:
    user_id: Hashable
    item_id: Hashable
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise InputShapeError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class RecommendationRound:
    round_index: int
    new_items: tuple[int, ...]
    login_flags: tuple[bool, ...]

    def __post_init__(self):
        if self.round_index < 1:
            raise InputShapeError(f"round_index must be >= 1, got {self.round_index}")
        object.__setattr__(self, "new_items", tuple(self.new_items))
        object.__setattr__(self, "login_flags", tuple(bool(f) for f in self.login_flags))


@dataclass(frozen=True)
class Step:
    return_to_go: int
    state: tuple[int, ...]
    action: tuple[int, ...]


@dataclass(frozen=True)
class Trajectory:
    user_id: Hashable
    steps: tuple[Step, ...]
    rewards: tuple[int, ...]

    def __post_init__(self):
        if not self.steps or len(self.steps) != len(self.rewards):
            raise InputShapeError("trajectory needs >= 1 step and one reward per step")

    def __len__(self):
        return len(self.steps)

    @property
    def returns_to_go(self) -> list[int]:
        return [s.return_to_go for s in self.steps]

    @property
    def states(self) -> list[tuple[int, ...]]:
        return [s.state for s in self.steps]

    @property
    def actions(self) -> list[tuple[int, ...]]:
        return [s.action for s in self.steps]

    def with_rewards(self, rewards: Sequence[int]) -> "Trajectory":
        """Same states and actions, rewards replaced and return-to-go recomputed."""
        rtg = compute_return_to_go(rewards)
        steps = tuple(Step(g, s.state, s.action) for g, s in zip(rtg, self.steps))
        return Trajectory(self.user_id, steps, tuple(int(r) for r in rewards))

    def truncated(self, length: int) -> "Trajectory":
        if length >= len(self):
            return self
        rewards = self.rewards[:length]
        steps = tuple(Step(g, s.state, s.action)
                      for g, s in zip(compute_return_to_go(rewards), self.steps[:length]))
        return Trajectory(self.user_id, steps, rewards)


@dataclass
class ItemVocabulary:
    """Bijection between raw item ids and contiguous indices; 0..2 are pad/bos/eos."""

    items: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {}
        for i, item in enumerate(self.items):
            if item in self._index:
                raise VocabularyError(f"duplicate item id {item!r}")
            self._index[item] = i + N_SPECIAL

    @classmethod
    def build(cls, item_ids: Iterable[Hashable]) -> "ItemVocabulary":
        seen = dict.fromkeys(item_ids)
        try:
            ordered = sorted(seen)
        except TypeError:
            ordered = sorted(seen, key=str)
        return cls(list(ordered))

    def __len__(self):
        """Total number of indices including the special tokens."""
        return len(self.items) + N_SPECIAL

    @property
    def n_items(self) -> int:
        return len(self.items)

    def index(self, item_id) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise VocabularyError(f"unknown item id {item_id!r}") from None

    def item(self, index: int):
        if not N_SPECIAL <= index < len(self):
            raise VocabularyError(f"index {index} is not a real item")
        return self.items[index - N_SPECIAL]

    def is_item(self, index: int) -> bool:
        return N_SPECIAL <= index < len(self)

    def digest(self) -> str:
        h = hashlib.sha256()
        for item in self.items:
            h.update(repr(item).encode())
            h.update(b"\0")
        return h.hexdigest()[:16]


def compute_retention(login_flags: Sequence[bool], K: int | None = None) -> int:
    if K is None:
        K = len(login_flags)
    if K < 1 or len(login_flags) != K:
        raise InputShapeError(f"expected {K} login flags, got {len(login_flags)}")
    return sum(1 for f in login_flags if f)


def compute_return_to_go(rewards: Sequence[int]) -> list[int]:
    if len(rewards) == 0:
        raise InputShapeError("return-to-go of an empty reward sequence")
    out = [0] * len(rewards)
    acc = 0
    for t in range(len(rewards) - 1, -1, -1):
        if rewards[t] < 0:
            raise InputShapeError(f"negative reward {rewards[t]} at step {t}")
        acc += rewards[t]
        out[t] = acc
    return out


def update_state(prev_state: Sequence[int], new_items: Sequence[int], window: int = STATE_WINDOW) -> list[int]:
    merged = list(prev_state) + list(new_items)
    return merged[-window:] if window > 0 else []


def build_trajectory(rounds: Sequence[RecommendationRound], user_id=None,
                     window: int = STATE_WINDOW, max_length: int | None = None) -> Trajectory:
    """Turn a user's rounds into a reward-ordered trajectory.

    The state of round t holds the items of rounds before t, so the action a_t never
    leaks into its own state. ``max_length`` keeps the first rounds only.
    """
    if not rounds:
        raise InputShapeError("at least one round is required")
    for prev, cur in zip(rounds, rounds[1:]):
        if cur.round_index <= prev.round_index:
            raise OrderingError(
                f"rounds not strictly increasing: {prev.round_index} then {cur.round_index}")
    if max_length is not None:
        rounds = rounds[:max_length]
    rewards = [compute_retention(r.login_flags) for r in rounds]
    rtg = compute_return_to_go(rewards)
    steps = []
    state: list[int] = []
    for g, r in zip(rtg, rounds):
        steps.append(Step(g, tuple(state), tuple(r.new_items)))
        state = update_state(state, r.new_items, window)
    return Trajectory(user_id, tuple(steps), tuple(rewards))
