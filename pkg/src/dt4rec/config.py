"""Dataclass configs. Defaults follow the published hyperparameters where one exists."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

from .errors import ConfigError

ABLATIONS = ("no_reward", "no_contrastive", "no_weight", "naive_prompt")
TRAJECTORY_LENGTHS = (10, 20, 30, 40, 50)


@dataclass
class SyntheticWorldConfig:
    n_users: int = 200
    n_items: int = 100
    n_genres: int = 5
    preference_sharpness: float = 3.0
    n_days: int = 30
    K: int = 7
    # retention link: p(login) = link_min + (link_max - link_min) * match_rate
    link_min: float = 0.15
    link_max: float = 0.9
    min_items_per_round: int = 2
    max_items_per_round: int = 5
    # off-preference consumption follows a Zipf popularity law with this exponent
    popularity_exponent: float = 1.2
    # per-user focus ~ U(0, 1); each round jitters it by N(0, focus_jitter)
    focus_jitter: float = 0.15
    # weight of the per-user focus level; the rest is redrawn uniformly every round
    focus_persistence: float = 1.0
    # inside a genre, items are chosen by global popularity instead of uniformly
    popular_within_genre: bool = False
    # retention responds to genre match and to a hidden per-item quality flag:
    # satisfaction = (1 - quality_weight) * match + quality_weight * mean quality
    quality_weight: float = 0.0
    quality_share: float = 0.2
    seed: int = 0

    def validate(self):
        if self.n_users < 1 or self.n_items < 1 or self.n_genres < 1:
            raise ConfigError("n_users, n_items and n_genres must be >= 1")
        if self.preference_sharpness <= 0:
            raise ConfigError("preference_sharpness must be positive")
        if not 0.0 <= self.link_min <= self.link_max <= 1.0:
            raise ConfigError("need 0 <= link_min <= link_max <= 1")
        if not 1 <= self.min_items_per_round <= self.max_items_per_round:
            raise ConfigError("bad items-per-round range")
        if self.K < 1 or self.n_days <= self.K:
            raise ConfigError("need K >= 1 and n_days > K")
        if not 0.0 <= self.focus_persistence <= 1.0 or self.focus_jitter < 0:
            raise ConfigError("focus_persistence must lie in [0, 1] and focus_jitter must be >= 0")
        if not 0.0 <= self.quality_weight <= 1.0 or not 0.0 <= self.quality_share <= 1.0:
            raise ConfigError("quality_weight and quality_share must lie in [0, 1]")

    def retention_link(self, match_rate: float) -> float:
        return self.link_min + (self.link_max - self.link_min) * float(match_rate)


@dataclass
class DataConfig:
    log_path: str = ""
    delimiter: str = "\t"
    interval: Union[str, int] = "day"
    K: int = 7
    min_interactions: int = 20
    fractions: tuple = (0.56, 0.24, 0.20)
    split_seed: int = 0

    def validate(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")
        if any(f < 0 for f in self.fractions):
            raise ConfigError("split fractions must be non-negative")


@dataclass
class ModelConfig:
    d: int = 128
    n_buckets: int = 10
    alpha: float = 0.1
    leaky_slope: float = 0.01
    n_layers: int = 2
    n_heads: int = 8
    dropout: float = 0.1
    state_len: int = 30
    action_len: int = 20
    last_valid_state: bool = False
    share_encoders: bool = False
    normalize_prompt: bool = False
    prompt_max: float = 0.0

    def validate(self):
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"heads ({self.n_heads}) must divide d ({self.d})")
        if self.n_buckets < 1 or self.alpha < 0:
            raise ConfigError("need n_buckets >= 1 and alpha >= 0")
        if self.state_len < 1 or self.action_len < 2:
            raise ConfigError("state_len must be >= 1 and action_len >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class TrainConfig:
    beta: float = 0.5
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    max_trajectory_length: int = 10
    allow_any_length: bool = False
    seed: int = 0
    n_neg: int = 2
    negatives_higher: bool = False
    grad_clip: float = 1.0
    contrastive_mode: str = "repel"
    contrastive_similarity: str = "dot"
    checkpoint_every: int = 0
    ablations: tuple = ()

    def validate(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.n_neg < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and n_neg >= 1 required")
        if self.max_trajectory_length < 1 or (
                self.max_trajectory_length not in TRAJECTORY_LENGTHS and not self.allow_any_length):
            raise ConfigError(
                f"max_trajectory_length must be one of {TRAJECTORY_LENGTHS} "
                "(set allow_any_length to override)")
        if self.contrastive_mode not in ("repel", "literal"):
            raise ConfigError(f"contrastive_mode must be 'repel' or 'literal', got {self.contrastive_mode!r}")
        if self.contrastive_similarity not in ("dot", "cosine"):
            raise ConfigError(f"contrastive_similarity must be 'dot' or 'cosine', got {self.contrastive_similarity!r}")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation(s) {sorted(bad)}; choose from {ABLATIONS}")

    def has(self, flag: str) -> bool:
        return flag in self.ablations


@dataclass
class EvalConfig:
    topk: int = 10
    nrc_threshold: float = 0.5
    bleu_order: int = 1
    target_rule: str = "max_constant"
    feedback_rollout: bool = False
    variance_splits: int = 0
    variance_seed: int = 0
    reward_model_epochs: int = 20
    reward_model_lr: float = 0.01
    reward_model_batch_size: int = 32
    # share of validation users held out for early stopping of the reward model
    reward_model_holdout: float = 0.0
    ood_threshold: int = 4
    bc_proportions: tuple = (10, 25, 40, 100)
    bc_high_min: int = 6

    def validate(self):
        if self.topk < 1 or self.nrc_threshold < 0 or self.bleu_order < 1:
            raise ConfigError("topk >= 1, nrc_threshold >= 0, bleu_order >= 1 required")
        if self.target_rule not in ("max_constant", "decrementing_return_to_go"):
            raise ConfigError(f"unknown target rule {self.target_rule!r}")
        if self.variance_splits < 0 or self.variance_splits == 1:
            raise ConfigError("variance_splits must be 0 (off) or >= 2")
        if not 0.0 <= self.reward_model_holdout < 1.0:
            raise ConfigError("reward_model_holdout must lie in [0, 1)")
        for p in self.bc_proportions:
            if not 0 < p <= 100:
                raise ConfigError(f"behavior-cloning proportion {p} outside (0, 100]")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        for section in (self.data, self.synth, self.model, self.train, self.eval):
            section.validate()
        if self.synth.K != self.data.K:
            raise ConfigError(f"synth.K ({self.synth.K}) and data.K ({self.data.K}) disagree")
        if self.train.n_neg < 1:
            raise ConfigError("n_neg must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        apply_dict(cfg, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            raw = yaml.safe_load(text) or {}
        else:
            raw = json.loads(text)
        return cls.from_dict(raw)


def _coerce(current: Any, value: Any, name: str):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: cannot parse {value!r} as bool")
        return bool(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if current:
            return tuple(_coerce(current[0], v, name) for v in value)
        return tuple(value)
    if name.endswith("interval") and isinstance(value, str) and value.isdigit():
        return int(value)
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if name.endswith("interval"):      # "day", "month" or a length in seconds
        return value
    if isinstance(current, int) and not isinstance(value, int):
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(current, float) and not isinstance(value, float):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    return value


def apply_dict(cfg, raw: dict, prefix: str = ""):
    """Merge ``raw`` into nested dataclass ``cfg``; unknown keys are rejected."""
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a mapping")
            apply_dict(current, value, prefix=f"{prefix}{key}.")
        else:
            setattr(cfg, key, _coerce(current, value, f"{prefix}{key}"))


def apply_override(cfg: RunConfig, assignment: str):
    """Apply one ``section.field=value`` override."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, value = assignment.split("=", 1)
    parts = path.strip().split(".")
    raw: dict = {}
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    apply_dict(cfg, raw)
