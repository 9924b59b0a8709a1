"""Offline metrics: accuracy, similarity- and model-based retention scores, IUR/NRC
and the split-variance analysis."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .config import EvalConfig, ModelConfig
from .datamodel import PAD, Trajectory
from .decision_block import DecisionBlock
from .encoders import StateActionEncoder
from .errors import CompatibilityError, ConfigError, DomainError, NumericError
from .inference import RolloutRecord
from .model import collate
from .training import Checkpoint
from .reward_prompt import AutoDiscretizedPrompt

log = logging.getLogger(__name__)

METRICS = ("BLEU", "ROUGE", "NDCG", "HR", "MB-URS", "SB-URS", "ASB-URS", "IUR", "NRC")


# ---------------------------------------------------------------- accuracy metrics

def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _clipped_overlap(pred, truth, n=1) -> int:
    p, t = _ngrams(pred, n), _ngrams(truth, n)
    return sum(min(c, t[g]) for g, c in p.items())


def bleu1(pred: Sequence, truth: Sequence) -> float:
    """Clipped unigram precision."""
    if not truth:
        raise DomainError("BLEU needs a non-empty reference")
    if not pred:
        return 0.0
    return _clipped_overlap(pred, truth) / len(pred)


def bleu(pred: Sequence, truth: Sequence, order: int = 1) -> float:
    """Geometric mean of clipped n-gram precisions up to ``order`` (no brevity penalty)."""
    if order == 1:
        return bleu1(pred, truth)
    if not truth:
        raise DomainError("BLEU needs a non-empty reference")
    logs = []
    for n in range(1, order + 1):
        total = max(len(pred) - n + 1, 0)
        hits = _clipped_overlap(pred, truth, n)
        if total == 0 or hits == 0:
            return 0.0
        logs.append(math.log(hits / total))
    return math.exp(sum(logs) / order)


def rouge1(pred: Sequence, truth: Sequence) -> float:
    """Clipped unigram recall."""
    if not truth:
        raise DomainError("ROUGE needs a non-empty reference")
    return _clipped_overlap(pred, truth) / len(truth)


def rouge(pred: Sequence, truth: Sequence, order: int = 1) -> float:
    if order == 1:
        return rouge1(pred, truth)
    if not truth:
        raise DomainError("ROUGE needs a non-empty reference")
    total = max(len(truth) - order + 1, 0)
    return _clipped_overlap(pred, truth, order) / total if total else 0.0


def hr_at_k(pred: Sequence, truth: Sequence, k: int = 10) -> float:
    """Share of distinct truth items found among the first ``k`` predictions."""
    if k < 1:
        raise DomainError("k must be >= 1")
    truth_set = set(truth)
    if not truth_set:
        return 0.0
    return len(truth_set & set(pred[:k])) / len(truth_set)


def ndcg_at_k(pred: Sequence, truth: Sequence, k: int = 10) -> float:
    """Binary-gain NDCG; each truth item earns gain at its first predicted position only."""
    if k < 1:
        raise DomainError("k must be >= 1")
    truth_set = set(truth)
    if not truth_set:
        return 0.0
    seen = set()
    dcg = 0.0
    for i, item in enumerate(pred[:k]):
        if item in truth_set and item not in seen:
            seen.add(item)
            dcg += 1.0 / math.log2(i + 2)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(truth_set), k)))
    return dcg / ideal


# ---------------------------------------------------------------- similarity-based retention

def _class_similarity(samples, K: int):
    by_class = defaultdict(list)
    for pred, truth, k in samples:
        if not 0 <= k <= K or int(k) != k:
            raise DomainError(f"reward class {k} outside 0..{K}")
        by_class[int(k)].append(bleu1(pred, truth))
    return {k: (float(np.mean(v)), len(v)) for k, v in by_class.items()}


def sb_urs(samples, K: int = 7) -> float:
    """sum_k s_k (k - K/2) N_k over reward classes; s_k is the mean BLEU-1 of class k."""
    return float(sum(s * (k - K / 2) * n for k, (s, n) in _class_similarity(samples, K).items()))


def asb_urs(samples, K: int = 7) -> float:
    """SB-URS without the class-size factor."""
    if not samples:
        log.warning("ASB-URS over an empty sample set")
        return 0.0
    return float(sum(s * (k - K / 2) for k, (s, _) in _class_similarity(samples, K).items()))


# ---------------------------------------------------------------- reward model

class RewardModel(nn.Module):
    """Scores (state, action) steps: encoders + causal block over (s, a, r) tokens,
    read at the action token, then a linear head to a scalar reward."""

    def __init__(self, vocab_size: int, cfg: ModelConfig, max_steps: int, K: int):
        super().__init__()
        self.cfg = cfg
        self.K = K
        self.encoder = StateActionEncoder(vocab_size, cfg.d, cfg.state_len, cfg.action_len,
                                          share=cfg.share_encoders, last_valid_state=cfg.last_valid_state)
        self.prompt = AutoDiscretizedPrompt(cfg.d, cfg.n_buckets, cfg.alpha, cfg.leaky_slope)
        self.block = DecisionBlock(cfg.d, cfg.n_layers, cfg.n_heads, max_steps, cfg.dropout,
                                   order=("state", "action", "reward"))
        self.head = nn.Linear(cfg.d, 1)
        self.max_steps = max_steps
        self.trained_users: set = set()
        self.vocab_hash = ""
        self.history: list = []

    def forward(self, states, actions, rewards, step_mask) -> torch.Tensor:
        s = self.encoder(states, "state")
        a = self.encoder(actions, "action")
        r = self.prompt(rewards.to(s.dtype))
        tok = self.block.interleave(r, s, a, step_mask=step_mask)
        return self.head(self.block(tok, read="action")).squeeze(-1)

    def predict_batch(self, batch) -> torch.Tensor:
        return self(batch.states, batch.actions, batch.rewards, batch.step_mask)


def _reward_mse(model: RewardModel, trajs, cfg: ModelConfig, batch_size: int) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for i0 in range(0, len(trajs), batch_size):
            batch = collate(trajs[i0:i0 + batch_size], cfg.state_len, cfg.action_len)
            pred = model.predict_batch(batch)
            err = (pred - batch.rewards.to(pred.dtype))[batch.step_mask]
            total += float((err ** 2).sum())
            count += err.numel()
    return total / max(count, 1)


def train_reward_model(validation: Sequence[Trajectory], vocab_size: int, cfg: ModelConfig,
                       max_steps: int, K: int, epochs: int = 20, lr: float = 0.01,
                       batch_size: int = 32, seed: int = 0, weight_decay: float = 1e-4,
                       vocab_hash: str = "", holdout: float = 0.0) -> RewardModel:
    """MSE regression of the per-step reward on the validation split only.

    With ``holdout > 0`` that share of the validation users is kept out of the
    gradient steps and the weights of the epoch with the lowest holdout MSE are
    restored at the end (early stopping).
    """
    if not validation:
        raise ConfigError("reward model needs a non-empty validation split")
    if not 0.0 <= holdout < 1.0:
        raise ConfigError("reward-model holdout share must lie in [0, 1)")
    torch.manual_seed(seed)
    model = RewardModel(vocab_size, cfg, max_steps, K)
    model.vocab_hash = vocab_hash
    model.trained_users = {t.user_id for t in validation}
    trajs = [t.truncated(max_steps) for t in validation]
    rng = np.random.default_rng([seed, 7919])
    n_hold = int(round(holdout * len(trajs))) if len(trajs) > 1 else 0
    held = []
    if n_hold:
        order = rng.permutation(len(trajs))
        held = [trajs[j] for j in sorted(order[:n_hold])]
        trajs = [trajs[j] for j in sorted(order[n_hold:])]
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    best = (math.inf, None)
    for epoch in range(epochs):
        model.train()
        total, count = 0.0, 0
        perm = rng.permutation(len(trajs))
        for i0 in range(0, len(trajs), batch_size):
            chunk = [trajs[j] for j in perm[i0:i0 + batch_size]]
            batch = collate(chunk, cfg.state_len, cfg.action_len)
            pred = model.predict_batch(batch)
            err = (pred - batch.rewards.to(pred.dtype))[batch.step_mask]
            loss = (err ** 2).mean()
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite reward-model loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            total += loss.item() * err.numel()
            count += err.numel()
        entry = {"epoch": epoch + 1, "mse": total / count}
        if held:
            model.eval()
            entry["holdout_mse"] = _reward_mse(model, held, cfg, batch_size)
            if entry["holdout_mse"] < best[0]:
                best = (entry["holdout_mse"], {k: v.detach().clone() for k, v in model.state_dict().items()})
        model.history.append(entry)
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return model


def reward_model_checkpoint(model: RewardModel) -> Checkpoint:
    """Store a reward model in the training checkpoint format."""
    import dataclasses
    from collections import OrderedDict
    state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    users = sorted(model.trained_users, key=str)
    return Checkpoint(state=state, model_config=dataclasses.asdict(model.cfg),
                      train_config={"max_trajectory_length": model.max_steps},
                      vocab_hash=model.vocab_hash, vocab_size=model.encoder.embedding.num_embeddings,
                      K=model.K, epoch=len(model.history), loss_history=list(model.history),
                      meta={"kind": "reward_model", "trained_users": users})


def load_reward_model(ckpt: Checkpoint) -> RewardModel:
    if ckpt.meta.get("kind") != "reward_model":
        raise CompatibilityError("checkpoint does not hold a reward model")
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in ckpt.model_config.items()})
    model = RewardModel(ckpt.vocab_size, cfg, ckpt.train_config["max_trajectory_length"], ckpt.K)
    model.to(next(iter(ckpt.state.values())).dtype)
    model.load_state_dict(ckpt.state)
    model.vocab_hash = ckpt.vocab_hash
    model.trained_users = set(ckpt.meta.get("trained_users", []))
    model.history = list(ckpt.loss_history)
    model.eval()
    return model


@torch.no_grad()
def predict_rewards(model: RewardModel, trajectories: Sequence[Trajectory]) -> list[np.ndarray]:
    model.eval()
    batch = collate(list(trajectories), model.cfg.state_len, model.cfg.action_len,
                    dtype=next(model.parameters()).dtype)
    pred = model.predict_batch(batch)
    return [pred[b, : len(t)].numpy().astype(float) for b, t in enumerate(trajectories)]


def rollout_trajectories(records: Sequence[RolloutRecord], logged: Sequence[Trajectory],
                         action_len: int) -> list[Trajectory]:
    """Evaluation sequences: logged states and rewards with the generated actions."""
    gen = defaultdict(dict)
    for r in records:
        gen[r.user][r.round] = r.generated
    out = []
    for t in logged:
        if t.user_id not in gen:
            continue
        rounds = gen[t.user_id]
        n = len(rounds)
        steps = []
        for i in range(n):
            s = t.steps[i]
            steps.append(type(s)(s.return_to_go, s.state, tuple(rounds[i + 1][: action_len - 1])))
        out.append(Trajectory(t.user_id, tuple(steps), t.rewards[:n]).with_rewards(t.rewards[:n]))
    return out


def mb_urs(records: Sequence[RolloutRecord], logged: Sequence[Trajectory], reward_model: RewardModel,
           vocab_hash: str | None = None, per_user: bool = False):
    """Mean reward the reward model predicts for the generated actions."""
    if not records:
        raise ConfigError("MB-URS over empty rollouts")
    if vocab_hash is not None and reward_model.vocab_hash and vocab_hash != reward_model.vocab_hash:
        raise CompatibilityError("reward model and rollouts use different vocabularies")
    trajs = rollout_trajectories(records, logged, reward_model.cfg.action_len)
    preds = predict_rewards(reward_model, trajs)
    allp = np.concatenate(preds)
    score = float(allp.mean())
    if per_user:
        return score, {t.user_id: float(p.mean()) for t, p in zip(trajs, preds)}
    return score


def iur(predicted_mean: float, logged_mean: float) -> float:
    if logged_mean <= 0:
        raise DomainError("IUR needs a positive logged mean retention")
    return 100.0 * (predicted_mean - logged_mean) / logged_mean


def nrc(per_user_predictions: Sequence[float], threshold: float = 0.5) -> float:
    if threshold < 0:
        raise DomainError("threshold must be >= 0")
    vals = np.asarray(list(per_user_predictions), dtype=float)
    if vals.size == 0:
        return 0.0
    return 100.0 * float((vals < threshold).mean())


# ---------------------------------------------------------------- variance analysis

def partition_users(users: Sequence, n_splits: int, seed: int = 0) -> list[list]:
    users = sorted(set(users), key=lambda u: (isinstance(u, str), str(u) if isinstance(u, str) else u))
    if n_splits < 1 or len(users) < n_splits:
        raise ConfigError(f"cannot split {len(users)} users into {n_splits} non-empty parts")
    perm = np.random.default_rng(seed).permutation(len(users))
    return [[users[i] for i in sorted(part)] for part in np.array_split(perm, n_splits)]


def variance_analysis(metric_fn: Callable[[list], float], test_set: Sequence[Trajectory],
                      n_splits: int = 5, seed: int = 0):
    """Metric per user-level split and the population variance across splits."""
    parts = partition_users([t.user_id for t in test_set], n_splits, seed)
    values = []
    for part in parts:
        members = set(part)
        values.append(float(metric_fn([t for t in test_set if t.user_id in members])))
    return values, float(np.var(values))


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    values: dict
    per_split: list = field(default_factory=list)
    variance: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise NumericError(f"metric {k} is not finite: {v}")

    def to_json(self) -> str:
        body = {"metrics": _round(self.values), "config": self.config}
        if self.per_split:
            body["per_split"] = [_round(s) for s in self.per_split]
            body["variance"] = _round(self.variance)
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", *METRICS])
        w.writerow(["all", *(_fmt(self.values.get(m)) for m in METRICS)])
        for i, s in enumerate(self.per_split):
            w.writerow([f"split{i + 1}", *(_fmt(s.get(m)) for m in METRICS)])
        if self.per_split:
            w.writerow(["variance", *(_fmt(self.variance.get(m)) for m in METRICS)])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "metrics") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.csv").write_text(self.to_csv())
        return out


def _round(d: dict) -> dict:
    return {k: float(f"{v:.10g}") for k, v in d.items()}


def _fmt(v):
    return "" if v is None else f"{v:.10g}"


def compute_metrics(records: Sequence[RolloutRecord], logged: Sequence[Trajectory],
                    reward_model: RewardModel, K: int, cfg: EvalConfig) -> dict:
    samples = [(r.generated, r.logged, r.logged_reward) for r in records if r.logged]
    acc = {
        "BLEU": np.mean([bleu(p, t, cfg.bleu_order) for p, t, _ in samples]),
        "ROUGE": np.mean([rouge(p, t, cfg.bleu_order) for p, t, _ in samples]),
        "NDCG": np.mean([ndcg_at_k(p, t, cfg.topk) for p, t, _ in samples]),
        "HR": np.mean([hr_at_k(p, t, cfg.topk) for p, t, _ in samples]),
    }
    score, per_user = mb_urs(records, logged, reward_model, per_user=True)
    logged_mean = float(np.mean([r.logged_reward for r in records]))
    out = {k: float(v) for k, v in acc.items()}
    out.update({
        "MB-URS": score,
        "SB-URS": sb_urs(samples, K),
        "ASB-URS": asb_urs(samples, K),
        "IUR": iur(score, logged_mean) if logged_mean > 0 else 0.0,
        "NRC": nrc(per_user.values(), cfg.nrc_threshold),
    })
    return out


def evaluate_records(records, logged, reward_model, K, cfg: EvalConfig, config_echo=None) -> MetricReport:
    values = compute_metrics(records, logged, reward_model, K, cfg)
    per_split, variance = [], {}
    if cfg.variance_splits:
        parts = partition_users([t.user_id for t in logged], cfg.variance_splits, cfg.variance_seed)
        for part in parts:
            members = set(part)
            per_split.append(compute_metrics([r for r in records if r.user in members],
                                             [t for t in logged if t.user_id in members],
                                             reward_model, K, cfg))
        variance = {m: float(np.var([s[m] for s in per_split])) for m in METRICS}
    return MetricReport(values, per_split, variance, config_echo or {})
