"""Small builders shared by the test modules."""

import math

import numpy as np
import torch

from dt4rec.config import ModelConfig, TrainConfig
from dt4rec.datamodel import N_SPECIAL, RecommendationRound, build_trajectory
from dt4rec.ingest import DatasetSplit, make_negatives
from dt4rec.model import DT4Rec, collate


def random_trajectory(rng, T, vocab_size, K=7, user=0, max_items=2):
    rounds = []
    for t in range(T):
        m = int(rng.integers(1, max_items + 1))
        items = [int(i) for i in rng.integers(N_SPECIAL, vocab_size, size=m)]
        flags = [bool(f) for f in rng.random(K) < 0.5]
        rounds.append(RecommendationRound(t + 1, items, flags))
    return build_trajectory(rounds, user_id=user)


def random_trajectories(rng, n, T, vocab_size, K=7, max_items=2):
    return [random_trajectory(rng, T, vocab_size, K, user=u, max_items=max_items) for u in range(n)]


def split_of(trajs):
    return DatasetSplit(list(trajs), [], [], 0)


def grad_instance(seed=0, n_users=2):
    """The minimal float64 model and batch used for finite-difference checks."""
    cfg = ModelConfig(d=8, n_buckets=4, n_heads=2, n_layers=1, dropout=0.0, state_len=4, action_len=3)
    tcfg = TrainConfig(max_trajectory_length=2, allow_any_length=True, beta=0.5, n_neg=1, seed=seed)
    rng = np.random.default_rng(seed)
    trajs = random_trajectories(rng, n_users, 2, 12)
    negs = [make_negatives(t, 1, 7, seed + i) for i, t in enumerate(trajs)]
    torch.manual_seed(seed)
    model = DT4Rec(12, cfg, max_steps=2).double()
    batch = collate(trajs, cfg.state_len, cfg.action_len, negs, dtype=torch.float64)
    return model, batch, tcfg


def trainable_coordinates(model):
    """(parameter, flat indices) pairs; the embedding pad row is frozen and skipped."""
    out = []
    for name, p in model.named_parameters():
        idx = np.arange(p.numel())
        if name.endswith("embedding.weight"):
            idx = idx[p.shape[1]:]
        out.append((p, idx))
    return out


def finite_difference_check(loss_fn, params, eps=1e-6, max_coords=None, rng=None):
    """Largest per-tensor relative error between autograd and central differences.

    ``params`` holds tensors or (tensor, flat indices) pairs.
    """
    params = [p if isinstance(p, tuple) else (p, np.arange(p.numel())) for p in params]
    coords = [idx for _, idx in params]
    params = [p for p, _ in params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g, idx in zip(params, grads, coords):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        if max_coords is not None and len(idx) > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(idx, max_coords, replace=False)
        fd = np.zeros(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                fd[j] = (up - down) / (2 * eps)
        an = g.detach().view(-1).numpy()[idx]
        scale = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-8)
        worst = max(worst, float(np.linalg.norm(an - fd) / scale))
    return worst


def naive_bleu1(pred, truth):
    if not pred:
        return 0.0
    hits = 0
    for item in set(pred):
        hits += min(pred.count(item), truth.count(item))
    return hits / len(pred)


def naive_rouge1(pred, truth):
    hits = 0
    for item in set(truth):
        hits += min(pred.count(item), truth.count(item))
    return hits / len(truth)


def naive_hr(pred, truth, k):
    found = [t for t in set(truth) if t in pred[:k]]
    return len(found) / len(set(truth))


def naive_ndcg(pred, truth, k):
    dcg = 0.0
    for rank in range(min(k, len(pred))):
        item = pred[rank]
        if item in truth and item not in pred[:rank]:
            dcg += 1 / math.log2(rank + 2)
    idcg = sum(1 / math.log2(r + 2) for r in range(min(len(set(truth)), k)))
    return dcg / idcg


ACCEPTANCE_LINES: list = []


def report_criterion(number: int, ok: bool, detail: str):
    """Remember one acceptance line for the terminal summary and echo it now."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
