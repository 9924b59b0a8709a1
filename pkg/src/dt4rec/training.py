"""Optimization loop, checkpoints and the training log."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig
from .errors import ConfigError, FormatError, NumericError
from .ingest import DatasetSplit, make_negatives
from .losses import ce_from_logits, ce_loss, contrastive_loss, kappa, similarity, total_loss  # noqa: F401
from .model import Batch, DT4Rec, collate

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DT4RCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    state: "OrderedDict[str, torch.Tensor]"
    model_config: dict
    train_config: dict
    vocab_hash: str
    vocab_size: int
    K: int
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "version": CKPT_VERSION,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "vocab_hash": self.vocab_hash,
            "vocab_size": self.vocab_size,
            "K": self.K,
            "epoch": self.epoch,
            "loss_history": self.loss_history,
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name, t in self.state.items():
            arr = t.detach().cpu().contiguous().numpy()
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        head = dict(self.header(), tensors=index)
        hbytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
        return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(CKPT_MAGIC):
            raise FormatError("not a checkpoint file")
        version, hlen = struct.unpack_from("<IQ", data, len(CKPT_MAGIC))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        start = len(CKPT_MAGIC) + 12
        head = json.loads(data[start:start + hlen])
        body = memoryview(data)[start + hlen:]
        state = OrderedDict()
        for entry in head.pop("tensors"):
            dtype = np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiu" else np.dtype(entry["dtype"])
            chunk = body[entry["offset"]: entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
            state[entry["name"]] = torch.from_numpy(arr)
        head.pop("version")
        return cls(state=state, **head)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    @property
    def ablations(self) -> tuple:
        return tuple(self.train_config.get("ablations", ()))

    def build_model(self) -> DT4Rec:
        cfg = ModelConfig(**_tuplify(self.model_config))
        model = DT4Rec(self.vocab_size, cfg, self.train_config["max_trajectory_length"], self.ablations)
        dtype = next(iter(self.state.values())).dtype
        model.to(dtype)
        model.load_state_dict(self.state)
        model.eval()
        return model


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def variant_name(ablations: Sequence[str]) -> str:
    if not ablations:
        return "DT4Rec"
    if "no_reward" in ablations:
        return "DT4Rec-R"
    return "DT4Rec w/o " + "+".join(sorted(a.replace("no_", "").replace("naive_prompt", "auto-dis")
                                           for a in ablations))


def checkpoint_from_model(model: DT4Rec, train_cfg: TrainConfig, vocab_hash: str, K: int,
                          epoch: int, history: list) -> Checkpoint:
    state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    return Checkpoint(
        state=state,
        model_config=dataclasses.asdict(model.cfg),
        train_config=dataclasses.asdict(train_cfg),
        vocab_hash=vocab_hash,
        vocab_size=model.vocab_size,
        K=K,
        epoch=epoch,
        loss_history=list(history),
        meta={"variant": variant_name(train_cfg.ablations)},
    )


def batch_losses(model: DT4Rec, batch: Batch, cfg: TrainConfig):
    """(total, ce, cl) for one batch; ``cl`` is averaged over valid steps.

    In "repel" mode the positive prediction is pushed away from the predictions made
    under the lower negative prompts: the objective is ``ce - beta * cl`` with
    ``cl = -sum_k kappa_k * sim_k``. "literal" mode optimizes ``ce + beta * cl``.
    With ``contrastive_similarity="cosine"`` rows are unit-normalized first, which
    bounds the term by ``beta * sum_k kappa_k``.
    """
    encoded = model.encode(batch)
    V, logits = model(batch, encoded=encoded)
    ce = ce_from_logits(logits, batch.targets, batch.target_mask)
    beta = 0.0 if cfg.has("no_contrastive") else cfg.beta
    if beta == 0.0 or batch.neg_rtg is None or not model.uses_reward:
        return ce, ce, ce.new_zeros(())
    mask = batch.step_mask.to(V.dtype)
    cl = V.new_zeros(())
    for j in range(batch.neg_rtg.shape[1]):
        V_neg, _ = model(batch, rtg=batch.neg_rtg[:, j], encoded=encoded)
        w = torch.ones_like(batch.neg_kappa[:, j]) if cfg.has("no_weight") else batch.neg_kappa[:, j]
        if cfg.contrastive_similarity == "cosine":
            sim = similarity(F.normalize(V, dim=-1), F.normalize(V_neg, dim=-1))
        else:
            sim = similarity(V, V_neg)                              # (B, T)
        cl = cl - (w.unsqueeze(-1) * sim * mask).sum() / mask.sum()
    sign = 1.0 if cfg.contrastive_mode == "literal" else -1.0
    return total_loss(ce, sign * cl, beta), ce, cl


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def build_model(vocab_size: int, model_cfg: ModelConfig, train_cfg: TrainConfig, K: int,
                dtype=torch.float32) -> DT4Rec:
    model_cfg = dataclasses.replace(model_cfg)
    if model_cfg.normalize_prompt and model_cfg.prompt_max <= 0:
        model_cfg.prompt_max = float(K * train_cfg.max_trajectory_length)
    torch.manual_seed(train_cfg.seed)
    return DT4Rec(vocab_size, model_cfg, train_cfg.max_trajectory_length, train_cfg.ablations).to(dtype)


def train(dataset: DatasetSplit, model_cfg: ModelConfig, train_cfg: TrainConfig, vocab_size: int,
          K: int, vocab_hash: str = "", log_path=None, checkpoint_dir=None,
          dtype=torch.float32, model: DT4Rec | None = None) -> Checkpoint:
    """Mini-batch AdamW on cross-entropy plus the weighted contrastive term."""
    train_cfg.validate()
    model_cfg.validate()
    trajs = [t.truncated(train_cfg.max_trajectory_length) for t in dataset.train]
    if not trajs:
        raise ConfigError("training split is empty")
    if model is None:
        model = build_model(vocab_size, model_cfg, train_cfg, K, dtype)
    torch.manual_seed(train_cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.learning_rate,
                            weight_decay=train_cfg.weight_decay)
    need_neg = not train_cfg.has("no_contrastive") and train_cfg.beta > 0 and model.uses_reward
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            model.train()
            rng = np.random.default_rng([train_cfg.seed, epoch])
            negs = ([make_negatives(t, train_cfg.n_neg, K, rng, train_cfg.negatives_higher) for t in trajs]
                    if need_neg else None)
            sums = np.zeros(3)
            n_batches = 0
            for bi, idx in enumerate(_batches(len(trajs), train_cfg.batch_size, rng)):
                batch = collate([trajs[i] for i in idx], model_cfg.state_len, model_cfg.action_len,
                                [negs[i] for i in idx] if negs else None, dtype=dtype)
                loss, ce, cl = batch_losses(model, batch, train_cfg)
                if not torch.isfinite(loss):
                    norms = {n: float(p.norm()) for n, p in model.named_parameters()}
                    raise NumericError(f"non-finite loss at epoch {epoch} batch {bi}; "
                                       f"parameter norms {norms}")
                opt.zero_grad()
                loss.backward()
                if train_cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                opt.step()
                sums += [loss.item(), ce.item(), cl.item()]
                n_batches += 1
            rec = dict(zip(("loss", "ce", "cl"), (sums / n_batches).tolist()), epoch=epoch)
            history.append(rec)
            log.info("epoch %d loss %.4f ce %.4f cl %.4f", epoch, rec["loss"], rec["ce"], rec["cl"])
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if checkpoint_dir and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
                checkpoint_from_model(model, train_cfg, vocab_hash, K, epoch, history).save(
                    Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return checkpoint_from_model(model, train_cfg, vocab_hash, K, train_cfg.epochs, history)


@torch.no_grad()
def dataset_loss(model: DT4Rec, trajectories, cfg: TrainConfig, K: int, seed: int = 0,
                 dtype=torch.float32) -> float:
    """Eval-mode mean CE over ``trajectories`` (single batch)."""
    model.eval()
    trajs = [t.truncated(cfg.max_trajectory_length) for t in trajectories]
    batch = collate(trajs, model.cfg.state_len, model.cfg.action_len, dtype=dtype)
    _, logits = model(batch)
    return float(ce_from_logits(logits, batch.targets, batch.target_mask))
