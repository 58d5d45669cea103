"""Behaviour-cloning training loop, window batching and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import normalize_frame, slide_windows, stats_fingerprint
from .encoder import FrozenEncoder
from .policy import CVAPolicy, LSTMBaseline, LSTMConfig, PolicyConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 50
    lr: float = 9.0e-5
    lr_floor: float = 0.0          # cosine annealing minimum
    patience: int = 5
    min_delta: float = 1e-5
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")


class WindowSet:
    """All sliding windows of a group of episodes, with frame tokens cached per episode.

    ``encoder=None`` builds a state-only set (for the kinematics baseline).
    """

    def __init__(self, episodes, seq_len: int, stats: dict, encoder: FrozenEncoder | None = None,
                 stride: int = 1, name: str = "train"):
        self.name, self.seq_len, self.stats, self.encoder = name, seq_len, stats, encoder
        self.fingerprint = stats_fingerprint(stats)
        self.episodes = {ep.episode_id: ep for ep in episodes}
        self.samples = [w for ep in episodes for w in slide_windows(ep, seq_len, stride, stats)]
        self.tokens, self.goals = {}, {}
        if encoder is not None:
            for ep in episodes:
                self.tokens[ep.episode_id] = encoder.encode_images(ep.frames)
                self.goals[ep.episode_id] = self.encode_goal_image(ep.goal_frame)
        self.access = Counter()

    def __len__(self):
        return len(self.samples)

    def encode_goal_image(self, image) -> torch.Tensor:
        return self.encoder.encode_goal(normalize_frame(image, self.encoder.backend))

    def batch(self, indices, goals: dict | None = None) -> dict:
        """Tensors for the given sample indices; ``goals`` overrides per-episode goal vectors."""
        self.access[self.name] += len(indices)
        picked = [self.samples[i] for i in indices]
        out = {
            "states": torch.from_numpy(np.stack([w.states for w in picked])).float(),
            "target": torch.from_numpy(np.stack([w.target for w in picked])).float(),
            "tokens": None,
            "goal": None,
        }
        if self.encoder is not None:
            n = self.seq_len
            out["tokens"] = torch.stack([self.tokens[w.episode_id][w.start_index:w.start_index + n]
                                         for w in picked])
            goal_map = goals or self.goals
            out["goal"] = torch.stack([goal_map[w.episode_id] for w in picked])
        return out


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return ((pred - target) ** 2).mean()


def cosine_lr(lr: float, epoch: int, total: int, floor: float = 0.0) -> float:
    return floor + (lr - floor) * (1 + math.cos(math.pi * epoch / total)) / 2


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val: float
    log: list = field(default_factory=list)
    grad_samples: Counter = field(default_factory=Counter)   # split name -> samples used in backward
    stopped_early: bool = False


@torch.no_grad()
def predict(model: nn.Module, windows: WindowSet, condition: str = "baseline",
            goals: dict | None = None, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and raw targets, both ``(M, 3)``, in sample order."""
    was_training = model.training
    model.eval()
    preds, targets = [], []
    for i in range(0, len(windows), batch_size):
        b = windows.batch(range(i, min(i + batch_size, len(windows))), goals)
        preds.append(model(b["tokens"], b["states"], b["goal"], condition))
        targets.append(b["target"])
    model.train(was_training)
    if not preds:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return torch.cat(preds).double().numpy(), torch.cat(targets).double().numpy()


def evaluate_mse(model: nn.Module, windows: WindowSet, condition: str = "baseline") -> float:
    pred, target = predict(model, windows, condition)
    return float(np.mean((pred - target) ** 2))


def train(model: nn.Module, train_set: WindowSet, val_set: WindowSet, cfg: TrainConfig,
          out_dir=None, expected_fingerprint: str | None = None,
          condition: str = "baseline") -> TrainResult:
    """Adam with per-epoch cosine decay, best-on-validation retention and early stopping.

    ``condition`` applies an ablation input transformation during training and
    validation (used when ablations are retrained rather than evaluated zero-shot).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError(f"empty split: {len(train_set)} train / {len(val_set)} val windows")
    if val_set.fingerprint != train_set.fingerprint:
        raise ValueError("train and val windows were standardised with different statistics")
    if expected_fingerprint is not None and expected_fingerprint != train_set.fingerprint:
        raise ValueError(f"stats fingerprint {train_set.fingerprint} does not match "
                         f"expected {expected_fingerprint}")

    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda e: cosine_lr(cfg.lr, e, cfg.max_epochs, cfg.lr_floor) / cfg.lr)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")

    result = TrainResult(best_state={}, best_epoch=-1, best_val=math.inf)
    bad_epochs = 0
    for epoch in range(cfg.max_epochs):
        start = time.perf_counter()
        lr = optimizer.param_groups[0]["lr"]
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size].tolist()
            b = train_set.batch(idx)
            loss = mse_loss(model(b["tokens"], b["states"], b["goal"], condition), b["target"])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss.item()} at epoch {epoch}, "
                                         f"batch starting {i} (lr {lr:.3g})")
            optimizer.zero_grad()
            loss.backward()
            result.grad_samples[train_set.name] += len(idx)
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        scheduler.step()
        val = evaluate_mse(model, val_set, condition)
        record = {"epoch": epoch, "train_mse": total / seen, "val_mse": val, "lr": lr,
                  "wallclock": round(time.perf_counter() - start, 3)}
        result.log.append(record)
        log.info("epoch %d train %.6f val %.6f lr %.3g", epoch, record["train_mse"], val, lr)
        if out:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")

        if val < result.best_val - cfg.min_delta:
            result.best_val, result.best_epoch, bad_epochs = val, epoch, 0
            result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out:
                save_checkpoint(out / "best.pt", model, train_set.stats, cfg, epoch, optimizer)
        else:
            bad_epochs += 1
        if out:
            save_checkpoint(out / "last.pt", model, train_set.stats, cfg, epoch, optimizer)
        if bad_epochs >= cfg.patience:
            result.stopped_early = True
            break

    model.load_state_dict(result.best_state)
    return result


# --- checkpoints -------------------------------------------------------------

def model_kind(model: nn.Module) -> str:
    if isinstance(model, CVAPolicy):
        return "cva"
    if isinstance(model, LSTMBaseline):
        return "lstm"
    raise TypeError(f"unsupported model {type(model).__name__}")


def save_checkpoint(path, model: nn.Module, stats: dict, train_cfg: TrainConfig | None = None,
                    epoch: int = -1, optimizer=None) -> None:
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": model_kind(model),
        "model_config": asdict(model.cfg),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer else None,
        "epoch": epoch,
        "stats": stats,
        "stats_fingerprint": stats_fingerprint(stats),
    }
    torch.save(blob, path)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> tuple[nn.Module, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, blob)``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {blob.get('format_version')!r} in {path}")
    if expected_fingerprint is not None and blob["stats_fingerprint"] != expected_fingerprint:
        raise ValueError(f"checkpoint {path} was trained with stats {blob['stats_fingerprint']}, "
                         f"data has {expected_fingerprint}")
    if blob["kind"] == "cva":
        model = CVAPolicy(PolicyConfig(**blob["model_config"]))
    else:
        model = LSTMBaseline(LSTMConfig(**blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    return model.eval(), blob
