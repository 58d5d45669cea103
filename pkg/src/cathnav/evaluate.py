"""Regression metrics, ablation conditions and result files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from torch import nn

from .episode import DIMENSIONS
from .policy import CONDITIONS, check_condition
from .train import WindowSet, predict

METRIC_FIELDS = ("mse", "rmse", "mae", "r2")


@dataclass
class MetricsReport:
    split: str
    model: str
    condition: str
    n: int
    metrics: dict = field(default_factory=dict)   # dimension -> {mse, rmse, mae, r2, r2_defined}
    mode: str = "zero_shot"                       # or "retrain"

    def records(self) -> list[dict]:
        base = {"model": self.model, "split": self.split, "condition": self.condition,
                "mode": self.mode, "n": self.n}
        return [{**base, "dimension": d, **self.metrics[d]} for d in DIMENSIONS]

    def mean(self, key: str = "r2") -> float:
        return float(np.mean([self.metrics[d][key] for d in DIMENSIONS]))


def compute_metrics(pred, target, split: str = "", model: str = "", condition: str = "baseline",
                    mode: str = "zero_shot") -> MetricsReport:
    """Per-dimension MSE, RMSE, MAE and R^2 (about the target mean of this set)."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"expected matching (M, 3) arrays, got {pred.shape} and {target.shape}")
    if len(pred) < 2:
        raise ValueError("need at least 2 samples")
    err = pred - target
    metrics = {}
    for i, d in enumerate(DIMENSIONS):
        mse = float(np.mean(err[:, i] ** 2))
        ss_tot = float(np.sum((target[:, i] - target[:, i].mean()) ** 2))
        defined = ss_tot > 0
        r2 = 1.0 - float(np.sum(err[:, i] ** 2)) / ss_tot if defined else math.nan
        metrics[d] = {"mse": mse, "rmse": math.sqrt(mse), "mae": float(np.mean(np.abs(err[:, i]))),
                      "r2": r2, "r2_defined": defined}
    return MetricsReport(split, model, condition, len(pred), metrics, mode)


def false_goals(windows: WindowSet, pool, seed: int = 0) -> dict:
    """Per-episode goal vectors taken from a seeded episode of a different scenario.

    Candidates come from the episodes of ``windows`` first, then from ``pool``.
    """
    own = list(windows.episodes.values())
    rng = np.random.default_rng(seed)
    goals = {}
    for eid in sorted(windows.episodes):
        scenario = windows.episodes[eid].scenario_id
        candidates = [e for e in own if e.scenario_id != scenario]
        if not candidates:
            candidates = [e for e in pool if e.scenario_id != scenario]
        if not candidates:
            raise ValueError(f"no episode of a scenario other than {scenario} to draw a false goal from")
        candidates.sort(key=lambda e: e.episode_id)
        donor = candidates[int(rng.integers(len(candidates)))]
        goals[eid] = windows.encode_goal_image(donor.goal_frame)
    return goals


def evaluate(model: nn.Module, windows: WindowSet, condition: str = "baseline", pool=(),
             seed: int = 0, model_name: str = "cva", mode: str = "zero_shot"):
    """Metrics of ``model`` on every window of a split under one condition.

    Returns ``(report, predictions, targets)``.
    """
    check_condition(condition)
    goals = None
    if condition == "false_goal":
        if windows.encoder is None:
            raise ValueError("false_goal needs a vision-conditioned model and window set")
        goals = false_goals(windows, pool, seed)
    pred, target = predict(model, windows, condition, goals)
    report = compute_metrics(pred, target, windows.name, model_name, condition, mode)
    return report, pred, target


def ablation_grid(model: nn.Module, windows: WindowSet, pool=(), seed: int = 0,
                  conditions=CONDITIONS, models: dict | None = None) -> list[MetricsReport]:
    """One report per condition.

    ``models`` maps a condition to a separately trained model (retrain mode);
    conditions missing from it are evaluated zero-shot on ``model``.
    """
    reports = []
    for cond in conditions:
        chosen = (models or {}).get(cond, model)
        mode = "retrain" if chosen is not model else "zero_shot"
        reports.append(evaluate(chosen, windows, cond, pool, seed, "cva", mode)[0])
    return reports


# --- results files ------------------------------------------------------------

RECORD_FIELDS = ("model", "split", "condition", "mode", "dimension", "n", "mse", "rmse", "mae",
                 "r2", "r2_defined")


def write_results(reports, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
    """One structured record per model x split x condition x dimension, as JSONL and CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for rep in reports for r in rep.records()]
    jsonl, table = out / f"{stem}.jsonl", out / f"{stem}.csv"
    with open(jsonl, "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in RECORD_FIELDS}) + "\n")
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.9g}" if isinstance(row[k], float) else row[k])
                             for k in RECORD_FIELDS})
    return jsonl, table


def read_results(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_table(reports) -> str:
    """Condition x dimension grid of MSE / RMSE / MAE / R^2 as fixed-width text."""
    lines = [f"{'condition':<12}{'dimension':<13}{'mse':>10}{'rmse':>10}{'mae':>10}{'r2':>10}"]
    for rep in reports:
        for d in DIMENSIONS:
            m = rep.metrics[d]
            lines.append(f"{rep.condition:<12}{d:<13}{m['mse']:>10.4f}{m['rmse']:>10.4f}"
                         f"{m['mae']:>10.4f}{m['r2']:>10.4f}")
    return "\n".join(lines)
