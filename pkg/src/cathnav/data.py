"""Demonstration corpus: persistence, split manifests, normalisation and windows."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .episode import DIMENSIONS, Episode

log = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
SPLIT_MODES = ("episode", "scenario")
SPLIT_NAMES = ("train", "val", "test")

# scenario partition used for the nine-target corpus
DEFAULT_SCENARIO_PARTITION = {"train": (1, 2, 3, 4, 7), "val": (5,), "test": (6, 8, 9)}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
STUB_MEAN = (0.5, 0.5, 0.5)
STUB_STD = (0.5, 0.5, 0.5)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# --- statistics -------------------------------------------------------------

def dataset_stats(episodes) -> dict:
    """Per-dimension mean/std/min/max over every state row of ``episodes``."""
    episodes = list(episodes)
    if not episodes:
        raise ValueError("cannot compute statistics of an empty subset")
    rows = np.concatenate([ep.states for ep in episodes], axis=0)
    return {
        dim: {
            "mean": float(rows[:, i].mean()),
            "std": float(rows[:, i].std()),
            "min": float(rows[:, i].min()),
            "max": float(rows[:, i].max()),
        }
        for i, dim in enumerate(DIMENSIONS)
    }


def stats_arrays(stats: dict) -> tuple[np.ndarray, np.ndarray]:
    mean = np.array([stats[d]["mean"] for d in DIMENSIONS])
    std = np.array([stats[d]["std"] for d in DIMENSIONS])
    return mean, std


def stats_fingerprint(stats: dict) -> str:
    blob = json.dumps({d: {k: _fmt(v) for k, v in sorted(stats[d].items())} for d in DIMENSIONS},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def standardize_states(states, stats: dict) -> np.ndarray:
    """z-score per dimension; zero-variance dimensions pass through unchanged."""
    mean, std = stats_arrays(stats)
    x = np.asarray(states, dtype=np.float64)
    ok = std > 0
    return np.where(ok, (x - mean) / np.where(ok, std, 1.0), x)


def destandardize_states(states, stats: dict) -> np.ndarray:
    mean, std = stats_arrays(stats)
    x = np.asarray(states, dtype=np.float64)
    return np.where(std > 0, x * std + mean, x)


# --- frames -----------------------------------------------------------------

def frame_statistics(backend: str) -> tuple[tuple, tuple]:
    if backend == "pretrained":
        return IMAGENET_MEAN, IMAGENET_STD
    if backend == "stub":
        return STUB_MEAN, STUB_STD
    raise ValueError(f"unknown encoder backend {backend!r}")


def normalize_frame(image, backend: str = "pretrained") -> np.ndarray:
    """Scale an RGB uint8 image to the encoder's input convention, channels first."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    mean, std = frame_statistics(backend)
    x = img.astype(np.float32) / np.float32(255.0)
    x = (x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def normalize_frames(frames, backend: str = "pretrained") -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) frames, got shape {frames.shape}")
    mean, std = frame_statistics(backend)
    x = frames.astype(np.float32) / np.float32(255.0)
    x = (x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# --- splits -----------------------------------------------------------------

@dataclass
class SplitManifest:
    mode: str
    train: list
    val: list
    test: list
    stats: dict
    meta: dict = field(default_factory=dict)

    def ids(self, split: str) -> list:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    @property
    def fingerprint(self) -> str:
        return stats_fingerprint(self.stats)

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_FORMAT_VERSION,
            "mode": self.mode,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "stats": {d: {k: _fmt(v) for k, v in self.stats[d].items()} for d in DIMENSIONS},
            "stats_fingerprint": self.fingerprint,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        if d.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format {d.get('format_version')!r}")
        stats = {dim: {k: float(v) for k, v in d["stats"][dim].items()} for dim in DIMENSIONS}
        return cls(d["mode"], d["train"], d["val"], d["test"], stats, d.get("meta", {}))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _counts(n: int, ratios) -> tuple[int, int, int]:
    n_val = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"cannot split {n} items with ratios {ratios}")
    return n_train, n_val, n_test


def make_splits(episodes, mode: str, ratios=(0.6, 0.2, 0.2), seed: int = 0,
                scenario_partition: dict | None = None, shuffle: bool = False) -> SplitManifest:
    """Partition episodes into train/val/test.

    ``episode`` mode keeps every scenario in every split by assigning
    repetitions per scenario (1-3 / 4 / 5 for five repetitions). ``scenario``
    mode holds out whole scenarios; with scenarios 1..9 the default partition
    is used unless ``scenario_partition`` is given, otherwise scenarios are
    shuffled with ``seed`` and cut by ``ratios``. ``shuffle`` permutes the
    repetitions of each scenario before assignment in episode mode.
    """
    episodes = list(episodes)
    if len(episodes) < 3:
        raise ValueError("need at least three episodes to split")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)
    by_scenario: dict[int, list[Episode]] = {}
    for ep in episodes:
        by_scenario.setdefault(ep.scenario_id, []).append(ep)
    scenarios = sorted(by_scenario)
    parts = {k: [] for k in SPLIT_NAMES}

    if mode == "scenario":
        if len(scenarios) < 3:
            raise ValueError("scenario-based splits need at least three scenarios")
        if scenario_partition is None and scenarios == list(range(1, 10)):
            scenario_partition = DEFAULT_SCENARIO_PARTITION
        if scenario_partition is None:
            order = [scenarios[i] for i in rng.permutation(len(scenarios))]
            n_train, n_val, _ = _counts(len(order), ratios)
            scenario_partition = {"train": order[:n_train],
                                  "val": order[n_train:n_train + n_val],
                                  "test": order[n_train + n_val:]}
        for name in SPLIT_NAMES:
            for sc in sorted(scenario_partition[name]):
                parts[name].extend(sorted(by_scenario.get(sc, []), key=lambda e: e.repetition_id))
        meta = {"scenarios": {k: sorted(int(s) for s in scenario_partition[k]) for k in SPLIT_NAMES}}
    else:
        for sc in scenarios:
            reps = sorted(by_scenario[sc], key=lambda e: e.repetition_id)
            if len(reps) < 3:
                raise ValueError(f"scenario {sc} has {len(reps)} episodes; episode-based "
                                 "splits need at least three per scenario")
            if shuffle:
                reps = [reps[i] for i in rng.permutation(len(reps))]
            n_train, n_val, _ = _counts(len(reps), ratios)
            parts["train"].extend(reps[:n_train])
            parts["val"].extend(reps[n_train:n_train + n_val])
            parts["test"].extend(reps[n_train + n_val:])
        meta = {"scenarios": {k: scenarios for k in SPLIT_NAMES}}

    if not parts["train"]:
        raise ValueError("empty training split")
    meta.update(seed=int(seed), ratios=[float(r) for r in ratios])
    return SplitManifest(
        mode=mode,
        train=[e.episode_id for e in parts["train"]],
        val=[e.episode_id for e in parts["val"]],
        test=[e.episode_id for e in parts["test"]],
        stats=dataset_stats(parts["train"]),
        meta=meta,
    )


def check_manifest(manifest: SplitManifest, episodes) -> None:
    """Raise if the manifest violates its mode's invariant."""
    lookup = {e.episode_id: e for e in episodes}
    scen = {name: {lookup[i].scenario_id for i in manifest.ids(name)} for name in SPLIT_NAMES}
    if manifest.mode == "scenario":
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            if scen[a] & scen[b]:
                raise AssertionError(f"{a} and {b} share scenarios {scen[a] & scen[b]}")
    else:
        present = set().union(*scen.values())
        for name in SPLIT_NAMES:
            if scen[name] != present:
                raise AssertionError(f"{name} misses scenarios {present - scen[name]}")


# --- windows ----------------------------------------------------------------

@dataclass(frozen=True)
class WindowSample:
    episode_id: str
    start_index: int
    frames: tuple          # frame indices within the episode
    states: np.ndarray     # (N, 3), standardised
    target: np.ndarray     # (3,), raw units
    goal_frame_ref: tuple  # (episode_id, frame index)


def window_count(length: int, n: int, stride: int = 1) -> int:
    return max(0, (length - n - 1) // stride + 1)


def select_goal_image(episode: Episode) -> np.ndarray:
    """The goal image of an episode is its final frame."""
    if len(episode) == 0:
        raise ValueError("empty episode")
    return episode.frames[len(episode) - 1]


def slide_windows(episode: Episode, n: int = 50, stride: int = 1,
                  stats: dict | None = None) -> list[WindowSample]:
    if n < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    std_states = standardize_states(episode.states, stats) if stats else episode.states
    goal = (episode.episode_id, len(episode) - 1)
    out = []
    for start in range(0, len(episode) - n, stride):
        out.append(WindowSample(
            episode_id=episode.episode_id,
            start_index=start,
            frames=tuple(range(start, start + n)),
            states=std_states[start:start + n],
            target=episode.states[start + n],
            goal_frame_ref=goal,
        ))
    return out


# --- corpus on disk ---------------------------------------------------------

def episode_dir(root, scenario_id: int, repetition_id: int) -> Path:
    return Path(root) / str(scenario_id) / str(repetition_id)


def write_episode(episode: Episode, root) -> Path:
    d = episode_dir(root, episode.scenario_id, episode.repetition_id)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(episode.frames):
        Image.fromarray(np.asarray(frame, dtype=np.uint8)).save(d / "frames" / f"{i:06d}.png")
    Image.fromarray(np.asarray(episode.goal_frame, dtype=np.uint8)).save(d / "goal.png")
    with open(d / "states.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *DIMENSIONS])
        for t, row in enumerate(episode.states):
            w.writerow([t, *map(_fmt, row)])
    info = {"scenario_id": episode.scenario_id, "repetition_id": episode.repetition_id,
            "episode_id": episode.episode_id, "length": len(episode), **episode.meta}
    if episode.tip_poses is not None:
        info["tip_poses"] = [[_fmt(v) for v in p] for p in episode.tip_poses]
    (d / "episode.json").write_text(json.dumps(info, indent=1))
    return d


def read_episode(directory) -> Episode:
    d = Path(directory)
    info = json.loads((d / "episode.json").read_text())
    with open(d / "states.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["t", *DIMENSIONS]:
        raise ValueError(f"{d / 'states.csv'}: unexpected header {rows[0]}")
    states = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    paths = sorted((d / "frames").glob("*.png"))
    if len(paths) != info["length"] or len(states) != info["length"]:
        raise ValueError(f"{d}: length mismatch ({len(paths)} frames, {len(states)} states, "
                         f"expected {info['length']})")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])
    goal = np.asarray(Image.open(d / "goal.png").convert("RGB"))
    tips = info.pop("tip_poses", None)
    meta = {k: v for k, v in info.items()
            if k not in ("scenario_id", "repetition_id", "episode_id", "length")}
    return Episode(int(info["scenario_id"]), int(info["repetition_id"]), frames, states, goal,
                   None if tips is None else np.array(tips, dtype=np.float64), meta)


def write_corpus(episodes, root, phantom=None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if phantom is not None:
        phantom.save(root / "phantom.json")
    for ep in episodes:
        write_episode(ep, root)
    return root


def load_corpus(root) -> list[Episode]:
    """Load every episode under ``root``; unreadable episodes are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no corpus at {root}")
    episodes = []
    for info in sorted(root.glob("*/*/episode.json"),
                       key=lambda p: (int(p.parent.parent.name), int(p.parent.name))):
        try:
            episodes.append(read_episode(info.parent))
        except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
            log.warning("skipping corrupted episode %s: %s", info.parent, exc)
    if not episodes:
        raise FileNotFoundError(f"corpus at {root} contains no readable episodes")
    return episodes
