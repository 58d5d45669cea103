"""Command-line entry point: simulate | dataset | train | eval | ablate | plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, sim
from .config import RunConfig, describe_fields, dump_config, load_config, parse_override, run_id
from .encoder import build_encoder
from .evaluate import ablation_grid, evaluate, format_table, write_results
from .plotting import emit_plots, violin_plots
from .policy import CONDITIONS, CVAPolicy, LSTMBaseline
from .train import WindowSet, load_checkpoint, train

log = logging.getLogger("cathnav")


# --- paths ---------------------------------------------------------------------

def corpus_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "corpus"


def manifest_path(cfg: RunConfig, mode: str | None = None) -> Path:
    return Path(cfg.out) / "dataset" / f"manifest_{mode or cfg.dataset.split}.json"


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "runs" / run_id(cfg)


def episode_seed(seed: int, target: int, repetition: int) -> int:
    return seed * 1_000_003 + 1000 * target + repetition


# --- shared loading ------------------------------------------------------------

def load_split(cfg: RunConfig):
    path = manifest_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"no split manifest at {path}; run the dataset command first")
    manifest = data.SplitManifest.load(path)
    episodes = data.load_corpus(corpus_dir(cfg))
    data.check_manifest(manifest, episodes)
    return manifest, episodes


def window_sets(cfg: RunConfig, manifest, episodes, names=("train", "val", "test"), encoder=None,
                stats=None):
    by_id = {e.episode_id: e for e in episodes}
    n = cfg.policy.seq_len
    return {name: WindowSet([by_id[i] for i in getattr(manifest, name)], n, stats or manifest.stats,
                            encoder, cfg.dataset.stride, name) for name in names}


def build_model(cfg: RunConfig, encoder=None):
    torch.manual_seed(cfg.seed)
    if cfg.model == "lstm":
        return LSTMBaseline(cfg.lstm)
    if encoder is not None and (encoder.num_tokens, encoder.dim) != (cfg.policy.num_tokens,
                                                                    cfg.policy.dim):
        raise ValueError(f"encoder emits {encoder.num_tokens} tokens of width {encoder.dim} but "
                         f"policy expects {cfg.policy.num_tokens} x {cfg.policy.dim}; "
                         f"set policy.num_tokens / policy.dim")
    return CVAPolicy(cfg.policy)


def model_encoder(cfg: RunConfig):
    return build_encoder(cfg.encoder) if cfg.model == "cva" else None


def print_rows(header, rows, out=sys.stdout) -> None:
    writer = csv.writer(out)
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


# --- commands ------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    s = cfg.sim
    root = corpus_dir(cfg)
    if root.exists():
        if not (root / "phantom.json").exists():
            raise FileExistsError(f"{root} exists and is not a corpus; refusing to overwrite")
        shutil.rmtree(root)
    phantom = sim.build_phantom(s.phantom_seed, s.n_targets)
    episodes, failed = [], []
    for target in range(s.n_targets):
        for rep in range(1, s.repetitions + 1):
            try:
                episodes.append(sim.generate_episode(
                    phantom, target, episode_seed(cfg.seed, target, rep), s.noise_scale,
                    s.resolution, rep, s.kinematics, s.expert))
            except (sim.EpisodeFailed, sim.UnreachableTarget) as exc:
                log.error("scenario %d repetition %d failed: %s", target + 1, rep, exc)
                failed.append((target + 1, rep))
    data.write_corpus(episodes, root, phantom)
    print_rows(["scenario", "repetition", "length"],
               [(e.scenario_id, e.repetition_id, len(e)) for e in episodes])
    print(f"# {len(episodes)} episodes written to {root}; {len(failed)} failed")
    return 0


def cmd_dataset(cfg: RunConfig) -> int:
    episodes = data.load_corpus(corpus_dir(cfg))
    by_id = {e.episode_id: e for e in episodes}
    rows = []
    for mode in data.SPLIT_MODES:
        manifest = data.make_splits(episodes, mode, tuple(cfg.dataset.ratios), cfg.seed,
                                    shuffle=cfg.dataset.shuffle)
        path = manifest_path(cfg, mode)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest.save(path)
        split_states = {}
        for name in data.SPLIT_NAMES:
            ids = getattr(manifest, name)
            states = np.concatenate([by_id[i].states for i in ids])
            split_states[name] = states
            windows = sum(data.window_count(len(by_id[i]), cfg.policy.seq_len, cfg.dataset.stride)
                          for i in ids)
            stats = data.dataset_stats([by_id[i] for i in ids])
            for d in data.DIMENSIONS:
                st = stats[d]
                rows.append((mode, name, len(ids), len(states), windows, d, st["mean"], st["std"],
                             st["min"], st["max"]))
        violin_plots(split_states, path.parent, f"violin_{mode}")
    print_rows(["mode", "split", "episodes", "frames", "windows", "dimension", "mean", "std",
                "min", "max"], rows)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    manifest, episodes = load_split(cfg)
    encoder = model_encoder(cfg)
    sets = window_sets(cfg, manifest, episodes, ("train", "val"), encoder)
    model = build_model(cfg, encoder)
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    result = train(model, sets["train"], sets["val"], cfg.train, out,
                   expected_fingerprint=data.stats_fingerprint(manifest.stats))
    summary = {"run_id": run_id(cfg), "best_epoch": result.best_epoch, "best_val_mse": result.best_val,
               "epochs": len(result.log), "stopped_early": result.stopped_early,
               "windows": {k: len(v) for k, v in sets.items()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print_rows(["epoch", "train_mse", "val_mse", "lr"],
               [(r["epoch"], r["train_mse"], r["val_mse"], r["lr"]) for r in result.log])
    print(f"# best epoch {result.best_epoch} val_mse {result.best_val:.6g}; checkpoint {out / 'best.pt'}")
    return 0


def _load_trained(cfg: RunConfig, manifest):
    ckpt = run_dir(cfg) / "best.pt"
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run the train command with this config")
    return load_checkpoint(ckpt, expected_fingerprint=data.stats_fingerprint(manifest.stats))


def cmd_eval(cfg: RunConfig) -> int:
    manifest, episodes = load_split(cfg)
    model, _ = _load_trained(cfg, manifest)
    encoder = model_encoder(cfg)
    name = cfg.eval.split_set
    windows = window_sets(cfg, manifest, episodes, (name,), encoder)[name]
    report, pred, target = evaluate(model, windows, cfg.eval.condition, episodes, cfg.seed, cfg.model)
    out = run_dir(cfg) / "eval" / name / cfg.eval.condition
    write_results([report], out)
    with open(out / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{k}_{d}" for k in ("true", "pred") for d in data.DIMENSIONS])
        for t, p in zip(target, pred):
            writer.writerow([f"{v:.9g}" for v in (*t, *p)])
    emit_plots(pred, target, out / "plots", title=f"{cfg.model} {name}")
    print_rows(["model", "split", "condition", "dimension", "mse", "rmse", "mae", "r2"],
               [(r["model"], r["split"], r["condition"], r["dimension"], r["mse"], r["rmse"],
                 r["mae"], r["r2"]) for r in report.records()])
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    if cfg.model != "cva":
        raise ValueError("ablation conditions apply to the cva model only")
    manifest, episodes = load_split(cfg)
    model, _ = _load_trained(cfg, manifest)
    encoder = model_encoder(cfg)
    name = cfg.eval.split_set
    sets = window_sets(cfg, manifest, episodes, ("train", "val", name), encoder)
    out = run_dir(cfg) / "ablation" / cfg.eval.ablation_mode
    retrained = {}
    if cfg.eval.ablation_mode == "retrain":
        for cond in ("no_goal", "no_vision", "no_states"):
            fresh = build_model(cfg, encoder)
            train(fresh, sets["train"], sets["val"], cfg.train, out / cond, condition=cond)
            retrained[cond] = fresh
    reports = ablation_grid(model, sets[name], episodes, cfg.seed, CONDITIONS, retrained)
    write_results(reports, out)
    (out / "table.txt").write_text(format_table(reports) + "\n")
    print_rows(["condition", "mode", "dimension", "mse", "rmse", "mae", "r2"],
               [(r["condition"], r["mode"], r["dimension"], r["mse"], r["rmse"], r["mae"], r["r2"])
                for rep in reports for r in rep.records()])
    return 0


def cmd_plot(cfg: RunConfig) -> int:
    source = run_dir(cfg) / "eval" / cfg.eval.split_set / cfg.eval.condition / "predictions.csv"
    if not source.exists():
        raise FileNotFoundError(f"no predictions at {source}; run the eval command first")
    table = np.loadtxt(source, delimiter=",", skiprows=1, ndmin=2)
    paths = emit_plots(table[:, 3:], table[:, :3], source.parent / "plots",
                       title=f"{cfg.model} {cfg.eval.split_set}")
    manifest, episodes = load_split(cfg)
    by_id = {e.episode_id: e for e in episodes}
    paths.append(violin_plots({n: np.concatenate([by_id[i].states for i in getattr(manifest, n)])
                               for n in data.SPLIT_NAMES}, source.parent / "plots", "violin"))
    print_rows(["file"], [(str(p),) for p in paths])
    return 0


HELP = {
    "simulate": "build the phantom and write the demonstration corpus",
    "dataset": "write split manifests, statistics and violin plots for both split modes",
    "train": "train the cva policy or the lstm baseline on the configured split",
    "eval": "evaluate a trained run under one condition, with plots",
    "ablate": "evaluate every ablation condition (zero-shot or retrained)",
    "plot": "re-render plots from saved predictions and split statistics",
}

COMMANDS = {"simulate": cmd_simulate, "dataset": cmd_dataset, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    fields = describe_fields()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output root")
    common.add_argument("--model", choices=("cva", "lstm"))
    common.add_argument("--split", choices=data.SPLIT_MODES, help="split mode")
    common.add_argument("--condition", choices=CONDITIONS, help="ablation condition for eval")
    common.add_argument("--encoder", choices=("pretrained", "stub"), help="encoder backend")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. --set train.lr=1e-4")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="cathnav", description="Goal-conditioned catheter navigation pipeline.",
        epilog=fields, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name],
                       epilog=fields, formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def config_from_args(args) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    flags = {"seed": args.seed, "out": args.out, "model": args.model, "dataset.split": args.split,
             "eval.condition": args.condition, "encoder.backend": args.encoder}
    overrides += [(k, v) for k, v in flags.items() if v is not None]
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg)
    except (FileNotFoundError, FileExistsError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
