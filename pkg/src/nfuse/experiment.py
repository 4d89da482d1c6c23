"""Config-driven runs: train, evaluate, and compare fusers across seeds.

Output layout of a run directory::

    config.json        resolved config (defaults filled in)
    data_<split>.tfm   dataset cache, one manifest per split
    checkpoint.tfm     parameters + Adam state + step
    loss_curve.csv     step,loss
    metrics.jsonl      one record per evaluation
    metrics.csv        per-subset accuracy table
    timing.json        wall times (kept apart so the files above are reproducible)
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
from pathlib import Path

import numpy as np

from nfuse.config import ExperimentConfig, parse_config
from nfuse.harness.data import Dataset, generate_dataset, load_split, save_dataset
from nfuse.harness.model import FusionModel, build_model
from nfuse.harness.optim import AdamState
from nfuse.harness.report import append_jsonl, write_json, write_loss_curve, write_subset_table
from nfuse.harness.stats import paired_comparison
from nfuse.harness.streams import stream
from nfuse.harness.train import Metrics, TrainResult, evaluate, train
from nfuse.io import load_manifest, save_manifest
from nfuse.tensor import DTYPES, Tensor

log = logging.getLogger(__name__)


def artifact_config(cfg: ExperimentConfig) -> dict:
    """Resolved config as embedded in output files (the output path is not part of it)."""
    d = cfg.to_dict()
    d.pop("out")
    return d


def new_model(cfg: ExperimentConfig) -> FusionModel:
    t = cfg.task
    return build_model(cfg.fuser, t.modalities, t.channels,
                       t.feature_shape, t.num_classes, cfg.block, stream(cfg.seed, "init"),
                       DTYPES[cfg.precision])


def load_or_generate(cfg: ExperimentConfig, directory: Path | None = None) -> Dataset:
    if directory is not None and all((directory / f"data_{s}.tfm").exists() for s in ("train", "val", "test")):
        _, meta = load_manifest(directory / "data_train.tfm")
        if meta.get("task") == artifact_config(cfg)["task"]:
            return Dataset(cfg.task, *(load_split(directory / f"data_{s}.tfm") for s in ("train", "val", "test")))
    ds = generate_dataset(cfg.task)
    if directory is not None:
        save_dataset(ds, directory, {"task": artifact_config(cfg)["task"]})
    return ds


def save_checkpoint(path, cfg: ExperimentConfig, result: TrainResult) -> None:
    params = result.model.parameters()
    tensors = dict(params)
    for name in params:
        if name in result.state.m:
            tensors[f"adam.m.{name}"] = result.state.m[name]
            tensors[f"adam.v.{name}"] = result.state.v[name]
    meta = {"config": artifact_config(cfg), "seed": cfg.seed, "step": result.step,
            "adam_t": result.state.t, "fuser": result.model.fuser}
    save_manifest(path, tensors, meta)


def load_checkpoint(path) -> tuple[ExperimentConfig, FusionModel, AdamState, int]:
    tensors, meta = load_manifest(path)
    cfg = parse_config(meta["config"])
    model = new_model(cfg)
    dtype = DTYPES[cfg.precision]
    names = model.parameters()
    model = model.with_parameters({n: Tensor(tensors[n], grad_enabled=True, dtype=dtype) for n in names})
    state = AdamState(
        {n: tensors[f"adam.m.{n}"].astype(dtype) for n in names if f"adam.m.{n}" in tensors},
        {n: tensors[f"adam.v.{n}"].astype(dtype) for n in names if f"adam.v.{n}" in tensors},
        meta["adam_t"],
    )
    return cfg, model, state, meta["step"]


def run_train(cfg: ExperimentConfig) -> Metrics:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = artifact_config(cfg)
    write_json(out / "config.json", header)
    ds = load_or_generate(cfg, out)
    result = train(new_model(cfg), ds, cfg.train, cfg.seed)
    save_checkpoint(out / "checkpoint.tfm", cfg, result)
    write_loss_curve(out / "loss_curve.csv", result.losses, header)
    metrics = evaluate(result.model, ds, "test", loss_curve=result.losses, seed=cfg.seed)
    (out / "metrics.jsonl").unlink(missing_ok=True)
    append_jsonl(out / "metrics.jsonl", dict(metrics.to_record(), config=header, split="test"))
    write_subset_table(out / "metrics.csv", cfg.task.modalities, {"accuracy": metrics.accuracy}, header)
    write_json(out / "timing.json", {"train_seconds": result.wall_time, "eval_seconds": metrics.wall_time})
    return metrics


def run_evaluate(checkpoint, out: Path | None = None, split: str = "test") -> Metrics:
    cfg, model, _, _ = load_checkpoint(checkpoint)
    out = Path(out) if out is not None else Path(checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    header = artifact_config(cfg)
    ds = load_or_generate(cfg, out)
    metrics = evaluate(model, ds, split, seed=cfg.seed)
    append_jsonl(out / "metrics.jsonl", dict(metrics.to_record(), config=header, split=split))
    write_subset_table(out / f"metrics_{split}.csv", cfg.task.modalities, {"accuracy": metrics.accuracy}, header)
    return metrics


def run_compare(cfg: ExperimentConfig, fusers: list[str], seeds: list[int]) -> dict:
    """Train every fuser under identical seeds and budget; tabulate and test pairs.

    Writes ``compare_seed<s>.csv`` per seed, ``compare.csv`` with seed-averaged
    accuracies, ``compare.jsonl`` (one record per fuser and seed), and
    ``compare_report.json`` with per-pair Wilcoxon p-values over subsets (of the
    seed-averaged table) and over seeds (of the mean accuracies).
    """
    if len(fusers) < 2:
        raise ValueError("comparison needs at least two fusers")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    base = dataclasses.replace(cfg, block=dataclasses.replace(cfg.block, variant="full"))
    per_seed: dict[int, dict[str, Metrics]] = {}
    (out / "compare.jsonl").unlink(missing_ok=True)
    for seed in seeds:
        seeded = base.replace(seed=seed)
        ds = generate_dataset(seeded.task)
        per_seed[seed] = {}
        for fuser in fusers:
            run_cfg = seeded.replace(fuser=fuser)
            result = train(new_model(run_cfg), ds, run_cfg.train, seed)
            metrics = evaluate(result.model, ds, "test", loss_curve=result.losses, seed=seed)
            per_seed[seed][fuser] = metrics
            log.info("seed %d %s mean accuracy %.4f (%.1fs)", seed, fuser, metrics.mean_accuracy, result.wall_time)
            append_jsonl(out / "compare.jsonl",
                         dict(metrics.to_record(), fuser=fuser, config=artifact_config(run_cfg)))
        write_subset_table(out / f"compare_seed{seed}.csv", cfg.task.modalities,
                           {f: per_seed[seed][f].accuracy for f in fusers},
                           artifact_config(seeded), mark_best=True)

    subsets = per_seed[seeds[0]][fusers[0]].subsets
    averaged = {
        f: {s: float(np.mean([per_seed[seed][f].accuracy[s] for seed in seeds])) for s in subsets}
        for f in fusers
    }
    header = dict(artifact_config(base), seeds=list(seeds), fusers=list(fusers))
    write_subset_table(out / "compare.csv", cfg.task.modalities, averaged, header, mark_best=True)

    means = {f: {seed: per_seed[seed][f].mean_accuracy for seed in seeds} for f in fusers}
    pairs = []
    for a, b in itertools.combinations(fusers, 2):
        over_subsets = paired_comparison(averaged[a], averaged[b])
        over_seeds = paired_comparison(means[a], means[b])
        pairs.append({
            "a": a, "b": b,
            "mean_a_minus_b": -over_subsets.mean_delta,
            "p_value_subsets": over_subsets.p_value,
            "p_value_seeds": over_seeds.p_value,
        })
    report = {"config": header, "mean_accuracy": {f: {str(s): v for s, v in m.items()} for f, m in means.items()},
              "pairs": pairs}
    write_json(out / "compare_report.json", report)
    return report


def config_from_args(path, overrides: dict) -> ExperimentConfig:
    """Load a config file (or defaults when ``path`` is None) and apply CLI overrides."""
    data = {}
    if path is not None:
        from nfuse.config import load_config
        data = load_config(path).to_dict()
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if overrides.get("seed") is not None:
        data.get("task", {}).pop("seed", None)
    return parse_config(json.loads(json.dumps(data)))
