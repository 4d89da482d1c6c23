"""Training loop and all-subset evaluation."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from nfuse import ops
from nfuse.harness.data import Dataset, all_subsets, assign_subsets
from nfuse.harness.model import FusionModel
from nfuse.harness.optim import AdamState, TrainConfig, adam_step, learning_rate
from nfuse.harness.streams import stream
from nfuse.tensor import NumericalError, Tape, grad

EVAL_BATCH = 256


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, lr: float, grad_norm: float, reason: str):
        self.step, self.lr, self.grad_norm = step, lr, grad_norm
        super().__init__(f"training aborted at step {step} (lr={lr:g}, grad_norm={grad_norm:g}): {reason}")


@dataclass
class TrainResult:
    model: FusionModel
    state: AdamState
    losses: list[float]
    step: int             # number of completed steps
    wall_time: float = 0.0


@dataclass
class Metrics:
    accuracy: dict[tuple[int, ...], float]
    mean_accuracy: float
    loss_curve: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0

    @property
    def subsets(self) -> list[tuple[int, ...]]:
        return list(self.accuracy)

    def to_record(self) -> dict:
        """JSON-ready view; wall time is left out so records are reproducible."""
        return {
            "seed": self.seed,
            "mean_accuracy": self.mean_accuracy,
            "per_subset": [{"subset": list(s), "accuracy": a} for s, a in self.accuracy.items()],
            "final_loss": self.loss_curve[-1] if self.loss_curve else None,
            "steps": len(self.loss_curve),
        }


class _SubsetSchedule:
    """Which training samples belong to which modality subset at a given epoch."""

    def __init__(self, n: int, num_modalities: int, protocol: str, seed: int):
        self.n, self.s, self.protocol, self.seed = n, num_modalities, protocol, seed
        self._epoch = None
        self.subsets = all_subsets(num_modalities)

    def at(self, epoch: int) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        key = 0 if self.protocol == "fixed_per_sample" else epoch
        if key != self._epoch:
            self.assigned = assign_subsets(self.n, self.s, self.protocol, self.seed, key)
            self.groups = {int(i): np.flatnonzero(self.assigned == i) for i in np.unique(self.assigned)}
            self._epoch = key
        return self.assigned, self.groups


def sample_batch(schedule: _SubsetSchedule, batch_size: int, seed: int, step: int):
    """(subset, sample indices) for ``step``; a pure function of (seed, step)."""
    rng = stream(seed, "batches", step)
    assigned, groups = schedule.at((step * batch_size) // schedule.n)
    sidx = int(assigned[rng.integers(schedule.n)])
    group = groups[sidx]
    index = np.sort(rng.choice(group, size=min(batch_size, len(group)), replace=False))
    return schedule.subsets[sidx], index


def train(model: FusionModel, dataset: Dataset, cfg: TrainConfig, seed: int, *,
          state: AdamState | None = None, start_step: int = 0, stop_step: int | None = None) -> TrainResult:
    """Cross-entropy training with one modality subset per batch.

    Resuming from ``(model, state, start_step)`` of an earlier run replays the
    same batches, so the continued loss curve is identical to an
    uninterrupted run.
    """
    cfg.validate()
    stop = cfg.steps if stop_step is None else stop_step
    state = state or AdamState()
    split = dataset.train
    dtype = model.head.weight.dtype
    schedule = _SubsetSchedule(len(split), model.num_modalities, cfg.missing_protocol, seed)
    losses: list[float] = []
    grad_norm = 0.0
    t0 = time.perf_counter()
    for step in range(start_step, stop):
        lr = learning_rate(cfg, step)
        subset, index = sample_batch(schedule, cfg.batch_size, seed, step)
        params = model.parameters()
        try:
            inputs = split.modality_set(subset, index, dtype)
            with Tape() as tape:
                loss = ops.cross_entropy(model.logits(inputs), split.labels[index])
            grads = dict(zip(params, grad(loss, list(params.values()), tape)))
        except NumericalError as exc:
            raise TrainingAborted(step, lr, grad_norm, str(exc)) from exc
        value = loss.item()
        grad_norm = float(np.sqrt(sum(float(np.sum(np.square(g.data, dtype=np.float64))) for g in grads.values())))
        if not np.isfinite(value) or not np.isfinite(grad_norm):
            raise TrainingAborted(step, lr, grad_norm, "non-finite loss or gradient")
        losses.append(value)
        new_params, state = adam_step(params, grads, state, cfg, step + 1, lr)
        model = model.with_parameters(new_params)
    return TrainResult(model, state, losses, stop, time.perf_counter() - t0)


def _accuracy(model: FusionModel, split, subset, dtype) -> float:
    correct = 0
    for start in range(0, len(split), EVAL_BATCH):
        index = np.arange(start, min(start + EVAL_BATCH, len(split)))
        pred = model.predict(split.modality_set(subset, index, dtype))
        correct += int(np.sum(pred == split.labels[index]))
    return correct / len(split)


def evaluation_threads() -> int:
    try:
        return max(1, int(os.environ.get("NFUSE_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model: FusionModel, dataset: Dataset, split: str = "test", subsets=None,
             threads: int | None = None, loss_curve=None, seed: int = 0) -> Metrics:
    """Accuracy for every requested subset (default: all 2^S - 1 of them)."""
    t0 = time.perf_counter()
    data = dataset.split(split)
    s = data.features.shape[0]
    subsets = all_subsets(model.num_modalities) if subsets is None else [tuple(sorted(x)) for x in subsets]
    for subset in subsets:
        if not subset or max(subset) > s or min(subset) < 1:
            raise ValueError(f"subset {subset} references modalities absent from the dataset (S={s})")
    dtype = model.head.weight.dtype
    threads = threads or evaluation_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(lambda sub: _accuracy(model, data, sub, dtype), subsets))
    else:
        accs = [_accuracy(model, data, sub, dtype) for sub in subsets]
    accuracy = dict(zip(subsets, accs))
    mean = float(np.mean(accs))
    return Metrics(accuracy, mean, list(loss_curve or []), time.perf_counter() - t0, seed)
