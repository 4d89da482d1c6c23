"""Randomised property suites for the fusion block.

Each suite draws fresh shapes, modality subsets and stack weights per trial
and reports the worst deviation seen together with the first failing trial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nfuse.harness.data import all_subsets
from nfuse.params import named_tensors, with_tensors
from nfuse.tensor import Tensor, precision
from nfuse.tfusion import (
    ModalitySet,
    correlation_extraction,
    modal_attention,
    tfusion_forward,
    tokenize,
)
from nfuse.transformer import init_encoder_stack

NUM_MODALITIES = 4
NORMALIZATION_TOL = 1e-6
CONVEX_TOL = 1e-6
PERMUTATION_TOL = 1e-4


@dataclass
class InvariantResult:
    name: str
    trials: int = 0
    failures: int = 0
    worst: float = 0.0
    repro: dict | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def record(self, deviation: float, ok: bool, repro: dict) -> None:
        self.trials += 1
        self.worst = max(self.worst, float(deviation))
        if not ok:
            self.failures += 1
            if self.repro is None:
                self.repro = repro


@dataclass
class Trial:
    seed: int
    batch: int
    channels: int
    feature_shape: tuple[int, ...]
    ids: tuple[int, ...]

    def repro(self) -> dict:
        return {"seed": self.seed, "B": self.batch, "C": self.channels,
                "R_f": list(self.feature_shape), "K": list(self.ids)}


def draw_trial(seed: int, trial: int, arity: int | None = None) -> tuple[Trial, np.random.Generator]:
    """Random B, C, 1-3D feature shape and modality subset; |K| cycles 1..4 unless given."""
    rng = np.random.default_rng([seed, trial])
    rank = 1 + trial % 3
    feature_shape = tuple(int(n) for n in rng.integers(1, 5, size=rank))
    k = arity if arity is not None else 1 + (trial // 3) % NUM_MODALITIES
    ids = tuple(sorted(int(i) + 1 for i in rng.choice(NUM_MODALITIES, size=k, replace=False)))
    channels = int(rng.choice([4, 8]))
    return Trial(seed * 100_000 + trial, int(rng.integers(1, 3)), channels, feature_shape, ids), rng


def random_inputs(t: Trial, rng: np.random.Generator, ids=None, scale: float = 1.0) -> ModalitySet:
    shape = (t.batch, t.channels) + t.feature_shape
    return ModalitySet({k: Tensor(rng.normal(scale=scale, size=shape)) for k in (ids or t.ids)}, NUM_MODALITIES)


def random_stack(channels: int, rng: np.random.Generator, depth: int = 2, wide: bool = True):
    """Stack with randomised parameters.

    ``wide`` draws every parameter (LN included) from N(0, gain^2), gain up to
    2: saturating weights for checks that must hold exactly at any scale.
    Otherwise weights keep the Xavier init times a gain in [0.5, 2] and
    biases/LN params are perturbed around their init; fp32 tolerance checks
    use this, since saturated softmaxes amplify summation-order rounding.
    """
    stack = init_encoder_stack(channels, depth=depth, num_heads=2, rng=rng)
    params = named_tensors(stack)
    if wide:
        gain = float(rng.uniform(0.2, 2.0))
        return with_tensors(stack, {n: Tensor(rng.normal(scale=gain, size=p.shape)) for n, p in params.items()})
    gain = float(rng.uniform(0.5, 2.0))
    new = {}
    for name, p in params.items():
        if name.endswith("gamma"):
            new[name] = Tensor(1.0 + rng.normal(scale=0.1, size=p.shape))
        elif p.ndim == 1:
            new[name] = Tensor(rng.normal(scale=0.1, size=p.shape))
        else:
            new[name] = Tensor(p.data * gain)
    return with_tensors(stack, new)


def normalization_suite(trials: int, seed: int) -> InvariantResult:
    res = InvariantResult("normalization")
    for i in range(trials):
        t, rng = draw_trial(seed, i)
        x = random_inputs(t, rng)
        maps = modal_attention(correlation_extraction(tokenize(x), random_stack(t.channels, rng)))
        w = np.stack([maps[k].data for k in maps.ids]).astype(np.float64)
        dev = float(np.abs(w.sum(axis=0) - 1.0).max())
        in_range = bool(np.all((w >= 0) & (w <= 1)))
        res.record(dev, dev <= NORMALIZATION_TOL and in_range, t.repro())
    return res


def identity_suite(trials: int, seed: int) -> InvariantResult:
    res = InvariantResult("single_modality_identity")
    for i in range(trials):
        t, rng = draw_trial(seed, i, arity=1)
        x = random_inputs(t, rng, scale=float(rng.uniform(0.1, 10.0)))
        out = tfusion_forward(x, random_stack(t.channels, rng))
        (k,) = x.ids
        dev = float(np.abs(out.data - x[k].data).max())
        res.record(dev, bool(np.array_equal(out.data, x[k].data)), t.repro())
    return res


def convex_bound_suite(trials: int, seed: int) -> InvariantResult:
    res = InvariantResult("convex_bound")
    for i in range(trials):
        t, rng = draw_trial(seed, i)
        x = random_inputs(t, rng)
        out = tfusion_forward(x, random_stack(t.channels, rng)).data
        stacked = np.stack([x[k].data for k in x.ids])
        below = stacked.min(axis=0) - out
        above = out - stacked.max(axis=0)
        dev = float(max(below.max(), above.max(), 0.0))
        res.record(dev, dev <= CONVEX_TOL, t.repro())
    return res


def permutation_suite(trials: int, seed: int) -> InvariantResult:
    """Same tensors under shuffled modality ids give the same fused output."""
    res = InvariantResult("modality_permutation")
    for i in range(trials):
        t, rng = draw_trial(seed, i, arity=2 + i % 3)
        x = random_inputs(t, rng)
        stack = random_stack(t.channels, rng, wide=False)
        targets = rng.permutation(NUM_MODALITIES)[: len(t.ids)] + 1
        relabelled = x.relabel(dict(zip(t.ids, (int(k) for k in targets))))
        a = tfusion_forward(x, stack).data
        b = tfusion_forward(relabelled, stack).data
        dev = float(np.abs(a - b).max())
        res.record(dev, dev < PERMUTATION_TOL, dict(t.repro(), relabel=[int(k) for k in targets]))
    return res


def arity_suite(trials: int, seed: int) -> InvariantResult:
    """One parameter set handles every non-empty subset with an unchanged output shape."""
    res = InvariantResult("arity")
    subsets = all_subsets(NUM_MODALITIES)
    for i in range(trials):
        t, rng = draw_trial(seed, i)
        stack = random_stack(t.channels, rng)
        ids = subsets[i % len(subsets)]
        x = random_inputs(t, rng, ids=ids)
        try:
            out = tfusion_forward(x, stack)
            ok = out.shape == x.shape and bool(np.isfinite(out.data).all())
        except Exception as exc:  # any failure on a valid subset is a violation
            ok = False
            res.notes.append(f"{ids}: {exc}")
        res.record(0.0 if ok else math.inf, ok, dict(t.repro(), K=list(ids)))
    return res


SUITES = {
    "normalization": normalization_suite,
    "single_modality_identity": identity_suite,
    "convex_bound": convex_bound_suite,
    "modality_permutation": permutation_suite,
    "arity": arity_suite,
}


def run_invariants(trials: int = 100, seed: int = 0, precision_name: str = "f32") -> list[InvariantResult]:
    with precision(precision_name):
        return [suite(trials, seed) for suite in SUITES.values()]
