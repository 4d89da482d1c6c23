"""Synthetic multimodal classification tasks and the missing-modality protocol.

Each modality k observes a per-sample discrete code rendered through its own
random prototype plus Gaussian noise:

* ``redundant``: every modality observes the label itself.
* ``complementary``: modality k observes bit ``k mod nbits`` of the label, so
  the full label needs several modalities (requires num_classes >= 3).
* ``xor_pair``: binary label; modalities are paired (1,2), (3,4), ... and
  each carries a uniformly random bit whose XOR with its partner's bit is the
  label.  No single modality carries any information about the label.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from nfuse.harness.streams import stream
from nfuse.io import load_manifest, save_manifest
from nfuse.tensor import Tensor
from nfuse.tfusion import ModalitySet

CORRELATION_MODES = ("redundant", "complementary", "xor_pair")
MISSING_PROTOCOLS = ("fixed_per_sample", "resample_each_epoch")
SPLITS = ("train", "val", "test")
# a single-modality probe at or above this accuracy means one modality suffices
PROBE_CEILING = 0.95


@dataclass(frozen=True)
class SyntheticTaskSpec:
    modalities: int = 4
    channels: int = 16
    feature_shape: tuple[int, ...] = (8,)
    num_classes: int = 2
    train_samples: int = 2000
    val_samples: int = 500
    test_samples: int = 1000
    noise_std: float = 0.1
    correlation_mode: str = "redundant"
    seed: int = 0

    def validate(self) -> None:
        if self.modalities < 1 or self.channels < 1:
            raise ValueError("modalities and channels must be positive")
        if not self.feature_shape or any(n < 1 for n in self.feature_shape):
            raise ValueError(f"feature_shape must be non-empty and positive, got {self.feature_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.train_samples, self.val_samples, self.test_samples) < 1:
            raise ValueError("every split needs at least one sample")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.correlation_mode not in CORRELATION_MODES:
            raise ValueError(f"correlation_mode must be one of {CORRELATION_MODES}")
        if self.correlation_mode == "complementary":
            if self.num_classes < 3:
                raise ValueError("complementary mode needs num_classes >= 3")
            if self.modalities < _label_bits(self.num_classes):
                raise ValueError("complementary mode needs at least one modality per label bit")
        if self.correlation_mode == "xor_pair":
            if self.num_classes != 2:
                raise ValueError("xor_pair mode is binary (num_classes = 2)")
            if self.modalities < 2:
                raise ValueError("xor_pair mode needs at least two modalities")


def _label_bits(num_classes: int) -> int:
    return max(1, math.ceil(math.log2(num_classes)))


@dataclass
class Split:
    features: np.ndarray   # S x N x C x R_f, float32
    labels: np.ndarray     # N, int64

    def __len__(self) -> int:
        return len(self.labels)

    def modality_set(self, ids, index=None, dtype=np.float32) -> ModalitySet:
        s = self.features.shape[0]
        bad = [k for k in ids if not 1 <= k <= s]
        if bad:
            raise ValueError(f"modalities {bad} are not present in a dataset with S={s}")
        sel = slice(None) if index is None else index
        return ModalitySet({k: Tensor(self.features[k - 1][sel], dtype=dtype) for k in ids}, s)


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    train: Split
    val: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _codes(spec: SyntheticTaskSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """N x S integer code observed by each modality."""
    n, s = len(labels), spec.modalities
    if spec.correlation_mode == "redundant":
        return np.repeat(labels[:, None], s, axis=1)
    if spec.correlation_mode == "complementary":
        nbits = _label_bits(spec.num_classes)
        return np.stack([(labels >> (k % nbits)) & 1 for k in range(s)], axis=1)
    bits = rng.integers(0, 2, size=(n, s))
    for j in range(s // 2):
        bits[:, 2 * j + 1] = bits[:, 2 * j] ^ labels
    return bits


def generate_dataset(spec: SyntheticTaskSpec, check_probe: bool = True) -> Dataset:
    spec.validate()
    rng = stream(spec.seed, "data")
    n_codes = spec.num_classes if spec.correlation_mode == "redundant" else 2
    shape = (spec.channels,) + tuple(spec.feature_shape)
    prototypes = rng.standard_normal((spec.modalities, n_codes) + shape)

    sizes = (spec.train_samples, spec.val_samples, spec.test_samples)
    total = sum(sizes)
    labels = rng.integers(0, spec.num_classes, size=total)
    codes = _codes(spec, labels, rng)
    noise = rng.standard_normal((spec.modalities, total) + shape)
    features = np.stack([prototypes[k][codes[:, k]] for k in range(spec.modalities)])
    features = (features + spec.noise_std * noise).astype(np.float32)

    bounds = np.cumsum((0,) + sizes)
    splits = [
        Split(np.ascontiguousarray(features[:, a:b]), labels[a:b].astype(np.int64))
        for a, b in zip(bounds[:-1], bounds[1:])
    ]
    ds = Dataset(spec, *splits)
    if check_probe and spec.correlation_mode != "redundant":
        for k in range(1, spec.modalities + 1):
            acc = linear_probe_accuracy(ds, k)
            if acc >= PROBE_CEILING:
                raise ValueError(
                    f"modality {k} alone reaches probe accuracy {acc:.3f}; "
                    f"{spec.correlation_mode} task would not need cross-modal information"
                )
    return ds


def linear_probe_accuracy(ds: Dataset, modality: int, ridge: float = 1e-3) -> float:
    """Fit a ridge least-squares one-vs-rest classifier on one modality (train), score on val."""
    def design(split: Split) -> np.ndarray:
        x = split.features[modality - 1].reshape(len(split), -1).astype(np.float64)
        return np.hstack([x, np.ones((len(x), 1))])

    x_tr, x_va = design(ds.train), design(ds.val)
    y = np.eye(ds.spec.num_classes)[ds.train.labels]
    w = np.linalg.solve(x_tr.T @ x_tr + ridge * np.eye(x_tr.shape[1]), x_tr.T @ y)
    return float(np.mean(np.argmax(x_va @ w, axis=1) == ds.val.labels))


def all_subsets(num_modalities: int) -> list[tuple[int, ...]]:
    """Non-empty subsets ordered by size, then lexicographically (1-based ids)."""
    ids = range(1, num_modalities + 1)
    return [c for r in ids for c in itertools.combinations(ids, r)]


def sample_missing_mask(num_modalities: int, protocol: str = "fixed_per_sample",
                        rng: np.random.Generator | None = None, *, seed: int | None = None,
                        sample_id: int | None = None, epoch: int = 0) -> tuple[int, ...]:
    """Uniform draw over the 2^S - 1 non-empty subsets of modalities.

    Under ``fixed_per_sample`` the draw depends only on (seed, sample_id); under
    ``resample_each_epoch`` it also depends on ``epoch``.  An explicit ``rng``
    overrides both.
    """
    if num_modalities < 1:
        raise ValueError("need at least one modality")
    if protocol not in MISSING_PROTOCOLS:
        raise ValueError(f"protocol must be one of {MISSING_PROTOCOLS}")
    subsets = all_subsets(num_modalities)
    if rng is None:
        if seed is None or sample_id is None:
            raise ValueError("seed and sample_id are required without an explicit rng")
        extra = (sample_id,) if protocol == "fixed_per_sample" else (sample_id, epoch)
        rng = stream(seed, "masks", *extra)
    return subsets[int(rng.integers(len(subsets)))]


def assign_subsets(n: int, num_modalities: int, protocol: str, seed: int, epoch: int = 0) -> np.ndarray:
    """Index into ``all_subsets`` for each of n training samples."""
    lookup = {s: i for i, s in enumerate(all_subsets(num_modalities))}
    return np.array([
        lookup[sample_missing_mask(num_modalities, protocol, seed=seed, sample_id=i, epoch=epoch)]
        for i in range(n)
    ], dtype=np.int64)


def save_dataset(ds: Dataset, directory, meta: dict | None = None) -> None:
    for name in SPLITS:
        split = ds.split(name)
        tensors = {f"modality_{k + 1}": split.features[k] for k in range(split.features.shape[0])}
        tensors["labels"] = split.labels.astype(np.float32)
        save_manifest(f"{directory}/data_{name}.tfm", tensors, dict(meta or {}, split=name))


def load_split(path) -> Split:
    tensors, _ = load_manifest(path)
    labels = tensors.pop("labels").astype(np.int64)
    feats = np.stack([tensors[f"modality_{k + 1}"] for k in range(len(tensors))])
    return Split(feats, labels)
