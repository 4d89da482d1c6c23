import dataclasses
import math
from collections import Counter

import numpy as np
import pytest

from nfuse.config import ConfigError, parse_config
from nfuse.experiment import load_checkpoint, save_checkpoint
from nfuse.harness.data import (Dataset, Split, SyntheticTaskSpec, all_subsets, generate_dataset,
                                linear_probe_accuracy, sample_missing_mask)
from nfuse.harness.model import BlockConfig, build_model
from nfuse.harness.optim import AdamState, TrainConfig, adam_step, learning_rate
from nfuse.harness.stats import paired_comparison
from nfuse.harness.streams import stream
from nfuse.harness.train import TrainingAborted, evaluate, sample_batch, train
from nfuse.tensor import Tensor

SMALL = SyntheticTaskSpec(channels=8, feature_shape=(4,), train_samples=300, val_samples=100, test_samples=200)


def model_for(spec, fuser="tfusion", seed=0, **block):
    return build_model(fuser, spec.modalities, spec.channels, spec.feature_shape, spec.num_classes,
                       BlockConfig(**block), stream(seed, "init"))


# --- synthetic data -----------------------------------------------------------------------------

def test_dataset_is_deterministic():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(a.split(name).features, b.split(name).features)
        np.testing.assert_array_equal(a.split(name).labels, b.split(name).labels)
    c = generate_dataset(dataclasses.replace(SMALL, seed=1))
    assert not np.array_equal(a.train.features, c.train.features)


def test_dataset_layout():
    ds = generate_dataset(SMALL)
    assert ds.train.features.shape == (4, 300, 8, 4)
    assert ds.train.features.dtype == np.float32
    assert set(np.unique(ds.test.labels)) == {0, 1}


def test_redundant_noiseless_probe_is_perfect():
    ds = generate_dataset(dataclasses.replace(SMALL, noise_std=0.0))
    for k in range(1, 5):
        assert linear_probe_accuracy(ds, k) == 1.0


def test_xor_noiseless_single_modality_probe_at_chance():
    ds = generate_dataset(dataclasses.replace(SMALL, noise_std=0.0, correlation_mode="xor_pair"))
    for k in range(1, 5):
        assert linear_probe_accuracy(ds, k) <= 0.6


def test_complementary_probe_below_ceiling():
    spec = dataclasses.replace(SMALL, correlation_mode="complementary", num_classes=4)
    ds = generate_dataset(spec)
    assert max(linear_probe_accuracy(ds, k) for k in range(1, 5)) < 0.95


@pytest.mark.parametrize("change", [
    {"train_samples": 0}, {"num_classes": 1}, {"modalities": 0}, {"correlation_mode": "nope"},
    {"noise_std": -1.0}, {"correlation_mode": "complementary", "num_classes": 2},
])
def test_degenerate_specs_rejected(change):
    with pytest.raises(ValueError):
        generate_dataset(dataclasses.replace(SMALL, **change))


def test_split_rejects_absent_modality():
    ds = generate_dataset(SMALL)
    with pytest.raises(ValueError):
        ds.test.modality_set((1, 5))


# --- missing-modality masks ---------------------------------------------------------------------

def test_fifteen_subsets_for_four_modalities():
    subsets = all_subsets(4)
    assert len(subsets) == 15 == len(set(subsets))
    assert subsets[:4] == [(1,), (2,), (3,), (4,)] and subsets[-1] == (1, 2, 3, 4)


def test_mask_draws_are_uniform_and_never_empty():
    draws = Counter(sample_missing_mask(4, seed=3, sample_id=i) for i in range(15_000))
    assert len(draws) == 15 and () not in draws
    for count in draws.values():
        assert 800 <= count <= 1200


def test_single_modality_mask():
    assert {sample_missing_mask(1, seed=0, sample_id=i) for i in range(50)} == {(1,)}


def test_fixed_mask_is_pure_function_of_seed_and_sample():
    a = [sample_missing_mask(4, seed=7, sample_id=i, epoch=0) for i in range(100)]
    b = [sample_missing_mask(4, seed=7, sample_id=i, epoch=5) for i in range(100)]
    assert a == b
    c = [sample_missing_mask(4, "resample_each_epoch", seed=7, sample_id=i, epoch=5) for i in range(100)]
    assert c != a


# --- optimizer ----------------------------------------------------------------------------------

def test_adam_first_step_is_minus_lr():
    cfg = TrainConfig(lr=1e-3)
    params = {"w": Tensor(np.full((2, 3), 0.5), dtype=np.float64)}
    new, state = adam_step(params, {"w": Tensor(np.ones((2, 3)), dtype=np.float64)}, AdamState(), cfg, t=1)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new["w"].numpy(), 0.5 - 1e-3 / (1 + 1e-8), rtol=0, atol=1e-12)
    assert state.t == 1


def test_adam_zero_gradient_keeps_params():
    params = {"w": Tensor(np.arange(4.0))}
    new, _ = adam_step(params, {"w": Tensor(np.zeros(4))}, AdamState(), TrainConfig(), t=1)
    np.testing.assert_array_equal(new["w"].numpy(), params["w"].numpy())


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": Tensor(np.zeros(3))}, {"w": Tensor(np.zeros(4))}, AdamState(), TrainConfig(), t=1)


def test_schedules():
    assert learning_rate(TrainConfig(lr=0.1), 999) == 0.1
    halving = TrainConfig(lr=0.1, schedule="step_halving", halve_every=10)
    assert [learning_rate(halving, s) for s in (0, 9, 10, 25)] == [0.1, 0.1, 0.05, 0.025]
    poly = TrainConfig(lr=0.1, schedule="poly", steps=100)
    assert learning_rate(poly, 0) == 0.1
    assert learning_rate(poly, 50) == pytest.approx(0.1 * 0.5 ** 0.9)


# --- training -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def redundant_run():
    spec = dataclasses.replace(SyntheticTaskSpec(), noise_std=0.0)
    ds = generate_dataset(spec)
    result = train(model_for(spec), ds, TrainConfig(), seed=0)
    return spec, ds, result


def test_training_halves_the_loss(redundant_run):
    _, _, result = redundant_run
    assert len(result.losses) == 2000
    assert np.mean(result.losses[-50:]) <= 0.5 * result.losses[0]


@pytest.mark.parametrize("fuser", ["tfusion", "mean", "max"])
def test_redundant_task_accuracy_floor(redundant_run, fuser):
    spec, ds, result = redundant_run
    model = result.model if fuser == "tfusion" else train(model_for(spec, fuser), ds, TrainConfig(), 0).model
    assert evaluate(model, ds).mean_accuracy >= 0.95


def test_untrained_model_is_at_chance():
    ds = generate_dataset(SMALL)
    for fuser in ("tfusion", "mean", "conv_pad"):
        acc = evaluate(model_for(SMALL, fuser), ds).mean_accuracy
        assert abs(acc - 1 / SMALL.num_classes) <= 0.1


def test_training_is_deterministic():
    ds = generate_dataset(SMALL)
    cfg = TrainConfig(steps=15, lr=1e-3)
    a = train(model_for(SMALL), ds, cfg, seed=4)
    b = train(model_for(SMALL), ds, cfg, seed=4)
    assert a.losses == b.losses
    for k, v in a.model.parameters().items():
        np.testing.assert_array_equal(v.numpy(), b.model.parameters()[k].numpy())


def test_resume_from_checkpoint_matches_uninterrupted(tmp_path):
    cfg = parse_config({"seed": 2, "task": {"channels": 8, "feature_shape": [4], "train_samples": 300,
                                            "val_samples": 100, "test_samples": 100},
                        "train": {"steps": 20, "lr": 1e-3}})
    ds = generate_dataset(cfg.task)
    full = train(model_for(cfg.task, seed=2), ds, cfg.train, seed=2)
    first = train(model_for(cfg.task, seed=2), ds, cfg.train, seed=2, stop_step=10)
    save_checkpoint(tmp_path / "ck.tfm", cfg, first)
    _, model, state, step = load_checkpoint(tmp_path / "ck.tfm")
    assert step == 10 and state.t == 10
    rest = train(model, ds, cfg.train, seed=2, state=state, start_step=step)
    assert first.losses + rest.losses == full.losses


def test_each_batch_uses_one_subset():
    from nfuse.harness.train import _SubsetSchedule
    sched = _SubsetSchedule(300, 4, "fixed_per_sample", 0)
    for step in range(20):
        subset, index = sample_batch(sched, 16, 0, step)
        assigned = {all_subsets(4)[i] for i in sched.assigned[index]}
        assert assigned == {subset}
        assert sample_batch(sched, 16, 0, step)[1].tolist() == index.tolist()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_aborts_with_diagnostics():
    ds = generate_dataset(SMALL)
    huge = Dataset(SMALL, Split(ds.train.features * 1e30, ds.train.labels), ds.val, ds.test)
    with pytest.raises(TrainingAborted) as err:
        train(model_for(SMALL, "mean"), huge, TrainConfig(steps=5, lr=1e10), seed=0)
    assert err.value.step >= 0 and "lr=" in str(err.value) and "grad_norm" in str(err.value)


# --- evaluation ---------------------------------------------------------------------------------

def test_evaluation_covers_all_subsets_and_is_repeatable():
    ds = generate_dataset(SMALL)
    model = train(model_for(SMALL), ds, TrainConfig(steps=10, lr=1e-3), seed=0).model
    a = evaluate(model, ds)
    b = evaluate(model, ds, threads=4)
    assert a.subsets == all_subsets(4)
    assert a.accuracy == b.accuracy
    assert all(0 <= v <= 1 for v in a.accuracy.values())
    assert a.mean_accuracy == pytest.approx(np.mean(list(a.accuracy.values())))


def test_evaluation_rejects_absent_modality():
    ds = generate_dataset(SMALL)
    with pytest.raises(ValueError):
        evaluate(model_for(SMALL, "mean"), ds, subsets=[(1, 5)])


# --- paired statistics --------------------------------------------------------------------------

def test_identical_tables_give_p_one():
    a = {s: 0.5 + 0.01 * i for i, s in enumerate(all_subsets(4))}
    r = paired_comparison(a, dict(a))
    assert r.p_value == 1.0 and all(d == 0 for d in r.deltas.values())


def test_uniform_improvement_is_significant():
    a = {s: float(i) for i, s in enumerate(all_subsets(4))}
    b = {s: v + 1 for s, v in a.items()}
    r = paired_comparison(a, b)
    assert all(d == 1 for d in r.deltas.values())
    # all 15 ranks tied: W+ = 120, mean 60, variance 15*16*31/24 - (15^3 - 15)/48 = 240
    z = 60 / math.sqrt(240)
    assert r.p_value == pytest.approx(math.erfc(z / math.sqrt(2)), rel=1e-9)
    assert r.p_value < 0.05


def test_distinct_improvements_use_exact_null():
    a = {s: 0.0 for s in all_subsets(4)}
    b = {s: 1 + 1e-3 * i for i, s in enumerate(all_subsets(4))}
    # every sign positive: P(W+ = 120) = 2^-15 under the null, doubled
    assert paired_comparison(a, b).p_value == pytest.approx(2 * 2.0 ** -15)


def test_single_pair_not_applicable():
    r = paired_comparison({(1,): 0.4}, {(1,): 0.6})
    assert r.p_value is None and not r.applicable


def test_mismatched_keys_rejected():
    with pytest.raises(ValueError):
        paired_comparison({(1,): 0.4, (2,): 0.3}, {(1,): 0.6, (3,): 0.2})


# --- config -------------------------------------------------------------------------------------

@pytest.mark.parametrize("data, path", [
    ({"bogus": 1}, "bogus"),
    ({"task": {"chanels": 4}}, "task.chanels"),
    ({"train": {"lr": "fast"}}, "train.lr"),
    ({"train": {"lr": -1.0}}, "train"),
    ({"fuser": "attention"}, "fuser"),
    ({"task": {"channels": 6}}, "block.heads"),
    ({"block": {"channels": 8}}, "block.channels"),
    ({"fuser": "mean", "block": {"variant": "no_ce"}}, "block.variant"),
    ({"seed": 3, "task": {"seed": 4}}, "task.seed"),
    ({"precision": "f16"}, "precision"),
    ({"train": {"missing_protocol": "sometimes"}}, "train"),
])
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as err:
        parse_config(data)
    assert err.value.path == path


def test_config_defaults_and_seed_propagation():
    cfg = parse_config({"seed": 9})
    assert cfg.task.seed == 9 and cfg.block.depth == 2 and cfg.train.steps == 2000
    assert cfg.resolved_fuser == "tfusion"
    assert parse_config({"block": {"variant": "no_ma"}}).resolved_fuser == "tfusion_no_ma"
    assert parse_config(cfg.to_dict()) == cfg


def test_model_parameter_names_are_stable():
    names = list(model_for(SMALL, "tfusion").parameters())
    assert names[0].startswith("head.") and any(n.startswith("stack.layers.1.") for n in names)
    assert math.prod(model_for(SMALL, "tfusion").head.weight.shape) == 8 * 4 * 2
