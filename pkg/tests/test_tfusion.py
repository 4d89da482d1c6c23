import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import constant_set, random_set, zero_projections
from nfuse.tensor import ShapeError, Tensor
from nfuse.tfusion import (ModalitySet, TransformedSet, WeightMaps, correlation_extraction, detokenize, fuse,
                           modal_attention, tfusion_forward, tfusion_without_ce, tfusion_without_ma, tokenize)
from nfuse.transformer import init_encoder_stack


def stack(c=8, depth=2, seed=0, heads=4):
    return init_encoder_stack(c, depth=depth, num_heads=heads, rng=np.random.default_rng(seed))


# --- tokenization -------------------------------------------------------------------------------

def test_token_count_for_three_modalities_of_4x4():
    rng = np.random.default_rng(0)
    z0 = tokenize(random_set(rng, (1, 2, 4), shape=(2, 8, 4, 4)))
    assert z0.values.shape == (2, 48, 8)
    assert z0.modality_layout == (1, 2, 4)


def test_single_modality_tokens():
    z0 = tokenize(random_set(np.random.default_rng(1), (3,), shape=(2, 6, 5)))
    assert z0.values.shape == (2, 5, 6)


def test_tokens_are_channel_last_in_ascending_id_order():
    a = np.arange(2 * 3 * 2, dtype=np.float32).reshape(1, 3, 2, 2)[:, :, :, :]
    inputs = ModalitySet({3: Tensor(a + 100), 1: Tensor(a)}, 4)
    tokens = tokenize(inputs).values.numpy()
    expected = np.concatenate([a.reshape(1, 3, 4).transpose(0, 2, 1),
                               (a + 100).reshape(1, 3, 4).transpose(0, 2, 1)], axis=1)
    np.testing.assert_array_equal(tokens, expected)


def test_detokenize_roundtrip_exact():
    inputs = random_set(np.random.default_rng(2), (1, 2, 3, 4), shape=(2, 4, 2, 3, 2))
    back = detokenize(tokenize(inputs))
    for k in inputs:
        np.testing.assert_array_equal(back[k].numpy(), inputs[k].numpy())


def test_empty_set_rejected():
    with pytest.raises(ValueError, match="no available modalities"):
        ModalitySet({}, 4)


def test_mismatched_shapes_rejected():
    with pytest.raises(ShapeError):
        ModalitySet({1: Tensor(np.zeros((1, 2, 3))), 2: Tensor(np.zeros((1, 2, 4)))}, 4)


def test_id_out_of_range_rejected():
    with pytest.raises(ValueError):
        ModalitySet({5: Tensor(np.zeros((1, 2, 3)))}, 4)


# --- correlation extraction ---------------------------------------------------------------------

def test_zero_stack_ce_is_identity():
    inputs = random_set(np.random.default_rng(3), (1, 4), shape=(2, 8, 3))
    out = correlation_extraction(tokenize(inputs), zero_projections(stack()))
    assert isinstance(out, TransformedSet) and out.ids == (1, 4)
    for k in inputs:
        np.testing.assert_array_equal(out[k].numpy(), inputs[k].numpy())


def test_ce_width_mismatch():
    inputs = random_set(np.random.default_rng(3), (1,), shape=(1, 4, 3))
    with pytest.raises(ShapeError):
        correlation_extraction(tokenize(inputs), stack(c=8))


# --- modal attention and fusion -----------------------------------------------------------------

def test_single_modality_weights_are_one():
    w = modal_attention(random_set(np.random.default_rng(4), (2,)))
    assert isinstance(w, WeightMaps)
    assert np.all(w[2].numpy() == 1.0)


def test_equal_scores_split_evenly():
    w = modal_attention(constant_set({1: 0.7, 3: 0.7}))
    np.testing.assert_array_equal(w[1].numpy(), 0.5)


def test_weights_for_zero_and_ln3():
    w = modal_attention(constant_set({1: 0.0, 2: math.log(3)}, dtype=np.float64))
    np.testing.assert_allclose(w[1].numpy(), 0.25, atol=1e-6)
    np.testing.assert_allclose(w[2].numpy(), 0.75, atol=1e-6)


def test_fuse_examples():
    f = constant_set({1: 2.0, 2: 4.0})
    assert np.all(fuse(f, constant_set({1: 0.5, 2: 0.5})).numpy() == 3.0)
    np.testing.assert_allclose(fuse(f, constant_set({1: 0.25, 2: 0.75})).numpy(), 3.5)


def test_fuse_rejects_mismatch():
    with pytest.raises(ValueError):
        fuse(constant_set({1: 1.0, 2: 1.0}), constant_set({1: 0.5, 3: 0.5}))
    with pytest.raises(ShapeError):
        fuse(constant_set({1: 1.0}), constant_set({1: 1.0}, shape=(1, 2, 4)))


def test_fuse_uses_original_inputs_not_scores():
    # With a non-trivial stack the output must still be a convex mix of the originals.
    inputs = constant_set({1: 1.0, 2: 5.0}, shape=(1, 8, 3))
    out = tfusion_forward(inputs, stack(seed=9)).numpy()
    assert out.min() >= 1.0 - 1e-6 and out.max() <= 5.0 + 1e-6


def test_single_modality_identity_regardless_of_stack():
    rng = np.random.default_rng(5)
    for seed in range(5):
        inputs = random_set(rng, (seed % 4 + 1,), shape=(2, 8, 3, 2))
        out = tfusion_forward(inputs, stack(seed=seed))
        np.testing.assert_array_equal(out.numpy(), inputs[inputs.ids[0]].numpy())


# --- ablations ----------------------------------------------------------------------------------

def test_without_ce_examples():
    single = random_set(np.random.default_rng(6), (2,))
    np.testing.assert_array_equal(tfusion_without_ce(single).numpy(), single[2].numpy())
    assert np.all(tfusion_without_ce(constant_set({1: 0.0, 2: 0.0})).numpy() == 0.0)
    out = tfusion_without_ce(constant_set({1: 0.0, 2: math.log(3)}, dtype=np.float64)).numpy()
    np.testing.assert_allclose(out, 0.75 * math.log(3), atol=1e-12)


def test_without_ma_zero_stack_sums():
    zs = zero_projections(stack())
    f = random_set(np.random.default_rng(7), (1, 3), shape=(2, 8, 3))
    np.testing.assert_array_equal(tfusion_without_ma(f, zs).numpy(), f[1].numpy() + f[3].numpy())
    one = random_set(np.random.default_rng(8), (2,), shape=(2, 8, 3))
    np.testing.assert_array_equal(tfusion_without_ma(one, zs).numpy(), one[2].numpy())


def test_without_ma_scales_with_arity():
    zs = zero_projections(stack())
    for k in range(1, 5):
        out = tfusion_without_ma(constant_set({i: 1.0 for i in range(1, k + 1)}, shape=(1, 8, 3)), zs)
        np.testing.assert_array_equal(out.numpy(), float(k))


# --- arity and embeddings -----------------------------------------------------------------------

def test_one_parameter_set_serves_all_fifteen_subsets():
    rng = np.random.default_rng(10)
    full = random_set(rng, (1, 2, 3, 4), shape=(2, 8, 3))
    s = stack()
    subsets = [c for r in range(1, 5) for c in itertools.combinations(range(1, 5), r)]
    assert len(subsets) == 15
    for subset in subsets:
        out = tfusion_forward(ModalitySet({k: full[k] for k in subset}, 4), s)
        assert out.shape == (2, 8, 3)


def test_embeddings_break_permutation_symmetry():
    rng = np.random.default_rng(11)
    s = stack()
    emb = Tensor(rng.normal(size=(4, 8)))
    f = random_set(rng, (1, 2), shape=(1, 8, 3))
    swapped = f.relabel({1: 2, 2: 1})
    plain = np.abs(tfusion_forward(f, s).numpy() - tfusion_forward(swapped, s).numpy()).max()
    with_emb = np.abs(tfusion_forward(f, s, emb).numpy() - tfusion_forward(swapped, s, emb).numpy()).max()
    assert plain < 1e-5 and with_emb > 1e-4


def test_embedding_shape_checked():
    f = random_set(np.random.default_rng(12), (1, 2), shape=(1, 8, 3))
    with pytest.raises(ShapeError):
        tfusion_forward(f, stack(), Tensor(np.zeros((3, 8))))


# --- properties ---------------------------------------------------------------------------------

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple)
subsets = st.lists(st.integers(1, 4), min_size=1, max_size=4, unique=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), shapes, subsets)
def test_weights_normalized_and_output_bounded(seed, feature_shape, ids):
    rng = np.random.default_rng(seed)
    f = random_set(rng, ids, shape=(2, 4) + feature_shape)
    s = init_encoder_stack(4, depth=2, num_heads=2, rng=rng)
    tokens = tokenize(f)
    w = modal_attention(correlation_extraction(tokens, s))
    total = sum(w[k].numpy().astype(np.float64) for k in w)
    np.testing.assert_allclose(total, 1.0, atol=1e-6)
    out = fuse(f, w).numpy()
    stacked = np.stack([f[k].numpy() for k in f])
    assert np.all(out >= stacked.min(0) - 1e-6) and np.all(out <= stacked.max(0) + 1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), shapes, st.permutations([1, 2, 3, 4]), st.integers(2, 4))
def test_modality_relabeling_invariance(seed, feature_shape, perm, k):
    rng = np.random.default_rng(seed)
    f = random_set(rng, tuple(range(1, k + 1)), shape=(1, 4) + feature_shape)
    s = init_encoder_stack(4, depth=2, num_heads=2, rng=rng)
    relabeled = f.relabel(dict(zip(range(1, 5), perm)))
    diff = np.abs(tfusion_forward(f, s).numpy() - tfusion_forward(relabeled, s).numpy()).max()
    assert diff < 1e-4
