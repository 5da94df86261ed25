import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from morecl import gradcore as gc
from morecl.checkpoint import CheckpointError, dumps, loads
from morecl.hatnet import (AdapterModel, CapacityExhaustedWarning, MaskConfig, UnknownTaskError,
                           accumulate_mask, anneal_s, apply_mask, compute_mask, gradient_multiplier,
                           mask_regularizer)
from morecl.memory import ReplayMemory
from oracles import sigmoid, straight_line_logits

unit = st.floats(0.0, 1.0, allow_nan=False)


class TestComputeMask:
    @pytest.mark.parametrize("s", [0.002, 1.0, 500.0])
    def test_zero_embedding_is_half(self, s):
        np.testing.assert_array_equal(compute_mask(np.zeros(4), s).data, 0.5)

    def test_saturation(self):
        assert abs(compute_mask([0.1], 500.0).data[0] - 1.0) < 1e-12

    def test_direct_sigmoid(self):
        assert abs(compute_mask([2.0], 1.0).data[0] - sigmoid(2.0)) < 1e-12

    def test_clamped_embedding_gives_exact_binary(self):
        np.testing.assert_array_equal(compute_mask([6.0, -6.0], 500.0).data, [1.0, 0.0])

    @given(arrays(np.float64, 5, elements=st.floats(-6, 6)), st.floats(0.001, 5.0))
    def test_strictly_inside_unit_interval(self, e, s):
        a = compute_mask(e, s).data
        assert np.all((a > 0) & (a < 1))


class TestApplyMask:
    def test_binary_gate(self):
        np.testing.assert_array_equal(apply_mask([3.0, -2.0, 5.0], [1.0, 1.0, 0.0]).data, [3.0, -2.0, 0.0])

    def test_ones_identity(self):
        h = np.array([[1.5, -2.0], [0.0, 7.0]])
        np.testing.assert_array_equal(apply_mask(h, np.ones(2)).data, h)

    def test_zeros_annihilate(self):
        h = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(apply_mask(h, np.zeros(4)).data, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(gc.DimensionError):
            apply_mask([1.0, 2.0], [1.0])

    def test_differentiable_in_both(self):
        with gc.Tape() as tape:
            h = gc.Tensor([2.0, 3.0], requires_grad=True)
            a = gc.Tensor([0.5, 0.25], requires_grad=True)
            loss = gc.sum_all(apply_mask(h, a))
        tape.backward(loss)
        np.testing.assert_array_equal(h.grad, [0.5, 0.25])
        np.testing.assert_array_equal(a.grad, [2.0, 3.0])


class TestAccumulate:
    def test_from_zero(self):
        np.testing.assert_array_equal(accumulate_mask([0, 0], [0.9, 0.1]), [0.9, 0.1])

    def test_elementwise_max(self):
        np.testing.assert_array_equal(accumulate_mask([0.9, 0.1], [0.2, 0.8]), [0.9, 0.8])

    @given(arrays(np.float64, 6, elements=unit), arrays(np.float64, 6, elements=unit))
    def test_idempotent_and_monotone(self, cum, a):
        once = accumulate_mask(cum, a)
        np.testing.assert_array_equal(accumulate_mask(once, a), once)
        assert np.all(once >= cum)


class TestGradientMultiplier:
    def test_fully_blocked(self):
        assert gradient_multiplier([1.0], [1.0])[0, 0] == 0.0

    def test_free_downstream(self):
        np.testing.assert_array_equal(gradient_multiplier([0.0], [0.0, 0.4, 1.0]), 1.0)

    def test_partial(self):
        assert gradient_multiplier([1.0], [0.3])[0, 0] == 0.7

    def test_grid_matches_formula(self):
        grid = [i / 10 for i in range(11)]
        M = gradient_multiplier(grid, grid)
        for (i, a), (j, b) in itertools.product(enumerate(grid), enumerate(grid)):
            assert M[i, j] == 1 - min(a, b)


class TestRegularizer:
    def test_fresh_network(self):
        r = mask_regularizer([np.array([1.0, 1.0, 0.0, 0.0])], [np.zeros(4)], 0.75)
        assert float(r.data) == 0.375

    def test_zero_masks(self):
        assert float(mask_regularizer([np.zeros(3), np.zeros(2)], [np.zeros(3), np.full(2, 0.5)], 0.75).data) == 0.0

    def test_used_neuron_not_counted(self):
        assert float(mask_regularizer([np.array([1.0, 1.0])], [np.array([1.0, 0.0])], 1.0).data) == 1.0

    def test_capacity_exhausted(self):
        with pytest.warns(CapacityExhaustedWarning):
            r = mask_regularizer([np.array([0.3, 0.9])], [np.ones(2)], 0.75)
        assert float(r.data) == 0.0

    @given(st.lists(st.tuples(arrays(np.float64, 4, elements=unit), arrays(np.float64, 4, elements=unit)),
                    min_size=1, max_size=3), st.floats(0.01, 5.0))
    def test_bounds(self, layers, lam):
        a = [x for x, _ in layers]
        cum = [c for _, c in layers]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CapacityExhaustedWarning)
            r = float(mask_regularizer(a, cum, lam).data) / lam
        assert -1e-12 <= r <= 1 + 1e-12


class TestAnneal:
    def test_endpoints(self):
        assert anneal_s(1, 10, 500.0) == pytest.approx(0.002, abs=1e-15)
        assert anneal_s(10, 10, 500.0) == 500.0

    def test_midpoint(self):
        assert abs(anneal_s(6, 11, 500.0) - 250.001) < 1e-9

    def test_single_batch(self):
        assert anneal_s(1, 1, 500.0) == 500.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            anneal_s(0, 5, 500.0)


def _tiny_model(mask_value: float) -> AdapterModel:
    m = AdapterModel(1, (1,), seed=0)
    m.weights[0].data = np.array([[1.0]])
    m.biases[0].data = np.array([0.0])
    m.add_task([7])
    m.embeddings[0][0].data = np.array([6.0 if mask_value else -6.0])
    m.heads[0][1].data = np.array([0.25, -0.5])
    return m


class TestForward:
    def test_hand_computation(self):
        m = _tiny_model(1.0)
        np.testing.assert_array_equal(m.features([2.0], 0, 500.0).data, [[2.0]])

    def test_gate_annihilation(self):
        m = _tiny_model(0.0)
        np.testing.assert_array_equal(m.features([2.0], 0, 500.0).data, [[0.0]])
        np.testing.assert_array_equal(m.forward([2.0], 0, 500.0).data, [[0.25, -0.5]])

    def test_matches_straight_line(self):
        rng = np.random.default_rng(11)
        m = AdapterModel(8, (16, 16), seed=3)
        m.set_standardization(rng.normal(size=(50, 8)))
        m.add_task([4, 9])
        for W, b in zip(m.weights, m.biases):
            b.data = rng.normal(size=b.shape)
        X = rng.normal(size=(10, 8))
        s = 3.0
        masks = [[sigmoid(s * v) for v in e.data] for e in m.embeddings[0]]
        layers = [(W.data.tolist(), b.data.tolist()) for W, b in zip(m.weights, m.biases)]
        W, b = m.heads[0]
        got = m.forward(X, 0, s).data
        assert got.shape == (10, 3)
        for x, row in zip(X, got):
            ref = straight_line_logits(x, m.feat_mean, m.feat_std, layers, masks, W.data.tolist(), b.data.tolist())
            np.testing.assert_allclose(row, ref, atol=1e-12, rtol=0)

    def test_unknown_task(self):
        m = AdapterModel(3, (4,))
        with pytest.raises(UnknownTaskError):
            m.forward(np.zeros(3), 0, 1.0)

    def test_head_has_ood_output(self):
        m = AdapterModel(3, (4, 4))
        m.add_task([0, 1, 2])
        assert m.heads[0][0].shape == (4, 4)
        assert m.ood_index(0) == 3


def test_initial_accumulated_mask_is_zero():
    m = AdapterModel(5, (6, 7))
    assert all(np.all(c == 0.0) for c in m.cum_masks)


def test_accumulated_masks_monotone_across_tasks():
    m = AdapterModel(4, (8, 8), seed=2)
    prev = [c.copy() for c in m.cum_masks]
    for k in range(4):
        m.add_task([k])
        m.accumulate(k)
        for c, p in zip(m.cum_masks, prev):
            assert np.all(c >= p)
        prev = [c.copy() for c in m.cum_masks]


def test_hooks_cover_shared_layers_only():
    m = AdapterModel(4, (5, 6), seed=0)
    m.add_task([0, 1])
    m.cum_masks = [np.array([1, 0, 1, 0, 0.5]), np.array([0, 1, 0, 1, 0, 0.2])]
    hooks = {h.target.name: h.multiplier for h in m.grad_hooks()}
    assert set(hooks) == {"W0", "b0", "W1", "b1"}
    # first layer: upstream treated as all ones
    np.testing.assert_array_equal(hooks["W0"], np.repeat((1 - m.cum_masks[0])[:, None], 4, axis=1))
    np.testing.assert_array_equal(hooks["b1"], 1 - m.cum_masks[1])
    np.testing.assert_array_equal(hooks["W1"], 1 - np.minimum.outer(m.cum_masks[1], m.cum_masks[0]))


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(s_max=0.5)


def _trained_like_model(seed=0) -> AdapterModel:
    rng = np.random.default_rng(seed)
    m = AdapterModel(6, (5, 4), seed=seed)
    m.set_standardization(rng.normal(size=(30, 6)))
    for k, classes in enumerate([[0, 1], [2, 3, 4]]):
        m.add_task(classes)
        m.accumulate(k)
    return m


def test_checkpoint_round_trip_bit_exact():
    m = _trained_like_model()
    mem = ReplayMemory(10, 6, seed=1)
    rng = np.random.default_rng(0)
    mem.update(rng.normal(size=(20, 6)), np.repeat([0, 1], 10), 0)
    raw = dumps(m, mem, [])
    m2, mem2, stats2 = loads(raw)
    assert dumps(m2, mem2, stats2) == raw
    assert m2.task_classes == [[0, 1], [2, 3, 4]]
    X = rng.normal(size=(5, 6))
    for k in range(2):
        assert m.forward(X, k).data.tobytes() == m2.forward(X, k).data.tobytes()


def test_checkpoint_rejects_bad_magic_and_truncation():
    raw = dumps(_trained_like_model(), ReplayMemory(4, 6), [])
    with pytest.raises(CheckpointError):
        loads(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        loads(raw[:-5])
    with pytest.raises(CheckpointError):
        loads(raw[:8] + b"\x09\x00" + raw[10:])
