import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colhar.errors import ArchitectureError, UsageError
from colhar.nn import (AdamState, Layers, ModelArchitecture, SensorWindow, adam_step, flatten,
                       forward, init_params, loss_and_grad, predict, unflatten)
from conftest import max_relative_error, numeric_gradient, random_arch, random_windows

architectures = st.builds(
    ModelArchitecture,
    input_channels=st.integers(1, 6),
    num_classes=st.integers(2, 12),
    window_length=st.integers(8, 120),
    conv_out_channels=st.integers(1, 16),
    conv_kernel=st.integers(1, 5),
    pool_kernel=st.integers(1, 3),
)


class TestArchitecture:
    def test_default_dense_input(self):
        arch = ModelArchitecture(input_channels=36, num_classes=12)
        assert arch.conv_length == 98
        assert arch.pool_length == 49
        assert arch.dense_input == 64 * 49 == 3136

    @settings(max_examples=60, deadline=None)
    @given(architectures)
    def test_param_count_matches_serialized_length(self, arch):
        assert init_params(arch, 0).shape == (arch.num_params,)
        expected = (arch.conv_kernel * arch.input_channels * arch.conv_out_channels
                    + arch.conv_out_channels + arch.dense_input * arch.num_classes
                    + arch.num_classes)
        assert arch.num_params == expected

    @settings(max_examples=30, deadline=None)
    @given(architectures, st.integers(0, 2**32 - 1))
    def test_flatten_roundtrip(self, arch, seed):
        params = init_params(arch, seed)
        again = flatten(unflatten(params, arch))
        assert np.array_equal(again, params)

    def test_window_shorter_than_kernel(self):
        with pytest.raises(ArchitectureError):
            ModelArchitecture(input_channels=1, num_classes=2, window_length=2, conv_kernel=3)

    def test_fingerprint_is_fieldwise(self):
        a = ModelArchitecture(3, 4)
        assert a.fingerprint() == ModelArchitecture(3, 4).fingerprint()
        assert a.fingerprint() != ModelArchitecture(3, 5).fingerprint()
        assert a.fingerprint() != ModelArchitecture(3, 4, window_length=50).fingerprint()


class TestInit:
    arch = ModelArchitecture(input_channels=2, num_classes=3, window_length=10,
                             conv_out_channels=4)

    def test_deterministic(self):
        assert np.array_equal(init_params(self.arch, 7), init_params(self.arch, 7))

    def test_seed_sensitive(self):
        assert not np.array_equal(init_params(self.arch, 7), init_params(self.arch, 8))

    def test_biases_zero_and_bounds(self):
        layers = unflatten(init_params(self.arch, 3), self.arch)
        assert not layers.conv_b.any() and not layers.dense_b.any()
        assert np.abs(layers.conv_w).max() <= 1 / math.sqrt(2 * 3)
        assert np.abs(layers.dense_w).max() <= 1 / math.sqrt(self.arch.dense_input)


class TestForward:
    def test_zero_network(self, rng):
        arch = ModelArchitecture(3, 5, window_length=20, conv_out_channels=4)
        w = random_windows(rng, arch, 1)[0]
        np.testing.assert_array_equal(forward(np.zeros(arch.num_params), arch, w), np.zeros(5))

    def test_hand_computed(self):
        arch = ModelArchitecture(input_channels=1, num_classes=2, window_length=4,
                                 conv_out_channels=1, conv_kernel=3, pool_kernel=2)
        # conv [1,1,1] over [1,2,3,4] -> [6, 9]; ReLU keeps both; pool -> [9]
        # dense w = [[1], [-1]], b = [0.5, 0] -> logits [9.5, -9]
        params = flatten(Layers(np.ones((1, 1, 3)), np.zeros(1),
                                np.array([[1.0], [-1.0]]), np.array([0.5, 0.0])))
        window = SensorWindow(np.array([[1.0, 2.0, 3.0, 4.0]]), 0)
        np.testing.assert_array_equal(forward(params, arch, window), [9.5, -9.0])

    def test_relu_blocks_negative_conv(self):
        arch = ModelArchitecture(1, 2, window_length=4, conv_out_channels=1)
        params = flatten(Layers(-np.ones((1, 1, 3)), np.zeros(1),
                                np.array([[1.0], [-1.0]]), np.array([0.5, 0.0])))
        window = SensorWindow(np.array([[1.0, 2.0, 3.0, 4.0]]), 0)
        np.testing.assert_array_equal(forward(params, arch, window), [0.5, 0.0])

    def test_length_mismatch(self, rng):
        arch = ModelArchitecture(1, 2, window_length=10, conv_out_channels=2)
        w = random_windows(rng, arch, 1)[0]
        with pytest.raises(ArchitectureError):
            forward(np.zeros(arch.num_params + 1), arch, w)


class TestLossAndGrad:
    def test_uniform_logits_loss(self, rng):
        arch = ModelArchitecture(2, 7, window_length=12, conv_out_channels=3)
        loss, grad = loss_and_grad(np.zeros(arch.num_params), arch, random_windows(rng, arch, 5))
        assert loss == pytest.approx(math.log(7), rel=1e-12)
        assert np.isfinite(grad).all()

    def test_matches_finite_differences(self, rng):
        arch = ModelArchitecture(2, 3, window_length=12, conv_out_channels=2, conv_kernel=3)
        assert 40 <= arch.num_params <= 60
        params = init_params(arch, 1) + rng.normal(0, 0.1, arch.num_params)
        batch = random_windows(rng, arch, 4)
        _, grad = loss_and_grad(params, arch, batch)
        numeric = numeric_gradient(lambda p: loss_and_grad(p, arch, batch)[0], params)
        assert max_relative_error(grad, numeric) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gradient_property(self, seed):
        rng = np.random.default_rng(seed)
        arch = random_arch(rng)
        params = init_params(arch, seed) + rng.normal(0, 0.1, arch.num_params)
        batch = random_windows(rng, arch, int(rng.integers(1, 9)))
        _, grad = loss_and_grad(params, arch, batch)
        numeric = numeric_gradient(lambda p: loss_and_grad(p, arch, batch)[0], params)
        assert max_relative_error(grad, numeric) < 1e-4

    def test_duplicated_batch(self, rng):
        arch = ModelArchitecture(2, 3, window_length=10, conv_out_channels=3)
        params = init_params(arch, 5)
        batch = random_windows(rng, arch, 4)
        l1, g1 = loss_and_grad(params, arch, batch)
        l2, g2 = loss_and_grad(params, arch, [w for w in batch for _ in range(2)])
        assert l2 == pytest.approx(l1, rel=1e-13)
        np.testing.assert_allclose(g2, g1, rtol=1e-12, atol=1e-15)

    def test_deterministic(self, rng):
        arch = ModelArchitecture(2, 3, window_length=10, conv_out_channels=3)
        params = init_params(arch, 5)
        batch = random_windows(rng, arch, 6)
        l1, g1 = loss_and_grad(params, arch, batch)
        l2, g2 = loss_and_grad(params, arch, batch)
        assert l1 == l2 and np.array_equal(g1, g2)

    def test_empty_batch(self):
        arch = ModelArchitecture(1, 2, window_length=5, conv_out_channels=1)
        with pytest.raises(UsageError):
            loss_and_grad(np.zeros(arch.num_params), arch, [])


class TestAdam:
    def test_zero_gradient(self):
        state = AdamState.fresh(3)
        params = np.array([1.0, -2.0, 3.0])
        new, state2 = adam_step(params, np.zeros(3), state)
        np.testing.assert_array_equal(new, params)
        assert not state2.first_moment.any() and not state2.second_moment.any()
        assert state2.step_count == 1

    def test_first_step_by_hand(self):
        new, state = adam_step(np.zeros(1), np.ones(1), AdamState.fresh(1))
        # m = 0.1, v = 0.001; both bias-corrected to 1; step = alpha / (1 + eps)
        assert state.first_moment[0] == pytest.approx(0.1, rel=1e-15)
        assert state.second_moment[0] == pytest.approx(0.001, rel=1e-12)
        assert new[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)

    def test_two_steps_descend(self):
        p1, s1 = adam_step(np.zeros(1), np.ones(1), AdamState.fresh(1))
        p2, s2 = adam_step(p1, np.ones(1), s1)
        assert s2.step_count == 2
        assert p2[0] < p1[0]

    def test_defaults(self):
        s = AdamState.fresh(1)
        assert (s.alpha, s.beta1, s.beta2, s.epsilon) == (0.001, 0.9, 0.999, 1e-8)

    def test_inputs_untouched(self):
        params, grad = np.ones(4), np.full(4, 0.5)
        state = AdamState.fresh(4)
        adam_step(params, grad, state)
        assert np.array_equal(params, np.ones(4)) and not state.first_moment.any()

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            adam_step(np.zeros(2), np.zeros(3), AdamState.fresh(2))


class TestPredict:
    def _arch_with_bias(self, bias):
        arch = ModelArchitecture(1, len(bias), window_length=4, conv_out_channels=1)
        params = np.zeros(arch.num_params)
        params[-len(bias):] = bias
        return arch, params

    @pytest.mark.parametrize("bias,expected", [
        ([0.1, 0.9, 0.3], 1),
        ([0.5, 0.5, 0.5], 0),
        ([0.0, 0.2, 0.2], 1),
    ])
    def test_argmax_with_tie_break(self, bias, expected):
        arch, params = self._arch_with_bias(bias)
        assert predict(params, arch, SensorWindow(np.ones((1, 4)), 0)) == expected

    def test_zero_params_predict_zero(self, rng):
        arch = ModelArchitecture(2, 4, window_length=10, conv_out_channels=2)
        for w in random_windows(rng, arch, 10):
            assert predict(np.zeros(arch.num_params), arch, w) == 0
