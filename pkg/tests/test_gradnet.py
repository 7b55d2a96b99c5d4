import unittest

import numpy as np

from tlora_tool.adapters import AdapterKind, build_adapter
from tlora_tool.errors import DomainError, NumericalError
from tlora_tool.gradcheck import LayerStack
from tlora_tool.gradnet import (
    AdamState,
    AdaptedLinear,
    Linear,
    Param,
    adam_step,
    constant,
    forward_backward,
    gradient_check,
    relative_error,
)
from tlora_tool.linalg import make_rng


def _stack(seed: int = 0) -> LayerStack:
    rng = make_rng(seed)
    return LayerStack(
        [
            Linear("l0", rng.standard_normal((5, 3)), rng.standard_normal(5)),
            Linear("l1", rng.standard_normal((2, 5)), rng.standard_normal(2)),
        ]
    )


class BackwardTests(unittest.TestCase):
    def test_zero_network_zero_target(self):
        net = LayerStack([Linear("l0", np.zeros((4, 3)), np.zeros(4)), Linear("l1", np.zeros((2, 4)), np.zeros(2))])
        inputs = (make_rng(1).standard_normal((3, 6)), np.zeros(6, dtype=np.int64))
        loss = forward_backward(net, inputs, np.zeros((2, 6)))
        self.assertEqual(loss, 0.0)
        for param in net.parameters():
            np.testing.assert_array_equal(param.grad, np.zeros_like(param.value))

    def test_raw_stack_matches_finite_differences(self):
        rng = make_rng(2)
        inputs = (rng.standard_normal((3, 4)), np.zeros(4, dtype=np.int64))
        errors = gradient_check(_stack(), inputs, rng.standard_normal((2, 4)))
        self.assertEqual(set(errors), {"l0.W", "l0.b", "l1.W", "l1.b"})
        self.assertLessEqual(max(errors.values()), 1e-6)

    def test_frozen_parameters_receive_no_gradient(self):
        net = _stack()
        net.layers[0].freeze()
        rng = make_rng(3)
        forward_backward(net, (rng.standard_normal((3, 4)), None), rng.standard_normal((2, 4)))
        np.testing.assert_array_equal(net.layers[0].weight.grad, np.zeros((5, 3)))
        self.assertTrue(np.any(net.layers[1].weight.grad != 0.0))

    def test_non_finite_loss_raises(self):
        net = _stack()
        net.layers[1].bias.value[0] = np.inf
        with self.assertRaises(NumericalError):
            forward_backward(net, (np.ones((3, 2)), None), np.zeros((2, 2)))

    def test_target_shape_mismatch(self):
        with self.assertRaises(DomainError):
            forward_backward(_stack(), (np.ones((3, 2)), None), np.zeros((2, 3)))


class AdaptedLinearTests(unittest.TestCase):
    def test_matches_adapter_forward_per_column(self):
        rng = make_rng(4)
        adapter = build_adapter(rng.standard_normal((6, 5)), AdapterKind.TLORA, 4, 0, r_min=1, T=30)
        adapter.B += 0.2 * rng.standard_normal(adapter.B.shape)
        bias = rng.standard_normal(6)
        layer = AdaptedLinear("a0", adapter, bias)
        x = rng.standard_normal((5, 3))
        timesteps = np.array([0, 15, 30])
        out = layer(constant(x), timesteps).value
        for column, t in enumerate(timesteps):
            expected = adapter.forward(x[:, column : column + 1], int(t))[:, 0] + bias
            np.testing.assert_allclose(out[:, column], expected, rtol=1e-12, atol=1e-12)

    def test_only_factors_are_trainable(self):
        adapter = build_adapter(make_rng(5).standard_normal((4, 4)), AdapterKind.ORTHO_LORA, 2, 0)
        layer = AdaptedLinear("a0", adapter, np.zeros(4))
        trainable = [param.name for param in layer.parameters() if param.trainable]
        self.assertEqual(trainable, ["a0.A", "a0.B", "a0.S"])
        self.assertIs(layer.A.value, adapter.A)


class AdamTests(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        param = Param("p", np.array([1.0]))
        param.grad[:] = 3.0
        state = AdamState(lr=1e-3, weight_decay=0.0)
        adam_step(state, [param])
        expected = 1e-3 * 3.0 / (3.0 + 1e-8)
        self.assertAlmostEqual(1.0 - param.value[0], expected, places=12)
        self.assertEqual(param.grad[0], 0.0)

    def test_zero_gradient_without_decay_keeps_value(self):
        param = Param("p", np.array([0.5, -2.0]))
        adam_step(AdamState(weight_decay=0.0), [param])
        np.testing.assert_array_equal(param.value, [0.5, -2.0])

    def test_weight_decay_is_decoupled(self):
        param = Param("p", np.array([2.0]))
        adam_step(AdamState(lr=0.1, weight_decay=0.5), [param])
        self.assertAlmostEqual(param.value[0], 2.0 * (1 - 0.05))

    def test_frozen_parameter_is_unchanged(self):
        param = Param("p", np.array([1.0]), trainable=False)
        param.grad[:] = 10.0
        adam_step(AdamState(), [param])
        self.assertEqual(param.value[0], 1.0)
        self.assertEqual(param.grad[0], 0.0)

    def test_invalid_hyperparameters(self):
        with self.assertRaises(DomainError):
            AdamState(lr=0.0)
        with self.assertRaises(DomainError):
            AdamState(beta1=1.0)


class RelativeErrorTests(unittest.TestCase):
    def test_values(self):
        self.assertEqual(relative_error(np.zeros(2), np.zeros(2)), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1.0]), np.array([0.5])), 0.5)


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
