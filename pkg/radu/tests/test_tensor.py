import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from radu import tensor as T
from radu.exceptions import ContractError, GradientError
from radu.tensor import GradSlot, Tensor, grad_check


class ElementwiseTests(SimpleTestCase):

    def test_leaky_relu(self):
        out = T.leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.1)
        assert_allclose(out.data, [-0.1, 0.0, 2.0])

    def test_tanh_zero(self):
        self.assertEqual(T.tanh(Tensor([0.0])).data[0], 0.0)

    def test_reduce_sum_distributes_ones(self):
        x = GradSlot([1.0, 2.0, 3.0])
        total = T.reduce_sum(x)
        self.assertEqual(total.item(), 6.0)
        total.backward()
        assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_shape_mismatch(self):
        with self.assertRaises(ContractError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_scalar_operand(self):
        x = GradSlot([1.0, 2.0])
        T.reduce_sum(T.mul(x, 3.0)).backward()
        assert_array_equal(x.grad, [3.0, 3.0])

    def test_no_graph_without_grad(self):
        out = T.tanh(Tensor([0.5]))
        self.assertFalse(out.requires_grad)
        self.assertEqual(out._parents, ())

    def test_grad_slot_starts_at_zero(self):
        slot = GradSlot(np.ones((2, 2)))
        self.assertEqual(slot.grad.shape, slot.value.shape)
        self.assertFalse(slot.grad.any())

    def test_shared_node_accumulates(self):
        x = GradSlot([2.0])
        T.reduce_sum(T.mul(x, x)).backward()
        assert_allclose(x.grad, [4.0])


class LayoutTests(SimpleTestCase):

    def test_segment_sum(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0]]))
        out = T.segment_sum(x, np.array([1, 0, 1]), 2)
        assert_array_equal(out.data, [[2.0], [4.0]])

    def test_take_backward_accumulates_repeats(self):
        x = GradSlot(np.arange(3.0))
        T.reduce_sum(T.take(x, np.array([0, 0, 2]))).backward()
        assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_matmul_contract(self):
        with self.assertRaises(ContractError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_broadcast_rejects_incompatible(self):
        with self.assertRaises(ContractError):
            T.broadcast_to(Tensor(np.ones(3)), (2, 4))

    def test_dtype_names(self):
        self.assertEqual(T.dtype_name(np.float32), 'f32')
        with self.assertRaises(ContractError):
            T.resolve_dtype('f16')


class GradCheckTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_tanh_passes(self):
        report = grad_check(T.tanh, [self.rng.normal(size=(3, 3))], step=1e-6, tol=1e-5)
        self.assertTrue(report.passed, str(report))
        self.assertEqual(report.checked, 9)

    def test_constant_output_passes(self):
        report = grad_check(lambda x: Tensor(np.ones(2)), [self.rng.normal(size=4)])
        self.assertTrue(report.passed)
        self.assertEqual(report.max_rel_error, 0.0)

    def test_composition(self):
        a, b = self.rng.uniform(0.2, 1.0, size=(4, 3)), self.rng.uniform(0.2, 1.0, size=(3, 2))
        report = grad_check(lambda x, w: T.tanh(T.matmul(T.leaky_relu(x), w)), [a, b])
        self.assertTrue(report.passed, str(report))

    def test_wrong_backward_fails(self):
        def broken(x):
            return T.node(x.data ** 2, (x,), lambda g: (g * x.data,))

        report = grad_check(broken, [self.rng.uniform(0.5, 1.0, size=3)], name='broken')
        self.assertFalse(report.passed)
        self.assertIn('broken', str(report))

    def test_small_gradient_error_is_not_forgiven(self):
        def slightly_off(x):
            return T.node(x.data ** 2, (x,), lambda g: (g * 2.0 * x.data * 1.001,))

        report = grad_check(slightly_off, [np.full(3, 5e-6)], name='slightly_off')
        self.assertFalse(report.passed)
        self.assertGreater(report.max_rel_error, 1e-5)

    def test_non_finite_forward(self):
        with self.assertRaises(GradientError) as ctx:
            grad_check(lambda x: T.mul(x, float('inf')), [np.ones(2)], name='inf_op')
        self.assertIn('inf_op', str(ctx.exception))
