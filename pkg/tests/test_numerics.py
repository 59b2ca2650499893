import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_gradients, fd_gradient, leaf, rel_err
from promptmim import numerics as nm
from promptmim.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
)
from promptmim.numerics import Tensor


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = nm.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_arithmetic(self):
        out = nm.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        a, b = leaf(rng, 4, 5), leaf(rng, 5, 3)
        w = Tensor(rng.normal(size=(4, 3)))
        check_gradients(lambda: nm.sum_(nm.mul(nm.matmul(a, b), w)), [a, b], 1e-6)

    def test_vector_cases(self):
        rng = np.random.default_rng(8)
        v, m = leaf(rng, 5), leaf(rng, 5, 3)
        w = Tensor(rng.normal(size=3))
        check_gradients(lambda: nm.sum_(nm.mul(nm.matmul(v, m), w)), [v, m], 1e-6)
        u = leaf(rng, 5)
        check_gradients(lambda: nm.matmul(v, u), [v, u], 1e-6)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = nm.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("c", [-100.0, 0.0, 3.5, 700.0])
    def test_shift_invariance(self, c):
        out = nm.softmax(Tensor([c, c + math.log(2.0)]))
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    def test_scalar_formula_oracle(self):
        # Independent evaluation of exp(x) / sum(exp(x)) for [0.5, 0.1].
        e1, e2 = math.exp(0.5), math.exp(0.1)
        expected = [e1 / (e1 + e2), e2 / (e1 + e2)]
        out = nm.softmax(Tensor([0.5, 0.1]))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            nm.softmax(Tensor(np.ones((2, 0))), axis=1)
        with pytest.raises(DimensionError):
            nm.softmax(Tensor(3.0))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=-300, max_value=300), min_size=1,
                    max_size=12))
    def test_sums_to_one(self, logits):
        out = nm.softmax(Tensor(logits))
        assert abs(float(out.data.sum()) - 1.0) < 1e-9
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0 + 1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = leaf(rng, 6)
        w = Tensor(rng.normal(size=6))
        check_gradients(lambda: nm.sum_(nm.mul(nm.softmax(x), w)), [x], 1e-6)


class TestCosineSimilarity:
    def test_self_similarity(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            v = Tensor(rng.normal(size=8))
            assert abs(nm.cosine_similarity(v, v).item() - 1.0) < 1e-12

    def test_orthogonal(self):
        out = nm.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))
        assert abs(out.item()) < 1e-15

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateInputError):
            nm.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_range_bound(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = Tensor(rng.normal(size=5) * 10)
            b = Tensor(rng.normal(size=5) * 0.01)
            assert -1.0 <= nm.cosine_similarity(a, b).item() <= 1.0

    def test_gradients(self):
        rng = np.random.default_rng(5)
        a, b = leaf(rng, 7), leaf(rng, 7)
        check_gradients(lambda: nm.cosine_similarity(a, b), [a, b], 1e-6)


class TestLayerNorm:
    def test_constant_row_epsilon_floor(self):
        out = nm.layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]),
                            Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_two_point_row(self):
        out = nm.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)),
                            Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-7)

    def test_standardizes_rows(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(5, 16)) * 3 + 2)
        out = nm.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-7)
        np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-7)

    def test_last_dim_too_small(self):
        with pytest.raises(DimensionError):
            nm.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))

    def test_gradients(self):
        rng = np.random.default_rng(13)
        x, g, b = leaf(rng, 3, 4), leaf(rng, 4), leaf(rng, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        check_gradients(lambda: nm.sum_(nm.mul(nm.layer_norm(x, g, b), w)),
                        [x, g, b], 1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        nm.backward(nm.sum_(p))
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_dot_gives_two_p(self):
        rng = np.random.default_rng(17)
        p = leaf(rng, 5)
        nm.backward(nm.dot(p, p))
        np.testing.assert_allclose(p.grad, 2.0 * p.data, atol=1e-12)

    def test_composite_anchored_objective(self):
        # cross-entropy plus a weighted squared-distance term, the same
        # composite shape the tuning loss takes.
        rng = np.random.default_rng(19)
        x = leaf(rng, 6)
        w = leaf(rng, 4, 6)
        ref = Tensor(rng.normal(size=(4, 6)))

        def build():
            wn = nm.l2_normalize(w, axis=-1)
            sims = nm.matmul(wn, nm.l2_normalize(x))
            ce = -nm.sum_(nm.mul(nm.log_softmax(sims * 10.0, axis=0),
                                 Tensor([0.0, 1.0, 0.0, 0.0])))
            diff = wn - ref
            kg = nm.sum_(nm.mul(diff, diff)) / 4
            return ce + 2.0 * kg

        check_gradients(build, [x, w], 1e-4)

    def test_non_scalar_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            nm.backward(p * 2.0)

    def test_disconnected_loss_rejected(self):
        with pytest.raises(ContractError):
            nm.backward(Tensor(1.0) * 2.0)

    def test_backward_twice_accumulates(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        loss = nm.sum_(p * 3.0)
        nm.backward(loss)
        first = p.grad.copy()
        nm.backward(loss)
        np.testing.assert_array_equal(p.grad, 2.0 * first)

    def test_unreachable_untouched(self):
        p = Tensor([1.0], requires_grad=True)
        q = Tensor([1.0], requires_grad=True)
        nm.backward(nm.sum_(p * 2.0))
        assert q.grad is None

    def test_graph_trace_visits_once(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        y = p * 2.0
        loss = nm.sum_(y + y)
        graph = nm.trace(loss)
        assert len(graph) == len({id(t) for t in graph})
        # parents precede children
        seen = set()
        for node in graph:
            for parent in node._parents:
                assert id(parent) in seen or parent is node
            seen.add(id(node))


class TestErrorStates:
    def test_log_of_negative(self):
        with pytest.raises(NonFiniteError):
            nm.log(Tensor([-1.0]))

    def test_division_by_zero(self):
        with pytest.raises(NonFiniteError):
            nm.div(Tensor([1.0]), Tensor([0.0]))

    def test_overflowing_exp(self):
        with pytest.raises(NonFiniteError):
            nm.exp(Tensor([1000.0]))

    def test_constructor_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])


class TestNoGrad:
    def test_suspends_recording(self):
        p = Tensor([1.0], requires_grad=True)
        with nm.no_grad():
            out = p * 2.0
        assert not out.requires_grad
        assert out._parents == ()

    def test_restores_state(self):
        assert nm.is_grad_enabled()
        with nm.no_grad():
            assert not nm.is_grad_enabled()
        assert nm.is_grad_enabled()


class TestShapeOps:
    def test_take_rows_duplicate_accumulation(self):
        t = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = nm.take_rows(t, [0, 0, 2])
        nm.backward(nm.sum_(out))
        np.testing.assert_array_equal(t.grad, [[2.0, 2.0], [0.0, 0.0],
                                               [1.0, 1.0]])

    def test_narrow_and_concat_roundtrip(self):
        rng = np.random.default_rng(23)
        t = leaf(rng, 4, 6)
        left = nm.narrow(t, 1, 0, 3)
        right = nm.narrow(t, 1, 3, 3)
        out = nm.concat([left, right], axis=1)
        np.testing.assert_array_equal(out.data, t.data)
        w = Tensor(rng.normal(size=(4, 6)))
        check_gradients(lambda: nm.sum_(nm.mul(
            nm.concat([nm.narrow(t, 1, 0, 3), nm.narrow(t, 1, 3, 3)], axis=1),
            w)), [t], 1e-6)

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(29)
        v = Tensor(rng.normal(size=9))
        out = nm.l2_normalize(v)
        assert abs(np.linalg.norm(out.data) - 1.0) < 1e-9

    def test_elementwise_gradients(self):
        rng = np.random.default_rng(31)
        two_arg = {
            "add": lambda a, b: a + b,
            "sub": lambda a, b: a - b,
            "mul": lambda a, b: a * b,
            "div": lambda a, b: a / (b * b + 1.0),
        }
        one_arg = {
            "exp": nm.exp,
            "log": lambda a: nm.log(a * a + 1.0),
            "sqrt": lambda a: nm.sqrt(a * a + 1.0),
            "pow": lambda a: (a * a + 1.0) ** 1.5,
            "neg": nm.neg,
        }
        for op in two_arg.values():
            a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
            w = Tensor(rng.normal(size=(3, 4)))
            check_gradients(lambda: nm.sum_(nm.mul(op(a, b), w)), [a, b], 1e-6)
        for op in one_arg.values():
            a = leaf(rng, 3, 4)
            w = Tensor(rng.normal(size=(3, 4)))
            check_gradients(lambda: nm.sum_(nm.mul(op(a), w)), [a], 1e-6)

    def test_broadcast_row_bias(self):
        rng = np.random.default_rng(37)
        x, bias = leaf(rng, 5, 3), leaf(rng, 3)
        w = Tensor(rng.normal(size=(5, 3)))
        check_gradients(lambda: nm.sum_(nm.mul(x + bias, w)), [x, bias], 1e-6)
