"""Autograd core: forward values, backward rules, tape invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import lmr_cbt.tensor as T
from lmr_cbt.errors import ContractError, DimensionError, NumericError
from lmr_cbt.tensor import Tape, Tensor


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])

    def test_hand_sum(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(out - expected)) <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=(4, 5))
        out = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], a[i] @ b, rtol=0, atol=1e-14)

    def test_associativity(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 5))
            c = rng.normal(size=(5, 2))
            left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
            right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
            denom = np.maximum(np.abs(left), 1e-12)
            assert np.max(np.abs(left - right) / denom) <= 1e-9


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_max_subtraction_stability(self):
        out = T.softmax(Tensor([1000.0, 1000.0]), axis=0)
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_direct_exponential_oracle(self):
        # exp(k)/sum(exp) computed once with the direct formula and frozen
        out = T.softmax(Tensor([1.0, 2.0, 3.0]), axis=0)
        expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([np.nan, 1.0]), axis=0)
        with pytest.raises(NumericError):
            T.softmax(Tensor([np.inf, 1.0]), axis=0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=5),
                    min_size=1, max_size=4).filter(
                        lambda rows: len({len(r) for r in rows}) == 1))
    def test_rows_sum_to_one_in_unit_interval(self, rows):
        out = T.softmax(Tensor(np.array(rows)), axis=-1).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_tanh_zero(self):
        assert T.tanh(Tensor([0.0])).data[0] == 0.0

    def test_broadcast_add_row_loop_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 3))
        row = rng.normal(size=(3,))
        expected = np.array([x[i] + row for i in range(4)])
        out = T.add(Tensor(x), Tensor(row)).data
        np.testing.assert_array_equal(out, expected)

    def test_non_broadcastable_rejected(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    def test_binary_values(self):
        a, b = Tensor([3.0, -2.0]), Tensor([2.0, 2.0])
        np.testing.assert_array_equal(T.sub(a, b).data, [1.0, -4.0])
        np.testing.assert_array_equal(T.mul(a, b).data, [6.0, -4.0])
        np.testing.assert_array_equal(T.div(a, b).data, [1.5, -1.0])

    def test_sigmoid_and_softplus_extremes_finite(self):
        x = Tensor([-800.0, 0.0, 800.0])
        sig = T.sigmoid(x).data
        sp = T.softplus(x).data
        assert np.all(np.isfinite(sig)) and np.all(np.isfinite(sp))
        assert sig[1] == 0.5 and abs(sp[1] - np.log(2.0)) < 1e-15
        assert sp[0] == 0.0 and sp[2] == 800.0


class TestConcat:
    def test_stack_rows(self):
        out = T.concat([Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])], axis=0)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_length_additivity(self):
        parts = [Tensor(np.ones(4)), Tensor(np.ones(4)), Tensor(np.ones(4))]
        assert T.concat(parts, axis=0).data.shape == (12,)

    def test_concat_slice_round_trip_bit_exact(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        joined = T.concat([Tensor(a), Tensor(b)], axis=0)
        back_a = T.narrow(joined, 0, 0, 2).data
        back_b = T.narrow(joined, 0, 2, 6).data
        assert np.array_equal(back_a, a) and np.array_equal(back_b, b)

    def test_extent_disagreement(self):
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        with Tape():
            T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares_analytic(self):
        x = leaf([1.0, 2.0])
        with Tape():
            T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape():
            y = T.mul(x, x)
            with pytest.raises(ContractError):
                T.backward(y)

    def test_loss_off_tape_rejected(self):
        with pytest.raises(ContractError):
            T.backward(leaf(3.0))

    def test_repeated_backward_accumulates(self):
        x = leaf([1.0, 2.0])
        with Tape():
            loss = T.tsum(T.mul(x, x))
            T.backward(loss)
            T.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_fan_out(self):
        # y = x*x used twice: d/dx [x*x + x*x] = 4x
        x = leaf([3.0])
        with Tape():
            y = T.mul(x, x)
            T.backward(T.add(y, y))
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_no_tape_means_no_recording(self):
        x = leaf([1.0, 2.0])
        y = T.mul(x, x)
        assert y.node is None and y.tape is None and not y.requires_grad

    def test_constant_leaf_gets_no_grad(self):
        x = leaf([1.0, 2.0])
        c = Tensor([5.0, 5.0])
        with Tape():
            T.backward(T.tsum(T.mul(x, c)))
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [5.0, 5.0])


class TestTapeInvariants:
    def test_node_ids_topologically_ordered(self):
        x = leaf(np.ones((2, 2)))
        with Tape() as tape:
            a = T.mul(x, x)
            b = T.add(a, x)
            c = T.tsum(b)
            for consumer in (a, b, c):
                for inp in tape.nodes[consumer.node].inputs:
                    if inp.node is not None:
                        assert inp.node < consumer.node
            assert [n.kind for n in tape.nodes] == ["mul", "add", "sum"]

    def test_cross_tape_use_rejected(self):
        x = leaf(np.ones(3))
        with Tape():
            y = T.mul(x, x)
        with Tape():
            with pytest.raises(ContractError):
                T.add(y, x)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(123)
            a = leaf(rng.normal(size=(4, 4)))
            b = leaf(rng.normal(size=(4, 4)))
            with Tape():
                out = T.softmax(T.matmul(T.tanh(a), b), axis=-1)
                loss = T.tsum(T.mul(out, out))
                T.backward(loss)
            return loss.data.copy(), a.grad.copy(), b.grad.copy()

        first, second = run(), run()
        for x, y in zip(first, second):
            assert np.array_equal(x, y)


class TestShapes:
    def test_pad_and_narrow_values(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        padded = T.pad(x, 0, 1, 1)
        np.testing.assert_array_equal(
            padded.data, [[0.0, 0.0], [1.0, 2.0], [3.0, 4.0], [0.0, 0.0]])
        np.testing.assert_array_equal(T.narrow(x, 1, 1, 2).data, [[2.0], [4.0]])

    def test_transpose_reshape(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(T.transpose(x).data, x.data.T)
        np.testing.assert_array_equal(T.reshape(x, (3, 2)).data, x.data.reshape(3, 2))

    def test_mean_axis(self):
        x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]))
        np.testing.assert_array_equal(T.tmean(x, axis=0).data, [3.0, 5.0])
        np.testing.assert_array_equal(T.tmean(x, axis=1, keepdims=True).data, [[2.0], [6.0]])
