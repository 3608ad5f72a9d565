import threading

import numpy as np
import pytest

from sentfuse.errors import (
    ContractError,
    DegenerateDistributionError,
    DimensionError,
    NonFiniteError,
    OracleInvalidError,
)
from sentfuse.tensor import (
    MASK_SENTINEL,
    Function,
    Tensor,
    backward,
    concat,
    default_dtype,
    finite_diff_check,
    get_default_dtype,
    log_softmax_lastdim,
    matmul,
    no_grad,
    normalize_lastdim,
    softmax_lastdim,
    stack,
    stop_gradient,
)

TOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestSoftmax:
    def test_known_values(self):
        out = softmax_lastdim(Tensor([1.0, 2.0, 3.0], dtype=np.float64))
        np.testing.assert_allclose(out.data, [0.0900, 0.2447, 0.6652], atol=1e-4)

    def test_rows_sum_to_one(self, rng):
        out = softmax_lastdim(Tensor(rng.normal(size=(4, 7))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_masked_entries_are_exactly_zero(self):
        mask = np.array([[0.0, -np.inf, 0.0]])
        out = softmax_lastdim(Tensor([[5.0, 100.0, 5.0]]), mask)
        assert out.data[0, 1] == 0.0
        np.testing.assert_allclose(out.data[0, [0, 2]], [0.5, 0.5])

    def test_sentinel_mask_behaves_like_minus_infinity(self):
        a = softmax_lastdim(Tensor([[1.0, 2.0]]), np.array([[0.0, -np.inf]]))
        b = softmax_lastdim(Tensor([[1.0, 2.0]]), np.array([[0.0, MASK_SENTINEL]]))
        np.testing.assert_array_equal(a.data, b.data)

    def test_fully_masked_slice_raises(self):
        mask = np.array([[-np.inf, -np.inf], [0.0, 0.0]])
        with pytest.raises(DegenerateDistributionError):
            softmax_lastdim(Tensor(np.zeros((2, 2))), mask)

    def test_mask_must_broadcast(self):
        with pytest.raises(DimensionError):
            softmax_lastdim(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))

    def test_log_softmax_matches_log_of_softmax(self, rng, float64):
        x = Tensor(rng.normal(size=(3, 5)))
        np.testing.assert_allclose(log_softmax_lastdim(x).data, np.log(softmax_lastdim(x).data), atol=1e-12)


class TestGradients:
    """Analytic gradients against central differences at 64-bit precision."""

    @pytest.fixture(params=[0] + [pytest.param(seed, marks=pytest.mark.slow) for seed in range(1, 100)])
    def rng(self, request):
        return np.random.default_rng(request.param)

    def check(self, f, shape, rng, positive=False):
        values = rng.normal(size=shape)
        if positive:
            values = np.abs(values) + 0.5
        assert finite_diff_check(f, Tensor(values)) < TOL

    def test_add_mul_with_broadcast(self, rng, float64):
        other = Tensor(rng.normal(size=(1, 4)))
        self.check(lambda x: ((x + other) * x * other).sum(), (3, 4), rng)

    def test_sub_div_neg(self, rng, float64):
        other = Tensor(np.abs(rng.normal(size=(3, 4))) + 1.0)
        self.check(lambda x: (-(x - 2.0) / other + 1.0 / (x * x + 1.0)).sum(), (3, 4), rng)

    def test_pow(self, rng, float64):
        self.check(lambda x: (x ** 3).sum() + (x ** 0.5).sum(), (5,), rng, positive=True)

    def test_batched_matmul(self, rng, float64):
        right = Tensor(rng.normal(size=(4, 2)))
        self.check(lambda x: matmul(x, right).sum(), (2, 3, 4), rng)
        left = Tensor(rng.normal(size=(2, 3, 4)))
        self.check(lambda w: (matmul(left, w) ** 2).sum(), (4, 2), rng)

    def test_reductions(self, rng, float64):
        self.check(lambda x: x.sum(axis=1).mean() + (x.mean(axis=(0, 2), keepdims=True) ** 2).sum(), (2, 3, 4), rng)

    def test_shape_ops(self, rng, float64):
        weights = Tensor(rng.normal(size=(4, 3, 2)))
        self.check(lambda x: (x.reshape(4, 6).transpose().reshape(6, 4).T.reshape(4, 3, 2) * weights).sum(), (4, 6), rng)
        self.check(lambda x: (x.swapaxes(0, 1) * weights.swapaxes(0, 1)).sum(), (4, 3, 2), rng)

    def test_getitem_gathers_and_accumulates(self, rng, float64):
        ids = np.array([[0, 2, 2], [1, 0, 3]])
        self.check(lambda table: (table[ids] ** 2).sum(), (4, 3), rng)
        self.check(lambda x: (x[:, 1:] * 3.0).sum() + x[0, 0], (2, 3), rng)

    def test_elementwise(self, rng, float64):
        self.check(lambda x: (x.exp() + x.sigmoid() + x.tanh()).sum(), (6,), rng)
        self.check(lambda x: x.log().sum(), (6,), rng, positive=True)
        self.check(lambda x: (x.relu() * x).sum(), (6,), rng)

    def test_concat_and_stack(self, rng, float64):
        other = Tensor(rng.normal(size=(2, 3)))
        weights = Tensor(rng.normal(size=(2, 2, 3)))
        self.check(lambda x: (concat([x, other, x], axis=0) ** 2).sum(), (2, 3), rng)
        self.check(lambda x: (stack([x, other], axis=1) * weights).sum(), (2, 3), rng)

    def test_masked_softmax(self, rng, float64):
        mask = np.triu(np.full((4, 4), -np.inf), k=1)
        weights = Tensor(rng.normal(size=(4, 4)))
        self.check(lambda x: (softmax_lastdim(x, mask) * weights).sum(), (4, 4), rng)

    def test_log_softmax_and_normalize(self, rng, float64):
        weights = Tensor(rng.normal(size=(3, 5)))
        self.check(lambda x: (log_softmax_lastdim(x) * weights).sum(), (3, 5), rng)
        self.check(lambda x: (normalize_lastdim(x) * weights).sum(), (3, 5), rng)


class WrongDouble(Function):
    def forward(self, a):
        return a * 1e-3

    def backward(self, grad):
        return (grad * 2e-3,)


class TestOracle:
    def test_wrong_gradient_is_caught(self, float64):
        x = Tensor(np.random.default_rng(7).normal(size=(3,)))
        assert finite_diff_check(lambda t: WrongDouble.apply(t).sum(), x) > 1e-2

    def test_small_gradients_are_compared_relatively(self, float64):
        x = Tensor([0.5, -1.5])
        assert finite_diff_check(lambda t: (t * 1e-6).sum(), x) < TOL
        assert finite_diff_check(lambda t: WrongDouble.apply(t * 1e-3).sum(), x) == pytest.approx(1 / 3, rel=1e-3)

    def test_untouched_elements_contribute_nothing(self, float64):
        x = Tensor([1.0, 2.0, 3.0])
        assert finite_diff_check(lambda t: (t[:1] ** 2).sum(), x) < TOL


class TestBackward:
    def test_repeated_runs_are_bit_identical(self, float64):
        rng = np.random.default_rng(3)
        values, weights = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))

        def gradients():
            x = Tensor(values, requires_grad=True, name="x")
            w = Tensor(weights, requires_grad=True, name="w")
            loss = (log_softmax_lastdim(matmul(normalize_lastdim(x), w)) * x.tanh()).sum()
            table = backward(loss)
            return table["x"].data, table["w"].data

        for first, second in zip(gradients(), gradients()):
            np.testing.assert_array_equal(first, second)

    def test_shared_input_accumulates(self, float64):
        x = Tensor([3.0], requires_grad=True, name="x")
        grads = backward((x * x + x).sum())
        np.testing.assert_allclose(grads["x"].data, [7.0])

    def test_table_is_keyed_by_name(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True, name="layer.w")
        grads = backward(matmul(Tensor(np.ones((1, 2))), w).sum())
        assert set(grads) == {"layer.w"}
        assert grads.global_norm() == pytest.approx(2.0)

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_loss_without_parameters_is_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor([1.0]).sum())

    def test_stop_gradient_blocks_flow(self):
        x = Tensor([2.0], requires_grad=True, name="x")
        y = Tensor([1.0], requires_grad=True, name="y")
        grads = backward((stop_gradient(x * 3.0) * y).sum())
        assert "x" not in grads
        np.testing.assert_allclose(grads["y"].data, [6.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert (x * 2.0).requires_grad

    def test_item_requires_single_element(self):
        assert Tensor([[4.0]]).item() == 4.0
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()


class TestContracts:
    def test_matmul_inner_dimension(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_matmul_needs_matrices(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_non_finite_construction(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_non_finite_result(self):
        with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
            Tensor([0.0, 1.0]).log()

    def test_nondeterministic_function_invalidates_oracle(self):
        draws = np.random.default_rng(1)
        with pytest.raises(OracleInvalidError):
            finite_diff_check(lambda x: (x * float(draws.normal())).sum(), Tensor([1.0, 2.0]))

    def test_eps_range(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda x: x.sum(), Tensor([1.0]), eps=0.5)


class TestPrecision:
    def test_default_is_float32(self):
        assert get_default_dtype() == np.float32
        assert Tensor([1.0]).dtype == np.float32

    def test_context_restores_previous(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_setting_is_per_thread(self):
        seen = []
        with default_dtype(np.float64):
            worker = threading.Thread(target=lambda: seen.append(Tensor([1.0]).dtype))
            worker.start()
            worker.join()
        assert seen == [np.float32]
