import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.core import ops
from src.core.errors import AbsentGradientError, ContractError, EvaluationError, NumericalError
from src.core.models import Precision
from src.core.tensor import Tape, Tensor, active_tape, backward, finite_difference_grad, no_grad


def test_tensor_copies_input() -> None:
    data = np.arange(6.0).reshape(2, 3)
    t = Tensor(data)
    data[0, 0] = 100.0
    assert t.data[0, 0] == 0.0
    assert t.shape == (2, 3)
    assert t.dtype == np.float64


def test_integer_input_becomes_float64() -> None:
    assert Tensor([1, 2, 3]).dtype == np.float64


def test_tape_records_only_inputs_requiring_grad() -> None:
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3))
    with Tape(Precision.FLOAT64) as tape:
        ops.add(b, b)
        assert len(tape) == 0
        ops.add(a, b)
        assert len(tape) == 1
    assert active_tape() is None


def test_backward_accumulates_fan_out() -> None:
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape(Precision.FLOAT64) as tape:
        loss = ops.reduce_sum(ops.mul(x, x))
    backward(tape, loss)
    assert_allclose(x.grad, 2 * x.data)
    assert_allclose(tape.grad(x), 2 * x.data)


def test_backward_twice_needs_reset() -> None:
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape(Precision.FLOAT64) as tape:
        loss = ops.reduce_sum(x)
    backward(tape, loss)
    with pytest.raises(ContractError):
        backward(tape, loss)
    tape.reset()
    with pytest.raises(AbsentGradientError):
        _ = x.grad


def test_backward_requires_scalar_loss() -> None:
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape(Precision.FLOAT64) as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_backward_rejects_foreign_loss() -> None:
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape(Precision.FLOAT64):
        loss = ops.reduce_sum(x)
    with pytest.raises(ContractError):
        backward(Tape(Precision.FLOAT64), loss)


def test_unreached_tensor_has_no_gradient() -> None:
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with Tape(Precision.FLOAT64) as tape:
        loss = ops.reduce_sum(x)
    backward(tape, loss)
    with pytest.raises(AbsentGradientError):
        tape.grad(unused)
    with pytest.raises(AbsentGradientError):
        _ = unused.grad


def test_mixed_precision_is_rejected() -> None:
    a = Tensor(np.ones(2), dtype=np.float32)
    b = Tensor(np.ones(2), dtype=np.float64)
    with pytest.raises(ContractError):
        ops.add(a, b)


def test_context_precision_is_enforced() -> None:
    a = Tensor(np.ones(2), dtype=np.float64)
    with Tape(Precision.FLOAT32):
        with pytest.raises(ContractError):
            ops.relu(a)


def test_float32_context_keeps_float32() -> None:
    a = Tensor(np.ones((2, 3)), dtype=np.float32, requires_grad=True)
    with Tape(Precision.FLOAT32) as tape:
        loss = ops.reduce_mean(ops.relu(a))
    assert loss.dtype == np.float32
    backward(tape, loss)
    assert a.grad.dtype == np.float32


def test_non_finite_output_raises() -> None:
    a = Tensor(np.array([1e308, 1e308]))
    with Tape(Precision.FLOAT64, check_finite=True):
        with pytest.raises(NumericalError):
            ops.scale(a, 10.0)


def test_non_finite_check_can_be_disabled() -> None:
    a = Tensor(np.array([1e308]))
    with Tape(Precision.FLOAT64, check_finite=False):
        out = ops.scale(a, 10.0)
    assert np.isinf(out.data).all()


def test_no_grad_suspends_recording() -> None:
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape(Precision.FLOAT64) as tape:
        with no_grad():
            y = ops.scale(x, 3.0)
        assert len(tape) == 0
    assert not y.requires_grad


def test_item_requires_single_element() -> None:
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_finite_difference_matches_quadratic() -> None:
    x = Tensor(np.array([0.5, -1.5, 2.0]))
    grad = finite_difference_grad(lambda t: ops.reduce_sum(ops.mul(t, t)), x)
    assert_allclose(grad.data, 2 * x.data, atol=1e-8)


def test_finite_difference_subset_leaves_zeros() -> None:
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    grad = finite_difference_grad(lambda t: ops.reduce_sum(ops.mul(t, t)), x, indices=[1])
    assert_allclose(grad.data, [0.0, 4.0, 0.0], atol=1e-8)


def test_finite_difference_rejects_bad_step() -> None:
    with pytest.raises(ContractError):
        finite_difference_grad(lambda t: ops.reduce_sum(t), Tensor([1.0]), step=0.0)


def test_finite_difference_reports_non_finite_objective() -> None:
    with pytest.raises(EvaluationError):
        finite_difference_grad(lambda t: float("nan"), Tensor([1.0]))


def test_detach_shares_data_without_grad() -> None:
    x = Tensor(np.ones(2), requires_grad=True, name="x")
    d = x.detach()
    assert not d.requires_grad
    assert_array_equal(d.data, x.data)
