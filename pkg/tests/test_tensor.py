import numpy as np
import pytest

from sdnet import ops
from sdnet.errors import ContractError, ShapeError
from sdnet.tensor import GradTape, ParamStore, Tensor


def test_tensor_defaults_to_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.shape == (3,)
    assert t.data.flags.c_contiguous


def test_float64_is_kept():
    assert Tensor(np.zeros(2)).dtype == np.float64


def test_node_ids_are_unique():
    assert len({Tensor(0.0).node_id for _ in range(100)}) == 100


def test_identity_chain_gradient_is_one():
    x = Tensor(3.0, requires_grad=True)
    with GradTape() as tape:
        y = ops.reshape(x, ())
    tape.backward(y)
    assert tape.grad(x) == 1.0


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        y = ops.sum(ops.mul(x, x))
    np.testing.assert_array_equal(tape.backward(y)[x.node_id], [2, 4, 6])


def test_diamond_accumulates():
    a = Tensor(1.5, requires_grad=True)
    with GradTape() as tape:
        y = ops.add(a, a)
    tape.backward(y)
    assert tape.grad(a) == 2.0


def test_operator_sugar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = ops.sum((a * a) - a + 1.0)
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(a), [1.0, 3.0])


def test_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = ops.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_grad_shapes_match_values():
    x = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True)
    k = Tensor(np.ones((5, 3, 3, 3)), requires_grad=True)
    with GradTape() as tape:
        y = ops.sum(ops.relu(ops.conv2d(x, k)))
    tape.backward(y)
    assert tape.grad(x).shape == x.shape
    assert tape.grad(k).shape == k.shape


def test_topological_order():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        ops.sum(ops.tanh(ops.sigmoid(x)))
    seen = {x.node_id}
    for node in tape.nodes:
        assert all(p in seen or p not in tape._tracked for p in node.parent_ids)
        seen.add(node.node_id)


def test_no_tape_means_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = ops.mul(x, x)
    assert y.data[0] == 1.0


def test_untracked_branch_not_recorded():
    x = Tensor([1.0])
    with GradTape() as tape:
        ops.mul(x, x)
    assert tape.nodes == []


def test_unreachable_grad_is_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([5.0], requires_grad=True)
    with GradTape() as tape:
        y = ops.sum(x)
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(z), [0.0])


def test_nested_tapes_innermost_records():
    x = Tensor(2.0, requires_grad=True)
    with GradTape() as outer:
        with GradTape() as inner:
            y = ops.mul(x, x)
    assert len(inner.nodes) == 1 and outer.nodes == []
    inner.backward(y)
    assert inner.grad(x) == 4.0


class TestParamStore:
    def test_insertion_order_and_uniqueness(self):
        s = ParamStore()
        for n in ("b", "a", "c"):
            s.add(n, np.zeros(2))
        assert s.names() == ["b", "a", "c"]
        with pytest.raises(KeyError):
            s.add("a", np.zeros(2))

    def test_trainable_flags(self):
        s = ParamStore()
        s.add("w", np.zeros(3))
        s.add("stat", np.zeros(3), trainable=False)
        assert [n for n, _ in s.trainable_items()] == ["w"]
        assert not s["stat"].requires_grad

    def test_set_checks_shape(self):
        s = ParamStore()
        s.add("w", np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            s.set("w", np.zeros(3))

    def test_state_dict_round_trip_copies(self):
        s = ParamStore()
        s.add("w", np.arange(4.0))
        sd = s.state_dict()
        s["w"].data[:] = 0
        s.load_state_dict(sd)
        np.testing.assert_array_equal(s["w"].data, np.arange(4.0))

    def test_strict_load_reports_mismatch(self):
        s = ParamStore()
        s.add("w", np.zeros(1))
        with pytest.raises(KeyError, match="missing"):
            s.load_state_dict({"v": np.zeros(1)})
