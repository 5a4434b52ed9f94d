import json

import numpy as np
import pytest

from tailgraph.diffcore import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    const_mm,
    grad_check,
    load_checkpoint,
    no_grad,
    save_checkpoint,
    stack_rows,
)


def test_relu_basic():
    out = Tensor([-1.0, 2.0]).relu()
    assert out.data.tolist() == [0.0, 2.0]


def test_row_softmax_uniform_logits():
    q = 7
    out = Tensor(np.zeros((3, q))).row_softmax()
    assert np.allclose(out.data, 1.0 / q)


def test_row_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = Tensor(rng.normal(size=(5, 9)) * 10).row_softmax()
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12


def test_log_sum_exp_no_overflow():
    out = Tensor([1000.0, 1000.0]).log_sum_exp()
    assert np.isfinite(out.data)
    assert abs(float(out.data) - (1000.0 + np.log(2.0))) < 1e-12


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(5.0))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(5))


def test_backward_of_squared_norm_is_2x():
    x = Tensor([1.0, -2.0, 3.0])
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_twice_doubles_gradients_exactly():
    x = Tensor([0.3, -0.7, 1.1])
    w = Parameter(np.array([[0.2, 0.1, -0.4], [0.5, 0.3, 0.9]]), name="w")
    loss = ((w @ x) ** 2).sum()
    loss.backward()
    once = w.grad.copy()
    loss.backward()
    assert np.array_equal(w.grad, 2.0 * once)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_linear_function_gradient_near_exact():
    rng = np.random.default_rng(1)
    a = rng.normal(size=6)

    def f(x):
        return (Tensor(a) * x).sum()

    err = grad_check(f, Tensor(rng.normal(size=6)))
    assert err < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_composite_ops_pass_grad_check(seed):
    rng = np.random.default_rng(seed)
    m = Parameter(rng.normal(size=(6, 4)), name="m")

    def f(x):
        y = (x @ m).relu() + x.abs().mean(axis=1, keepdims=True)
        z = y.row_softmax().log_sum_exp(axis=1)
        return (z * z).sum() + x.l2_norm()

    # keep away from relu/abs kinks
    x0 = rng.normal(size=(5, 6))
    x0[np.abs(x0) < 1e-2] += 0.05
    err = grad_check(f, Tensor(x0))
    assert err < 1e-4


def test_concat_and_stack_gradients():
    rng = np.random.default_rng(3)

    def f(x):
        top = concat([x, x * 2.0], axis=0)
        side = concat([x, x ** 2], axis=1)
        rows = stack_rows([top.sum(axis=0), (x * 3.0).sum(axis=0)])
        return (rows * rows).sum() + side.l2_norm()

    assert grad_check(f, Tensor(rng.normal(size=(3, 2)) + 1.5)) < 1e-6


def test_rows_gather_and_reshape_gradients():
    rng = np.random.default_rng(4)

    def f(x):
        picked = x.rows([0, 2, 2])
        return (picked.reshape(6) ** 2).sum()

    assert grad_check(f, Tensor(rng.normal(size=(3, 2)))) < 1e-6


def test_const_mm_matches_dense_matmul():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(4, 3))
    x = Tensor(rng.normal(size=(3, 2)))
    out = const_mm(m, x)
    assert np.allclose(out.data, m @ x.data)
    out.sum().backward()
    assert np.allclose(x.grad, m.T @ np.ones((4, 2)))


def test_no_grad_blocks_recording():
    x = Tensor([1.0, 2.0])
    with no_grad():
        y = (x * 3.0).sum()
    assert y._parents == ()
    y.backward()  # a no-parent scalar: nothing flows back
    assert x.grad is None


def test_broadcast_add_unbroadcasts_gradient():
    x = Tensor(np.ones((4, 3)))
    b = Tensor(np.ones(3))
    (x + b).sum().backward()
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_hinge_subgradient_zero_at_kink():
    x = Tensor([0.0, -1.0, 2.0])
    x.hinge().sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(6)
    params = {
        "a": Parameter(rng.normal(size=(3, 5)) * 1e-7, name="a"),
        "b": Parameter(rng.normal(size=7) * 1e9, name="b"),
    }
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    for name, p in params.items():
        assert np.array_equal(loaded[name], p.data)


def test_checkpoint_is_json_with_shapes(tmp_path):
    p = {"w": Parameter(np.ones((2, 2)), name="w")}
    path = tmp_path / "w.json"
    save_checkpoint(p, path)
    payload = json.loads(path.read_text())
    assert payload["w"]["shape"] == [2, 2]
    assert payload["w"]["values"] == [1.0, 1.0, 1.0, 1.0]
