"""Finite-difference checks for every differentiable op.

Inputs are drawn with margins away from the measure-zero switch points
(leaky_relu kinks, sort ties) so central differences with h=1e-3 stay on one
branch. All graphs are float64.
"""

import numpy as np
import pytest

import rfsk.tensor as tn
from rfsk.rng import Rng
from helpers import check_gradients

SEEDS = list(range(20))


def _t(rng, shape, margin=0.0, spread=1.0):
    x = rng.normal(shape, dtype=np.float64) * spread
    if margin:
        x = x + margin * np.sign(x)
    return tn.param(x)


def _proj(rng, t):
    """Fixed random projection to a scalar so every output element matters."""
    w = tn.tensor(rng.normal(t.shape, dtype=np.float64))
    return tn.sum_(tn.mul(t, w))


# op name -> (builder(rng) -> (params, lossfn))
def _case_matmul(r):
    a, b = _t(r, (4, 3)), _t(r, (3, 5))
    return [a, b], lambda: _proj(r.child("p"), tn.matmul(a, b))


def _case_matmul_batched(r):
    a, b = _t(r, (2, 3, 4)), _t(r, (2, 4, 3))
    return [a, b], lambda: _proj(r.child("p"), tn.matmul(a, b))


def _case_conv2d(r):
    x, w = _t(r, (3, 5, 4)), _t(r, (2, 3, 3, 3))
    return [x, w], lambda: _proj(r.child("p"), tn.conv2d(x, w))


def _case_conv2d_1x1(r):
    x, w = _t(r, (3, 4, 4)), _t(r, (2, 3, 1, 1))
    return [x, w], lambda: _proj(r.child("p"), tn.conv2d_1x1(x, w))


def _case_linear(r):
    x, w, b = _t(r, (5, 3)), _t(r, (3, 4)), _t(r, (4,))
    return [x, w, b], lambda: _proj(r.child("p"), tn.linear(x, w, b))


def _case_add(r):
    a, b = _t(r, (3, 4)), _t(r, (4,))  # broadcast path
    return [a, b], lambda: _proj(r.child("p"), tn.add(a, b))


def _case_sub(r):
    a, b = _t(r, (3, 4)), _t(r, (3, 4))
    return [a, b], lambda: _proj(r.child("p"), tn.sub(a, b))


def _case_mul(r):
    a, b = _t(r, (2, 3, 4)), _t(r, (3, 1))  # broadcast path
    return [a, b], lambda: _proj(r.child("p"), tn.mul(a, b))


def _case_scale(r):
    x = _t(r, (3, 4))
    return [x], lambda: _proj(r.child("p"), tn.scale(x, -1.7))


def _case_shift(r):
    x = _t(r, (3, 4))
    return [x], lambda: _proj(r.child("p"), tn.shift(x, 0.4))


def _case_softmax(r):
    x = _t(r, (3, 6))
    return [x], lambda: _proj(r.child("p"), tn.softmax(x))


def _case_leaky_relu(r):
    x = _t(r, (4, 5), margin=0.05)
    return [x], lambda: _proj(r.child("p"), tn.leaky_relu(x))


def _case_upsample2x(r):
    x = _t(r, (2, 4, 3))
    return [x], lambda: _proj(r.child("p"), tn.upsample2x(x))


def _case_subsample2x(r):
    x = _t(r, (2, 4, 6))
    return [x], lambda: _proj(r.child("p"), tn.subsample2x(x))


def _case_mean(r):
    x = _t(r, (3, 4, 2))
    return [x], lambda: _proj(r.child("p"), tn.mean(x, axis=(1,), keepdims=True))


def _case_mean_all(r):
    x = _t(r, (3, 4))
    return [x], lambda: tn.mean(x)


def _case_sum(r):
    x = _t(r, (3, 4, 2))
    return [x], lambda: _proj(r.child("p"), tn.sum_(x, axis=(0, 2)))


def _case_l2_normalize(r):
    x = _t(r, (3, 5), margin=0.1)
    return [x], lambda: _proj(r.child("p"), tn.l2_normalize(x))


def _case_concat(r):
    a, b = _t(r, (2, 3)), _t(r, (4, 3))
    return [a, b], lambda: _proj(r.child("p"), tn.concat([a, b], axis=0))


def _case_sort_lastaxis(r):
    # spread entries so no pair is within 2h of a tie
    base = np.arange(12, dtype=np.float64).reshape(2, 6)
    x = tn.param(base + 0.2 * r.normal((2, 6), dtype=np.float64))
    return [x], lambda: _proj(r.child("p"), tn.sort_lastaxis(x)[0])


def _case_cosine_similarity(r):
    a, b = _t(r, (2, 6), margin=0.05), _t(r, (2, 6), margin=0.05)
    return [a, b], lambda: tn.sum_(tn.cosine_similarity(a, b))


def _case_box_filter_3x3(r):
    x = _t(r, (2, 4, 5))
    return [x], lambda: _proj(r.child("p"), tn.box_filter_3x3(x))


def _case_reshape(r):
    x = _t(r, (3, 4))
    return [x], lambda: _proj(r.child("p"), tn.reshape(x, (2, 6)))


def _case_transpose(r):
    x = _t(r, (2, 3, 4))
    return [x], lambda: _proj(r.child("p"), tn.transpose(x, (2, 0, 1)))


def _case_slice_axis(r):
    x = _t(r, (5, 4))
    return [x], lambda: _proj(r.child("p"), tn.slice_axis(x, 0, 1, 4))


CASES = {
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "conv2d": _case_conv2d,
    "conv2d_1x1": _case_conv2d_1x1,
    "linear": _case_linear,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "shift": _case_shift,
    "softmax": _case_softmax,
    "leaky_relu": _case_leaky_relu,
    "upsample2x": _case_upsample2x,
    "subsample2x": _case_subsample2x,
    "mean": _case_mean,
    "mean_all": _case_mean_all,
    "sum": _case_sum,
    "l2_normalize": _case_l2_normalize,
    "concat": _case_concat,
    "sort_lastaxis": _case_sort_lastaxis,
    "cosine_similarity": _case_cosine_similarity,
    "box_filter_3x3": _case_box_filter_3x3,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "slice_axis": _case_slice_axis,
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients(name):
    for seed in SEEDS:
        rng = Rng(1000 + seed).child(name)
        params, build = CASES[name](rng)
        check_gradients(build, params)


def test_registry_covers_cases():
    # every registered differentiable op has at least one FD case
    missing = [k for k in tn.OPS
               if k not in CASES and k not in ("sort_lastaxis",)]
    assert missing == [], f"ops without gradient checks: {missing}"


def test_grad_accumulates_across_backward_calls():
    x = tn.param(np.ones(3, dtype=np.float64))
    for _ in range(2):
        loss = tn.sum_(tn.mul(x, x))
        tn.backward(loss)
    np.testing.assert_allclose(x.grad, 4.0 * np.ones(3))
    tn.zero_grads([x])
    assert x.grad is None


def test_shared_input_used_twice_accumulates():
    x = tn.param(np.array([1.0, 2.0], dtype=np.float64))
    loss = tn.sum_(tn.add(tn.mul(x, x), x))  # x^2 + x -> 2x + 1
    tn.backward(loss)
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_backward_nonscalar_rejected():
    x = tn.param(np.ones((2, 2)))
    from rfsk.errors import ContractError
    with pytest.raises(ContractError):
        tn.backward(tn.mul(x, x))


def test_nonfinite_output_raises():
    from rfsk.errors import NumericError
    big = tn.tensor(np.array([1e308], dtype=np.float64))
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        tn.add(big, big)


def test_mixed_dtype_rejected():
    from rfsk.errors import ContractError
    a = tn.tensor(np.ones(2, dtype=np.float32))
    b = tn.tensor(np.ones(2, dtype=np.float64))
    with pytest.raises(ContractError):
        tn.add(a, b)


def test_untracked_graph_is_pruned():
    a = tn.tensor(np.ones(3))
    b = tn.tensor(np.ones(3))
    out = tn.add(a, b)
    assert not out.requires_grad and out._parents == ()
