"""The reverse-mode core is validated against central finite differences on
random inputs; every op the training losses use gets a direct check."""

import numpy as np
import pytest

from kgloop import autodiff as ad
from kgloop.gradcheck import grad_check


def _check(build, params, seed=0, tol=1e-6):
    """build(leaves) -> scalar Tensor; compare analytic vs numeric grads."""

    def loss_and_grads(arrs):
        leaves = ad.leaves(arrs)
        loss = build(leaves)
        ad.backward(loss)
        return loss.item(), ad.grads_of(leaves)

    err = grad_check(loss_and_grads, params, rng=np.random.default_rng(seed))
    assert err < tol, f"max relative error {err}"


def test_arithmetic_chain():
    rng = np.random.default_rng(1)
    params = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(4, 3))}
    _check(
        lambda lv: ad.tsum(ad.mul(ad.add(lv["a"], lv["b"]), ad.sub(lv["a"], 2.0))),
        params,
    )


def test_broadcast_add_and_div():
    rng = np.random.default_rng(2)
    params = {"a": rng.normal(size=(5, 4)), "b": rng.normal(size=(4,))}
    _check(
        lambda lv: ad.tsum(ad.div(ad.add(lv["a"], lv["b"]), 3.0)),
        params,
    )


def test_matmul_and_dot():
    rng = np.random.default_rng(3)
    params = {
        "w": rng.normal(size=(3, 5)),
        "x": rng.normal(size=(5, 2)),
        "u": rng.normal(size=(7,)),
        "v": rng.normal(size=(7,)),
    }
    _check(
        lambda lv: ad.add(
            ad.tsum(ad.matmul(lv["w"], lv["x"])), ad.dot(lv["u"], lv["v"])
        ),
        params,
    )


def test_matmul_rejects_vectors():
    with pytest.raises(ValueError):
        ad.matmul(ad.Tensor(np.ones(3)), ad.Tensor(np.ones((3, 2))))


def test_gather_scatter_adds():
    table = np.arange(12.0).reshape(4, 3)
    idx = np.array([1, 1, 3])
    leaf = ad.Tensor(table)
    out = ad.tsum(ad.gather(leaf, idx))
    ad.backward(out)
    expected = np.zeros_like(table)
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_allclose(leaf.grad, expected)


def test_gather_grad_check():
    rng = np.random.default_rng(4)
    params = {"t": rng.normal(size=(6, 4))}
    idx = np.array([0, 2, 2, 5])
    _check(lambda lv: ad.tsum(ad.mul(ad.gather(lv["t"], idx), 0.5)), params)


def test_activations():
    rng = np.random.default_rng(5)
    params = {"x": rng.normal(size=(40,)) * 2.0}
    _check(lambda lv: ad.tsum(ad.relu(lv["x"])), params)
    _check(lambda lv: ad.tsum(ad.leaky_relu(lv["x"], 0.2)), params)
    _check(lambda lv: ad.tsum(ad.sigmoid(lv["x"])), params)
    _check(lambda lv: ad.tsum(ad.log_sigmoid(lv["x"])), params)
    _check(lambda lv: ad.tsum(ad.exp(ad.mul(lv["x"], 0.1))), params)


def test_log_sigmoid_stable_at_extremes():
    x = ad.Tensor(np.array([-800.0, 800.0]))
    out = ad.log_sigmoid(x)
    assert np.isfinite(out.value).all()
    assert out.value[0] == pytest.approx(-800.0)
    assert out.value[1] == pytest.approx(0.0)


def test_clamped_log():
    x = ad.Tensor(np.array([0.5, 1e-15]))
    out = ad.clamped_log(x)
    ad.backward(ad.tsum(out))
    assert out.value[1] == pytest.approx(np.log(1e-12))
    assert x.grad[0] == pytest.approx(2.0)
    assert x.grad[1] == 0.0  # clamp active: no gradient


def test_sqrt_and_softmax():
    rng = np.random.default_rng(6)
    params = {"x": np.abs(rng.normal(size=(3, 5))) + 0.5}
    _check(lambda lv: ad.tsum(ad.sqrt(lv["x"])), params)
    weights = np.arange(15.0).reshape(3, 5)
    _check(
        lambda lv: ad.tsum(ad.mul(ad.softmax(lv["x"], axis=-1), weights)), params
    )


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    out = ad.softmax(ad.Tensor(rng.normal(size=(4, 6)) * 30), axis=-1)
    np.testing.assert_allclose(out.value.sum(axis=-1), 1.0, atol=1e-12)


def test_concat_stack_reshape():
    rng = np.random.default_rng(8)
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 2))}
    _check(
        lambda lv: ad.tsum(
            ad.mul(ad.concat([lv["a"], lv["b"]], axis=1), np.arange(10.0).reshape(2, 5))
        ),
        params,
    )
    params2 = {"a": rng.normal(size=(3,)), "b": rng.normal(size=(3,))}
    _check(
        lambda lv: ad.tsum(ad.mul(ad.stack([lv["a"], lv["b"]], axis=0), 2.0)),
        params2,
    )


def test_mean_axis():
    rng = np.random.default_rng(9)
    params = {"x": rng.normal(size=(4, 6))}
    _check(lambda lv: ad.tsum(ad.tmean(lv["x"], axis=1)), params)
    _check(lambda lv: ad.tmean(lv["x"]), params)


def test_conv2d_valid_forward_matches_loops():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 6, 5))
    f = rng.normal(size=(3, 2, 3))
    out = ad.conv2d_valid(ad.Tensor(x), ad.Tensor(f)).value
    expected = np.zeros((2, 3, 5, 3))
    for b in range(2):
        for k in range(3):
            for i in range(5):
                for j in range(3):
                    expected[b, k, i, j] = np.sum(x[b, i:i + 2, j:j + 3] * f[k])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv2d_grad_check():
    rng = np.random.default_rng(11)
    params = {"x": rng.normal(size=(2, 6, 5)), "f": rng.normal(size=(3, 2, 3))}
    weights = np.arange(2 * 3 * 5 * 3, dtype=float).reshape(2, 3, 5, 3) * 0.1
    _check(
        lambda lv: ad.tsum(
            ad.mul(ad.relu(ad.conv2d_valid(lv["x"], lv["f"])), weights)
        ),
        params,
    )


def test_dropout_modes():
    rng = np.random.default_rng(12)
    x = ad.Tensor(np.ones(1000))
    assert ad.dropout(x, 0.0, rng) is x
    assert ad.dropout(x, 0.5, None) is x  # eval: identity
    dropped = ad.dropout(x, 0.5, rng)
    kept = dropped.value != 0.0
    assert 0.35 < kept.mean() < 0.65
    np.testing.assert_allclose(dropped.value[kept], 2.0)  # inverted scaling


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.Tensor(np.ones(3)))


def test_shared_subgraph_accumulates():
    x = ad.Tensor(np.array(3.0))
    y = ad.add(ad.mul(x, x), x)  # x^2 + x -> grad 2x + 1 = 7
    ad.backward(y)
    assert x.grad == pytest.approx(7.0)
