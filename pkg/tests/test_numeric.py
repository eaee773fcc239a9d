import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchwork import numeric as nm
from patchwork.numeric import Tensor, grad_check


def rand(rng, *shape):
    return rng.standard_normal(shape)


def test_linear_identity_weights():
    y = nm.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]])


def test_linear_zero_input_passes_bias():
    rng = np.random.default_rng(0)
    y = nm.linear(Tensor([[0.0, 0.0]]), Tensor(rand(rng, 2, 2)), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(y.data, [[3.0, 4.0]])


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(nm.DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        nm.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_linear_gradients_match_central_differences():
    rng = np.random.default_rng(1)
    err = grad_check(lambda t: nm.sum_all(nm.square(nm.linear(t["x"], t["W"], t["b"]))),
                     {"x": rand(rng, 4, 3), "W": rand(rng, 3, 5), "b": rand(rng, 5)}, eps=1e-5)
    assert err < 1e-4


def test_layer_norm_constant_row_is_zero():
    y = nm.layer_norm(Tensor([[2.0, 2.0, 2.0, 2.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, [[0.0, 0.0, 0.0, 0.0]])


def test_layer_norm_two_values():
    y = nm.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    # var = 1, so (x - 2) / sqrt(1 + 1e-5)
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    w = rand(rng, 3, 6)
    err = grad_check(lambda t: nm.sum_all(nm.mul(nm.layer_norm(t["x"], t["g"], t["b"]), w)),
                     {"x": rand(rng, 3, 6), "g": rand(rng, 6), "b": rand(rng, 6)})
    assert err < 1e-4


def test_reparameterize_unit_sigma_adds_noise():
    z = nm.reparameterize(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), np.array([0.5, -0.5]))
    np.testing.assert_array_equal(z.data, [1.5, 1.5])


def test_reparameterize_zero_noise_returns_mean():
    mu = np.array([0.3, -1.7])
    z = nm.reparameterize(Tensor(mu), Tensor([1.3, -2.0]), np.zeros(2))
    np.testing.assert_array_equal(z.data, mu)


def test_reparameterize_logvar_gradient():
    rng = np.random.default_rng(3)
    noise = rand(rng, 2, 5)
    err = grad_check(lambda t: nm.sum_all(nm.reparameterize(t["mu"], t["lv"], noise)),
                     {"mu": rand(rng, 2, 5), "lv": rand(rng, 2, 5)})
    assert err < 1e-4


def test_gaussian_kl_cases():
    assert nm.gaussian_kl(Tensor(np.zeros(7)), Tensor(np.zeros(7))).item() == 0.0
    assert nm.gaussian_kl(Tensor([1.0]), Tensor([0.0])).item() == 0.5
    expected = 0.5 * (4.0 - 1.0 - math.log(4.0))
    assert nm.gaussian_kl(Tensor([0.0]), Tensor([math.log(4.0)])).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8069, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_gaussian_kl_nonnegative(pairs):
    mu, lv = np.array(pairs).T
    kl = nm.gaussian_kl(Tensor(mu), Tensor(lv)).item()
    assert kl >= -1e-12
    if np.all(mu == 0) and np.all(lv == 0):
        assert kl == 0.0


def test_recon_nll_gaussian():
    x = np.array([0.3, -0.2])
    assert nm.recon_nll(Tensor(x), x).item() == 0.0
    assert nm.recon_nll(Tensor([1.0, 1.0]), np.zeros(2)).item() == 1.0


def test_recon_nll_bernoulli():
    val = nm.recon_nll(Tensor(np.zeros(4)), np.full(4, 0.5), "bernoulli").item()
    assert val == pytest.approx(4 * math.log(2), abs=1e-12)
    with pytest.raises(nm.DomainError):
        nm.recon_nll(Tensor(np.zeros(2)), np.array([0.5, 1.5]), "bernoulli")


def test_grad_check_examples():
    rng = np.random.default_rng(4)
    assert grad_check(lambda t: nm.sum_all(nm.linear(t["x"], t["W"], t["b"])),
                      {"x": rand(rng, 3, 4), "W": rand(rng, 4, 2), "b": rand(rng, 2)}) < 1e-6
    assert grad_check(lambda t: nm.gaussian_kl(t["mu"], t["lv"]),
                      {"mu": rand(rng, 5), "lv": rand(rng, 5)}) < 1e-5
    assert grad_check(lambda t: Tensor(3.0), {"x": rand(rng, 3)}) == 0.0


def test_grad_check_rejects_nonfinite_and_bad_eps():
    with pytest.raises(nm.EvaluationError):
        grad_check(lambda t: nm.sum_all(nm.mul(t["x"], np.inf)), {"x": np.ones(2)})
    with pytest.raises(nm.DomainError):
        grad_check(lambda t: nm.sum_all(t["x"]), {"x": np.ones(2)}, eps=1e-1)


OPS = {
    "relu": lambda t: nm.relu(t["x"]),
    "softplus": lambda t: nm.softplus(t["x"]),
    "exp": lambda t: nm.exp(t["x"]),
    "div": lambda t: nm.div(t["x"], nm.add(nm.exp(t["y"]), 0.5)),
    "log": lambda t: nm.log(nm.add(nm.exp(t["x"]), 1.0)),
    "concat": lambda t: nm.concat([t["x"], t["y"]], axis=-1),
    "transpose": lambda t: nm.transpose(t["x"], (1, 0)),
    "bernoulli": lambda t: nm.recon_nll(t["x"], np.full(t["x"].shape, 0.25), "bernoulli"),
    "gaussian": lambda t: nm.recon_nll(t["x"], np.ones(t["x"].shape)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_and_shape_op_gradients(name):
    rng = np.random.default_rng(5)
    for _ in range(10):
        x, y = rand(rng, 3, 4), rand(rng, 3, 4)
        w = rand(rng, *OPS[name]({"x": Tensor(x), "y": Tensor(y)}).shape)
        err = grad_check(lambda t: nm.sum_all(nm.mul(OPS[name](t), w)), {"x": x, "y": y})
        assert err < 1e-4


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nm.sum_all(nm.mul(x, 3.0)).backward()
    nm.sum_all(nm.mul(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    nm.zero_grads([x])
    assert x.grad is None


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(6)
    data = {k: rand(rng, 4, 4) for k in "xWb"}

    def run():
        x, W = Tensor(data["x"], True), Tensor(data["W"], True)
        out = nm.layer_norm(nm.relu(nm.matmul(x, W)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        nm.sum_all(nm.square(out)).backward()
        return x.grad, W.grad

    a, b = run(), run()
    for ga, gb in zip(a, b):
        assert ga.tobytes() == gb.tobytes()


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with nm.no_grad():
        y = nm.mul(x, 2.0)
    assert y.is_leaf and not y.requires_grad
