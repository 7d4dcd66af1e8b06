import numpy as np
import pytest

from fewshot_lab import autograd as ag
from fewshot_lab.autograd import Adam, Parameter, SGD, Tensor
from fewshot_lab.errors import ContractError, DimensionError, NonFiniteError


def test_grad_of_scaled_sum():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    loss = ag.sum_(x * 2.0)
    ag.backward(loss)
    assert np.array_equal(x.grad, np.full((2, 3), 2.0))


def test_grad_of_square():
    x = Tensor([3.0], requires_grad=True)
    loss = ag.sum_(ag.mul(x, x))
    ag.backward(loss)
    assert np.array_equal(x.grad, np.array([6.0]))


def test_repeated_backward_doubles_grads_exactly():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 4)), requires_grad=True)
    loss = ag.sum_(ag.mul(x, x))
    ag.backward(loss)
    once = x.grad.copy()
    ag.backward(loss)
    assert np.array_equal(x.grad, 2.0 * once)
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        ag.backward(x * 1.0)


def test_grad_shape_matches_tensor():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    ag.backward(ag.sum_(ag.sigmoid(x)))
    assert x.grad.shape == x.data.shape


def test_composite_graph_matches_finite_differences():
    # conv -> relu -> linear -> softmax cross-entropy
    rng = np.random.default_rng(42)
    x = Tensor(rng.normal(size=(2, 1, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.7, requires_grad=True)
    b = Tensor(rng.normal(size=3) * 0.2, requires_grad=True)
    lw = Tensor(rng.normal(size=(27, 4)) * 0.4, requires_grad=True)
    lb = Tensor(rng.normal(size=4) * 0.2, requires_grad=True)
    labels = np.array([1, 3])

    def f(x, w, b, lw, lb):
        h = ag.relu(ag.conv2d(x, w, b, stride=1, padding=0))
        return ag.cross_entropy(ag.linear(ag.flatten(h), lw, lb), labels)

    report = ag.grad_check(f, [x, w, b, lw, lb], eps=1e-5, filter_kinks=True)
    assert report.max_rel_err < 1e-5


def test_grad_check_sum_is_exact():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 3)), requires_grad=True)
    report = ag.grad_check(lambda t: ag.sum_(t), [x])
    assert report.max_rel_err < 1e-9


def test_grad_check_sigmoid_against_analytic_derivative():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    report = ag.grad_check(lambda t: ag.sum_(ag.sigmoid(t)), [x])
    assert report.max_rel_err < 1e-7
    # cross-check the stored gradient against sigma' = sigma (1 - sigma)
    x.zero_grad()
    ag.backward(ag.sum_(ag.sigmoid(x)))
    s = 1.0 / (1.0 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, s * (1 - s), rtol=0, atol=1e-12)


def test_grad_check_rejects_nondeterministic_function():
    rng = np.random.default_rng(3)
    x = Tensor(np.ones((2, 2)), requires_grad=True)

    def noisy(t):
        return ag.sum_(t * float(rng.normal()))

    with pytest.raises(ContractError):
        ag.grad_check(noisy, [x])


def test_nonfinite_output_raises_naming_op():
    x = Tensor(np.full((2, 2), 1e308))
    with pytest.raises(NonFiniteError) as err:
        ag.mul(x, x)
    assert err.value.op == "mul"


def test_nonfinite_constructor_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan, 1.0])


def test_no_grad_suppresses_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(ContractError):
        ag.backward(ag.sum_(y))


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(DimensionError) as err:
        ag.matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_sgd_step():
    p = Parameter(np.zeros(1), "p")
    p.grad = np.ones(1)
    SGD([p], lr=0.1).step()
    assert np.allclose(p.data, [-0.1])


def test_sgd_missing_grad_is_contract_error():
    p = Parameter(np.zeros(1), "p")
    with pytest.raises(ContractError):
        SGD([p], lr=0.1).step()


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_adam_first_step_magnitude_is_lr(scale):
    p = Parameter(np.zeros(3), "p")
    opt = Adam([p], lr=0.05)
    p.grad = np.full(3, scale)
    opt.step()
    np.testing.assert_allclose(np.abs(p.data), 0.05, rtol=1e-4)


def test_adam_converges_on_quadratic_bowl():
    rng = np.random.default_rng(9)
    w0 = rng.normal(size=8)
    w0 = w0 / np.linalg.norm(w0) * rng.uniform(0.3, 1.0)
    p = Parameter(w0, "w")
    opt = Adam([p], lr=0.05)
    for _ in range(200):
        loss = ag.sum_(ag.mul(p, p))
        ag.backward(loss)
        opt.step()
        opt.zero_grad()
    assert np.linalg.norm(p.data) < 1e-2


def test_seeded_determinism_bitwise():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        out = ag.sum_(ag.sigmoid(ag.conv2d(x, w, None, stride=1, padding=1)))
        ag.backward(out)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    o1, gx1, gw1 = run()
    o2, gx2, gw2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_memory_accounting_tracks_peak():
    ag.reset_peak_memory()
    live0, peak0 = ag.memory_stats()
    assert live0 == peak0
    big = Tensor(np.zeros(1000))
    live1, peak1 = ag.memory_stats()
    assert live1 == live0 + 8000
    assert peak1 >= live1
    del big
    live2, peak2 = ag.memory_stats()
    assert live2 == live0
    assert peak2 == peak1


def test_parameter_has_name_and_requires_grad():
    p = Parameter(np.zeros((2, 2)), "model.layer.weight")
    assert p.requires_grad and p.name == "model.layer.weight"
