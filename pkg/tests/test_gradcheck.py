import numpy as np

from remoh_lab.gradcheck import grad_check, relative_error
from remoh_lab.tensor import Tensor, matmul, mul, relu, tsum


def test_quadratic_form_is_exact(rng):
    A = rng.normal(size=(4, 4))
    x = Tensor(rng.normal(size=(4, 1)), True)
    At = Tensor(A)

    def f():
        return tsum(mul(x, matmul(At, x)))

    rep = grad_check(f, [x], h=1e-4, tol=1e-8)
    assert rep.passed and rep.checked == 4 and rep.skipped == 0
    # central differences are exact on quadratics up to rounding
    assert rep.max_rel_error < 1e-9


def test_kink_is_skipped_not_failed():
    x = Tensor(np.array([0.0, 1.0]), True)
    rep = grad_check(lambda: tsum(relu(x)), [x])
    assert rep.passed
    assert rep.skipped == 1 and rep.checked == 1


def test_wrong_gradient_is_reported():
    x = Tensor(np.array([1.0, 2.0]), True)
    # x * stop_grad(x): analytic gradient is x, true derivative is 2x
    rep = grad_check(lambda: tsum(mul(x, x.detach())), [x], tol=1e-6)
    assert not rep.passed
    assert [(c, a) for c, a, _ in rep.params[0].failures] == [(0, 1.0), (1, 2.0)]
    assert abs(rep.max_rel_error - 0.5) < 1e-8


def test_coordinate_sampling_is_seeded(rng):
    W = Tensor(rng.normal(size=(10, 10)), True)
    f = lambda: tsum(mul(W, W))  # noqa: E731
    a = grad_check(f, [W], coords=17, seed=5)
    b = grad_check(f, [W], coords=17, seed=5)
    assert a.checked + a.skipped == 17
    assert a.max_rel_error == b.max_rel_error
