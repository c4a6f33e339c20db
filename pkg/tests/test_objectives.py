import math

import numpy as np
import pytest

from remoh_lab.errors import ConfigurationError, NumericError
from remoh_lab.objectives import (
    BETA_MAX,
    SparsityState,
    beta_update,
    counted_sparsity,
    hae_loss,
    layerwise,
    soft_sparsity,
    spr_loss,
    target_sparsity,
    total_loss,
)
from remoh_lab.tensor import Tensor


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), grad)


@pytest.mark.parametrize("b,want", [(4, 0.5), (8, 0.0), (2, 0.75)])
def test_target_sparsity(b, want):
    assert target_sparsity(8, b) == want


@pytest.mark.parametrize("m,b", [(8, 9), (0, 1), (4, 0)])
def test_target_sparsity_rejects(m, b):
    with pytest.raises(ConfigurationError):
        target_sparsity(m, b)


def test_counted_sparsity_examples():
    assert counted_sparsity(np.zeros((5, 8))) == 1.0
    assert counted_sparsity(np.ones((5, 8))) == 0.0
    s = np.ones((6, 8))
    s[:, [1, 4, 6]] = 0
    assert counted_sparsity(s) == 0.375
    with pytest.raises(ValueError):
        counted_sparsity(np.zeros((0, 8)))
    with pytest.raises(ValueError):
        counted_sparsity(np.ones((3, 8)), np.zeros(3, bool))


def test_counted_sparsity_respects_mask_and_lists():
    s = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert counted_sparsity(s, [True, False]) == 0.5
    assert counted_sparsity([s, np.ones((2, 2))]) == 3 / 8


def test_soft_sparsity_examples():
    eps = 0.01
    assert soft_sparsity(T(np.zeros((3, 4))), eps).item() == 1.0
    assert soft_sparsity(T(np.full((3, 4), eps)), eps).item() == 0.0
    assert abs(soft_sparsity(T([[eps / 2, eps, 2 * eps, 1.0]]), eps).item() - 0.125) < 1e-15


def test_soft_sparsity_approaches_counted():
    rng = np.random.default_rng(0)
    s = np.where(rng.random((50, 6)) < 0.4, 0.0, rng.uniform(0.1, 1.0, (50, 6)))
    assert abs(soft_sparsity(T(s), 1e-3).item() - counted_sparsity(s)) < 1e-15


def test_spr_examples():
    st = SparsityState(m=4, b=2, beta=2.0)
    assert spr_loss(T(np.zeros((3, 4))), st).item() == 0.0
    assert spr_loss(T([[1.0, 0.0, 0.0, 1.0]]), st).item() == 1.0


def test_beta_update_examples():
    st = SparsityState(m=4, b=2, beta=0.3)
    assert beta_update(st, st.T_s) == 0.3
    st = SparsityState(m=10, b=5, beta=1.0, k_scale=1.0)
    assert abs(beta_update(st, 0.4) - 1.105170918) < 1e-9
    st = SparsityState(m=4, b=2, beta=2.0, k_scale=2.0)
    assert abs(beta_update(st, 0.75) - 1.213061319) < 1e-9


def test_beta_is_clamped():
    st = SparsityState(m=4, b=2, beta=9.0, k_scale=50.0)
    assert st.advance(0.0) == BETA_MAX
    st = SparsityState(m=4, b=2, beta=1e-6, k_scale=50.0)
    assert st.advance(1.0) == st.beta_min and st.step == 1
    with pytest.raises(ConfigurationError):
        SparsityState(m=4, b=2, beta=0.0)


def test_hae_examples():
    assert hae_loss(T(0.9), 0.4, 0.5).item() == 0.0
    assert hae_loss(T(0.9), 0.5, 0.5).item() == 0.0
    assert abs(hae_loss(T(1.0), 0.9, 0.5).item() - 1.718281828) < 1e-9
    assert abs(hae_loss(T(0.75), 0.9, 0.5).item() - 0.648721271) < 1e-9


def test_hae_gradient_pushes_toward_activation():
    s = T(np.full((2, 4), 0.004), True)
    soft = soft_sparsity(s, 0.01)
    hae_loss(soft, 1.0, 0.5).backward()
    assert (s.grad < 0).all()


def test_total_loss():
    assert total_loss(1.0, 0.0, 0.0).total == 1.0
    b = total_loss(T(2.0), T(0.5), T(0.25))
    assert b.total == 2.75 and b.as_dict()["hae"] == 0.25
    with pytest.raises(NumericError):
        total_loss(T(math.nan), 0.0, 0.0)
    with pytest.raises(NumericError):
        total_loss(1.0, math.inf, 0.0)


def test_layerwise_pools_layers():
    st = SparsityState(m=2, b=1, beta=1.0)
    l0 = T([[0.0, 0.0], [0.0, 0.0]], True)
    l1 = T([[1.0, 1.0], [0.5, 0.0]], True)
    spr, hae, R_s, per = layerwise([l0, l1], [None, None], st, use_spr=True, use_hae=True)
    assert R_s == 5 / 8
    assert [p[0] for p in per] == [1.0, 0.25]
    assert abs(spr.item() - 2.5 / 4) < 1e-15
    # only the over-sparse layer contributes HAE
    assert abs(hae.item() - (math.e - 1)) < 1e-12
