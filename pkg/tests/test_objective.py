import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import TOL, numeric_grad, rel_err
from fedadv import autodiff as ad
from fedadv.errors import ConfigError, DataError, UsageError
from fedadv.nn import DISCRIMINATOR, ModelSpec, init_params
from fedadv.objective import (
    AlgoConfig,
    GrlSchedule,
    LossBreakdown,
    grl_lambda,
    loss_d,
    loss_prox,
    loss_y,
    smoothed_targets,
    total_local_loss,
)

SPEC = ModelSpec(input_dim=4, fe_hidden=(3,), feature_dim=3, disc_hidden=(5,), n_sites=3)


def test_loss_y_examples():
    assert loss_y(ad.constant([[1.0], [2.0]]), [1.0, 2.0]).item() == 0.0
    assert loss_y(ad.constant([[2.0], [4.0]]), [1.0, 2.0]).item() == 2.5
    with pytest.raises(UsageError):
        loss_y(ad.constant([[1.0]]), [1.0, 2.0])


def test_loss_y_gradient():
    pred_np = np.array([[2.0], [4.0], [-1.0]])
    true = np.array([1.0, 2.0, 0.5])
    pred = ad.tensor(pred_np.copy(), requires_grad=True)
    ad.backward(loss_y(pred, true))
    np.testing.assert_allclose(pred.grad[:, 0], 2 * (pred_np[:, 0] - true) / 3, rtol=1e-15)
    assert rel_err(pred.grad, numeric_grad(lambda: loss_y(ad.constant(pred_np), true).item(), pred_np)) < TOL


@pytest.mark.parametrize("smoothing", [0.0, 0.06, 0.5])
def test_uniform_logits_give_log_c(smoothing):
    assert loss_d(ad.constant(np.zeros((4, 3))), [0, 1, 2, 0], smoothing).item() == pytest.approx(math.log(3), abs=1e-15)


def test_confident_logits_approach_zero_without_smoothing():
    logits = np.array([[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]])
    assert loss_d(ad.constant(logits), [0, 2], 0.0).item() < 1e-20


def test_smoothing_floor_is_entropy_of_target():
    c, eps = 15, 0.06
    q = smoothed_targets(np.array([4]), c, eps)[0]
    floor = -np.sum(q * np.log(q))
    best = loss_d(ad.constant(np.log(q)[None, :]), [4], eps).item()
    assert best == pytest.approx(floor, rel=1e-12)
    assert floor > 0
    # any other logits do no better
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert loss_d(ad.constant(rng.normal(size=(1, c)) * 3), [4], eps).item() >= floor


def test_loss_d_label_validation():
    with pytest.raises(DataError):
        loss_d(ad.constant(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DataError):
        loss_d(ad.constant(np.zeros((2, 3))), [0, -1])
    with pytest.raises(ConfigError):
        loss_d(ad.constant(np.zeros((2, 3))), [0, 1], smoothing=1.0)


def test_loss_d_gradcheck():
    logits = np.random.default_rng(3).uniform(-2, 2, size=(4, 5))
    labels = [0, 4, 2, 2]
    t = ad.tensor(logits.copy(), requires_grad=True)
    ad.backward(loss_d(t, labels, 0.06))
    assert rel_err(t.grad, numeric_grad(lambda: loss_d(ad.constant(logits), labels, 0.06).item(), logits)) < TOL


def _pair(diff: float = 0.0):
    local = init_params(SPEC, 0)
    arrays = {n: a + diff for n, a in local.arrays().items()}
    return local, local.with_arrays(arrays, requires_grad=False)


def test_prox_examples():
    local, same = _pair(0.0)
    assert loss_prox(local, same, 40.0, "all_parameters").item() == 0.0
    local, other = _pair(0.5)
    zero = loss_prox(local, other, 0.0, "all_parameters")
    assert zero.item() == 0.0 and not zero.requires_grad

    # a two-entry scoped difference (1, -1) at mu=40 gives (40/2)*2
    spec = ModelSpec(input_dim=1, fe_hidden=(), feature_dim=1, disc_hidden=(), n_sites=2)
    local = init_params(spec, 0)
    glob = local.arrays()
    glob["disc.0.w"] = local["disc.0.w"].data - np.array([[1.0, -1.0]])
    value = loss_prox(local, local.with_arrays(glob, requires_grad=False), 40.0, "discriminator_only")
    assert value.item() == 40.0


def test_prox_gradient_is_mu_times_difference():
    rng = np.random.default_rng(2)
    local = init_params(SPEC, 0)
    glob = local.with_arrays({n: rng.normal(size=a.shape) for n, a in local.arrays().items()}, requires_grad=False)
    mu = 40.0
    for scope in ("discriminator_only", "all_parameters"):
        local.zero_grad()
        ad.backward(loss_prox(local, glob, mu, scope))
        for name, t in local.items():
            in_scope = scope == "all_parameters" or local.group_of(name) == DISCRIMINATOR
            expected = mu * (t.data - glob[name].data) if in_scope else np.zeros_like(t.data)
            assert np.max(np.abs(t.grad - expected)) <= 1e-12
            if in_scope:
                assert np.any(t.grad != 0)


def test_prox_reference_gets_no_gradient():
    local, other = _pair(0.3)
    other = other.copy(requires_grad=True)
    ad.backward(loss_prox(local, other, 10.0, "all_parameters"))
    assert all(not t.grad.any() for t in other.tensors())


def test_prox_architecture_mismatch():
    local = init_params(SPEC, 0)
    other = init_params(ModelSpec(input_dim=4, fe_hidden=(2,), feature_dim=3, disc_hidden=(5,), n_sites=3), 0)
    with pytest.raises(ConfigError):
        loss_prox(local, other, 1.0, "all_parameters")


def test_total_is_exact_sum():
    total, parts = total_local_loss(ad.constant(2.5), ad.constant(1.1), ad.constant(0.4))
    assert parts.l_total == 2.5 + 1.1 + 0.4 == total.item()
    assert parts == LossBreakdown(2.5, 1.1, 0.4, 4.0)


def test_total_gradient_is_sum_of_component_gradients():
    rng = np.random.default_rng(5)
    x = ad.tensor(rng.normal(size=(3, 3)), requires_grad=True)
    comps = [lambda: ad.sum_sq(x), lambda: ad.mean(ad.tanh(x)), lambda: ad.scale(ad.sum_sq(ad.tanh(x)), 0.7)]
    summed = np.zeros((3, 3))
    for c in comps:
        x.zero_grad()
        ad.backward(c())
        summed += x.grad
    x.zero_grad()
    total, _ = total_local_loss(*(c() for c in comps))
    ad.backward(total)
    np.testing.assert_allclose(x.grad, summed, rtol=1e-14, atol=1e-15)


def test_grl_schedule_values():
    s = GrlSchedule()
    assert all(grl_lambda(s, e) == 0.0 for e in range(10))
    assert grl_lambda(s, 75) == pytest.approx(8.4845, abs=1e-3)
    assert grl_lambda(s, 75) == pytest.approx(8.5 * (2 / (1 + math.exp(-7)) - 1), rel=1e-15)
    mid = GrlSchedule(horizon_epochs=40)
    assert grl_lambda(mid, 20) == pytest.approx(8.0017, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500))
def test_grl_schedule_monotone_and_bounded(a, b):
    s = GrlSchedule()
    lo, hi = sorted((a, b))
    assert 0.0 <= grl_lambda(s, lo) <= grl_lambda(s, hi) < s.scale


def test_algo_config_scopes():
    assert AlgoConfig("feddapl").prox_scope == "discriminator_only"
    assert AlgoConfig("fedprox", mu=20).prox_scope == "all_parameters"
    assert AlgoConfig("fedavg", mu=0).prox_scope == "none"
    with pytest.raises(ConfigError):
        AlgoConfig("feddapl", prox_scope="all_parameters")
    with pytest.raises(ConfigError):
        AlgoConfig("fedavg", mu=5.0, prox_scope="all_parameters")
    with pytest.raises(ConfigError):
        AlgoConfig("feddapl", mu=-1.0)
    assert AlgoConfig("erm", mu=3.0).effective_mu == 0.0
