import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from metafit import nn
from metafit.autodiff import Tensor, backward
from metafit.episodes import sample_episode, synth_pools
from metafit.errors import ConfigError, NumericError, UsageError
from metafit.metaloss import (
    AdamState,
    MetaConfig,
    cross_entropy,
    da_meta_loss,
    da_task_loss,
    inner_adapt,
    meta_update,
    task_loss,
)
from metafit.nn import ArchSpec, ParamSet


def da_oracle(L, eta, eps):
    return L ** eta * -math.log(max(eps, 1.0 - L))


def test_cross_entropy_examples():
    assert cross_entropy(Tensor([0.5]), [1]).item() == pytest.approx(0.693147, abs=1e-6)
    assert cross_entropy(Tensor([0.9]), [1]).item() == pytest.approx(0.105361, abs=1e-6)
    assert cross_entropy(Tensor([1.0, 0.0]), [1, 0]).item() <= 1e-11


def test_cross_entropy_clamps_hard_mistakes():
    loss = cross_entropy(Tensor([0.0]), [1]).item()
    assert loss == pytest.approx(-math.log(1e-12))


def test_cross_entropy_reductions():
    p, y = Tensor([0.2, 0.7, 0.6]), [0, 1, 0]
    per = [-math.log(0.8), -math.log(0.7), -math.log(0.4)]
    assert cross_entropy(p, y, "sum").item() == pytest.approx(sum(per))
    assert cross_entropy(p, y, "mean").item() == pytest.approx(sum(per) / 3)
    with pytest.raises(UsageError):
        cross_entropy(p, y, "max")
    with pytest.raises(UsageError):
        cross_entropy(p, [0, 1])


def test_da_examples():
    assert da_task_loss(0.0, 3.0, 1e-6).item() == 0.0
    assert da_task_loss(0.9, 3.0, 1e-6).item() == pytest.approx(1.678585, abs=1e-6)
    # clamped branch: 1.2**5 * -log(1e-6)
    assert da_task_loss(1.2, 5.0, 1e-6).item() == pytest.approx(2.48832 * 13.815510557964274, rel=1e-12)
    assert da_task_loss(1.2, 5.0, 1e-6).item() == pytest.approx(34.377411, abs=1e-6)


def test_da_meta_loss_examples():
    assert da_meta_loss([0.0, 0.0, 0.0, 0.0], 5.0, 1e-6).item() == 0.0
    total = da_meta_loss([0.9, 0.5], 5.0, 1e-6).item()
    assert total == pytest.approx(0.9 ** 5 * math.log(10) + 0.5 ** 5 * math.log(2), rel=1e-12)
    assert total == pytest.approx(1.381314, abs=1e-6)
    assert da_meta_loss([0.3], 2.0, 1e-6).item() == da_task_loss(0.3, 2.0, 1e-6).item()
    with pytest.raises(UsageError):
        da_meta_loss([], 5.0, 1e-6)


def test_da_grid_against_oracle():
    for L in np.round(np.arange(0, 2.01, 0.1), 10):
        for eta in (0, 1, 3, 5, 7):
            got = da_task_loss(float(L), float(eta), 1e-6).item()
            assert got == pytest.approx(da_oracle(float(L), eta, 1e-6), rel=1e-9, abs=1e-9)


def test_eta_zero_is_plain_log_term():
    assert da_task_loss(0.4, 0.0, 1e-6).item() == pytest.approx(-math.log(0.6))


def test_da_argument_checks():
    with pytest.raises(UsageError):
        da_task_loss(0.5, -1.0, 1e-6)
    with pytest.raises(UsageError):
        da_task_loss(0.5, 1.0, 0.0)
    with pytest.raises(UsageError):
        da_task_loss(-0.1, 1.0, 1e-6)


def test_da_gradient_past_the_gate_comes_from_power_only():
    L = Tensor(1.5, requires_grad=True)
    g = backward(da_task_loss(L, 3.0, 1e-6), [L])[0].item()
    assert g == pytest.approx(3.0 * 1.5 ** 2 * -math.log(1e-6))


@settings(max_examples=300, deadline=None)
@given(
    l1=st.floats(1e-4, 0.999),
    l2=st.floats(1e-4, 0.999),
    eta=st.sampled_from([1.0, 3.0, 5.0, 7.0]),
)
def test_easy_tasks_are_down_weighted(l1, l2, eta):
    assume(l1 < l2 * (1 - 1e-9))
    r = da_task_loss(l1, eta, 1e-6).item() / da_task_loss(l2, eta, 1e-6).item()
    assert r < l1 / l2


@settings(max_examples=200, deadline=None)
@given(l1=st.floats(0.0, 3.0), l2=st.floats(0.0, 3.0), eta=st.floats(0.5, 8.0))
def test_da_monotone_in_task_loss(l1, l2, eta):
    lo, hi = sorted((l1, l2))
    assert da_task_loss(lo, eta, 1e-6).item() <= da_task_loss(hi, eta, 1e-6).item()


@pytest.fixture
def tiny():
    spec = ArchSpec.mlp(2, (6,))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 2))
    y = np.array([0, 1] * 4, dtype=float)
    return spec, nn.init_params(spec, 1), x, y


def test_inner_adapt_with_zero_rate_is_identity(tiny):
    spec, params, x, y = tiny
    assert inner_adapt(spec, params, x, y, 0.0, 3).equal(params)


def test_inner_adapt_one_step_is_gradient_step(tiny):
    spec, params, x, y = tiny
    grads = backward(task_loss(spec, params, x, y), params)
    out = inner_adapt(spec, params, x, y, 0.1, 1)
    for n in params:
        np.testing.assert_allclose(out[n].data, params[n].data - 0.1 * grads[n].data, rtol=1e-14, atol=1e-15)


def test_inner_adapt_on_quadratic():
    # a 1-parameter "model": the loss is phi**2, so one step gives phi - gamma * 2 phi
    phi = Tensor(1.5, requires_grad=True)
    loss = phi ** 2
    g = backward(loss, [phi])[0].item()
    assert phi.item() - 0.1 * g == pytest.approx(1.5 * (1 - 0.2))


def test_inner_adapt_descends_on_average():
    train, _ = synth_pools(0, 6, 2, 20, 4)
    spec = ArchSpec.mlp(4, (16,))
    rng = np.random.default_rng(1)
    drops = []
    for i in range(100):
        params = nn.init_params(spec, i)
        e = sample_episode(train, 5, 5, rng)
        before = task_loss(spec, params, e.support_x, e.support_y).item()
        after = task_loss(spec, inner_adapt(spec, params, e.support_x, e.support_y, 0.01, 1), e.support_x, e.support_y).item()
        drops.append(before - after)
    assert np.mean(drops) > 0
    assert np.mean(np.array(drops) > 0) > 0.95


def test_second_order_result_stays_on_graph(tiny):
    spec, params, x, y = tiny
    adapted = inner_adapt(spec, params, x, y, 0.1, 2, second_order=True)
    assert all(t.requires_grad and not t.is_leaf for t in adapted.values())
    first = inner_adapt(spec, params, x, y, 0.1, 2, second_order=False)
    assert all(t.is_leaf for t in first.values())
    for n in params:
        np.testing.assert_allclose(adapted[n].data, first[n].data, rtol=1e-12)


def test_inner_adapt_reports_non_finite_step(tiny):
    spec, params, x, y = tiny
    bad = ParamSet.from_arrays({**params.arrays(), "head.bias": np.array([np.nan, 0.0])})
    with pytest.raises(NumericError, match="step 0"):
        inner_adapt(spec, bad, x, y, 0.1, 2)
    with pytest.raises(UsageError):
        inner_adapt(spec, params, x, y, 0.1, 0)


def scalar_params(v):
    return ParamSet.from_arrays({"w": np.array([v])})


@pytest.mark.parametrize("mode", ["sgd", "adam"])
def test_zero_meta_rate_keeps_params(mode):
    p, _ = meta_update(scalar_params(1.0), {"w": np.array([2.0])}, 0.0, mode=mode)
    assert p["w"].data[0] == 1.0


def test_sgd_step():
    p, _ = meta_update(scalar_params(1.0), {"w": np.array([2.0])}, 0.1, mode="sgd")
    assert p["w"].data[0] == pytest.approx(0.8)


def test_adam_moves_against_constant_gradient():
    params, state = scalar_params(0.0), None
    trace = []
    for _ in range(100):
        params, state = meta_update(params, {"w": np.array([3.0])}, 0.01, state)
        trace.append(params["w"].data[0])
    assert np.all(np.diff(trace) < 0)
    # with a constant gradient Adam moves alpha per step
    assert trace[-1] == pytest.approx(-1.0, rel=1e-6)


def test_adam_first_step_matches_hand_recursion():
    g = np.array([0.5, -2.0])
    p, st = meta_update(ParamSet.from_arrays({"w": np.zeros(2)}), {"w": g}, 0.1, AdamState.zeros({"w": np.zeros(2)}))
    m, v = 0.1 * g, 0.001 * g * g
    want = -0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p["w"].data, want, rtol=1e-12)
    assert st.step == 1


def test_meta_update_errors():
    with pytest.raises(UsageError):
        meta_update(scalar_params(1.0), {}, 0.1)
    with pytest.raises(UsageError):
        meta_update(scalar_params(1.0), {"w": np.ones(1)}, 0.1, mode="rmsprop")


def test_meta_config_validation():
    assert MetaConfig().eta == 5.0
    assert MetaConfig(eval_inner_steps=0).test_steps == 0
    for bad in ({"eta": -1}, {"epsilon": 1.0}, {"k": 0}, {"optimizer": "lamb"}, {"precision": "float16"}):
        with pytest.raises(ConfigError):
            MetaConfig(**bad)


def test_inner_adapt_is_pure(tiny):
    spec, params, x, y = tiny
    snapshot = {n: a.copy() for n, a in params.arrays().items()}
    a = inner_adapt(spec, params, x, y, 0.2, 3)
    b = inner_adapt(spec, params, x, y, 0.2, 3)
    assert a.equal(b)
    assert all(np.array_equal(params[n].data, snapshot[n]) for n in snapshot)


@settings(max_examples=200, deadline=None)
@given(l1=st.floats(1e-3, 0.99), l2=st.floats(1e-3, 0.99), eta=st.sampled_from([1.0, 2.0, 5.0, 7.0]))
def test_da_strictly_increasing_below_gate(l1, l2, eta):
    assume(abs(l1 - l2) > 1e-6)
    lo, hi = sorted((l1, l2))
    assert da_task_loss(lo, eta, 1e-6).item() < da_task_loss(hi, eta, 1e-6).item()
