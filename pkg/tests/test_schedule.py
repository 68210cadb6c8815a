from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anisodiff.schedule import (
    build_scaled_linear,
    ddim_step,
    ddim_timesteps,
    eps_from_v,
    forward_noise,
    timestep_pairs,
    v_target,
    x0_from_v,
)
from anisodiff.volume import ContractError, Volume


def test_endpoints(schedule):
    assert schedule.T == 1000
    assert schedule.beta[0] == 0.0005
    assert schedule.beta[-1] == 0.0195


def test_scaled_linear_in_sqrt_beta(schedule):
    root = np.sqrt(schedule.beta)
    np.testing.assert_allclose(np.diff(root, 2), 0.0, atol=1e-15)


def test_schedule_invariants(schedule):
    assert np.all((schedule.beta > 0) & (schedule.beta < 1))
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert schedule.alpha_bar[0] == 1 - schedule.beta[0]
    running = 1.0
    for t in range(schedule.T):
        running *= schedule.alpha[t]
        assert abs(schedule.alpha_bar[t] - running) <= 1e-12 * running


def test_alpha_bar_matches_extended_precision(schedule):
    getcontext().prec = 50
    lo, hi = Decimal("0.0005").sqrt(), Decimal("0.0195").sqrt()
    prod = Decimal(1)
    for i in range(1000):
        r = lo + (hi - lo) * Decimal(i) / Decimal(999)
        prod *= 1 - r * r
    assert abs(schedule.alpha_bar[-1] - float(prod)) <= 1e-10 * float(prod)


def test_build_validation():
    for args in [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)]:
        with pytest.raises(ContractError):
            build_scaled_linear(*args)
    assert build_scaled_linear(1, 0.01, 0.02).beta.tolist() == [0.01]


def test_ab_zero_is_one(schedule):
    assert schedule.ab(0) == 1.0
    with pytest.raises(ContractError):
        schedule.ab(1001)


# -- noising and v algebra -------------------------------------------------------------


def test_forward_noise_endpoints(schedule, rng):
    x0 = rng.standard_normal((2, 3, 4)).astype(np.float32)
    a, _ = schedule.coefs(300)
    np.testing.assert_allclose(forward_noise(x0, np.zeros_like(x0), 300, schedule), a * x0, rtol=1e-6)
    assert np.array_equal(forward_noise(x0, rng.standard_normal(x0.shape), 0, schedule), x0)


def test_forward_noise_scalar_oracle(schedule, rng):
    x0 = rng.standard_normal((3, 4, 5))
    eps = rng.standard_normal((3, 4, 5))
    out = forward_noise(x0, eps, 500, schedule)
    ab = schedule.alpha_bar[499]
    for idx in np.ndindex(x0.shape):
        assert out[idx] == pytest.approx(np.sqrt(ab) * x0[idx] + np.sqrt(1 - ab) * eps[idx], abs=1e-6)


def test_v_target_endpoints(schedule, rng):
    x = rng.standard_normal((4, 4)).astype(np.float32)
    a, b = schedule.coefs(700)
    np.testing.assert_allclose(v_target(np.zeros_like(x), x, 700, schedule), a * x, rtol=1e-6)
    np.testing.assert_allclose(v_target(x, np.zeros_like(x), 700, schedule), -b * x, rtol=1e-6)


def test_x0_eps_from_v_scalar_oracle(schedule, rng):
    xt, v = rng.standard_normal(20), rng.standard_normal(20)
    ab = schedule.alpha_bar[99]
    x0 = x0_from_v(xt, v, 100, schedule)
    eps = eps_from_v(xt, v, 100, schedule)
    for i in range(20):
        assert x0[i] == pytest.approx(np.sqrt(ab) * xt[i] - np.sqrt(1 - ab) * v[i], abs=1e-6)
        assert eps[i] == pytest.approx(np.sqrt(1 - ab) * xt[i] + np.sqrt(ab) * v[i], abs=1e-6)


def test_v_zero_and_xt_zero(schedule, rng):
    x = rng.standard_normal(8)
    a, _ = schedule.coefs(42)
    np.testing.assert_allclose(x0_from_v(x, np.zeros(8), 42, schedule), a * x, rtol=1e-6)
    np.testing.assert_allclose(eps_from_v(np.zeros(8), x, 42, schedule), a * x, rtol=1e-6)


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2**32 - 1))
def test_v_round_trip_property(t, seed):
    s = build_scaled_linear()
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, (4, 5, 6))
    eps = rng.standard_normal((4, 5, 6))
    xt = forward_noise(x0, eps, t, s)
    v = v_target(x0, eps, t, s)
    np.testing.assert_allclose(x0_from_v(xt, v, t, s), x0, atol=1e-5)
    np.testing.assert_allclose(eps_from_v(xt, v, t, s), eps, atol=1e-5)


def test_volume_in_volume_out(schedule, rng):
    x0 = Volume(rng.standard_normal((2, 2, 2)), (0.1, 0.2, 0.3))
    out = forward_noise(x0, np.zeros((2, 2, 2)), 10, schedule)
    assert isinstance(out, Volume) and out.spacing == x0.spacing


# -- DDIM ------------------------------------------------------------------------------


def test_ddim_step_with_exact_v(schedule, rng):
    x0 = rng.uniform(-1, 1, (3, 4, 4))
    eps = rng.standard_normal((3, 4, 4))
    xt = forward_noise(x0, eps, 800, schedule)
    v = v_target(x0, eps, 800, schedule)
    np.testing.assert_allclose(ddim_step(xt, v, 800, 300, schedule), forward_noise(x0, eps, 300, schedule), atol=1e-5)
    np.testing.assert_allclose(ddim_step(xt, v, 800, 0, schedule), x0, atol=1e-5)


def test_ddim_step_scalar_oracle(schedule, rng):
    xt, v = rng.standard_normal(10), rng.standard_normal(10)
    t, tp = 600, 590
    ab, abp = schedule.alpha_bar[t - 1], schedule.alpha_bar[tp - 1]
    out = ddim_step(xt, v, t, tp, schedule)
    for i in range(10):
        x0 = np.sqrt(ab) * xt[i] - np.sqrt(1 - ab) * v[i]
        e = np.sqrt(1 - ab) * xt[i] + np.sqrt(ab) * v[i]
        assert out[i] == pytest.approx(np.sqrt(abp) * x0 + np.sqrt(1 - abp) * e, abs=1e-6)


def test_full_unit_chain_recovers_x0(schedule, rng):
    x0 = rng.uniform(-1, 1, (2, 8, 8))
    eps = rng.standard_normal(x0.shape)
    x = forward_noise(x0, eps, 1000, schedule)
    for t in range(1000, 0, -1):
        x = ddim_step(x, v_target(x0, eps, t, schedule), t, t - 1, schedule)
    np.testing.assert_allclose(x, x0, atol=1e-4)


def test_ddim_step_ordering(schedule):
    with pytest.raises(ContractError):
        ddim_step(np.zeros(2), np.zeros(2), 5, 5, schedule)


# -- timestep paths ----------------------------------------------------------------------


def test_timesteps_default_path():
    path = ddim_timesteps(1000, 100)
    assert path[0] == 1000 and path[-1] == 10 and len(path) == 100


def test_timesteps_full_chain():
    assert ddim_timesteps(1000, 1000) == list(range(1000, 0, -1))


def test_timesteps_small_case():
    assert ddim_timesteps(10, 3) == [10, 7, 3]


def test_timestep_pairs_end_at_zero():
    assert timestep_pairs([10, 7, 3]) == [(10, 7), (7, 3), (3, 0)]


@settings(max_examples=100, deadline=None)
@given(T=st.integers(1, 2000), data=st.data())
def test_timesteps_property(T, data):
    S = data.draw(st.integers(1, T))
    path = ddim_timesteps(T, S)
    assert path[0] == T
    assert len(path) == S
    assert all(a > b for a, b in zip(path, path[1:]))
    assert path[-1] >= 1


def test_timesteps_validation():
    with pytest.raises(ContractError):
        ddim_timesteps(10, 11)
