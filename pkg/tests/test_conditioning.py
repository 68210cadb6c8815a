import numpy as np
import pytest

from anisodiff.conditioning import (
    CfgConfig,
    ConditioningBundle,
    assemble_input,
    cfg_combine,
    cfg_dropout,
    repeat_enface,
)
from anisodiff.volume import ContractError, EnFaceImage, ShapeError, Volume


def _bundle(rng, d=4, h=5, w=6, value=None):
    lr = Volume(rng.standard_normal((d, h, w)))
    ef = EnFaceImage(np.full((d, w), value) if value is not None else rng.standard_normal((d, w)))
    return ConditioningBundle(lr, ef)


def test_repeat_enface_h1(rng):
    e = EnFaceImage(rng.standard_normal((3, 4)))
    assert np.array_equal(repeat_enface(e, 1).data[:, 0, :], e.data)


def test_repeat_enface_constant():
    v = repeat_enface(EnFaceImage(np.full((2, 3), 0.7)), 496)
    assert v.data.shape == (2, 496, 3) and np.all(v.data == np.float32(0.7))


def test_repeat_enface_every_plane(rng):
    e = EnFaceImage(rng.standard_normal((5, 7)))
    v = repeat_enface(e, 16)
    for y in range(16):
        assert np.array_equal(v.data[:, y, :], e.data)


def test_assemble_channels(rng):
    b = _bundle(rng)
    x = rng.standard_normal((4, 5, 6)).astype(np.float32)
    inp = assemble_input(x, b)
    assert inp.channels.shape == (3, 4, 5, 6)
    assert np.array_equal(inp.channels[0], x)
    assert np.array_equal(inp.channels[1], b.lr_up.data)
    assert np.array_equal(inp.channels[2], repeat_enface(b.enface, 5).data)


def test_inactive_enface_is_zero(rng):
    inp = assemble_input(np.zeros((4, 5, 6)), _bundle(rng).without_enface())
    assert np.all(inp.channels[2] == 0)


def test_constant_enface_channel(rng):
    inp = assemble_input(np.zeros((4, 5, 6)), _bundle(rng, value=0.2))
    assert np.all(inp.channels[2] == np.float32(0.2))


def test_conditions_do_not_depend_on_x(rng):
    b = _bundle(rng)
    a1 = assemble_input(rng.standard_normal((4, 5, 6)), b)
    a2 = assemble_input(rng.standard_normal((4, 5, 6)), b)
    assert np.array_equal(a1.channels[1:], a2.channels[1:])


def test_bundle_shape_check(rng):
    with pytest.raises(ShapeError):
        ConditioningBundle(Volume(np.zeros((4, 5, 6))), EnFaceImage(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        assemble_input(np.zeros((4, 5, 5)), _bundle(rng))


def test_dropout_extremes(rng):
    b = _bundle(rng)
    for u in np.linspace(0, 0.999, 7):
        assert cfg_dropout(b, u, CfgConfig(p_uncond=0.0)).enface_active
        assert not cfg_dropout(b, u, CfgConfig(p_uncond=1.0)).enface_active


def test_dropout_rate_monte_carlo(rng):
    b = _bundle(rng)
    cfg = CfgConfig(p_uncond=0.1)
    draws = np.random.default_rng(7).random(100_000)
    dropped = sum(not cfg_dropout(b, float(u), cfg).enface_active for u in draws)
    assert abs(dropped / 1e5 - 0.1) < 0.01


def test_dropout_keeps_lr(rng):
    b = _bundle(rng)
    out = cfg_dropout(b, 0.0, CfgConfig(p_uncond=0.5))
    assert out.lr_up is b.lr_up and not out.enface_active


def test_cfg_combine_endpoints(rng):
    vu, vc = rng.standard_normal(10).astype(np.float32), rng.standard_normal(10).astype(np.float32)
    assert np.array_equal(cfg_combine(vu, vc, 0.0), vu)
    assert np.array_equal(cfg_combine(vu, vc, 1.0), vc)


def test_cfg_combine_scalar():
    out = cfg_combine(np.array([0.1]), np.array([0.3]), 2.0)
    assert out[0] == pytest.approx(0.5, abs=1e-7)


def test_cfg_config_validation():
    with pytest.raises(ContractError):
        CfgConfig(w=-1)
    with pytest.raises(ContractError):
        CfgConfig(p_uncond=1.5)
