import math

import numpy as np
import pytest

from ew2d.errors import BlowUpError, ConfigurationError, ValidationError
from ew2d.noise import FIELD_MAGIC, GridSpec, make_stream, read_field_binary
from ew2d.solver import (SigmaFunction, SolverConfig, auto_dt, evolve, heat_multiplier,
                         initial_state, iter_evolve, macro_from_micro, micro_params,
                         sigma_from_spec, sigma_linear, sigma_saturating, step,
                         write_trajectory)

GRID = GridSpec(3.2, 64, 1 / 64)


def _cfg(beta=1.0, sigma=None, eps=0.2, grid=GRID, T=0.5, **kw):
    return SolverConfig(beta, eps, sigma or sigma_linear(), grid, T, **kw)


# --- sigma -----------------------------------------------------------------------

def test_builtin_sigmas_validate():
    sigma_linear().validate()
    sigma_saturating().validate()
    sigma_linear(2.5).validate()


def test_sigma_is_zero_below_origin():
    s = sigma_linear()
    assert np.all(s(np.array([-3.0, -1e-9, 0.0])) == 0.0)


@pytest.mark.parametrize("func,lip", [
    (lambda x: x + 1.0, 1.0),          # sigma(0) != 0
    (lambda x: 0.0 * x, 1.0),          # sigma(1) == 0
    (lambda x: 3.0 * x, 1.0),          # understated Lipschitz constant
    (lambda x: x, 0.0),
])
def test_invalid_sigma_rejected(func, lip):
    with pytest.raises(ValidationError):
        SigmaFunction(func, lip, "bad").validate()


def test_sigma_from_spec():
    assert sigma_from_spec("saturating").label == "saturating"
    assert sigma_from_spec("linear", slope=2.0).lip == 2.0
    with pytest.raises(ConfigurationError):
        sigma_from_spec("cubic")


# --- configuration ---------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"eps": 0.0}, {"eps": 1.0}, {"beta": -0.1}, {"T": 0.0},
    {"T": 0.51}, {"scheme": "euler"}, {"noise_filter": "white"},
    {"eps": 0.1},   # under-resolved on GRID
])
def test_bad_configuration(kw):
    with pytest.raises(ConfigurationError):
        _cfg(**kw)


def test_auto_dt_is_dyadic_and_small_enough():
    for eps in (0.4, 0.2, 0.1):
        dt = auto_dt(0.5, eps)
        k = 0.5 / dt
        assert k == round(k) and math.log2(k) == round(math.log2(k))
        assert dt <= eps**2 / 40
        assert 2 * dt > eps**2 / 40 or k == 16


def test_regime_warnings():
    assert _cfg(beta=0.3).regime_warnings() == []
    assert "exploratory" in _cfg(beta=0.6).regime_warnings()[0]
    assert "supercritical" in _cfg(beta=3.0).regime_warnings()[0]


# --- evolution -------------------------------------------------------------------

def test_beta_zero_stays_constant():
    traj = evolve(_cfg(beta=0.0), make_stream(1, 0), [0.0, 0.25, 0.5])
    assert [s.t for s in traj] == [0.0, 0.25, 0.5]
    for s in traj:
        assert np.all(s.u == 1.0)


def test_zero_field_stays_zero():
    cfg = _cfg()
    st = initial_state(cfg)
    st.u[:] = 0.0
    from ew2d.noise import next_increment
    s = make_stream(2, 0)
    for _ in range(8):
        st = step(st, cfg, next_increment(s, cfg.grid, cfg.mollifier))
    assert np.all(st.u == 0.0)


def test_output_time_zero_is_initial_condition():
    (s,) = evolve(_cfg(), make_stream(1, 0), [0.0])
    assert s.t == 0.0 and np.all(s.u == 1.0)


def test_output_times_validated():
    with pytest.raises(ValueError):
        evolve(_cfg(), make_stream(1, 0), [0.6])
    with pytest.raises(ValueError):
        evolve(_cfg(), make_stream(1, 0), [0.01])


def test_bit_identical_rerun_and_replica_dependence():
    cfg = _cfg()
    a = evolve(cfg, make_stream(5, 2), [0.25, 0.5])
    b = evolve(cfg, make_stream(5, 2), [0.5, 0.25])
    assert all(x.u.tobytes() == y.u.tobytes() for x, y in zip(a, b))
    c = evolve(cfg, make_stream(5, 3), [0.5])[0]
    assert not np.array_equal(a[1].u, c.u)
    assert c.replica_id == 3


def test_iter_evolve_yields_copies():
    snaps = list(iter_evolve(_cfg(), make_stream(1, 0), [0.25, 0.5]))
    assert snaps[0].u is not snaps[1].u
    assert not np.array_equal(snaps[0].u, snaps[1].u)


def test_heat_step_preserves_spatial_mean_without_noise():
    grid = GRID
    x = grid.offsets()
    u = 1.0 + np.cos(2 * math.pi * x / grid.L)[:, None] * np.ones(grid.n)
    v = np.fft.irfft2(np.fft.rfft2(u) * heat_multiplier(grid), s=u.shape)
    assert v.mean() == pytest.approx(1.0, abs=1e-14)
    k2 = (2 * math.pi / grid.L) ** 2
    assert v[1, 0] - 1 == pytest.approx((u[1, 0] - 1) * math.exp(-0.5 * grid.dt * k2), rel=1e-12)


def test_blow_up_raises_with_time():
    cfg = _cfg(beta=1e300)
    with np.errstate(all="ignore"), pytest.raises(BlowUpError) as info:
        evolve(cfg, make_stream(1, 0), [0.5])
    assert 0 < info.value.t <= 0.5


def test_self_convergence_under_refinement():
    # same Brownian path at three step sizes; the strong gap should shrink
    T = 0.25
    fine = GridSpec(3.2, 64, 1 / 256)
    runs = {}
    for sub in (1, 2, 4):
        g = GridSpec(3.2, 64, fine.dt * sub)
        cfg = SolverConfig(0.5, 0.2, sigma_linear(), g, T)
        runs[sub] = evolve(cfg, make_stream(3, 0), [T], substeps=sub)[0].u
    d_coarse = np.sqrt(np.mean((runs[4] - runs[2]) ** 2))
    d_fine = np.sqrt(np.mean((runs[2] - runs[1]) ** 2))
    assert d_fine < d_coarse


@pytest.mark.slow
def test_mean_is_preserved():
    grid = GridSpec(4.0, 64, 0.25 / 256)
    cfg = SolverConfig(1.0, 0.25, sigma_linear(), grid, 0.25)
    vals = np.array([evolve(cfg, make_stream(17, r), [0.25])[0].u[32, 32]
                     for r in range(1000)])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - 1.0) < 3 * se


# --- micro / macro ---------------------------------------------------------------

def test_micro_params_examples():
    mp = micro_params(_cfg(eps=0.1, grid=GridSpec(3.2, 128, 1 / 512), T=1.0))
    assert mp.horizon == pytest.approx(100.0)
    assert mp.length_dilation == pytest.approx(10.0)
    mp = micro_params(SolverConfig(1.0, 0.5, sigma_linear(), GridSpec(8.0, 64, 0.5), 2.0))
    assert mp.horizon == pytest.approx(8.0)
    assert mp.length_dilation == pytest.approx(2.0)
    assert mp.torus_side == pytest.approx(16.0)


def test_micro_roundtrip():
    cfg = _cfg()
    back = macro_from_micro(micro_params(cfg))
    assert back["T"] == pytest.approx(cfg.T)
    assert back["L"] == pytest.approx(cfg.grid.L)
    assert back["dt"] == pytest.approx(cfg.grid.dt)


# --- export ----------------------------------------------------------------------

def test_trajectory_export(tmp_path):
    import json
    cfg = _cfg()
    traj = evolve(cfg, make_stream(1, 4), [0.25, 0.5])
    manifest = write_trajectory(traj, cfg, tmp_path / "out")
    meta = json.loads(manifest.read_text())
    assert meta["config"]["eps"] == 0.2
    assert len(meta["snapshots"]) == 2
    vals, hdr = read_field_binary(tmp_path / "out" / meta["snapshots"][1]["file"], FIELD_MAGIC)
    assert np.array_equal(vals, traj[1].u)
    assert hdr["n"] == 64
