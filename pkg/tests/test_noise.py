import math

import numpy as np
import pytest

from ew2d.errors import ConfigurationError
from ew2d.kernel import Mollifier, correlation_of
from ew2d.noise import (FIELD_MAGIC, NOISE_MAGIC, GridSpec, make_stream, next_increment,
                        noise_filter, read_field_binary, write_field_binary)

EPS = 0.2
GRID = GridSpec(1.6, 32, 1e-3)   # h = eps / 4
MOLL = Mollifier(eps=EPS)


def _target(r):
    return GRID.dt * correlation_of(MOLL).scaled(r, EPS)


def _draws(n, seed=1, replica=0, grid=GRID, m=MOLL, **kw):
    s = make_stream(seed, replica)
    return np.array([next_increment(s, grid, m, **kw).values for _ in range(n)])


# --- grid ------------------------------------------------------------------------

@pytest.mark.parametrize("n", [0, 1, 3, 48, 100])
def test_grid_requires_power_of_two(n):
    with pytest.raises(ConfigurationError):
        GridSpec(1.0, n, 0.1)


def test_grid_rejects_nonpositive_values():
    with pytest.raises(ConfigurationError):
        GridSpec(0.0, 16, 0.1)
    with pytest.raises(ConfigurationError):
        GridSpec(1.0, 16, 0.0)


def test_grid_resolution_rule():
    assert GRID.resolves(EPS)
    assert not GRID.resolves(0.19)
    assert GridSpec(8.0, 256, 1e-3, min_points_per_eps=3.0).resolves(0.1)
    assert not GridSpec(8.0, 256, 1e-3).resolves(0.1)


def test_under_resolved_grid_is_refused():
    s = make_stream(1, 0)
    with pytest.raises(ConfigurationError):
        next_increment(s, GridSpec(1.6, 16, 1e-3), MOLL)
    assert s.step == 0


def test_torus_too_small_is_refused():
    with pytest.raises(ConfigurationError):
        noise_filter(0.64, 16, Mollifier(eps=0.2), "covariance_root")


# --- streams ---------------------------------------------------------------------

def test_same_seed_and_replica_reproduce_bytes():
    a = next_increment(make_stream(1, 0), GRID, MOLL).values
    b = next_increment(make_stream(1, 0), GRID, MOLL).values
    assert a.tobytes() == b.tobytes()


def test_different_seed_or_replica_differ():
    a = next_increment(make_stream(1, 0), GRID, MOLL).values
    assert not np.array_equal(a, next_increment(make_stream(2, 0), GRID, MOLL).values)
    assert not np.array_equal(a, next_increment(make_stream(1, 1), GRID, MOLL).values)


def test_steps_can_be_drawn_out_of_order():
    s = make_stream(4, 3)
    seq = [next_increment(s, GRID, MOLL).values for _ in range(5)]
    t = make_stream(4, 3)
    t.step = 3
    assert np.array_equal(next_increment(t, GRID, MOLL).values, seq[3])
    assert next_increment(make_stream(4, 3), GRID, MOLL).seed_lineage == (4, 3, 0)


def test_replica_streams_are_uncorrelated():
    n = 10_000
    a = _draws(n, seed=1, replica=0)[:, 5, 7]
    b = _draws(n, seed=1, replica=1)[:, 5, 7]
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 3 / math.sqrt(n)


# --- covariance --------------------------------------------------------------------

PROBES = [(3, 11), (9, 2), (4, 4), (13, 4), (0, 0), (16, 21), (6, 6)]


@pytest.fixture(scope="module")
def many_draws():
    """Point series at PROBES from 1e5 draws, plus the lattice autocovariance
    averaged over the first 2e4 draws."""
    n = GRID.n
    s = make_stream(7, 0)
    series = np.empty((100_000, len(PROBES)))
    idx = tuple(np.array(PROBES).T)
    acc = np.zeros((n, n))
    for k in range(series.shape[0]):
        w = next_increment(s, GRID, MOLL).values
        series[k] = w[idx]
        if k < 20_000:
            acc += np.fft.irfft2(np.abs(np.fft.rfft2(w)) ** 2, s=(n, n))
    return {p: series[:, i] for i, p in enumerate(PROBES)}, acc / 20_000 / n**2


def test_pointwise_variance(many_draws):
    x = many_draws[0][(3, 11)]
    target = float(_target(0.0))
    se = target * math.sqrt(2 / x.size)
    assert abs(np.var(x) - target) < 3 * se


def test_sample_mean_is_zero(many_draws):
    x = many_draws[0][(9, 2)]
    assert abs(x.mean()) < 3 * x.std() / math.sqrt(x.size)


def test_far_points_are_uncorrelated(many_draws):
    # 9 cells = 0.45 > 2 eps apart
    a = many_draws[0][(4, 4)]
    b = many_draws[0][(13, 4)]
    prod = a * b
    assert abs(prod.mean()) < 3 * prod.std() / math.sqrt(prod.size)


def test_stationary_variance(many_draws):
    a = many_draws[0][(0, 0)]
    b = many_draws[0][(16, 21)]
    va, vb = np.var(a), np.var(b)
    se = math.sqrt(2 / a.size) * 0.5 * (va + vb)
    assert abs(va - vb) < 3 * math.sqrt(2) * se


def test_white_in_time(many_draws):
    a = many_draws[0][(6, 6)][:-1]
    b = many_draws[0][(6, 6)][1:]
    assert abs(np.corrcoef(a, b)[0, 1]) < 3 / math.sqrt(a.size)


def test_radial_covariance_function(many_draws):
    acov = many_draws[1]
    off = GRID.offsets()
    r = np.hypot(off[:, None], off[None, :])
    for lag in (0.0, 0.05, 0.1, 0.2, 0.3, 0.5):
        sel = np.isclose(r, lag)
        assert abs(acov[sel].mean() - float(_target(lag))) < 0.02 * float(_target(0.0))


def test_covariance_root_filter_is_exact_on_lattice():
    # the filter's lattice covariance equals R^eps sampled on the grid
    F = noise_filter(GRID.L, GRID.n, MOLL, "covariance_root")
    cov = np.fft.irfft2(F**2, s=(GRID.n, GRID.n)) * GRID.dt / GRID.h**2
    off = GRID.offsets()
    r = np.hypot(off[:, None], off[None, :])
    assert np.max(np.abs(cov - _target(r))) < 1e-9 * float(_target(0.0))


def test_mollifier_filter_has_unit_mass():
    F = noise_filter(GRID.L, GRID.n, MOLL, "mollifier")
    assert F[0, 0].real == pytest.approx(1.0, rel=1e-12)
    w = _draws(4, filter_kind="mollifier")
    assert w.shape == (4, GRID.n, GRID.n) and np.all(np.isfinite(w))


def test_unknown_filter():
    with pytest.raises(ValueError):
        noise_filter(GRID.L, GRID.n, MOLL, "spectral")


def test_substeps_sum_fine_increments():
    fine = GridSpec(GRID.L, GRID.n, GRID.dt / 2)
    s_f = make_stream(9, 2)
    w1 = next_increment(s_f, fine, MOLL).values
    w2 = next_increment(s_f, fine, MOLL).values
    coarse = next_increment(make_stream(9, 2), GRID, MOLL, substeps=2).values
    assert np.allclose(coarse, w1 + w2, rtol=0, atol=1e-12)


# --- binary dumps ----------------------------------------------------------------

def test_binary_roundtrip(tmp_path):
    inc = next_increment(make_stream(1, 0), GRID, MOLL)
    path = tmp_path / "w.bin"
    inc.dump(path)
    raw = path.read_bytes()
    assert raw[:8] == NOISE_MAGIC
    assert len(raw) == 32 + 8 * GRID.n**2
    vals, hdr = read_field_binary(path, NOISE_MAGIC)
    assert vals.tobytes() == inc.values.astype("<f8").tobytes()
    assert hdr["n"] == GRID.n
    assert hdr["h"] == pytest.approx(GRID.h, rel=1e-7)
    assert hdr["dt"] == pytest.approx(GRID.dt, rel=1e-7)
    assert hdr["eps"] == pytest.approx(EPS, rel=1e-7)


def test_binary_rejects_wrong_magic_and_truncation(tmp_path):
    path = tmp_path / "f.bin"
    write_field_binary(path, np.ones((4, 4)), 0.1, 0.01, 0.2, FIELD_MAGIC)
    with pytest.raises(ValueError):
        read_field_binary(path, NOISE_MAGIC)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_field_binary(path)
