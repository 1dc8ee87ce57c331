from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from slowgen.errors import ValidationError
from slowgen.evaluation import l1
from slowgen.particle_sim import (
    BumpMixture,
    CountTensor,
    SimConfig,
    ad_constants,
    aggregate,
    bin_positions,
    draw_ic_family,
    fd_oracle_ad,
    fd_oracle_burgers,
    sample_initial_conditions,
    simulate,
    simulate_ad,
    simulate_ad_micro,
    simulate_burgers,
    wrap,
)

BUMP = BumpMixture((-0.3,), (0.12,), (1.0,))


def fine_masses(mix, n):
    return mix.cdf_mass(np.linspace(-1, 1, n + 1))


# ---------------------------------------------------------------------------
# configuration and constants

def test_derived_ad_constants():
    D, v = ad_constants(SimConfig())
    assert D == pytest.approx(1.953125e-4, rel=1e-12)
    assert v == pytest.approx(0.015625, rel=1e-12)
    assert SimConfig().macro_dt == pytest.approx(2.0)


def test_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(p_left=0.6, p_right=0.5)
    with pytest.raises(ValidationError):
        SimConfig(f=0)
    with pytest.raises(ValidationError):
        SimConfig(macro_stride=0)
    with pytest.raises(ValidationError):
        SimConfig(kind="heat")
    with pytest.raises(ValidationError):
        simulate_ad(SimConfig(kind="burgers"))


# ---------------------------------------------------------------------------
# binning and wrapping

def test_wrap():
    assert wrap(1.25) == -0.75
    assert wrap(-1.0) == -1.0
    assert wrap(1.0) == -1.0
    np.testing.assert_allclose(wrap([-3.5, 2.5]), [0.5, 0.5])


def test_bin_positions_examples():
    assert bin_positions([-1.0], 25)[0] == 1
    np.testing.assert_array_equal(bin_positions([-0.5, 0.5], 2), [1, 1])
    np.testing.assert_array_equal(bin_positions([0.0], 2), [0, 1])
    s = np.random.default_rng(0).uniform(-1, 1, 1000)
    assert bin_positions(s, 7).sum() == 1000
    with pytest.raises(ValidationError):
        bin_positions([1.0], 4)
    with pytest.raises(ValidationError):
        bin_positions([-1.2], 4)


# ---------------------------------------------------------------------------
# initial conditions

def test_ic_histogram_matches_mixture():
    mix = draw_ic_family(np.random.default_rng(5), n_bumps=3)
    s = mix.sample(1_000_000, np.random.default_rng(6))
    hist = bin_positions(s, 25) / s.size
    assert l1(hist, mix.bin_probs(25)) < 0.01
    grid = np.linspace(-1, 1, 20001)
    assert np.trapezoid(mix.density(grid), grid) == pytest.approx(1.0, abs=1e-6)


def test_wide_bump_is_uniform():
    wide = BumpMixture((0.2,), (100.0,), (1.0,))
    np.testing.assert_allclose(wide.bin_probs(20), 0.05, atol=1e-4)


def test_ic_family_ranges_and_determinism():
    for seed in range(20):
        mix = draw_ic_family(np.random.default_rng(seed))
        assert 1 <= len(mix.centers) <= 3
        assert all(0.05 <= w <= 0.3 for w in mix.widths)
        assert sum(mix.weights) == pytest.approx(1.0)
        assert mix.floor == 0.1
    a = sample_initial_conditions("ad", 100, np.random.default_rng(1))
    b = sample_initial_conditions("ad", 100, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= -1) & (a < 1))


# ---------------------------------------------------------------------------
# advection-diffusion walkers

def test_deterministic_walker_wraps():
    cfg = SimConfig(f=1, N=1, T=1, p_left=0.0, p_right=1.0, d=8)
    ct = simulate_ad(cfg, initial_positions=[np.array([0.0])])
    # 800 jumps of 1/640 take 0 to 1.25, i.e. -0.75: bin 1 of 8
    np.testing.assert_array_equal(ct.counts[0, 1], np.eye(8, dtype=int)[1])
    micro = simulate_ad_micro(cfg, initial_positions=[np.array([0.0])])
    np.testing.assert_array_equal(micro.counts, ct.counts)


def test_ad_mass_conservation_and_determinism():
    cfg = SimConfig(f=500, N=3, T=4, seed=3)
    a = simulate(cfg)
    assert np.all(a.counts.sum(-1) == 500)
    np.testing.assert_array_equal(a.counts, simulate(cfg).counts)
    # each sequence has its own stream, so fewer sequences give a prefix
    np.testing.assert_array_equal(simulate(SimConfig(f=500, N=2, T=4, seed=3)).counts, a.counts[:2])
    assert not np.array_equal(a.counts[0], a.counts[1])


def test_fast_path_matches_micro_steps():
    s0 = [BUMP.sample(10_000, np.random.default_rng(0))]
    cfg = SimConfig(f=10_000, N=1, T=5, seed=11)
    fast = simulate_ad(cfg, initial_positions=s0).counts[0]
    micro = simulate_ad_micro(SimConfig(f=10_000, N=1, T=5, seed=12), initial_positions=s0).counts[0]
    np.testing.assert_array_equal(fast[0], micro[0])
    for t in range(1, 6):
        table = np.stack([fast[t], micro[t]])
        table = table[:, table.sum(0) > 0]
        assert chi2_contingency(table)[1] > 0.01


def test_ad_converges_to_oracle_as_f_grows():
    D, v = ad_constants(SimConfig())
    times = 2.0 * np.arange(11)
    ref = aggregate(fd_oracle_ad(fine_masses(BUMP, 500), D, v, times), 25)
    errs = []
    for f in (1_000, 10_000, 100_000):
        cfg = SimConfig(f=f, N=1, T=10, seed=1)
        ct = simulate_ad(cfg, initial_positions=[BUMP.sample(f, np.random.default_rng(2))])
        errs.append(l1(ct.density()[0], ref).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.05


# ---------------------------------------------------------------------------
# advection-diffusion oracle

def test_ad_oracle_trivial_cases():
    rho = fine_masses(BUMP, 100)
    np.testing.assert_array_equal(fd_oracle_ad(rho, 0.0, 0.0, 5.0), rho)
    flat = np.full(50, 0.02)
    np.testing.assert_allclose(fd_oracle_ad(flat, 1e-3, 0.02, 10.0), flat, atol=1e-15)
    out = fd_oracle_ad(rho, 2e-4, 0.015, [0.0, 3.0, 30.0])
    assert out.shape == (3, 100)
    np.testing.assert_array_equal(out[0], rho)
    assert np.abs(out.sum(1) - rho.sum()).max() < 1e-10


def test_ad_oracle_advects_at_speed_v():
    n = 200
    rho = np.zeros(n)
    rho[50] = 1.0
    v, t = 0.1, 4.0
    out = fd_oracle_ad(rho, 0.0, v, t)
    x = -1 + (np.arange(n) + 0.5) * 2 / n
    # characteristics: the bump centre moves v t = 0.4 = 40 cells
    assert (out @ x) - x[50] == pytest.approx(v * t, abs=1e-9)
    assert abs(np.argmax(out) - 90) <= 1


def test_ad_oracle_matches_fourier_decay():
    n = 256
    x = -1 + (np.arange(n) + 0.5) * 2 / n
    rho = 1 + 0.5 * np.cos(np.pi * x)
    D, t = 1e-3, 50.0
    out = fd_oracle_ad(rho, D, 0.0, t, safety=0.05)
    ref = 1 + 0.5 * np.exp(-D * np.pi**2 * t) * np.cos(np.pi * x)
    np.testing.assert_allclose(out, ref, atol=1e-4)


def test_ad_oracle_stability_error():
    with pytest.raises(ValidationError):
        fd_oracle_ad(np.ones(100), 1e-3, 0.0, 1.0, dt=1.0)
    with pytest.raises(ValidationError):
        fd_oracle_ad(np.ones(10), 1e-3, 0.0, [2.0, 1.0])


# ---------------------------------------------------------------------------
# Burgers oracle

def test_burgers_oracle_uniform_and_mass():
    flat = np.full(64, 0.3)
    np.testing.assert_allclose(fd_oracle_burgers(flat, 5e-4, 5.0), flat, atol=1e-14)
    x = -1 + (np.arange(128) + 0.5) / 64
    rho = 0.01 + 0.02 * np.exp(-(x / 0.2) ** 2)
    out = fd_oracle_burgers(rho, 5e-4, [10.0, 40.0])
    assert np.abs(out.sum(1) - rho.sum()).max() < 1e-8 * rho.sum()


def test_burgers_oracle_large_viscosity_is_diffusion():
    x = -1 + (np.arange(128) + 0.5) / 64
    rho = 0.01 + 0.02 * np.exp(-(x / 0.2) ** 2)
    a = fd_oracle_burgers(rho, 1.0, 0.05)
    b = fd_oracle_ad(rho, 1.0, 0.0, 0.05)
    assert l1(a / a.sum(), b / b.sum()) < 1e-3


def test_burgers_oracle_shock_speed():
    n = 400
    x = -1 + (np.arange(n) + 0.5) * 2 / n
    rho_l, rho_r = 1.0, 0.2
    rho = np.where((x >= -0.5) & (x < 0.0), rho_l, rho_r)
    t = 0.5
    out = fd_oracle_burgers(rho, 1e-4, t)
    right = x > 0.0
    front = x[right][np.argmin(np.diff(out[right]))]
    assert abs(front - 0.5 * (rho_l + rho_r) * t) <= 2 / n


def test_burgers_oracle_cfl_error():
    with pytest.raises(ValidationError):
        fd_oracle_burgers(np.ones(64), 5e-4, 1.0, dt=1.0)


def test_burgers_oracle_front_sharpens_then_dissipates():
    n = 256
    x = -1 + (np.arange(n) + 0.5) * 2 / n
    rho = 0.01 * (1 + np.sin(np.pi * x))
    out = fd_oracle_burgers(rho, 5e-4, np.arange(0, 401, 10.0))
    grad = np.abs(np.diff(out, axis=1)).max(1)
    peak = int(np.argmax(grad))
    assert 0 < peak < len(grad) - 1
    assert grad[peak] > 2 * grad[0] and grad[-1] < 0.7 * grad[peak]


# ---------------------------------------------------------------------------
# Burgers walkers

def test_burgers_uniform_profile_stays_uniform():
    cfg = SimConfig.preset("burgers", f=1_000_000, N=1, T=40)
    s0 = -1 + (np.arange(cfg.f) + 0.5) * 2 / cfg.f
    ct = simulate_burgers(cfg, initial_positions=[s0])
    assert np.all(ct.counts.sum(-1) == cfg.f)
    assert l1(ct.density()[0, -1], np.full(cfg.d, 1 / cfg.d)) < 0.02


def test_burgers_cfl_violation():
    cfg = SimConfig.preset("burgers", f=1000, N=1, T=1, nu=0.2)
    with pytest.raises(ValidationError, match="CFL"):
        simulate_burgers(cfg)
    with pytest.raises(ValidationError):
        simulate_burgers(SimConfig.preset("burgers", f=10, N=1, T=1), d_interaction=100)


def test_burgers_determinism_and_conservation():
    cfg = SimConfig.preset("burgers", f=5000, N=2, T=2, seed=4)
    a = simulate_burgers(cfg)
    np.testing.assert_array_equal(a.counts, simulate_burgers(cfg).counts)
    assert np.all(a.counts.sum(-1) == 5000)


# ---------------------------------------------------------------------------
# dataset container and file format

def test_count_tensor_validation():
    with pytest.raises(ValidationError):
        CountTensor(np.array([[[1, 2]]]), f=4)
    with pytest.raises(ValidationError):
        CountTensor(np.array([[[-1, 5]]]), f=4)
    with pytest.raises(ValidationError):
        CountTensor(np.array([[1, 3]]), f=4)
    with pytest.raises(ValidationError):
        CountTensor(np.array([[[1, 3]]]), f=4, mask=np.ones((2, 2), bool))


def test_dataset_round_trip(tmp_path):
    ct = simulate(SimConfig(f=300, N=2, T=3, seed=9))
    path = tmp_path / "data.txt"
    ct.save(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 2 * 4
    assert all(len(row.split(",")) == 25 for row in lines[1:])
    back = CountTensor.load(path)
    np.testing.assert_array_equal(back.counts, ct.counts)
    assert back.f == 300 and back.meta["seed"] == 9
    path2 = tmp_path / "again.txt"
    back.save(path2)
    assert path2.read_bytes() == path.read_bytes()


def test_dataset_mask_round_trip(tmp_path):
    ct = simulate(SimConfig(f=50, N=2, T=2))
    mask = np.ones((2, 3), bool)
    mask[1, 1] = False
    ct.mask = mask
    ct.save(tmp_path / "m.txt")
    np.testing.assert_array_equal(CountTensor.load(tmp_path / "m.txt").mask, mask)


def test_dataset_load_errors(tmp_path):
    ct = simulate(SimConfig(f=50, N=1, T=2))
    path = tmp_path / "d.txt"
    ct.save(path)
    lines = path.read_text().splitlines()
    (tmp_path / "short.txt").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValidationError):
        CountTensor.load(tmp_path / "short.txt")
    (tmp_path / "ver.txt").write_text("\n".join([lines[0].replace('"version": 1', '"version": 99')]
                                                + lines[1:]) + "\n")
    with pytest.raises(ValidationError):
        CountTensor.load(tmp_path / "ver.txt")
    (tmp_path / "junk.txt").write_text("not json\n")
    with pytest.raises(ValidationError):
        CountTensor.load(tmp_path / "junk.txt")


def test_subset():
    ct = simulate(SimConfig(f=50, N=3, T=1))
    sub = ct.subset(2)
    assert sub.N == 2
    np.testing.assert_array_equal(sub.counts, ct.counts[:2])
