import math

import numpy as np
import pytest
from scipy import stats

from surgebma.covariates import CovariateKind
from surgebma.hazard import return_level
from surgebma.models import ModelStructure, NonstatLevel, ParameterVector
from surgebma.preprocess import DailySeries, decluster
from surgebma.simulate import (
    SimulationSpec,
    empirical_return_level,
    gpd_sample,
    simulate_record,
    simulate_year,
    synthetic_covariates,
)

ST = ModelStructure(NonstatLevel.ST, None)


def test_gpd_sample_exponential_limit_ks():
    rng = np.random.default_rng(0)
    draws = gpd_sample(0.2, 0.0, 100_000, rng)
    stat, _ = stats.kstest(draws, lambda x: stats.expon.cdf(x, scale=0.2))
    assert stat < 0.01


def test_gpd_sample_matches_genpareto_ks():
    rng = np.random.default_rng(1)
    for xi in (-0.25, 0.3):
        draws = gpd_sample(0.15, xi, 50_000, rng)
        stat, _ = stats.kstest(draws, lambda x: stats.genpareto.cdf(x, c=xi, scale=0.15))
        assert stat < 0.01


def test_simulate_year_tiny_rate_yields_no_events():
    rng = np.random.default_rng(2)
    counts = [simulate_year(1e-12, 0.1, 0.0, 1.0, 365.0, rng).size for _ in range(200)]
    assert sum(counts) == 0


def test_simulate_year_poisson_mean():
    rng = np.random.default_rng(3)
    lam, dt, n = 0.01, 365.0, 100_000
    counts = np.array([simulate_year(lam, 0.1, 0.1, 1.0, dt, rng).size for _ in range(n)])
    mean = lam * dt
    assert abs(counts.mean() - mean) < 3.0 * math.sqrt(mean / n)


def test_simulate_record_deterministic():
    cov = synthetic_covariates(1950, 2000, (1950, 2000))[CovariateKind.TIME]
    theta = ParameterVector(lam0=0.01, sig0=0.12, xi0=0.1)
    spec = SimulationSpec(theta, ST, cov, 1950, 2000, 1.0, seed=42)
    a, b = simulate_record(spec), simulate_record(spec)
    assert [(str(r.date), r.height) for r in a.all_records()] == [
        (str(r.date), r.height) for r in b.all_records()
    ]
    assert [blk.duration_days for blk in a.years] == [blk.duration_days for blk in b.years]


def test_simulate_record_counts_are_poisson():
    theta = ParameterVector(lam0=0.012, sig0=0.1, xi0=0.05)
    spec = SimulationSpec(theta, ST, None, 1500, 2499, 1.0, seed=9)
    record = simulate_record(spec)
    counts = np.array([b.count for b in record.years])
    mean = counts.mean()
    kmax = int(counts.max())
    observed = np.bincount(counts, minlength=kmax + 1).astype(float)
    expected = stats.poisson.pmf(np.arange(kmax + 1), mean) * counts.size
    # merge sparse tail bins for a valid chi-square
    while expected.size > 2 and expected[-1] < 5:
        expected[-2] += expected[-1]
        observed[-2] += observed[-1]
        expected, observed = expected[:-1], observed[:-1]
    expected *= observed.sum() / expected.sum()
    chi2 = float(np.sum((observed - expected) ** 2 / expected))
    p = stats.chi2.sf(chi2, df=expected.size - 2)
    assert p > 0.001


def test_simulate_record_ns1_counts_track_covariate():
    cov = synthetic_covariates(1500, 1999, (1500, 1999))[CovariateKind.TIME]
    structure = ModelStructure(NonstatLevel.NS1, CovariateKind.TIME)
    theta = ParameterVector(lam0=0.008, lam1=0.008, sig0=0.1, xi0=0.0)
    spec = SimulationSpec(theta, structure, cov, 1500, 1999, 1.0, seed=10)
    record = simulate_record(spec)
    counts = np.array([b.count for b in record.years], dtype=float)
    phi = cov.values
    slope, _, _, _, se = stats.linregress(phi, counts)[:5]
    assert slope > 3.0 * se  # positive dependence detected


def test_simulate_record_survives_declustering():
    theta = ParameterVector(lam0=0.02, sig0=0.15, xi0=0.1)
    spec = SimulationSpec(theta, ST, None, 2000, 2019, 1.0, seed=11)
    record = simulate_record(spec)
    recs = record.all_records()
    dates = np.array([r.date for r in recs], dtype="datetime64[D]")
    heights = np.array([r.height for r in recs])

    first = dates.min() - np.timedelta64(2, "D")
    last = dates.max() + np.timedelta64(2, "D")
    grid = np.arange(first, last + np.timedelta64(1, "D"))
    vals = np.zeros(grid.size)
    vals[(dates - first).astype(np.int64)] = heights
    daily = DailySeries(grid, vals, np.ones(grid.size, dtype=bool))
    out = decluster(daily, record.threshold, separation_days=3)
    assert [(str(r.date), r.height) for r in out.all_records()] == [
        (str(r.date), r.height) for r in recs
    ]


def test_empirical_return_level_monotone_in_period():
    theta = ParameterVector(lam0=0.01, sig0=0.2, xi0=0.1)
    rng = np.random.default_rng(12)
    levels = [
        empirical_return_level(theta, ST, 0.0, 1.0, t, 20_000, rng) for t in (5, 20, 100)
    ]
    assert levels[0] < levels[1] < levels[2]


def test_empirical_return_level_respects_bounded_tail():
    theta = ParameterVector(lam0=0.01, sig0=0.2, xi0=-0.3)
    rng = np.random.default_rng(13)
    bound = 1.0 - 0.2 / -0.3
    for t in (10, 50):
        assert empirical_return_level(theta, ST, 0.0, 1.0, t, 10_000, rng) < bound


def test_empirical_matches_analytic_return_level():
    # two fully independent routes to the same quantity
    theta = ParameterVector(lam0=0.01, sig0=0.2, xi0=0.1)
    rng = np.random.default_rng(14)
    got = empirical_return_level(theta, ST, 0.0, 1.0, 50, 200_000, rng)
    want = return_level(theta, ST, 0.0, 1.0, 50)
    assert got == pytest.approx(want, rel=0.02)


def test_simulation_spec_validates_rates():
    cov = synthetic_covariates(2000, 2010, (2000, 2010))[CovariateKind.TIME]
    structure = ModelStructure(NonstatLevel.NS1, CovariateKind.TIME)
    bad = ParameterVector(lam0=0.005, lam1=-0.01, sig0=0.1, xi0=0.0)
    with pytest.raises(ValueError, match="nonpositive"):
        SimulationSpec(bad, structure, cov, 2000, 2010, 1.0, seed=1)


def test_loglik_profile_peaks_near_truth():
    # generative/likelihood consistency: the average log-likelihood over a
    # 1-D grid around each component is maximized near the true value
    from surgebma.models import log_likelihood

    theta = ParameterVector(lam0=0.01, sig0=0.15, xi0=0.1)
    spec = SimulationSpec(theta, ST, None, 1700, 2199, 1.0, seed=15)
    record = simulate_record(spec)

    for name, truth, grid in [
        ("lam0", 0.01, np.linspace(0.005, 0.02, 31)),
        ("sig0", 0.15, np.linspace(0.08, 0.3, 31)),
        ("xi0", 0.1, np.linspace(-0.2, 0.5, 31)),
    ]:
        vals = []
        for g in grid:
            t = ParameterVector(**{**theta.__dict__, name: g})
            vals.append(log_likelihood(t, ST, record, None))
        best = grid[int(np.argmax(vals))]
        span = grid.max() - grid.min()
        assert abs(best - truth) < 0.2 * span
