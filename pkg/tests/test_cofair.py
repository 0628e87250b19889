import numpy as np
from scipy.integrate import trapezoid
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairprobe.cofair import (
    DegenerateDistribution, FairnessDistribution, cofair, density_curve, fit_distribution,
    scott_bandwidth, write_density_csv,
)


def test_fnmr_filter_hand_case():
    # cutoff 1.1 * 0.0714 = 0.07854
    with pytest.raises(DegenerateDistribution):
        fit_distribution([(0.9, 0.08), (0.95, 0.079)], 0.0714)
    d = fit_distribution([(0.9, 0.08), (0.95, 0.079), (0.91, 0.07), (0.93, 0.0785)], 0.0714)
    assert d.samples == (0.91, 0.93)


def test_bandwidth_is_half_scott():
    x = [0.8, 0.85, 0.9, 0.97]
    d = fit_distribution([(v, 0.1) for v in x], 0.1)
    assert d.bandwidth == pytest.approx(0.5 * np.std(x, ddof=1) * 4 ** -0.2, abs=1e-15)
    assert scott_bandwidth(x) == pytest.approx(np.std(x, ddof=1) * 4 ** -0.2, abs=1e-15)


def test_zero_variance_rejected():
    with pytest.raises(DegenerateDistribution):
        fit_distribution([(0.9, 0.1), (0.9, 0.1)], 0.1)


@pytest.mark.parametrize("x, h", [(0.3, 0.01), (0.9, 0.2), (0.5, 1.0)])
def test_single_sample_symmetry(x, h):
    assert cofair(FairnessDistribution((x,), h), x) == 0.5


def test_mixture_equals_integrated_density():
    d = FairnessDistribution((0.7, 0.82, 0.85, 0.9, 0.93, 0.97), 0.02)
    lo = min(d.samples) - 12 * d.bandwidth
    for s in (0.75, 0.86, 0.95, 0.99):
        grid = np.linspace(lo, s, 100_001)
        integral = trapezoid(d.density(grid), grid)
        assert cofair(d, s) == pytest.approx(integral, abs=1e-6)


def test_open_interval():
    d = FairnessDistribution((0.5, 0.6), 0.01)
    assert 0.0 < cofair(d, -100.0) < 1e-12
    assert 1.0 - 1e-12 < cofair(d, 100.0) < 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30, unique=True))
def test_cdf_monotone(samples):
    d = FairnessDistribution(tuple(samples), 0.5 * scott_bandwidth(samples) + 1e-6)
    q = np.sort(np.random.default_rng(0).uniform(-0.5, 1.5, 1000))
    c = cofair(d, q)
    assert np.all(np.diff(c) >= 0)
    assert np.all((c > 0) & (c < 1))


def test_serialization_and_density_csv(tmp_path):
    d = FairnessDistribution((0.8, 0.9, 0.95), 0.03)
    assert FairnessDistribution.from_json(d.to_json()) == d
    write_density_csv(d, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "score,density"
    assert len(lines) == 1002
    assert lines[1].startswith("0.000,") and lines[-1].startswith("1.000,")
    grid, dens = density_curve(d)
    assert dens.argmax() == pytest.approx(900, abs=30)
