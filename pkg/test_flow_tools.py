"""
Tests for the choke physics calculators
"""

import numpy as np
import pytest

from tools.flow_tools import (
    FluidSpec,
    InvalidComposition,
    NegativePressureDrop,
    NonPositiveDensity,
    ValveSpec,
    choke_flow,
    gas_density,
    mixture_density,
    standard_rate,
    validate_composition,
)

PHI = (0.1, 0.6, 0.3)


def test_choke_flow_bernoulli():
    """Q = A*C*sqrt(dp/rho) with dp converted from bar"""
    q = choke_flow(1e-3, 30.0, 20.0, 1000.0)
    assert q == pytest.approx(1e-3 * np.sqrt(10.0 * 1e5 / 1000.0))
    assert choke_flow(1e-3, 20.0, 20.0, 900.0) == 0.0


def test_choke_flow_rejects_bad_inputs():
    with pytest.raises(NegativePressureDrop):
        choke_flow(1e-3, 10.0, 20.0, 1000.0)
    with pytest.raises(NonPositiveDensity):
        choke_flow(1e-3, 30.0, 20.0, 0.0)


def test_cv_curve_is_monotone_and_closes():
    valve = ValveSpec(cv_max=2e-4, rangeability=30.0)
    u = np.linspace(0.0, 1.0, 101)
    cv = valve.cv_curve(u)
    assert cv[0] == 0.0
    assert cv[-1] == pytest.approx(2e-4)
    assert np.all(np.diff(cv) > 0)
    assert valve.cv_curve(0.5) == pytest.approx(2e-4 * 30.0 ** -0.5)


def test_validate_composition():
    np.testing.assert_allclose(validate_composition(PHI), PHI)
    with pytest.raises(InvalidComposition):
        validate_composition((0.5, 0.6, 0.1))
    with pytest.raises(InvalidComposition):
        validate_composition((0.5, 0.5))


def test_mixture_density_between_phase_densities():
    fluid = FluidSpec()
    rho = mixture_density(PHI, fluid, 100.0, 60.0)
    assert gas_density(100.0, 60.0, fluid) < rho < fluid.rho_w
    assert mixture_density((0.0, 1.0, 0.0), fluid, 100.0, 60.0) == pytest.approx(fluid.rho_o)


def test_standard_rate_increases_with_upstream_pressure_and_opening():
    """Monotone in p1 and u, the property the sensitivity score relies on"""
    valve, fluid = ValveSpec(), FluidSpec()
    rates = [standard_rate(valve, fluid, 0.5, p1, 25.0, 60.0, PHI) for p1 in np.linspace(30, 200, 20)]
    assert np.all(np.diff(rates) > 0)
    rates = [standard_rate(valve, fluid, u, 120.0, 25.0, 60.0, PHI) for u in np.linspace(0.05, 1.0, 20)]
    assert np.all(np.diff(rates) > 0)
    assert standard_rate(valve, fluid, 0.0, 120.0, 25.0, 60.0, PHI) == 0.0


def test_fluid_spec_rejects_non_positive_density():
    with pytest.raises(NonPositiveDensity):
        FluidSpec(rho_o=0.0)
