"""
Choke Flow Tools
Mechanistic calculators for single choke valves: Bernoulli choke rate,
homogeneous mixture density and equal-percentage CV curves
"""

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

BAR_TO_PA = 1.0e5
SECONDS_PER_DAY = 86400.0
GAS_CONSTANT = 8.314462618
KELVIN_OFFSET = 273.15
STANDARD_PRESSURE_BAR = 1.01325
STANDARD_TEMPERATURE_C = 15.0

# Gas rates are carried in thousand Sm3/d, so one unit of gas fraction is 1000 Sm3
GAS_RATE_FACTOR = 1000.0

ArrayLike = Union[float, np.ndarray]


class FlowToolError(ValueError):
    """Base error for choke calculations"""


class NegativePressureDrop(FlowToolError):
    pass


class NonPositiveDensity(FlowToolError):
    pass


class InvalidComposition(FlowToolError):
    pass


@dataclass(frozen=True)
class FluidSpec:
    """Fluid properties of one well"""
    rho_o: float = 820.0
    rho_w: float = 1025.0
    gas_molar_mass: float = 0.019
    standard_pressure_bar: float = STANDARD_PRESSURE_BAR
    standard_temperature_c: float = STANDARD_TEMPERATURE_C

    def __post_init__(self):
        if self.rho_o <= 0 or self.rho_w <= 0 or self.gas_molar_mass <= 0:
            raise NonPositiveDensity(
                f"densities and molar mass must be positive: {self}"
            )


@dataclass(frozen=True)
class ValveSpec:
    """Equal-percentage choke characteristic

    cv(u) = cv_max * R**(u - 1) above the blend point, blended linearly
    to zero below it so the curve is strictly monotone and cv(0) = 0.
    """
    cv_max: float = 2.0e-4
    rangeability: float = 30.0
    blend_opening: float = 0.05

    def __post_init__(self):
        if self.cv_max <= 0:
            raise FlowToolError(f"cv_max must be positive, got {self.cv_max}")
        if self.rangeability <= 1:
            raise FlowToolError(f"rangeability must exceed 1, got {self.rangeability}")
        if not 0 < self.blend_opening < 1:
            raise FlowToolError(f"blend opening must lie in (0, 1), got {self.blend_opening}")

    def cv_curve(self, u: ArrayLike) -> ArrayLike:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        u0 = self.blend_opening
        at_blend = self.cv_max * self.rangeability ** (u0 - 1.0)
        cv = np.where(
            u >= u0,
            self.cv_max * self.rangeability ** (u - 1.0),
            at_blend * u / u0,
        )
        return float(cv) if cv.ndim == 0 else cv


def choke_flow(area_times_c: ArrayLike, p1: ArrayLike, p2: ArrayLike, rho: ArrayLike) -> ArrayLike:
    """
    Bernoulli choke rate Q = A*C*sqrt((p1 - p2)/rho)

    Pressures in bar (converted to Pa), density in kg/m3, A*C in m2.
    Returns line volumetric rate in m3/s.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise NonPositiveDensity(f"density must be positive, got {rho}")
    drop = p1 - p2
    if np.any(drop < 0):
        raise NegativePressureDrop(f"p1 must not be below p2 (p1={p1}, p2={p2})")
    q = np.asarray(area_times_c, dtype=float) * np.sqrt(drop * BAR_TO_PA / rho)
    return float(q) if q.ndim == 0 else q


def validate_composition(phi: Sequence[float], tol: float = 1e-9) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != 3:
        raise InvalidComposition(f"expected (gas, oil, water) fractions, got shape {phi.shape}")
    if np.any(phi < -tol) or np.any(phi > 1 + tol):
        raise InvalidComposition(f"fractions must lie in [0, 1]: {phi}")
    if np.any(np.abs(phi.sum(axis=-1) - 1.0) > tol):
        raise InvalidComposition(f"fractions must sum to one: {phi}")
    return phi


def gas_density(p: ArrayLike, temp_c: ArrayLike, fluid: FluidSpec) -> ArrayLike:
    """Ideal-gas density at line conditions"""
    return (
        np.asarray(p, dtype=float) * BAR_TO_PA * fluid.gas_molar_mass
        / (GAS_CONSTANT * (np.asarray(temp_c, dtype=float) + KELVIN_OFFSET))
    )


def line_volume_factors(phi: Sequence[float], fluid: FluidSpec, p: float, temp_c: float) -> np.ndarray:
    """Line volume per unit of standard total rate, for (gas, oil, water)"""
    phi = validate_composition(phi)
    if p <= 0:
        raise FlowToolError(f"pressure must be positive, got {p}")
    if temp_c <= -KELVIN_OFFSET:
        raise FlowToolError(f"temperature below absolute zero: {temp_c}")
    gas_expansion = (
        (fluid.standard_pressure_bar / p)
        * (temp_c + KELVIN_OFFSET)
        / (fluid.standard_temperature_c + KELVIN_OFFSET)
    )
    return np.array([
        phi[0] * GAS_RATE_FACTOR * gas_expansion,
        phi[1],
        phi[2],
    ])


def mixture_density(phi: Sequence[float], fluid: FluidSpec, p: float, temp_c: float) -> float:
    """
    Homogeneous no-slip mixture density at line conditions

    Standard-condition fractions are converted to line volume fractions,
    then weighted with the phase densities.
    """
    volumes = line_volume_factors(phi, fluid, p, temp_c)
    total = volumes.sum()
    if total <= 0:
        raise InvalidComposition(f"composition has no volume: {phi}")
    densities = np.array([gas_density(p, temp_c, fluid), fluid.rho_o, fluid.rho_w])
    return float(np.dot(volumes / total, densities))


def standard_rate(valve: ValveSpec, fluid: FluidSpec, u: float, p1: float, p2: float,
                  temp_c: float, phi: Sequence[float]) -> float:
    """
    Total rate at standard conditions (Sm3/d, gas in thousand Sm3/d)

    Homogeneous multiplier model: multiplier fixed to one, mixture density
    evaluated at upstream conditions.
    """
    volumes = line_volume_factors(phi, fluid, p1, temp_c)
    rho = mixture_density(phi, fluid, p1, temp_c)
    line_rate = choke_flow(valve.cv_curve(u), p1, p2, rho)
    return float(line_rate * SECONDS_PER_DAY / volumes.sum())
