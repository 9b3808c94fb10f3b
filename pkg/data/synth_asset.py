"""
Synthetic Asset
Mechanistic well simulator standing in for field data: choke physics with
a homogeneous mixture density, reservoir decline, an inflow relation and
an operator holding a rate target by moving the choke
"""

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import brentq

from data.well_data import AssetDataset, Source, WellObservation
from src.config import AssetConfig, ScenarioConfig, derive_seed
from tools.flow_tools import FluidSpec, ValveSpec, standard_rate

logger = logging.getLogger(__name__)

MAX_WATER_CUT = 0.95
CONTROLLER_TOL = 1e-6
SLOPE_STEP = 1e-4
NOISE_FLOOR = 0.01


class ScenarioError(Exception):
    """Base error for the data generator"""


class ScenarioInfeasible(ScenarioError, ValueError):
    pass


class UnknownScenarioWell(ScenarioError, KeyError):
    pass


@dataclass(frozen=True)
class WellScenario:
    """Everything needed to simulate one well; rates in Sm3/d (gas in thousand Sm3/d)"""
    well_id: str
    asset_id: str
    fluid: FluidSpec
    valve: ValveSpec
    p_res0: float
    decline_rate: float
    p2: float
    temp_c: float
    inflow_coeff: float
    water_cut0: float
    water_cut_drift: float
    gor: float
    target_rate: float
    horizon_days: float
    cadence_days: float = 1.0
    sigma_sep: float = 0.01
    sigma_mpfm: float = 0.05
    meter_mix: float = 0.3
    observation_probability: float = 1.0
    target_period_days: float = 0.0
    target_step: float = 0.0
    controller_gain: float = 1.0
    settle_iterations: int = 30
    producer_type: str = "oil"
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.decline_rate < 0:
            problems.append("decline rate must be non-negative")
        if self.sigma_sep < 0 or self.sigma_mpfm < 0:
            problems.append("noise levels must be non-negative")
        if self.horizon_days <= 0 or self.cadence_days <= 0:
            problems.append("horizon and cadence must be positive")
        if not self.p_res0 > self.p2 > 0:
            problems.append(f"need p_res0 > p2 > 0 (p_res0={self.p_res0}, p2={self.p2})")
        if self.target_rate <= 0:
            problems.append("rate target must be positive")
        if self.inflow_coeff < 0:
            problems.append("inflow coefficient must be non-negative")
        if not 0 <= self.meter_mix <= 1 or not 0 < self.observation_probability <= 1:
            problems.append("meter mix and observation probability must be fractions")
        if problems:
            raise ScenarioError(f"{self.well_id}: " + "; ".join(problems))

    def reservoir_pressure(self, t: float) -> float:
        return self.p_res0 - self.decline_rate * t

    def composition(self, t: float) -> Tuple[float, float, float]:
        """(gas, oil, water) fractions of the standard total rate at time t"""
        water_cut = min(self.water_cut0 + self.water_cut_drift * t, MAX_WATER_CUT)
        oil = 1.0 - water_cut
        gas = self.gor * oil / 1000.0
        total = gas + oil + water_cut
        return (gas / total, oil / total, water_cut / total)


def operating_point(scenario: WellScenario, u: float, p_res: float, phi) -> Tuple[float, float]:
    """Upstream pressure and standard total rate where choke and inflow agree"""
    if u <= 0 or p_res <= scenario.p2:
        return max(p_res, scenario.p2), 0.0

    def rate(p1):
        return standard_rate(scenario.valve, scenario.fluid, u, p1, scenario.p2, scenario.temp_c, phi)

    if scenario.inflow_coeff == 0:
        return p_res, rate(p_res)

    def mismatch(p1):
        return p1 - p_res + scenario.inflow_coeff * rate(p1)

    if mismatch(p_res) <= 0:
        return p_res, rate(p_res)
    p1 = brentq(mismatch, scenario.p2, p_res, xtol=1e-10, rtol=1e-12)
    return p1, rate(p1)


def settle_choke(scenario: WellScenario, u: float, target: float, p_res: float, phi,
                 iterations: int) -> Tuple[float, float, float]:
    """
    Proportional control of the choke towards ``target``

    The gain is clamped by the local rate-vs-opening slope so each move
    closes at most 90% of the error. Returns (u, p1, Q).
    """
    p1, q = operating_point(scenario, u, p_res, phi)
    for _ in range(iterations):
        error = (target - q) / target
        if abs(error) < CONTROLLER_TOL or (u >= 1.0 and error > 0) or (u <= 0.0 and error < 0):
            break
        u_lo = min(u, 1.0 - SLOPE_STEP)
        _, q_lo = operating_point(scenario, u_lo, p_res, phi)
        _, q_hi = operating_point(scenario, u_lo + SLOPE_STEP, p_res, phi)
        slope = (q_hi - q_lo) / SLOPE_STEP
        gain = scenario.controller_gain
        if slope > 0:
            gain = min(gain, 0.9 * target / slope)
        u = float(np.clip(u + gain * error, 0.0, 1.0))
        p1, q = operating_point(scenario, u, p_res, phi)
    return u, p1, q


def max_rate(scenario: WellScenario, t: float = 0.0) -> float:
    """Rate with the choke fully open"""
    return operating_point(scenario, 1.0, scenario.reservoir_pressure(t), scenario.composition(t))[1]


def simulate_well(scenario: WellScenario) -> List[WellObservation]:
    """Daily steady-state points of one well, sorted by time"""
    capacity = max_rate(scenario)
    if capacity < scenario.target_rate:
        raise ScenarioInfeasible(
            f"{scenario.well_id}: target {scenario.target_rate:.1f} exceeds fully open rate {capacity:.1f} on day 0"
        )
    rng = np.random.default_rng(scenario.seed)
    n_steps = int(np.floor(scenario.horizon_days / scenario.cadence_days)) + 1
    target = scenario.target_rate
    period = None
    u = 0.5
    observations = []
    for step in range(n_steps):
        t = step * scenario.cadence_days
        if scenario.target_period_days > 0 and scenario.target_step > 0:
            current = int(t // scenario.target_period_days)
            if period is not None and current != period:
                target = scenario.target_rate * (1.0 + rng.uniform(-scenario.target_step, scenario.target_step))
            period = current
        phi = scenario.composition(t)
        iterations = scenario.settle_iterations if step else max(scenario.settle_iterations, 200)
        u, p1, q_true = settle_choke(scenario, u, target, scenario.reservoir_pressure(t), phi, iterations)

        observed = rng.random() < scenario.observation_probability
        source = Source.MPFM if rng.random() < scenario.meter_mix else Source.SEPARATOR
        noise = rng.standard_normal()
        if q_true <= 0:
            logger.warning("%s stopped flowing at day %.0f", scenario.well_id, t)
            break
        if not observed:
            continue
        sigma = scenario.sigma_mpfm if source is Source.MPFM else scenario.sigma_sep
        q_obs = q_true * max(1.0 + sigma * noise, NOISE_FLOOR)
        observations.append(WellObservation(
            well_id=scenario.well_id,
            asset_id=scenario.asset_id,
            t=float(t),
            u=u,
            p1=p1,
            p2=scenario.p2,
            T=scenario.temp_c,
            phi_g=phi[0],
            phi_o=phi[1],
            phi_w=phi[2],
            q_g=q_obs * phi[0],
            q_o=q_obs * phi[1],
            q_w=q_obs * phi[2],
            source=source,
        ))
    logger.debug("%s: %d observations, final choke %.3f", scenario.well_id, len(observations), u)
    return observations


# --- assets ----------------------------------------------------------------------------

Sampler = Callable[[int, int], WellScenario]


def generate_asset(n_wells: int, sampler: Sampler, seed: int, n_jobs: int = 1) -> AssetDataset:
    """
    Simulate ``n_wells`` wells drawn from ``sampler(index, well_seed)``

    Per-well seeds derive from (seed, "well", index); wells run in parallel
    and are concatenated in index order.
    """
    if n_wells < 1:
        raise ScenarioError(f"n_wells must be at least 1, got {n_wells}")
    scenarios = [sampler(i, derive_seed(seed, "well", i)) for i in range(n_wells)]
    return simulate_scenarios(scenarios, n_jobs)


def simulate_scenarios(scenarios: Sequence[WellScenario], n_jobs: int = 1) -> AssetDataset:
    results = Parallel(n_jobs=n_jobs)(delayed(simulate_well)(s) for s in scenarios)
    observations = [obs for well in results for obs in well]
    logger.info("Generated %d observations for %d wells", len(observations), len(scenarios))
    return AssetDataset.from_observations(observations)


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo if lo == hi else rng.uniform(lo, hi))


class ConfigSampler:
    """Draws wells for each asset of a scenario config; well ids W01, W02, ..."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.slots: List[Tuple[AssetConfig, int]] = [
            (asset, i) for asset in config.assets for i in range(asset.n_wells)
        ]

    @property
    def n_wells(self) -> int:
        return len(self.slots)

    def __call__(self, index: int, seed: int) -> WellScenario:
        asset, _ = self.slots[index]
        cfg = self.config
        rng = np.random.default_rng(seed)
        gas_producer = rng.random() < asset.gas_producer_fraction
        fluid = FluidSpec(
            rho_o=_uniform(rng, asset.fluid.rho_o),
            rho_w=_uniform(rng, asset.fluid.rho_w),
            gas_molar_mass=_uniform(rng, asset.fluid.gas_molar_mass),
        )
        cv_max = _uniform(rng, asset.cv_max)
        if gas_producer:
            valve = ValveSpec(cv_max=cv_max * asset.gas_cv_scale, rangeability=_uniform(rng, asset.gas_rangeability))
            gor = _uniform(rng, asset.gor_gas)
            water_cut = 0.2 * _uniform(rng, asset.water_cut)
        else:
            valve = ValveSpec(cv_max=cv_max, rangeability=_uniform(rng, asset.rangeability))
            gor = _uniform(rng, asset.gor_oil)
            water_cut = _uniform(rng, asset.water_cut)
        scenario = WellScenario(
            well_id=f"W{index + 1:02d}",
            asset_id=asset.asset_id,
            fluid=fluid,
            valve=valve,
            p_res0=_uniform(rng, asset.p_res),
            decline_rate=_uniform(rng, asset.decline_rate),
            p2=_uniform(rng, asset.p2),
            temp_c=_uniform(rng, asset.temp_c),
            inflow_coeff=_uniform(rng, asset.inflow_coeff),
            water_cut0=water_cut,
            water_cut_drift=_uniform(rng, asset.water_cut_drift),
            gor=gor,
            target_rate=1.0,
            horizon_days=cfg.horizon_days,
            cadence_days=cfg.cadence_days,
            sigma_sep=cfg.sigma_sep,
            sigma_mpfm=cfg.sigma_mpfm,
            meter_mix=cfg.meter_mix,
            observation_probability=cfg.observation_probability,
            target_period_days=cfg.target_period_days,
            target_step=cfg.target_step,
            controller_gain=cfg.controller_gain,
            settle_iterations=cfg.settle_iterations,
            producer_type="gas" if gas_producer else "oil",
            seed=derive_seed(seed, "simulate"),
        )
        fraction = _uniform(rng, asset.target_fraction)
        return replace(scenario, target_rate=fraction * max_rate(scenario))


def sampler_from_config(config: ScenarioConfig) -> ConfigSampler:
    return ConfigSampler(config)


def generate_from_config(config: ScenarioConfig, n_jobs: int = 1) -> Tuple[AssetDataset, List[WellScenario]]:
    sampler = sampler_from_config(config)
    scenarios = [sampler(i, derive_seed(config.seed, "well", i)) for i in range(sampler.n_wells)]
    dataset = simulate_scenarios(scenarios, n_jobs=n_jobs)
    return dataset, scenarios


# --- metadata sidecar and oracle ---------------------------------------------------------

def write_well_metadata(scenarios: Sequence[WellScenario], path) -> Path:
    """wells.csv: one row per well with the physics needed to rebuild the oracle"""
    rows = []
    for s in scenarios:
        row = {k: v for k, v in asdict(s).items() if k not in ("fluid", "valve")}
        row.update({f"fluid_{k}": v for k, v in asdict(s.fluid).items()})
        row.update({f"valve_{k}": v for k, v in asdict(s.valve).items()})
        rows.append(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def read_well_metadata(path) -> List[WellScenario]:
    frame = pd.read_csv(path, dtype={"well_id": str, "asset_id": str, "producer_type": str})
    scenarios = []
    for record in frame.to_dict(orient="records"):
        fluid = FluidSpec(**{k[len("fluid_"):]: v for k, v in record.items() if k.startswith("fluid_")})
        valve = ValveSpec(**{k[len("valve_"):]: v for k, v in record.items() if k.startswith("valve_")})
        plain = {k: v for k, v in record.items() if not k.startswith(("fluid_", "valve_"))}
        plain["settle_iterations"] = int(plain["settle_iterations"])
        plain["seed"] = int(plain["seed"])
        scenarios.append(WellScenario(fluid=fluid, valve=valve, **plain))
    return scenarios


class MechanisticOracle:
    """Noise-free generator physics exposed through the common predict interface"""
    kind = "oracle"

    def __init__(self, scenarios: Mapping[str, WellScenario]):
        self.scenarios = dict(scenarios)

    @classmethod
    def from_scenarios(cls, scenarios: Sequence[WellScenario]) -> "MechanisticOracle":
        return cls({s.well_id: s for s in scenarios})

    @property
    def well_ids(self) -> List[str]:
        return list(self.scenarios)

    def predict(self, X, well_ids: Sequence[str]) -> np.ndarray:
        """Q for rows [u, p1, p2, T, phi_g, phi_o] in physical units"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(len(X))
        for i, (row, well_id) in enumerate(zip(X, well_ids)):
            if well_id not in self.scenarios:
                raise UnknownScenarioWell(well_id)
            s = self.scenarios[well_id]
            u, p1, p2, temp_c, phi_g, phi_o = row
            phi = (phi_g, phi_o, max(0.0, 1.0 - phi_g - phi_o))
            out[i] = standard_rate(s.valve, s.fluid, u, p1, p2, temp_c, phi)
        return out
