"""
Configuration
Validated scenario and experiment configs loaded from TOML, environment
overrides, config hashing and hierarchical seed derivation
"""

import hashlib
import json
import logging
import os
import re
import sys
import zlib
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
from dotenv import load_dotenv
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "VFM_OUTPUT_ROOT"
JOBS_ENV = "VFM_JOBS"
MODEL_KINDS = ("stl-gbt", "stl-ann", "mtl-asset", "mtl-universal")


class ConfigError(Exception):
    """Invalid configuration, with (key path, line, message) diagnostics"""

    def __init__(self, source: str, diagnostics: Sequence[Tuple[str, Optional[int], str]]):
        self.source = source
        self.diagnostics = list(diagnostics)
        lines = []
        for key, line, message in self.diagnostics:
            where = f"{source}:{line}" if line else source
            lines.append(f"{where}: {key}: {message}" if key else f"{where}: {message}")
        super().__init__("\n".join(lines))


# --- seeds and hashing ---------------------------------------------------------

def _path_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(root: int, *path) -> int:
    """Independent, reproducible seed for the stream named by ``path`` under ``root``"""
    entropy = [int(root) & 0xFFFFFFFF] + [_path_word(p) for p in path]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --- environment ---------------------------------------------------------------

def load_environment(env_file: Optional[str] = None) -> None:
    load_dotenv(env_file, override=False)


DEFAULT_OUTPUT_ROOT = "runs"


def output_root(default: str = DEFAULT_OUTPUT_ROOT) -> Path:
    return Path(os.getenv(OUTPUT_ROOT_ENV) or default)


def resolve_output(path) -> Path:
    """Relative output paths live under the output root"""
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


def default_jobs() -> int:
    raw = os.getenv(JOBS_ENV)
    if raw:
        try:
            jobs = int(raw)
        except ValueError:
            raise ConfigError(JOBS_ENV, [(JOBS_ENV, None, f"expected an integer, got {raw!r}")])
        if jobs != 0:
            return jobs
    return os.cpu_count() or 1


# --- scenario config -------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_range(value: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = value
    if lo > hi:
        raise ValueError(f"range lower bound {lo} exceeds upper bound {hi}")
    return (float(lo), float(hi))


Range = Annotated[Tuple[float, float], AfterValidator(_check_range)]


class FluidRanges(_Strict):
    rho_o: Range = (800.0, 860.0)
    rho_w: Range = (1020.0, 1040.0)
    gas_molar_mass: Range = (0.018, 0.022)

    @field_validator("rho_o", "rho_w", "gas_molar_mass")
    @classmethod
    def _positive(cls, value: Range) -> Range:
        if value[0] <= 0:
            raise ValueError("densities and molar mass must be positive")
        return value


class AssetConfig(_Strict):
    """Sampling ranges for the wells of one asset (pressures in bar)"""
    asset_id: str
    n_wells: int = Field(ge=1)
    gas_producer_fraction: float = Field(0.0, ge=0.0, le=1.0)
    p_res: Range = (150.0, 190.0)
    decline_rate: Range = (0.01, 0.03)
    p2: Range = (20.0, 30.0)
    temp_c: Range = (55.0, 75.0)
    inflow_coeff: Range = (0.005, 0.015)
    cv_max: Range = (1.5e-4, 3.0e-4)
    rangeability: Range = (20.0, 50.0)
    target_fraction: Range = (0.4, 0.6)
    water_cut: Range = (0.05, 0.3)
    water_cut_drift: Range = (1.0e-4, 3.0e-4)
    gor_oil: Range = (80.0, 200.0)
    gor_gas: Range = (1500.0, 4000.0)
    gas_rangeability: Range = (8.0, 15.0)
    gas_cv_scale: float = Field(0.6, gt=0.0)
    fluid: FluidRanges = FluidRanges()

    @model_validator(mode="after")
    def _physical(self) -> "AssetConfig":
        if self.p2[1] >= self.p_res[0]:
            raise ValueError("downstream pressure must stay below reservoir pressure")
        if self.decline_rate[0] < 0:
            raise ValueError("decline rate must be non-negative")
        if self.rangeability[0] <= 1 or self.gas_rangeability[0] <= 1:
            raise ValueError("rangeability must exceed 1")
        if self.water_cut[0] < 0 or self.water_cut[1] >= 1:
            raise ValueError("water cut must lie in [0, 1)")
        return self


class ScenarioConfig(_Strict):
    seed: int = 0
    horizon_days: float = Field(1000.0, gt=0)
    cadence_days: float = Field(1.0, gt=0)
    observation_probability: float = Field(0.85, gt=0.0, le=1.0)
    sigma_sep: float = Field(0.01, ge=0.0)
    sigma_mpfm: float = Field(0.05, ge=0.0)
    meter_mix: float = Field(0.3, ge=0.0, le=1.0)
    target_period_days: float = Field(90.0, ge=0.0)
    target_step: float = Field(0.1, ge=0.0, lt=1.0)
    controller_gain: float = Field(1.0, gt=0.0)
    settle_iterations: int = Field(30, ge=1)
    assets: List[AssetConfig] = Field(min_length=1)

    @field_validator("assets")
    @classmethod
    def _unique_assets(cls, assets: List[AssetConfig]) -> List[AssetConfig]:
        ids = [a.asset_id for a in assets]
        if len(set(ids)) != len(ids):
            raise ValueError(f"asset ids must be unique: {ids}")
        return assets

    @property
    def n_wells(self) -> int:
        return sum(a.n_wells for a in self.assets)


# --- experiment config -------------------------------------------------------------

GRID_PRESETS: Dict[str, Dict[str, object]] = {
    "full": {
        "m_l": [4, 6, 8],
        "stl_m_h": [8, 16, 32],
        "mtl_m_h": [8, 16, 32, 64],
        "lam": [1e-5, 1e-4, 1e-3],
        "m_beta": [1, 2, 4],
        "lam_t": [1e-4, 1e-3, 1e-2],
        "gbt_max_depth": [2, 3, 4],
        "gbt_reg_lambda": [0.1, 1.0, 10.0],
        "gbt_reg_gamma": [0.0, 1e-3],
        "gbt_learning_rate": [0.1],
        "gbt_rounds": 500,
        "gbt_patience": 50,
        "epochs_search": 3000,
        "epochs_final": 1000,
    },
    "quick": {
        "m_l": [4],
        "stl_m_h": [8],
        "mtl_m_h": [8],
        "lam": [1e-4],
        "m_beta": [2],
        "lam_t": [1e-3],
        "gbt_max_depth": [2],
        "gbt_reg_lambda": [1.0],
        "gbt_reg_gamma": [0.0],
        "gbt_learning_rate": [0.1],
        "gbt_rounds": 100,
        "gbt_patience": 20,
        "epochs_search": 500,
        "epochs_final": 100,
    },
}


class GridConfig(_Strict):
    """Hyperparameter candidates; unset fields come from the named preset"""
    preset: Literal["full", "quick"] = "full"
    m_l: List[int]
    stl_m_h: List[int]
    mtl_m_h: List[int]
    lam: List[float]
    m_beta: List[int]
    lam_t: List[float]
    gbt_max_depth: List[int]
    gbt_reg_lambda: List[float]
    gbt_reg_gamma: List[float]
    gbt_learning_rate: List[float]
    gbt_rounds: int = Field(ge=1)
    gbt_patience: int = Field(ge=1)
    epochs_search: int = Field(ge=500)
    epochs_final: int = Field(ge=0)
    batches_per_epoch: int = Field(3, ge=1)
    restrict_to_data: bool = True

    @model_validator(mode="before")
    @classmethod
    def _fill_from_preset(cls, data):
        data = dict(data or {})
        preset = data.get("preset", "full")
        if preset not in GRID_PRESETS:
            return data
        for key, value in GRID_PRESETS[preset].items():
            data.setdefault(key, value)
        return data

    @field_validator("m_l")
    @classmethod
    def _even_depth(cls, values: List[int]) -> List[int]:
        bad = [v for v in values if v < 4 or v % 2]
        if bad:
            raise ValueError(f"m_l must be even and >= 4, got {bad}")
        return values

    @field_validator("m_l", "stl_m_h", "mtl_m_h", "lam", "m_beta", "lam_t", "gbt_max_depth",
                     "gbt_reg_lambda", "gbt_reg_gamma", "gbt_learning_rate")
    @classmethod
    def _non_empty(cls, values: List) -> List:
        if not values:
            raise ValueError("candidate list must not be empty")
        if any(v < 0 for v in values):
            raise ValueError(f"candidates must be non-negative, got {values}")
        return values

    @classmethod
    def for_preset(cls, name: str) -> "GridConfig":
        return cls(preset=name)


class SplitConfig(_Strict):
    max_gap_days: float = Field(120.0, gt=0)
    frac_cap: float = Field(0.2, gt=0, lt=1)
    count_cap: int = Field(500, ge=1)
    block_days: float = Field(100.0, gt=0)
    val_fraction: Range = (0.10, 0.20)


class ExperimentConfig(_Strict):
    seed: int = 0
    output_dir: str = "default"
    dataset: Optional[str] = None
    scenario: Optional[str] = None
    models: List[Literal["stl-gbt", "stl-ann", "mtl-asset", "mtl-universal"]] = list(MODEL_KINDS)
    grid: GridConfig = GridConfig()
    split: SplitConfig = SplitConfig()
    n_jobs: Optional[int] = None
    ablation_seeds: List[int] = [0, 1, 2]
    sensitivity_delta_p1: float = Field(10.0, gt=0)
    sweep_wells: List[str] = []
    sweep_points: int = Field(30, ge=1)

    @field_validator("models")
    @classmethod
    def _unique_models(cls, models: List[str]) -> List[str]:
        if not models:
            raise ValueError("at least one model kind is required")
        return list(dict.fromkeys(models))


# --- loading --------------------------------------------------------------------------

_HEADER = re.compile(r"^\s*(\[\[?)\s*([^\]]+?)\s*\]\]?\s*(#.*)?$")


def _line_of(text: str, loc: Sequence) -> Optional[int]:
    """1-based line of the TOML key named by a validation error location"""
    names = [str(p) for p in loc if isinstance(p, str)]
    indices = [p for p in loc if isinstance(p, int)]
    if not names:
        return None
    key = names[-1]
    table = ".".join(names[:-1])
    wanted_index = indices[0] if indices else None
    header, array_counts, header_line = "", {}, None
    key_pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for number, line in enumerate(text.splitlines(), start=1):
        match = _HEADER.match(line)
        if match:
            header = match.group(2)
            if match.group(1) == "[[":
                array_counts[header] = array_counts.get(header, -1) + 1
            if header == ".".join(names) and header_line is None:
                header_line = number
            continue
        if not key_pattern.match(line):
            continue
        position = array_counts.get(header.split(".")[0])
        table_matches = header == table or (table == "" and header == "")
        if table_matches and (wanted_index is None or position == wanted_index):
            return number
    return header_line


ConfigT = TypeVar("ConfigT", bound=BaseModel)


def parse_config(text: str, model: Type[ConfigT], source: str = "<config>") -> ConfigT:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(source, [("", None, f"invalid TOML: {e}")]) from e
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        diagnostics = [
            (".".join(str(p) for p in err["loc"]), _line_of(text, err["loc"]), err["msg"])
            for err in e.errors()
        ]
        raise ConfigError(source, diagnostics) from e


def load_config(path, model: Type[ConfigT]) -> ConfigT:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(str(path), [("", None, f"cannot read config: {e}")]) from e
    config = parse_config(text, model, str(path))
    logger.debug("Loaded %s from %s", model.__name__, path)
    return config


def load_scenario_config(path) -> ScenarioConfig:
    return load_config(path, ScenarioConfig)


def load_experiment_config(path) -> ExperimentConfig:
    return load_config(path, ExperimentConfig)
