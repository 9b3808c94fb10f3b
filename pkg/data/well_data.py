"""
Well Data
Steady-state well observations: CSV ingestion and export, affine scaling,
and the time-aware train/validation/test split procedure
"""

import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SEPARATOR_WEIGHT = 1.0
MPFM_WEIGHT = 0.1
COMPOSITION_TOL = 1e-9
SCALED_VARIABLES = ("u", "p1", "p2", "T", "Q")
FEATURE_COLUMNS = ("u", "p1", "p2", "T", "phi_g", "phi_o")


class WellDataError(Exception):
    """Base error for dataset handling"""


class MissingColumn(WellDataError, KeyError):
    pass


class ParseFailure(WellDataError, ValueError):
    def __init__(self, rows: Sequence[Tuple[int, str]]):
        self.rows = list(rows)
        super().__init__(_describe_rows("unparseable rows", self.rows))


class InvariantViolation(WellDataError, ValueError):
    def __init__(self, rows: Sequence[Tuple[int, str]]):
        self.rows = list(rows)
        super().__init__(_describe_rows("rows violate observation invariants", self.rows))


class EmptyDevelopmentSet(WellDataError, ValueError):
    pass


class SplitWarning(UserWarning):
    pass


def _describe_rows(title: str, rows: Sequence[Tuple[int, str]]) -> str:
    shown = "; ".join(f"row {r}: {reason}" for r, reason in rows[:10])
    more = f" (+{len(rows) - 10} more)" if len(rows) > 10 else ""
    return f"{title}: {shown}{more}"


class Source(str, Enum):
    SEPARATOR = "SEP"
    MPFM = "MPFM"

    @property
    def weight(self) -> float:
        return SEPARATOR_WEIGHT if self is Source.SEPARATOR else MPFM_WEIGHT


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"
    UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class WellObservation:
    """One steady-state averaged data point (gas rate in thousand Sm3/d)"""
    well_id: str
    asset_id: str
    t: float
    u: float
    p1: float
    p2: float
    T: float
    phi_g: float
    phi_o: float
    phi_w: float
    q_g: float
    q_o: float
    q_w: float
    source: Source = Source.SEPARATOR

    @property
    def Q(self) -> float:
        return self.q_g + self.q_o + self.q_w

    @property
    def weight(self) -> float:
        return self.source.weight

    @property
    def phi(self) -> Tuple[float, float, float]:
        return (self.phi_g, self.phi_o, self.phi_w)

    def features(self) -> Tuple[float, ...]:
        return (self.u, self.p1, self.p2, self.T, self.phi_g, self.phi_o)


def observation_problems(obs: WellObservation, tol: float = COMPOSITION_TOL) -> List[str]:
    """Return the invariants ``obs`` breaks (empty when valid)"""
    problems = []
    values = (obs.t, obs.u, obs.p1, obs.p2, obs.T, obs.phi_g, obs.phi_o, obs.phi_w, obs.q_g, obs.q_o, obs.q_w)
    if not all(math.isfinite(v) for v in values):
        return ["non-finite value"]
    if obs.t < 0:
        problems.append(f"negative time {obs.t}")
    if not 0.0 <= obs.u <= 1.0:
        problems.append(f"choke opening {obs.u} outside [0, 1]")
    phi = obs.phi
    if any(f < 0.0 or f > 1.0 for f in phi):
        problems.append(f"composition fraction outside [0, 1]: {phi}")
    if abs(sum(phi) - 1.0) > tol:
        problems.append(f"composition sums to {sum(phi):.12g}, not 1")
    if obs.Q <= 0:
        problems.append(f"total rate {obs.Q} is not positive")
    elif any(abs(q - obs.Q * f) > tol * max(1.0, obs.Q) for q, f in zip((obs.q_g, obs.q_o, obs.q_w), phi)):
        problems.append("phase rates disagree with Q * phi")
    if not obs.p1 >= obs.p2 >= 0:
        problems.append(f"pressures must satisfy p1 >= p2 >= 0 (p1={obs.p1}, p2={obs.p2})")
    return problems


def phase_rates(Q, phi) -> np.ndarray:
    """Per-phase rates q = Q * phi for scalar or vector Q"""
    Q = np.asarray(Q, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return Q[..., None] * phi if Q.ndim else Q * phi


@dataclass(frozen=True)
class Scaler:
    """Per-variable affine transforms x_scaled = (x - shift) / scale"""
    shift: Mapping[str, float]
    scale: Mapping[str, float]

    def __post_init__(self):
        for var in SCALED_VARIABLES:
            if var not in self.shift or var not in self.scale:
                raise WellDataError(f"scaler is missing variable {var!r}")
            if not self.scale[var] > 0:
                raise WellDataError(f"scale for {var!r} must be positive, got {self.scale[var]}")

    def apply(self, var: str, values):
        return (np.asarray(values, dtype=float) - self.shift[var]) / self.scale[var]

    def invert(self, var: str, values):
        return np.asarray(values, dtype=float) * self.scale[var] + self.shift[var]

    def transform_features(self, X: np.ndarray) -> np.ndarray:
        """Scale u, p1, p2, T columns of an (N x 6) feature matrix; fractions pass through"""
        X = np.array(X, dtype=float, copy=True)
        for col, var in enumerate(("u", "p1", "p2", "T")):
            X[:, col] = self.apply(var, X[:, col])
        return X

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {var: {"shift": float(self.shift[var]), "scale": float(self.scale[var])} for var in SCALED_VARIABLES}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Mapping[str, float]]) -> "Scaler":
        return cls(
            shift={var: float(payload[var]["shift"]) for var in SCALED_VARIABLES},
            scale={var: float(payload[var]["scale"]) for var in SCALED_VARIABLES},
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column names of the dataset CSV and the unit of the gas column"""
    well_id: str = "well_id"
    asset_id: str = "asset_id"
    t_days: str = "t_days"
    choke_pct: str = "choke_pct"
    p1_bar: str = "p1_bar"
    p2_bar: str = "p2_bar"
    temp_c: str = "temp_c"
    phi_g: str = "phi_g"
    phi_o: str = "phi_o"
    phi_w: str = "phi_w"
    q_g: str = "qg_ksm3d"
    q_o: str = "qo_sm3d"
    q_w: str = "qw_sm3d"
    source: str = "source"
    # "ksm3d": gas column already in thousand Sm3/d; "sm3d": raw Sm3/d, divided by 1000 on load
    gas_unit: str = "ksm3d"

    def columns(self) -> List[str]:
        return [
            self.well_id, self.asset_id, self.t_days, self.choke_pct, self.p1_bar, self.p2_bar,
            self.temp_c, self.phi_g, self.phi_o, self.phi_w, self.q_g, self.q_o, self.q_w, self.source,
        ]

    @property
    def gas_divisor(self) -> float:
        if self.gas_unit == "ksm3d":
            return 1.0
        if self.gas_unit == "sm3d":
            return 1000.0
        raise WellDataError(f"unknown gas unit {self.gas_unit!r}")


DEFAULT_SCHEMA = CsvSchema()


@dataclass(frozen=True)
class AssetDataset:
    """Observations grouped by well, with scaler and split labels

    Immutable: ``with_scaler`` and ``with_splits`` return new datasets.
    """
    observations: Tuple[WellObservation, ...]
    wells: Mapping[str, Tuple[int, ...]] = field(default_factory=dict)
    scaler: Optional[Scaler] = None
    split_labels: Tuple[Split, ...] = ()

    @classmethod
    def from_observations(cls, observations: Iterable[WellObservation]) -> "AssetDataset":
        observations = tuple(observations)
        grouped: Dict[str, List[int]] = {}
        for idx, obs in enumerate(observations):
            grouped.setdefault(obs.well_id, []).append(idx)
        wells = {
            well_id: tuple(sorted(indices, key=lambda i: (observations[i].t, i)))
            for well_id, indices in grouped.items()
        }
        return cls(
            observations=observations,
            wells=wells,
            split_labels=tuple(Split.UNASSIGNED for _ in observations),
        )

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def well_ids(self) -> List[str]:
        return list(self.wells)

    def get_well_observations(self, well_id: str) -> List[WellObservation]:
        return [self.observations[i] for i in self.wells[well_id]]

    def asset_of(self, well_id: str) -> str:
        return self.observations[self.wells[well_id][0]].asset_id

    def get_wells_by_asset(self) -> Dict[str, List[str]]:
        assets: Dict[str, List[str]] = {}
        for well_id in self.wells:
            assets.setdefault(self.asset_of(well_id), []).append(well_id)
        return assets

    def indices_with(self, labels: Sequence[Split], well_ids: Optional[Sequence[str]] = None) -> List[int]:
        wanted = set(labels)
        wells = self.well_ids if well_ids is None else well_ids
        return [i for w in wells for i in self.wells[w] if self.split_labels[i] in wanted]

    def development_indices(self, well_ids: Optional[Sequence[str]] = None) -> List[int]:
        return self.indices_with((Split.TRAIN, Split.VALIDATION), well_ids)

    def with_scaler(self, scaler: Scaler) -> "AssetDataset":
        return replace(self, scaler=scaler)

    def with_splits(self, labels: Sequence[Split]) -> "AssetDataset":
        if len(labels) != len(self.observations):
            raise WellDataError(f"expected {len(self.observations)} split labels, got {len(labels)}")
        return replace(self, split_labels=tuple(labels))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([obs.__dict__ for obs in self.observations])
        if frame.empty:
            return frame
        frame["source"] = [obs.source.value for obs in self.observations]
        frame["Q"] = [obs.Q for obs in self.observations]
        frame["weight"] = [obs.weight for obs in self.observations]
        frame["split"] = [label.value for label in self.split_labels]
        return frame


# --- ingestion -----------------------------------------------------------------

def _parse_row(row: Mapping[str, object], schema: CsvSchema) -> WellObservation:
    source_text = str(row[schema.source]).strip().upper()
    try:
        source = Source(source_text)
    except ValueError:
        raise ValueError(f"unknown source {row[schema.source]!r}")
    numbers = {}
    for name in ("t_days", "choke_pct", "p1_bar", "p2_bar", "temp_c", "phi_g", "phi_o", "phi_w", "q_g", "q_o", "q_w"):
        raw = row[getattr(schema, name)]
        value = float(raw)
        if not math.isfinite(value):
            raise ValueError(f"{getattr(schema, name)} is not finite ({raw!r})")
        numbers[name] = value
    return WellObservation(
        well_id=str(row[schema.well_id]),
        asset_id=str(row[schema.asset_id]),
        t=numbers["t_days"],
        u=numbers["choke_pct"] / 100.0,
        p1=numbers["p1_bar"],
        p2=numbers["p2_bar"],
        T=numbers["temp_c"],
        phi_g=numbers["phi_g"],
        phi_o=numbers["phi_o"],
        phi_w=numbers["phi_w"],
        q_g=numbers["q_g"] / schema.gas_divisor,
        q_o=numbers["q_o"],
        q_w=numbers["q_w"],
        source=source,
    )


def load_dataset(path, schema: CsvSchema = DEFAULT_SCHEMA, strict: bool = True):
    """
    Load a dataset CSV and validate every observation

    With ``strict`` (default) any bad row raises; otherwise returns
    ``(dataset, rejected)`` where ``rejected`` lists (row number, reason).
    Row numbers count the header as row 1.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in schema.columns() if c not in frame.columns]
    if missing:
        raise MissingColumn(f"{path}: missing columns {missing}")

    observations, parse_errors, violations = [], [], []
    for offset, row in enumerate(frame.to_dict(orient="records")):
        row_number = offset + 2
        try:
            obs = _parse_row(row, schema)
        except (TypeError, ValueError) as e:
            parse_errors.append((row_number, str(e)))
            continue
        problems = observation_problems(obs)
        if problems:
            violations.append((row_number, "; ".join(problems)))
            continue
        observations.append(obs)

    for row_number, reason in parse_errors + violations:
        logger.warning("%s row %d rejected: %s", path, row_number, reason)
    rejected = sorted(parse_errors + violations)
    if strict:
        if parse_errors:
            raise ParseFailure(parse_errors)
        if violations:
            raise InvariantViolation(violations)

    dataset = AssetDataset.from_observations(observations)
    logger.info("Loaded %d observations from %d wells (%s)", len(dataset), len(dataset.wells), path)
    return dataset if strict else (dataset, rejected)


def save_dataset(dataset: AssetDataset, path, schema: CsvSchema = DEFAULT_SCHEMA) -> Path:
    """Export observations in the documented CSV schema"""
    gas_factor = schema.gas_divisor
    records = [
        {
            schema.well_id: obs.well_id,
            schema.asset_id: obs.asset_id,
            schema.t_days: obs.t,
            schema.choke_pct: obs.u * 100.0,
            schema.p1_bar: obs.p1,
            schema.p2_bar: obs.p2,
            schema.temp_c: obs.T,
            schema.phi_g: obs.phi_g,
            schema.phi_o: obs.phi_o,
            schema.phi_w: obs.phi_w,
            schema.q_g: obs.q_g * gas_factor,
            schema.q_o: obs.q_o,
            schema.q_w: obs.q_w,
            schema.source: obs.source.value,
        }
        for obs in dataset.observations
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records, columns=schema.columns()).to_csv(path, index=False, encoding="utf-8")
    return path


def save_splits(dataset: AssetDataset, path) -> Path:
    """Sidecar CSV (well_id, t_days, split)"""
    rows = [
        {"well_id": dataset.observations[i].well_id, "t_days": dataset.observations[i].t,
         "split": dataset.split_labels[i].value}
        for well_id in dataset.wells for i in dataset.wells[well_id]
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["well_id", "t_days", "split"]).to_csv(path, index=False)
    return path


def load_splits(dataset: AssetDataset, path) -> AssetDataset:
    """Attach labels from a sidecar CSV, matching rows per well in time order"""
    frame = pd.read_csv(path, dtype={"well_id": str})
    labels = list(dataset.split_labels)
    for well_id, group in frame.groupby("well_id", sort=False):
        if well_id not in dataset.wells:
            raise WellDataError(f"split file names unknown well {well_id!r}")
        indices = dataset.wells[well_id]
        group = group.sort_values("t_days", kind="stable")
        if len(group) != len(indices):
            raise WellDataError(f"well {well_id}: {len(group)} split rows for {len(indices)} observations")
        for idx, label in zip(indices, group["split"]):
            labels[idx] = Split(label)
    return dataset.with_splits(labels)


# --- arrays for modelling ---------------------------------------------------------

def feature_matrix(observations: Sequence[WellObservation]) -> np.ndarray:
    """(N x 6) matrix [u, p1, p2, T, phi_g, phi_o] in physical units"""
    if not observations:
        return np.zeros((0, len(FEATURE_COLUMNS)))
    return np.array([obs.features() for obs in observations], dtype=float)


def target_vector(observations: Sequence[WellObservation]) -> np.ndarray:
    return np.array([obs.Q for obs in observations], dtype=float)


def weight_vector(observations: Sequence[WellObservation]) -> np.ndarray:
    return np.array([obs.weight for obs in observations], dtype=float)


# --- scaling ---------------------------------------------------------------------------

def fit_scaler(dataset: AssetDataset, on: Optional[Sequence[int]] = None,
               low: float = 1.0, high: float = 99.0, min_scale: float = 1e-6) -> Scaler:
    """
    Fit shift = low percentile and scale = high - low percentile per variable

    ``on`` selects observation indices (default: the development set, or all
    observations when no split has been assigned).
    """
    if on is None:
        on = dataset.development_indices()
        if not on and all(label is Split.UNASSIGNED for label in dataset.split_labels):
            on = list(range(len(dataset)))
    if len(on) == 0:
        raise EmptyDevelopmentSet("cannot fit a scaler on an empty development set")
    chosen = [dataset.observations[i] for i in on]
    columns = {
        "u": [o.u for o in chosen],
        "p1": [o.p1 for o in chosen],
        "p2": [o.p2 for o in chosen],
        "T": [o.T for o in chosen],
        "Q": [o.Q for o in chosen],
    }
    shift, scale = {}, {}
    for var, values in columns.items():
        lo, hi = np.percentile(np.asarray(values, dtype=float), [low, high])
        shift[var] = float(lo)
        scale[var] = float(max(hi - lo, min_scale))
    return Scaler(shift=shift, scale=scale)


# --- splits -------------------------------------------------------------------------------

def _test_size(times: Sequence[float], max_gap_days: float, frac_cap: float, count_cap: int) -> int:
    n = len(times)
    largest = min(int(math.floor(frac_cap * n)), count_cap)
    for size in range(largest, 0, -1):
        dev_end = times[n - size - 1]
        if times[n - size] > dev_end and times[-1] <= dev_end + max_gap_days:
            return size
    return 0


def split_test(well: Sequence[WellObservation], max_gap_days: float = 120.0, frac_cap: float = 0.2,
               count_cap: int = 500) -> Tuple[List[WellObservation], List[WellObservation]]:
    """
    Largest time suffix that satisfies the test-set caps

    The suffix holds at most min(floor(frac_cap * N), count_cap) points, lies
    within ``max_gap_days`` of the last development point and starts strictly
    after it. Deterministic.
    """
    well = list(well)
    size = _test_size([obs.t for obs in well], max_gap_days, frac_cap, count_cap)
    return well[: len(well) - size], well[len(well) - size:]


def _time_blocks(times: Sequence[float], block_days: float) -> List[List[int]]:
    blocks: List[List[int]] = []
    start = prev = None
    for idx, t in enumerate(times):
        if blocks and t - prev <= block_days and t - start <= block_days:
            blocks[-1].append(idx)
        else:
            blocks.append([idx])
            start = t
        prev = t
    return blocks


def _validation_positions(times: Sequence[float], block_days: float, target: Tuple[float, float],
                          seed: int) -> Set[int]:
    """Positions (into time-sorted ``times``) of the blocks chosen for validation"""
    n = len(times)
    if n == 0:
        raise EmptyDevelopmentSet("cannot split an empty development set")
    lower, upper = target
    blocks = _time_blocks(times, block_days)
    order = np.random.default_rng(seed).permutation(len(blocks))

    chosen: List[int] = []
    count = 0
    for b in order:
        size = len(blocks[b])
        if (count + size) / n > upper:
            continue
        chosen.append(int(b))
        count += size
        if count / n >= lower:
            break

    fraction = count / n
    if fraction < lower:
        message = (
            f"validation fraction {fraction:.3f} below {lower:.2f}: "
            f"{len(blocks)} block(s) of {n} points cannot meet the target"
        )
        logger.warning(message)
        warnings.warn(message, SplitWarning, stacklevel=3)
    return {i for b in chosen for i in blocks[b]}


def split_train_val(development: Sequence[WellObservation], block_days: float = 100.0,
                    target: Tuple[float, float] = (0.10, 0.20),
                    seed: int = 0) -> Tuple[List[WellObservation], List[WellObservation]]:
    """
    Assign blocks of consecutive days to validation in seeded random order

    Blocks are taken until the validation fraction reaches ``target[0]``;
    a block that would push it past ``target[1]`` stays in training.
    When no arrangement reaches the lower bound a SplitWarning is emitted.
    """
    development = sorted(development, key=lambda o: o.t)
    in_validation = _validation_positions([o.t for o in development], block_days, target, seed)
    train = [o for i, o in enumerate(development) if i not in in_validation]
    validation = [o for i, o in enumerate(development) if i in in_validation]
    return train, validation


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def assign_splits(dataset: AssetDataset, seed: int, max_gap_days: float = 120.0, frac_cap: float = 0.2,
                  count_cap: int = 500, block_days: float = 100.0,
                  target: Tuple[float, float] = (0.10, 0.20)) -> AssetDataset:
    """
    Label every observation Train, Validation or Test, well by well

    Labels are written by dataset index, so repeated or equal observations
    each get their own label.
    """
    labels = [Split.UNASSIGNED] * len(dataset)
    for well_id, indices in dataset.wells.items():
        times = [dataset.observations[i].t for i in indices]
        n_dev = len(indices) - _test_size(times, max_gap_days, frac_cap, count_cap)
        well_seed = int(np.random.SeedSequence([seed, stable_hash("split"), stable_hash(well_id)]).generate_state(1)[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SplitWarning)
            in_validation = _validation_positions(times[:n_dev], block_days, target, well_seed)
        for pos, idx in enumerate(indices):
            if pos >= n_dev:
                labels[idx] = Split.TEST
            else:
                labels[idx] = Split.VALIDATION if pos in in_validation else Split.TRAIN
        logger.debug("well %s: %d train, %d validation, %d test", well_id,
                     n_dev - len(in_validation), len(in_validation), len(indices) - n_dev)
    return dataset.with_splits(labels)
