import re
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

#  Calendar helpers

ISO_WEEK = re.compile(r"^(\d{4})-W(\d{2})$")


def parse_iso_week(week: str) -> date:
    """Monday of an ISO-8601 year-week such as '2009-W40'."""
    m = ISO_WEEK.match(str(week).strip())
    if not m:
        raise ValueError(f"malformed week '{week}', expected YYYY-Www")
    return date.fromisocalendar(int(m.group(1)), int(m.group(2)), 1)


def format_iso_week(d: date) -> str:
    year, week, _ = d.isocalendar()
    return f"{year}-W{week:02d}"


def week_sequence(start: str, count: int) -> Tuple[str, ...]:
    first = parse_iso_week(start)
    return tuple(format_iso_week(first + timedelta(weeks=i)) for i in range(count))


#  Enums

class Direction(Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


class ModelKind(Enum):
    P = "P"
    AR = "AR"
    LR = "LR"
    RF = "RF"
    GRU = "GRU"

    @property
    def tabular(self) -> bool:
        return self in (ModelKind.AR, ModelKind.LR, ModelKind.RF)


#  Dataset types

@dataclass(frozen=True)
class WeekRange:
    """Half-open interval [start, stop) of week indices."""
    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop < self.start:
            raise ValueError(f"invalid week range [{self.start}, {self.stop})")

    def __len__(self):
        return self.stop - self.start

    def __contains__(self, index: int) -> bool:
        return self.start <= index < self.stop

    def indices(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """
    Aligned weekly panel: T weeks of incidence for L locations plus Q query-volume series.
    Arrays are copied and frozen on construction.
    """
    weeks: Tuple[str, ...]
    incidence: np.ndarray  # T x L
    queries: np.ndarray  # T x Q
    location_ids: Tuple[str, ...]
    query_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        weeks = tuple(str(w) for w in self.weeks)
        incidence = np.array(self.incidence, dtype=float, copy=True)
        queries = np.array(self.queries, dtype=float, copy=True)
        if queries.size == 0:
            queries = queries.reshape(len(weeks), 0)
        if incidence.ndim != 2 or incidence.shape != (len(weeks), len(self.location_ids)):
            raise ValueError(f"incidence shape {incidence.shape} does not match {len(weeks)} weeks x {len(self.location_ids)} locations")
        if queries.ndim != 2 or queries.shape != (len(weeks), len(self.query_ids)):
            raise ValueError(f"queries shape {queries.shape} does not match {len(weeks)} weeks x {len(self.query_ids)} queries")
        if len(set(self.location_ids)) != len(self.location_ids):
            raise ValueError("location_ids must be unique")
        if len(set(self.query_ids)) != len(self.query_ids):
            raise ValueError("query_ids must be unique")
        if not np.isfinite(incidence).all() or not np.isfinite(queries).all():
            raise ValueError("panel contains missing or non-finite values")
        days = [parse_iso_week(w) for w in weeks]
        for a, b in zip(days, days[1:]):
            if b - a != timedelta(weeks=1):
                raise ValueError(f"weekly calendar has a gap between {format_iso_week(a)} and {format_iso_week(b)}")
        incidence.setflags(write=False)
        queries.setflags(write=False)
        object.__setattr__(self, "weeks", weeks)
        object.__setattr__(self, "incidence", incidence)
        object.__setattr__(self, "queries", queries)
        object.__setattr__(self, "location_ids", tuple(self.location_ids))
        object.__setattr__(self, "query_ids", tuple(self.query_ids))

    @property
    def T(self) -> int:
        return len(self.weeks)

    @property
    def L(self) -> int:
        return len(self.location_ids)

    @property
    def Q(self) -> int:
        return len(self.query_ids)

    def location_index(self, location: str) -> int:
        try:
            return self.location_ids.index(location)
        except ValueError:
            raise KeyError(f"unknown location '{location}'") from None

    def query_index(self, query: str) -> int:
        try:
            return self.query_ids.index(query)
        except ValueError:
            raise KeyError(f"unknown query '{query}'") from None

    def with_values(self, incidence: np.ndarray, queries: np.ndarray) -> "PanelDataset":
        return PanelDataset(self.weeks, incidence, queries, self.location_ids, self.query_ids)

    def equals(self, other: "PanelDataset") -> bool:
        return (
            self.weeks == other.weeks
            and self.location_ids == other.location_ids
            and self.query_ids == other.query_ids
            and np.array_equal(self.incidence, other.incidence)
            and np.array_equal(self.queries, other.queries)
        )


@dataclass(frozen=True)
class NormalizationParams:
    """Per-series (min, max) fitted on a training range, keyed by series id."""
    incidence: Dict[str, Tuple[float, float]]
    queries: Dict[str, Tuple[float, float]]
    fitted_on: WeekRange

    def __post_init__(self):
        for key, (lo, hi) in list(self.incidence.items()) + list(self.queries.items()):
            if hi < lo:
                raise ValueError(f"series '{key}' has max < min")

    def denormalize(self, location: str, values):
        if location not in self.incidence:
            raise KeyError(f"unknown series id '{location}'")
        lo, hi = self.incidence[location]
        return np.asarray(values, dtype=float) * (hi - lo) + lo


@dataclass(frozen=True)
class SplitSpec:
    train_range: WeekRange
    test_range: WeekRange

    def __post_init__(self):
        if self.train_range.start != 0 or self.train_range.stop != self.test_range.start:
            raise ValueError("train and test ranges must be contiguous, ordered and start at week 0")


@dataclass
class SynthesisConfig:
    """
    Parameters of the synthetic panel generator. The generator algorithm is
    numpy's PCG64 bit generator seeded with `seed`.
    """
    weeks: int = 416
    locations: int = 10
    queries: int = 20
    seasonal_amplitude: float = 1.0
    peaks: int = 8
    mixing: float = 0.3
    noise: float = 0.05
    seed: int = 0
    start_week: str = "2009-W40"
    baseline: float = 1.0
    query_max_lag: int = 0
    distractor_fraction: float = 0.0
    query_sources: Optional[List[int]] = None
    query_lags: Optional[List[int]] = None
    rng: str = "PCG64"

    def __post_init__(self):
        if self.weeks <= 0 or self.locations <= 0 or self.queries <= 0:
            raise ValueError("weeks, locations and queries must be positive")
        if not 0.0 <= self.mixing <= 1.0:
            raise ValueError("mixing must lie in [0, 1]")
        if self.noise < 0 or self.seasonal_amplitude < 0 or self.peaks < 0 or self.query_max_lag < 0:
            raise ValueError("noise, seasonal_amplitude, peaks and query_max_lag must be non-negative")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ValueError("distractor_fraction must lie in [0, 1]")
        if self.rng != "PCG64":
            raise ValueError(f"unsupported generator algorithm '{self.rng}'")
        parse_iso_week(self.start_week)


#  Feature construction types

@dataclass(frozen=True)
class ForecastTask:
    horizon: int
    target_location: Optional[str] = None  # None: all-locations task (GRU)
    use_queries: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 1000
    dropout_rate: float = 0.3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class GruHyperparams:
    hidden_units: int = 5
    dropout_rate: float = 0.3
    learning_rate: float = 0.001
    epochs: int = 1000
    batch_size: int = 16
    warm_epochs: int = 50

    def train_config(self, seed: int, warm: bool = False) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.warm_epochs if warm else self.epochs,
            dropout_rate=self.dropout_rate,
            batch_size=self.batch_size,
            seed=seed,
        )


@dataclass(frozen=True)
class ForestParams:
    tree_count: int = 50
    max_depth: int = 8
    features_per_split: Optional[int] = None  # None: ceil(p / 3)
    min_samples_leaf: int = 1
    bootstrap: bool = True

    def __post_init__(self):
        if self.tree_count < 1 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("invalid forest parameters")

    def resolve_features(self, p: int) -> int:
        if self.features_per_split is None:
            return max(1, -(-p // 3))
        return max(1, min(self.features_per_split, p))


RegionCount = Union[int, str]


@dataclass(frozen=True)
class ModelHyperparams:
    lookback: int = 52
    region_count: RegionCount = "all"
    query_region_count: RegionCount = "all"
    query_count: int = 10
    l1_penalty: float = 1e-3
    tree_count: int = 50
    max_depth: int = 8
    features_per_split: Optional[int] = None
    min_samples_leaf: int = 1
    bootstrap: bool = True
    lasso_tol: float = 1e-6
    lasso_max_iter: int = 1000
    gru: GruHyperparams = field(default_factory=GruHyperparams)

    def __post_init__(self):
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")
        if self.l1_penalty < 0:
            raise ValueError("l1_penalty must be >= 0")
        for r in (self.region_count, self.query_region_count):
            if r != "all" and (not isinstance(r, int) or r < 1):
                raise ValueError(f"region count must be a positive integer or 'all', got {r!r}")

    def forest_params(self) -> ForestParams:
        return ForestParams(
            tree_count=self.tree_count,
            max_depth=self.max_depth,
            features_per_split=self.features_per_split,
            min_samples_leaf=self.min_samples_leaf,
            bootstrap=self.bootstrap,
        )

    @staticmethod
    def resolve_count(count: RegionCount, available: int) -> int:
        return available if count == "all" else int(count)

    def size_key(self, available_regions: int) -> tuple:
        """Orders candidates from the smallest model upwards (larger penalty = smaller)."""
        return (
            -self.l1_penalty,
            self.resolve_count(self.region_count, available_regions),
            self.resolve_count(self.query_region_count, available_regions),
            self.max_depth,
        )

    def describe(self) -> Dict[str, object]:
        return {
            "lookback": self.lookback,
            "region_count": self.region_count,
            "query_region_count": self.query_region_count,
            "query_count": self.query_count,
            "l1_penalty": self.l1_penalty,
            "tree_count": self.tree_count,
            "max_depth": self.max_depth,
            "hidden_units": self.gru.hidden_units,
            "epochs": self.gru.epochs,
        }

    def with_changes(self, **changes) -> "ModelHyperparams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    X: np.ndarray  # n x p
    y: np.ndarray  # n
    target_weeks: Tuple[int, ...]
    feature_names: Tuple[str, ...]
    location: str

    def rows_until(self, last_target_week: int) -> np.ndarray:
        """Boolean mask of rows whose target week is <= last_target_week."""
        return np.asarray(self.target_weeks) <= last_target_week

    def row_for(self, target_week: int) -> Optional[int]:
        try:
            return self.target_weeks.index(target_week)
        except ValueError:
            return None


@dataclass(frozen=True, eq=False)
class SequenceBatch:
    inputs: np.ndarray  # n x N x (L + G_used)
    targets: np.ndarray  # n x L
    target_weeks: Tuple[int, ...]
    channel_names: Tuple[str, ...]

    def row_for(self, target_week: int) -> Optional[int]:
        try:
            return self.target_weeks.index(target_week)
        except ValueError:
            return None


#  Fitted models

@dataclass(frozen=True, eq=False)
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    lam: float
    converged: bool
    iterations: int
    feature_names: Tuple[str, ...] = ()


@dataclass(eq=False)
class TreeNode:
    """Leaf when `feature` is None; internal nodes carry both children."""
    prediction: float
    sample_count: int
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    variance_reduction: float = 0.0  # var(node) - weighted var(children)

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True, eq=False)
class Forest:
    trees: Tuple[TreeNode, ...]
    params: ForestParams
    seed: int
    feature_names: Tuple[str, ...] = ()
    n_features: int = 0


@dataclass(eq=False)
class GruParameters:
    w_z: np.ndarray  # hidden x input
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray  # hidden x hidden
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray  # hidden
    b_r: np.ndarray
    b_h: np.ndarray
    w_o: np.ndarray  # output x hidden
    b_o: np.ndarray  # output

    NAMES = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h", "w_o", "b_o")

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w_o.shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def copy(self) -> "GruParameters":
        return GruParameters(**{name: arr.copy() for name, arr in self.arrays().items()})


@dataclass(frozen=True, eq=False)
class GruForward:
    hidden: np.ndarray  # N x hidden, h_1 .. h_N
    output: np.ndarray  # output


@dataclass(frozen=True, eq=False)
class GruGradients:
    params: Dict[str, np.ndarray]  # keyed by GruParameters.NAMES
    inputs: np.ndarray  # B x N x input, d loss / d input
    loss: float


@dataclass(eq=False)
class GruTrainResult:
    params: GruParameters
    loss_trace: List[float]


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """
    Per-feature importance for one model / location / horizon.
    `values` is 1-D over row_labels (coefficients, importances) or
    2-D lag step x channel (saliency).
    """
    kind: str  # coefficients | importances | saliency
    model: str
    use_queries: bool
    location: str
    horizon: int
    values: np.ndarray
    row_labels: Tuple[str, ...]
    col_labels: Tuple[str, ...] = ()

    @property
    def name(self) -> str:
        q = "q" if self.use_queries else "noq"
        return f"{self.model}_{q}_h{self.horizon}_{self.location}"


#  Harness / evaluation types

@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    use_queries: bool = False
    grid: Tuple[ModelHyperparams, ...] = ()

    def __post_init__(self):
        if self.kind == ModelKind.P and self.grid:
            raise ValueError("persistence takes no hyperparameter grid")
        if self.kind != ModelKind.P and not self.grid:
            raise ValueError(f"{self.kind.value} needs a non-empty hyperparameter grid")

    @property
    def label(self) -> str:
        return f"{self.kind.value}+GT" if self.use_queries else self.kind.value


@dataclass(frozen=True)
class ForecastRecord:
    week: str
    location: str
    horizon: int
    model: str
    use_queries: bool
    predicted: float
    actual: float


FORECAST_COLUMNS = ["week", "location", "horizon", "model", "use_queries", "predicted", "actual"]
RMSE_COLUMNS = ["model", "use_queries", "horizon", "location", "rmse"]
WILCOXON_COLUMNS = ["model", "use_queries", "horizon", "w", "p", "n_eff", "method"]


@dataclass(frozen=True)
class WilcoxonResult:
    w_statistic: float
    p_value: float
    n_effective: int
    method: str  # exact | normal-approximation
    w_plus: float = 0.0
    w_minus: float = 0.0


@dataclass(eq=False)
class EvaluationReport:
    rmse: pd.DataFrame  # RMSE_COLUMNS
    wilcoxon: pd.DataFrame  # WILCOXON_COLUMNS

    @property
    def horizons(self) -> List[int]:
        return sorted(int(h) for h in self.rmse["horizon"].unique())


def records_to_frame(records: Sequence[ForecastRecord]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [[r.week, r.location, r.horizon, r.model, r.use_queries, r.predicted, r.actual] for r in records],
        columns=FORECAST_COLUMNS,
    )
    return frame.sort_values(["week", "model", "use_queries", "horizon", "location"], kind="mergesort").reset_index(drop=True)


@dataclass(frozen=True)
class HarnessOptions:
    """
    Walk-forward run options. gru_retrain is 'full' (fresh weights every week) or 'warm'
    (continue from last week's weights for GruHyperparams.warm_epochs epochs).
    """
    gru_retrain: str = "full"
    reselect_every: Optional[int] = None  # weeks between hyperparameter re-selection
    max_weeks: Optional[int] = None  # stop after this many test weeks
    seed: int = 0

    def __post_init__(self):
        if self.gru_retrain not in ("full", "warm"):
            raise ValueError(f"gru_retrain must be 'full' or 'warm', got {self.gru_retrain!r}")
        if self.reselect_every is not None and self.reselect_every < 1:
            raise ValueError("reselect_every must be >= 1")
        if self.max_weeks is not None and self.max_weeks < 1:
            raise ValueError("max_weeks must be >= 1")


@dataclass
class WalkForwardResult:
    """
    Output of one walk-forward run.
    """
    records: List[ForecastRecord]
    attributions: List[AttributionMap] = field(default_factory=list)
    hyperparameters: Dict[str, Dict[str, object]] = field(default_factory=dict)  # location -> describe()
    checkpoint: Optional[GruParameters] = None
    logs: List[str] = field(default_factory=list)
