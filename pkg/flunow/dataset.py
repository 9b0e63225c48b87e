import logging
import math
from datetime import timedelta
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError
from .models import (
    Direction,
    NormalizationParams,
    PanelDataset,
    SplitSpec,
    SynthesisConfig,
    WeekRange,
    format_iso_week,
    parse_iso_week,
    week_sequence,
)
from .stats import Stats

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

INCIDENCE_HEADER = ["week", "location", "value"]
QUERIES_HEADER = ["week", "term", "value"]


#  Ingestion

def _read_long_csv(path: PathLike, header: List[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: cannot parse CSV ({e})") from e
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: malformed header, file is empty") from None
    if [c.strip() for c in frame.columns] != header:
        raise DataError(f"{path}: malformed header {list(frame.columns)}, expected {','.join(header)}")
    frame.columns = header
    key = header[1]
    frame["week"] = frame["week"].str.strip()
    frame[key] = frame[key].str.strip()
    for week in frame["week"].unique():
        try:
            parse_iso_week(week)
        except ValueError as e:
            raise DataError(f"{path}: {e}") from None

    raw = frame["value"].str.strip()
    values = pd.to_numeric(raw, errors="coerce")
    bad = (values.isna() | ~np.isfinite(values)) & (raw != "")
    if bad.any():
        row = frame[bad].iloc[0]
        raise DataError(f"{path}: non-numeric value '{row['value']}' for ({row['week']}, {row[key]})")
    negative = values < 0
    if negative.any():
        row = frame[negative].iloc[0]
        raise DataError(f"{path}: negative value '{row['value']}' for ({row['week']}, {row[key]})")
    frame["value"] = values

    dupes = frame.duplicated(["week", key], keep=False)
    if dupes.any():
        row = frame[dupes].iloc[0]
        raise DataError(f"{path}: duplicate (week, {key}) pair ({row['week']}, {row[key]})")
    return frame


def _complete_series(frame: pd.DataFrame, key: str, weeks: Tuple[str, ...], path: PathLike) -> Tuple[List[str], np.ndarray]:
    """Pivot to weeks x series, dropping series with any missing week."""
    series_ids = list(pd.unique(frame[key]))
    in_calendar = frame[frame["week"].isin(weeks)]
    wide = in_calendar.pivot(index="week", columns=key, values="value").reindex(index=list(weeks), columns=series_ids)
    keep = []
    for sid in series_ids:
        missing = int(wide[sid].isna().sum())
        if missing:
            logger.warning(f"{path}: dropping '{sid}', missing {missing} of {len(weeks)} weeks")
        else:
            keep.append(sid)
    return keep, wide[keep].to_numpy(dtype=float)


def load_panel_csv(incidence_path: PathLike, queries_path: Optional[PathLike] = None) -> PanelDataset:
    """
    Reads the long-format incidence CSV (week,location,value) and the optional query CSV
    (week,term,value). The calendar spans the first to last incidence week; any series
    missing a week of that calendar is dropped with a warning.
    """
    inc = _read_long_csv(incidence_path, INCIDENCE_HEADER)
    if inc.empty:
        raise DataError(f"{incidence_path}: no rows")
    days = sorted(parse_iso_week(w) for w in inc["week"].unique())
    count = (days[-1] - days[0]).days // 7 + 1
    weeks = week_sequence(format_iso_week(days[0]), count)

    location_ids, incidence = _complete_series(inc, "location", weeks, incidence_path)
    if not location_ids:
        raise DataError(f"{incidence_path}: no location has complete data")

    query_ids: List[str] = []
    queries = np.zeros((len(weeks), 0))
    if queries_path is not None:
        qf = _read_long_csv(queries_path, QUERIES_HEADER)
        if not qf.empty:
            outside = ~qf["week"].isin(weeks)
            if outside.any():
                logger.debug(f"{queries_path}: ignoring {int(outside.sum())} rows outside the incidence calendar")
            query_ids, queries = _complete_series(qf, "term", weeks, queries_path)
            if not query_ids:
                raise DataError(f"{queries_path}: no query term has complete data")

    logger.info(f"Loaded panel: {len(weeks)} weeks, {len(location_ids)} locations, {len(query_ids)} queries")
    return PanelDataset(weeks, incidence, queries, tuple(location_ids), tuple(query_ids))


def save_panel_csv(panel: PanelDataset, incidence_path: PathLike, queries_path: Optional[PathLike] = None) -> List[Path]:
    """Writes the panel in the long format read by load_panel_csv."""
    written = []
    inc = pd.DataFrame({
        "week": np.repeat(panel.weeks, panel.L),
        "location": np.tile(panel.location_ids, panel.T),
        "value": panel.incidence.reshape(-1),
    })
    inc.to_csv(incidence_path, index=False, encoding="utf-8")
    written.append(Path(incidence_path))
    if queries_path is not None:
        qf = pd.DataFrame({
            "week": np.repeat(panel.weeks, panel.Q),
            "term": np.tile(panel.query_ids, panel.T),
            "value": panel.queries.reshape(-1),
        })
        qf.to_csv(queries_path, index=False, encoding="utf-8")
        written.append(Path(queries_path))
    return written


#  Split and normalization

def split(panel: PanelDataset, train_fraction: float = 0.5) -> SplitSpec:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(math.floor(panel.T * train_fraction))
    if n_train == 0 or n_train == panel.T:
        raise ValueError(f"a {panel.T}-week panel cannot be split with fraction {train_fraction}")
    return SplitSpec(WeekRange(0, n_train), WeekRange(n_train, panel.T))


def fit_normalizer(panel: PanelDataset, week_range: WeekRange) -> NormalizationParams:
    if len(week_range) == 0:
        raise ValueError("cannot fit normalization on an empty range")
    if week_range.stop > panel.T:
        raise ValueError("normalization range exceeds the panel")
    rows = slice(week_range.start, week_range.stop)
    inc = panel.incidence[rows]
    qs = panel.queries[rows]
    return NormalizationParams(
        incidence={loc: (float(inc[:, j].min()), float(inc[:, j].max())) for j, loc in enumerate(panel.location_ids)},
        queries={q: (float(qs[:, j].min()), float(qs[:, j].max())) for j, q in enumerate(panel.query_ids)},
        fitted_on=week_range,
    )


def _bounds(table: Dict[str, Tuple[float, float]], ids) -> Tuple[np.ndarray, np.ndarray]:
    missing = [sid for sid in ids if sid not in table]
    if missing:
        raise KeyError(f"unknown series id '{missing[0]}'")
    lo = np.array([table[sid][0] for sid in ids], dtype=float)
    hi = np.array([table[sid][1] for sid in ids], dtype=float)
    return lo, hi


def _affine(values: np.ndarray, lo: np.ndarray, hi: np.ndarray, direction: Direction) -> np.ndarray:
    span = hi - lo
    if direction == Direction.FORWARD:
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (values - lo) / safe, 0.0)
    return values * span + lo


def normalize(panel: PanelDataset, params: NormalizationParams, direction: Direction = Direction.FORWARD) -> PanelDataset:
    """
    Forward: x -> (x - min) / (max - min), constant series -> 0. Inverse: the algebraic inverse.
    Values outside the fitted range are not clipped.
    """
    direction = Direction(direction)
    lo, hi = _bounds(params.incidence, panel.location_ids)
    incidence = _affine(panel.incidence, lo, hi, direction)
    if panel.Q:
        qlo, qhi = _bounds(params.queries, panel.query_ids)
        queries = _affine(panel.queries, qlo, qhi, direction)
    else:
        queries = panel.queries
    return panel.with_values(incidence, queries)


#  Query handling

def query_channels_for(panel: PanelDataset, location: str) -> List[str]:
    """
    Query ids scoped to `location` ('<location>/<term>') followed by the shared ids
    (no known location prefix), in panel order.
    """
    if location not in panel.location_ids:
        raise KeyError(f"unknown location '{location}'")
    locations = set(panel.location_ids)
    scoped, shared = [], []
    for qid in panel.query_ids:
        owner = qid.split("/", 1)[0] if "/" in qid else None
        if owner == location:
            scoped.append(qid)
        elif owner not in locations:
            shared.append(qid)
    return scoped + shared


def select_top_queries(panel: PanelDataset, g: int, week_range: WeekRange) -> List[str]:
    """
    The g queries whose training-range Pearson correlation with any location's incidence
    is highest. Queries undefined against every location score -inf; ties go to the
    lexicographically smaller id.
    """
    if g < 0 or g > panel.Q:
        raise ValueError(f"cannot select {g} of {panel.Q} queries")
    if len(week_range) == 0:
        raise ValueError("query selection needs a non-empty range")
    rows = slice(week_range.start, week_range.stop)
    scores = {}
    for j, qid in enumerate(panel.query_ids):
        best = -math.inf
        for i in range(panel.L):
            try:
                r = Stats.pearson(panel.queries[rows, j], panel.incidence[rows, i])
            except ValueError:
                continue
            best = max(best, r)
        scores[qid] = best
    ranked = sorted(panel.query_ids, key=lambda q: (-scores[q], q))
    return ranked[:g]


#  Synthesis

def mixing_matrix(n_locations: int, weight: float) -> np.ndarray:
    """Row-stochastic ring kernel: (1 - weight) * I + weight * mean of the two ring neighbours."""
    if n_locations == 1:
        return np.ones((1, 1))
    eye = np.eye(n_locations)
    neighbours = 0.5 * (np.roll(eye, 1, axis=1) + np.roll(eye, -1, axis=1))
    return (1.0 - weight) * eye + weight * neighbours


def synthesize_panel(config: SynthesisConfig, seed: Optional[int] = None) -> PanelDataset:
    """
    Seeded synthetic panel (PCG64 stream).

    incidence = (baseline + annual sinusoid + randomly timed epidemic peaks) mixed across
    ring neighbours, plus half-normal noise. Each signal query copies one location's
    incidence with a lag and noise; distractor queries are pure noise.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(seed))
    T, L, Q = config.weeks, config.locations, config.queries
    t = np.arange(T, dtype=float)

    phases = rng.uniform(-4.0, 4.0, size=L)
    seasonal = 0.5 * config.seasonal_amplitude * (1.0 + np.cos(2.0 * np.pi * (t[:, None] - phases[None, :]) / 52.0))

    bumps = np.zeros((T, L))
    for j in range(L):
        centers = rng.uniform(0, T, size=config.peaks)
        heights = rng.uniform(0.5, 2.0, size=config.peaks)
        widths = rng.uniform(2.0, 6.0, size=config.peaks)
        for c, a, w in zip(centers, heights, widths):
            bumps[:, j] += a * np.exp(-0.5 * ((t - c) / w) ** 2)

    raw = config.baseline + seasonal + bumps
    incidence = raw @ mixing_matrix(L, config.mixing).T
    incidence = incidence + config.noise * np.abs(rng.standard_normal((T, L)))

    n_distractors = int(round(config.distractor_fraction * Q))
    n_signal = Q - n_distractors
    sources = list(config.query_sources) if config.query_sources is not None else list(rng.integers(0, L, size=n_signal))
    lags = list(config.query_lags) if config.query_lags is not None else list(rng.integers(0, config.query_max_lag + 1, size=n_signal))
    if len(sources) < n_signal or len(lags) < n_signal:
        raise ValueError("query_sources / query_lags must cover every signal query")

    location_ids = tuple(f"loc{j:02d}" for j in range(L))
    queries = np.zeros((T, Q))
    query_ids = []
    for k in range(Q):
        if k < n_signal:
            src, lag = int(sources[k]), int(lags[k])
            if not 0 <= src < L or lag < 0:
                raise ValueError(f"invalid source/lag for query {k}")
            series = np.concatenate([np.full(lag, incidence[0, src]), incidence[: T - lag, src]]) if lag else incidence[:, src]
            scale = rng.uniform(0.5, 1.5)
            queries[:, k] = scale * series + config.noise * np.abs(rng.standard_normal(T))
            query_ids.append(f"{location_ids[src]}/q{k:03d}")
        else:
            queries[:, k] = config.baseline + np.abs(rng.standard_normal(T))
            query_ids.append(f"noise/q{k:03d}")

    weeks = week_sequence(config.start_week, T)
    return PanelDataset(weeks, incidence, queries, location_ids, tuple(query_ids))
