import math
from typing import List, Optional, Sequence

import numpy as np

from .dataset import query_channels_for
from .models import (
    DesignMatrix,
    ForecastTask,
    ModelHyperparams,
    ModelKind,
    PanelDataset,
    SequenceBatch,
    WeekRange,
)
from .stats import Stats

# A row targeting week t uses incidence at t-h, t-h-1, ..., t-h-N+1 (lag1 .. lagN,
# counted back from the latest available report) and query volumes at week t itself.


def rank_regions(panel: PanelDataset, target: str, week_range: WeekRange) -> List[str]:
    """Target first, then the other locations by descending training-range correlation."""
    t_idx = panel.location_index(target)
    rows = slice(week_range.start, week_range.stop)
    scores = {}
    for j, loc in enumerate(panel.location_ids):
        if j == t_idx:
            continue
        try:
            scores[loc] = Stats.pearson(panel.incidence[rows, j], panel.incidence[rows, t_idx])
        except ValueError:
            scores[loc] = -math.inf
    others = sorted(scores, key=lambda loc: (-scores[loc], loc))
    return [target] + others


def resolve_query_channels(
    panel: PanelDataset,
    kind: ModelKind,
    target: Optional[str],
    regions: Sequence[str],
    hyper: ModelHyperparams,
    selected: Sequence[str] = (),
) -> List[str]:
    """Query ids feeding one model: all of the target's own channels for AR, per-region channels for LR/RF, top-G for GRU."""
    kind = ModelKind(kind)
    if kind == ModelKind.GRU:
        return list(selected)
    if kind == ModelKind.AR:
        return query_channels_for(panel, target)
    if kind in (ModelKind.LR, ModelKind.RF):
        r_q = ModelHyperparams.resolve_count(hyper.query_region_count, len(regions))
        channels: List[str] = []
        for region in list(regions)[:r_q]:
            for qid in query_channels_for(panel, region):
                if qid not in channels:
                    channels.append(qid)
        return channels
    return []


def _first_target(panel: PanelDataset, lookback: int, horizon: int) -> int:
    first = lookback + horizon - 1
    if first >= panel.T:
        raise ValueError(
            f"insufficient history: {panel.T} weeks cannot supply lookback {lookback} at horizon {horizon}"
        )
    return first


def build_tabular(
    panel: PanelDataset,
    task: ForecastTask,
    hyper: ModelHyperparams,
    kind: ModelKind,
    regions: Optional[Sequence[str]] = None,
    queries: Sequence[str] = (),
) -> DesignMatrix:
    """
    Design matrix for one target location. AR uses the target's own lags; LR (and RF, which
    shares its predictors) uses the lags of the first R regions. With use_queries the given
    query channels are appended at the target week.
    """
    if task.target_location is None:
        raise ValueError("tabular models need a target location")
    kind = ModelKind(kind)
    target = task.target_location
    t_idx = panel.location_index(target)
    if kind == ModelKind.AR:
        epi_locations = [target]
    else:
        regions = list(regions or [])
        r = ModelHyperparams.resolve_count(hyper.region_count, len(regions))
        if len(regions) < r or r == 0:
            raise ValueError(f"region list has {len(regions)} entries, need {r}")
        epi_locations = regions[:r]
    query_ids = list(queries) if task.use_queries else []

    N, h = hyper.lookback, task.horizon
    targets = np.arange(_first_target(panel, N, h), panel.T)

    columns, names = [], []
    for loc in epi_locations:
        j = panel.location_index(loc)
        for k in range(1, N + 1):
            columns.append(panel.incidence[targets - h - (k - 1), j])
            names.append(f"epi:{loc}:lag{k}")
    for qid in query_ids:
        columns.append(panel.queries[targets, panel.query_index(qid)])
        names.append(f"query:{qid}")

    X = np.column_stack(columns) if columns else np.zeros((targets.size, 0))
    return DesignMatrix(
        X=X,
        y=panel.incidence[targets, t_idx].copy(),
        target_weeks=tuple(int(t) for t in targets),
        feature_names=tuple(names),
        location=target,
    )


def build_sequences(
    panel: PanelDataset,
    task: ForecastTask,
    hyper: ModelHyperparams,
    queries: Sequence[str] = (),
) -> SequenceBatch:
    """
    One N-step sequence per target week over all locations. Selected query volumes at the
    target week are repeated on every step after the L incidence channels.
    """
    N, h = hyper.lookback, task.horizon
    targets = np.arange(_first_target(panel, N, h), panel.T)
    steps = targets[:, None] - h - N + 1 + np.arange(N)[None, :]
    epi = panel.incidence[steps]  # n x N x L

    query_ids = list(queries) if task.use_queries else []
    if query_ids:
        q_idx = [panel.query_index(q) for q in query_ids]
        volumes = panel.queries[targets][:, q_idx]  # n x G
        broadcast = np.repeat(volumes[:, None, :], N, axis=1)
        inputs = np.concatenate([epi, broadcast], axis=2)
    else:
        inputs = np.array(epi)

    return SequenceBatch(
        inputs=inputs,
        targets=panel.incidence[targets].copy(),
        target_weeks=tuple(int(t) for t in targets),
        channel_names=tuple(f"epi:{loc}" for loc in panel.location_ids) + tuple(f"query:{q}" for q in query_ids),
    )
