import logging
from dataclasses import replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import fit_normalizer, normalize, select_top_queries
from .errors import ModelError
from .features import build_sequences, build_tabular, rank_regions, resolve_query_channels
from .forest import fit_forest, forest_importances, predict_forest
from .gru import init_gru, predict_gru, saliency, saliency_maps, train_gru
from .lasso import coefficient_attribution, fit_lasso, predict_linear
from .models import (
    AttributionMap,
    Direction,
    ForecastRecord,
    ForecastTask,
    Forest,
    HarnessOptions,
    ModelHyperparams,
    ModelKind,
    ModelSpec,
    PanelDataset,
    SplitSpec,
    WalkForwardResult,
    WeekRange,
)
from .seeding import stream_seed
from .stats import Stats

logger = logging.getLogger(__name__)

CV_FOLDS = 4
L1_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
REGION_GRID = (10, 20, 40)
DEPTH_GRID = (2, 4, 8, 16)
# Relative tolerance under which two CV scores count as tied.
TIE_RTOL = 1e-12


#  Persistence baseline

def persistence_forecast(panel: PanelDataset, task: ForecastTask, weeks: Optional[Iterable[int]] = None) -> List[ForecastRecord]:
    """
    Prediction for week t is the observed incidence at t - h, in original units.
    Defaults to every week with t - h inside the panel.
    """
    h = task.horizon
    locations = [task.target_location] if task.target_location else list(panel.location_ids)
    weeks = range(h, panel.T) if weeks is None else list(weeks)
    records = []
    for t in weeks:
        if t - h < 0:
            raise ValueError(f"week {panel.weeks[t]} has no observation {h} weeks earlier")
        for loc in locations:
            j = panel.location_index(loc)
            records.append(ForecastRecord(
                week=panel.weeks[t],
                location=loc,
                horizon=h,
                model=ModelKind.P.value,
                use_queries=task.use_queries,
                predicted=float(panel.incidence[t - h, j]),
                actual=float(panel.incidence[t, j]),
            ))
    return records


#  Hyperparameter grids and selection

def _capped(values: Sequence[int], available: int) -> List[int]:
    out = []
    for v in values:
        v = min(v, available)
        if v not in out:
            out.append(v)
    return out


def default_grid(kind: ModelKind, use_queries: bool, base: ModelHyperparams, locations: int) -> Tuple[ModelHyperparams, ...]:
    """
    Candidate grids: lambda for AR; lambda x R for LR; depth x R for RF, with R chosen
    separately for query channels when queries are used. R values are capped at the
    number of locations. GRU keeps the base settings.
    """
    kind = ModelKind(kind)
    regions = _capped(REGION_GRID, locations)
    query_regions = regions if use_queries else [base.query_region_count]
    if kind == ModelKind.P:
        return ()
    if kind == ModelKind.AR:
        return tuple(base.with_changes(l1_penalty=lam) for lam in L1_GRID)
    if kind == ModelKind.LR:
        return tuple(
            base.with_changes(l1_penalty=lam, region_count=r, query_region_count=rq)
            for lam in L1_GRID for r in regions for rq in query_regions
        )
    if kind == ModelKind.RF:
        return tuple(
            base.with_changes(max_depth=d, region_count=r, query_region_count=rq)
            for d in DEPTH_GRID for r in regions for rq in query_regions
        )
    return (base,)


def _fit_tabular(kind: ModelKind, X, y, hyper: ModelHyperparams, seed: int, names: Sequence[str]):
    if kind == ModelKind.RF:
        return fit_forest(X, y, hyper.forest_params(), seed, names)
    return fit_lasso(X, y, hyper.l1_penalty, hyper.lasso_tol, hyper.lasso_max_iter, names)


def _predict_tabular(model, X):
    if isinstance(model, Forest):
        return predict_forest(model, X)
    return predict_linear(model, X)


def _folds(n: int) -> List[np.ndarray]:
    if n < CV_FOLDS:
        raise ValueError(f"too few examples for {CV_FOLDS} folds: {n}")
    return np.array_split(np.arange(n), CV_FOLDS)


def _cv_tabular(panel, task, spec, hyper, regions, train_range, seed) -> float:
    queries = resolve_query_channels(panel, spec.kind, task.target_location, regions, hyper) if task.use_queries else []
    design = build_tabular(panel, task, hyper, spec.kind, regions, queries)
    rows = np.flatnonzero(np.asarray(design.target_weeks) < train_range.stop)
    scores = []
    for k, fold in enumerate(_folds(rows.size)):
        held = rows[fold]
        kept = np.setdiff1d(rows, held)
        model = _fit_tabular(
            spec.kind, design.X[kept], design.y[kept], hyper,
            stream_seed(seed, "cv", spec.label, task.target_location, task.horizon, k), design.feature_names,
        )
        scores.append(Stats.rmse(_predict_tabular(model, design.X[held]), design.y[held]))
    return float(np.mean(scores))


def _cv_gru(panel, task, spec, hyper, train_range, seed) -> float:
    selected = _top_queries(panel, hyper, train_range) if task.use_queries else []
    batch = build_sequences(panel, task, hyper, selected)
    rows = np.flatnonzero(np.asarray(batch.target_weeks) < train_range.stop)
    scores = []
    for k, fold in enumerate(_folds(rows.size)):
        held = rows[fold]
        kept = np.setdiff1d(rows, held)
        params = init_gru(batch.inputs.shape[2], hyper.gru.hidden_units, panel.L,
                          stream_seed(seed, "cv", spec.label, task.horizon, k, "init"))
        config = hyper.gru.train_config(stream_seed(seed, "cv", spec.label, task.horizon, k, "train"))
        trained = train_gru(params, batch.inputs[kept], batch.targets[kept], config).params
        pred = predict_gru(trained, batch.inputs[held])
        scores.append(Stats.rmse(pred.ravel(), batch.targets[held].ravel()))
    return float(np.mean(scores))


def _top_queries(panel: PanelDataset, hyper: ModelHyperparams, week_range: WeekRange) -> List[str]:
    g = min(hyper.query_count, panel.Q)
    return select_top_queries(panel, g, week_range) if g > 0 else []


def select_hyperparams(
    panel: PanelDataset,
    task: ForecastTask,
    spec: ModelSpec,
    train_range: WeekRange,
    regions: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> ModelHyperparams:
    """
    4-fold contiguous chronological cross-validation over spec.grid using the examples whose
    target week lies in train_range. Lowest mean fold RMSE wins; ties go to the smaller
    model (larger lambda, fewer regions, shallower trees).
    """
    if spec.kind == ModelKind.P:
        raise ValueError("persistence has no hyperparameters to select")
    if len(spec.grid) == 1:
        return spec.grid[0]
    if spec.kind.tabular:
        if task.target_location is None:
            raise ValueError(f"{spec.kind.value} needs a target location")
        if regions is None:
            regions = rank_regions(panel, task.target_location, train_range)

    candidates = sorted(spec.grid, key=lambda hp: hp.size_key(panel.L))
    best, best_score = None, np.inf
    for hyper in candidates:
        if spec.kind == ModelKind.GRU:
            score = _cv_gru(panel, task, spec, hyper, train_range, seed)
        else:
            score = _cv_tabular(panel, task, spec, hyper, regions, train_range, seed)
        logger.debug(f"{spec.label} h={task.horizon} {task.target_location}: {hyper.describe()} -> {score:.6g}")
        if best is None or score < best_score - TIE_RTOL * max(1.0, abs(best_score)):
            best, best_score = hyper, score
    return best


#  Walk-forward loop

class _Accumulator:
    """
    Running mean of the weekly attribution maps of one (model, location, horizon).
    1-D maps are summed by feature name; 2-D saliency maps elementwise.
    """

    def __init__(self):
        self.template: Optional[AttributionMap] = None
        self.sums: Dict[str, float] = {}
        self.grid: Optional[np.ndarray] = None
        self.count = 0

    def add(self, attribution: AttributionMap):
        if self.template is None:
            self.template = attribution
        values = np.asarray(attribution.values, dtype=float)
        if values.ndim == 2:
            self.grid = values.copy() if self.grid is None else self.grid + values
        else:
            for name, v in zip(attribution.row_labels, values):
                self.sums[name] = self.sums.get(name, 0.0) + float(v)
        self.count += 1

    def mean(self) -> Optional[AttributionMap]:
        if not self.count:
            return None
        if self.grid is not None:
            return replace(self.template, values=self.grid / self.count)
        names = tuple(self.sums)
        return replace(self.template, values=np.array([self.sums[n] / self.count for n in names]), row_labels=names)


class WalkForwardHarness:
    """
    Walk-forward evaluation, retraining every week, of one model spec at one horizon.
    At every test week t the model is refit on examples whose target week is <= t - h
    and predicts week t. Normalization, region ranking and query selection come from the
    initial training range; hyperparameters too, unless reselect_every is set.
    """

    def __init__(self, panel: PanelDataset, task: ForecastTask, spec: ModelSpec, split: SplitSpec,
                 options: Optional[HarnessOptions] = None):
        self.panel = panel
        self.task = task
        self.spec = spec
        self.split = split
        self.options = options or HarnessOptions()
        self.logs: List[str] = []
        self.source = f"{spec.label}/h{task.horizon}"

        self.normalizer = fit_normalizer(panel, split.train_range)
        self.normalized = normalize(panel, self.normalizer, Direction.FORWARD)

    def log(self, msg: str, source: Optional[str] = None, level: str = "INFO"):
        source = source or self.source
        self.logs.append(f"{level} - {source} - {msg}")
        logger.log(logging.getLevelName(level), f"{source} - {msg}")

    def test_weeks(self) -> List[int]:
        weeks = list(self.split.test_range.indices())
        if self.options.max_weeks is not None:
            weeks = weeks[: self.options.max_weeks]
        return weeks

    def locations(self) -> List[str]:
        if self.task.target_location is not None:
            self.panel.location_index(self.task.target_location)
            return [self.task.target_location]
        return list(self.panel.location_ids)

    def _record(self, t: int, location: str, predicted: float) -> ForecastRecord:
        return ForecastRecord(
            week=self.panel.weeks[t],
            location=location,
            horizon=self.task.horizon,
            model=self.spec.kind.value,
            use_queries=self.task.use_queries,
            predicted=float(predicted),
            actual=float(self.panel.incidence[t, self.panel.location_index(location)]),
        )

    def _reselect_due(self, i: int) -> bool:
        every = self.options.reselect_every
        return every is not None and i > 0 and i % every == 0 and len(self.spec.grid) > 1

    def _reselect(self, task, current, t, regions=None):
        try:
            return select_hyperparams(self.normalized, task, self.spec, WeekRange(0, t - task.horizon + 1),
                                      regions=regions, seed=self.options.seed)
        except ValueError as e:
            self.log(f"re-selection skipped at {self.panel.weeks[t]}: {e}", level="WARNING")
            return current

    def _fail(self, e: Exception, location: str = "", t: Optional[int] = None) -> ModelError:
        week = self.panel.weeks[t] if t is not None else ""
        self.log(f"{location} {week}: {e}", level="ERROR")
        return ModelError(str(e), model=self.spec.label, location=location, horizon=self.task.horizon, week=week)

    def run(self) -> WalkForwardResult:
        self.log(f"starting walk-forward over {len(self.test_weeks())} test weeks")
        result = WalkForwardResult(records=[], logs=self.logs)
        if self.spec.kind == ModelKind.P:
            weeks = [t for t in self.test_weeks() if t - self.task.horizon >= 0]
            result.records = persistence_forecast(self.panel, self.task, weeks)
        elif self.spec.kind == ModelKind.GRU:
            self._run_gru(result)
        else:
            per_location = [self._run_tabular(loc, result) for loc in self.locations()]
            # interleave to chronological order
            result.records = sorted(
                (r for records in per_location for r in records),
                key=lambda r: (r.week, self.panel.location_index(r.location)),
            )
        self.log(f"finished with {len(result.records)} records")
        return result

    def _run_tabular(self, location: str, result: WalkForwardResult) -> List[ForecastRecord]:
        kind, h = self.spec.kind, self.task.horizon
        task = replace(self.task, target_location=location)
        train = self.split.train_range
        try:
            regions = [location] if kind == ModelKind.AR else rank_regions(self.normalized, location, train)
            hyper = select_hyperparams(self.normalized, task, self.spec, train, regions, self.options.seed)
            design = self._design(task, hyper, regions)
        except ValueError as e:
            raise self._fail(e, location) from e
        self.log(f"{location}: selected {hyper.describe()}")
        result.hyperparameters[location] = hyper.describe()

        records = []
        acc = _Accumulator()
        for i, t in enumerate(self.test_weeks()):
            if self._reselect_due(i):
                chosen = self._reselect(task, hyper, t, regions)
                if chosen != hyper:
                    hyper = chosen
                    design = self._design(task, hyper, regions)
                    self.log(f"{location}: re-selected {hyper.describe()} at {self.panel.weeks[t]}")
                    result.hyperparameters[location] = hyper.describe()
            row = design.row_for(t)
            mask = design.rows_until(t - h)
            if row is None or not mask.any():
                self.log(f"{location}: not enough history for {self.panel.weeks[t]}", level="DEBUG")
                continue
            try:
                model = _fit_tabular(
                    kind, design.X[mask], design.y[mask], hyper,
                    stream_seed(self.options.seed, self.spec.label, location, f"h{h}", self.panel.weeks[t]),
                    design.feature_names,
                )
                predicted = _predict_tabular(model, design.X[row])
            except (ValueError, ArithmeticError) as e:
                raise self._fail(e, location, t) from e
            records.append(self._record(t, location, self.normalizer.denormalize(location, predicted)))
            if isinstance(model, Forest):
                acc.add(forest_importances(model, location, h, kind.value, self.task.use_queries))
            else:
                acc.add(coefficient_attribution(model, location, h, kind.value, self.task.use_queries))
            self.log(f"{location} {self.panel.weeks[t]}: predicted {records[-1].predicted:.6g}", level="DEBUG")

        averaged = acc.mean()
        if averaged is not None:
            result.attributions.append(averaged)
        return records

    def _design(self, task: ForecastTask, hyper: ModelHyperparams, regions: Sequence[str]):
        queries = []
        if task.use_queries:
            queries = resolve_query_channels(self.normalized, self.spec.kind, task.target_location, regions, hyper)
        return build_tabular(self.normalized, task, hyper, self.spec.kind, regions, queries)

    def _run_gru(self, result: WalkForwardResult):
        h = self.task.horizon
        train = self.split.train_range
        label = self.spec.label
        seed = self.options.seed
        try:
            hyper = select_hyperparams(self.normalized, self.task, self.spec, train, seed=seed)
            selected = _top_queries(self.normalized, hyper, train) if self.task.use_queries else []
            batch = build_sequences(self.normalized, self.task, hyper, selected)
        except (ValueError, ModelError) as e:
            raise self._fail(e) from e
        self.log(f"selected {hyper.describe()}, queries {selected}")
        for loc in self.locations():
            result.hyperparameters[loc] = hyper.describe()

        locations = self.locations()
        weeks_of = np.asarray(batch.target_weeks)
        params = None
        accs = {loc: _Accumulator() for loc in locations}
        for i, t in enumerate(self.test_weeks()):
            if self._reselect_due(i):
                chosen = self._reselect(self.task, hyper, t)
                if chosen != hyper:
                    hyper = chosen
                    try:
                        selected = _top_queries(self.normalized, hyper, train) if self.task.use_queries else []
                        batch = build_sequences(self.normalized, self.task, hyper, selected)
                    except ValueError as e:
                        raise self._fail(e, ",".join(locations), t) from e
                    weeks_of = np.asarray(batch.target_weeks)
                    params = None
                    accs = {loc: _Accumulator() for loc in locations}
                    self.log(f"re-selected {hyper.describe()}, queries {selected} at {self.panel.weeks[t]}")
                    for loc in locations:
                        result.hyperparameters[loc] = hyper.describe()
            row = batch.row_for(t)
            train_rows = np.flatnonzero(weeks_of <= t - h)
            if row is None or train_rows.size == 0:
                self.log(f"not enough history for {self.panel.weeks[t]}", level="DEBUG")
                continue
            week = self.panel.weeks[t]
            warm = self.options.gru_retrain == "warm" and params is not None
            start = params if warm else init_gru(
                batch.inputs.shape[2], hyper.gru.hidden_units, self.panel.L, stream_seed(seed, label, f"h{h}", week, "init")
            )
            config = hyper.gru.train_config(stream_seed(seed, label, f"h{h}", week, "train"), warm=warm)
            try:
                params = train_gru(start, batch.inputs[train_rows], batch.targets[train_rows], config).params
                outputs = predict_gru(params, batch.inputs[row:row + 1])[0]
                maps = saliency_maps(params, batch.inputs[row])
            except (ValueError, ModelError) as e:
                raise self._fail(e, ",".join(locations), t) from e

            for loc in locations:
                j = self.panel.location_index(loc)
                result.records.append(self._record(t, loc, self.normalizer.denormalize(loc, outputs[j])))
                accs[loc].add(saliency(params, batch.inputs[row], j, loc, h, self.task.use_queries,
                                       batch.channel_names, maps=maps))
            self.log(f"{week}: trained {'warm' if warm else 'full'} ({config.epochs} epochs)", level="DEBUG")

        result.checkpoint = params
        for loc in locations:
            averaged = accs[loc].mean()
            if averaged is not None:
                result.attributions.append(averaged)


def walk_forward(panel: PanelDataset, task: ForecastTask, spec: ModelSpec, split: SplitSpec,
                 options: Optional[HarnessOptions] = None) -> List[ForecastRecord]:
    return WalkForwardHarness(panel, task, spec, split, options).run().records
