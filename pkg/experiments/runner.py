import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import matplotlib
import numpy as np
import pandas as pd
import scipy
import yaml

import flunow
from flunow.dataset import load_panel_csv, split, synthesize_panel
from flunow.errors import ConfigError, DataError, ModelError
from flunow.harness import REGION_GRID, WalkForwardHarness, default_grid
from flunow.models import (
    FORECAST_COLUMNS,
    EvaluationReport,
    ForecastTask,
    GruHyperparams,
    HarnessOptions,
    ModelHyperparams,
    ModelKind,
    ModelSpec,
    PanelDataset,
    SplitSpec,
    SynthesisConfig,
    WalkForwardResult,
    records_to_frame,
)
from flunow.stats import Stats
from store.repository import Repository

from .plots import emit_plots

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3
HYPER_KEYS = {f.name for f in fields(ModelHyperparams)} - {"gru"}
GRU_KEYS = {f.name for f in fields(GruHyperparams)}


@dataclass
class ExperimentConfig:
    """
    One experiment: a data source (CSV paths or a synthesis config), the model specs,
    horizons and run options. `raw` keeps the parsed mapping for the config hash.
    """
    models: List[ModelSpec]
    horizons: List[int]
    incidence: Optional[Path] = None
    queries: Optional[Path] = None
    synthesis: Optional[SynthesisConfig] = None
    train_fraction: float = 0.5
    seed: int = 0
    output_dir: Path = Path("runs/latest")
    gru_retrain: str = "full"
    hyper: ModelHyperparams = field(default_factory=ModelHyperparams)
    locations: Optional[List[str]] = None
    jobs: int = 1
    reselect_every: Optional[int] = None
    max_weeks: Optional[int] = None
    raw: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.models:
            raise ConfigError("config declares no models")
        if not self.horizons or any(int(h) < 1 for h in self.horizons):
            raise ConfigError("config needs at least one horizon, all >= 1")
        if (self.incidence is None) == (self.synthesis is None):
            raise ConfigError("data must give exactly one of 'incidence' or 'synthesis'")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.gru_retrain not in ("full", "warm"):
            raise ConfigError(f"gru_retrain must be 'full' or 'warm', got {self.gru_retrain!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def options(self) -> HarnessOptions:
        return HarnessOptions(
            gru_retrain=self.gru_retrain,
            reselect_every=self.reselect_every,
            max_weeks=self.max_weeks,
            seed=self.seed,
        )

    def config_hash(self) -> str:
        # output location and worker count do not change results
        hashed = {k: v for k, v in self.raw.items() if k not in ("output_dir", "jobs")}
        canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode()).hexdigest()


def _build_hyper(mapping: Dict[str, Any]) -> ModelHyperparams:
    unknown = set(mapping) - HYPER_KEYS - {"gru"}
    if unknown:
        raise ConfigError(f"unknown hyperparameter keys {sorted(unknown)}")
    gru = dict(mapping.get("gru") or {})
    if set(gru) - GRU_KEYS:
        raise ConfigError(f"unknown gru keys {sorted(set(gru) - GRU_KEYS)}")
    try:
        return ModelHyperparams(**{k: v for k, v in mapping.items() if k != "gru"}, gru=GruHyperparams(**gru))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid hyperparameters: {e}") from e


def _build_spec(entry: Dict[str, Any], base: ModelHyperparams, location_count: int) -> ModelSpec:
    try:
        kind = ModelKind(str(entry["kind"]).upper())
    except (KeyError, ValueError):
        raise ConfigError(f"model entry needs a kind among {[k.value for k in ModelKind]}: {entry}") from None
    use_queries = bool(entry.get("use_queries", False))
    if kind == ModelKind.P:
        return ModelSpec(kind, use_queries)
    overrides = entry.get("grid")
    if overrides is None:
        return ModelSpec(kind, use_queries, default_grid(kind, use_queries, base, location_count))
    unknown = set(overrides) - HYPER_KEYS
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    keys = sorted(overrides)
    values = [v if isinstance(v, list) else [v] for v in (overrides[k] for k in keys)]
    try:
        grid = tuple(base.with_changes(**dict(zip(keys, combo))) for combo in itertools.product(*values))
        return ModelSpec(kind, use_queries, grid)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid grid for {kind.value}: {e}") from e


def fit_grid_to_panel(spec: ModelSpec, locations: int) -> ModelSpec:
    """Caps region counts at the panel's location count and drops the duplicates that creates."""
    if not spec.grid:
        return spec
    grid = []
    for hyper in spec.grid:
        capped = hyper.with_changes(**{
            key: min(getattr(hyper, key), locations)
            for key in ("region_count", "query_region_count") if getattr(hyper, key) != "all"
        })
        if capped not in grid:
            grid.append(capped)
    return ModelSpec(spec.kind, spec.use_queries, tuple(grid))


def parse_config(raw: Dict[str, Any], base_dir=".") -> ExperimentConfig:
    """Builds an ExperimentConfig from a parsed YAML mapping; relative paths resolve against base_dir."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    base_dir = Path(base_dir)
    data = raw.get("data") or {}
    incidence = queries = synthesis = None
    if "synthesis" in data:
        try:
            synthesis = SynthesisConfig(**(data["synthesis"] or {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid synthesis config: {e}") from e
    if "incidence" in data:
        incidence = base_dir / data["incidence"]
        queries = base_dir / data["queries"] if data.get("queries") else None

    base = _build_hyper(dict(raw.get("hyper") or {}, gru=raw.get("gru") or {}))
    location_count = synthesis.locations if synthesis else max(REGION_GRID)
    models = [_build_spec(entry, base, location_count) for entry in raw.get("models") or []]
    try:
        return ExperimentConfig(
            models=models,
            horizons=[int(h) for h in raw.get("horizons") or []],
            incidence=incidence,
            queries=queries,
            synthesis=synthesis,
            train_fraction=float(raw.get("train_fraction", 0.5)),
            seed=int(raw.get("seed", 0)),
            output_dir=Path(raw.get("output_dir", "runs/latest")),
            gru_retrain=str(raw.get("gru_retrain", "full")),
            hyper=base,
            locations=list(raw["locations"]) if raw.get("locations") else None,
            jobs=int(raw.get("jobs", 1)),
            reselect_every=raw.get("reselect_every"),
            max_weeks=raw.get("max_weeks"),
            raw=raw,
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_config(path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_config(raw, path.parent)


@dataclass(frozen=True)
class Job:
    spec: ModelSpec
    horizon: int
    location: Optional[str]  # None: one model for every location (GRU)

    @property
    def name(self) -> str:
        q = "q" if self.spec.use_queries else "noq"
        return f"{self.spec.kind.value}_{q}_h{self.horizon}" + (f"_{self.location}" if self.location else "")


def _run_job(panel: PanelDataset, split_spec: SplitSpec, job: Job, options: HarnessOptions) -> WalkForwardResult:
    task = ForecastTask(horizon=job.horizon, target_location=job.location, use_queries=job.spec.use_queries)
    return WalkForwardHarness(panel, task, job.spec, split_spec, options).run()


@dataclass
class RunSummary:
    exit_code: int
    records: pd.DataFrame
    failures: List[Dict[str, Any]]
    files: List[str]
    manifest: Dict[str, Any]


class ExperimentRunner:
    """
    Runs every (model, horizon, location) walk-forward job of a config and writes the
    forecast log, report tables, attribution dumps, checkpoints, plots and manifest.
    """

    def __init__(self, config: ExperimentConfig, repo: Optional[Repository] = None):
        self.config = config
        self.repo = repo or Repository(config.output_dir)

    def load_panel(self) -> PanelDataset:
        config = self.config
        if config.synthesis is not None:
            return synthesize_panel(config.synthesis)
        for path in (config.incidence, config.queries):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{path}: referenced data file does not exist")
        return load_panel_csv(config.incidence, config.queries)

    def jobs(self, panel: PanelDataset) -> List[Job]:
        locations = self.config.locations or list(panel.location_ids)
        for loc in locations:
            if loc not in panel.location_ids:
                raise ConfigError(f"unknown location '{loc}' in config")
        jobs = []
        for spec in (fit_grid_to_panel(s, panel.L) for s in self.config.models):
            for horizon in self.config.horizons:
                if spec.kind == ModelKind.GRU:
                    jobs.append(Job(spec, horizon, None))
                else:
                    jobs.extend(Job(spec, horizon, loc) for loc in locations)
        return jobs

    def execute(self, panel: PanelDataset, split_spec: SplitSpec, jobs: List[Job]) -> List[Tuple[Job, Any]]:
        """Results (or the ModelError raised) in job order."""
        options = self.config.options()
        outcomes = []
        if self.config.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.config.jobs) as pool:
                futures = [pool.submit(_run_job, panel, split_spec, job, options) for job in jobs]
                for job, future in zip(jobs, futures):
                    try:
                        outcomes.append((job, future.result()))
                    except ModelError as e:
                        outcomes.append((job, e))
        else:
            for job in jobs:
                logger.info(f"running {job.name}")
                try:
                    outcomes.append((job, _run_job(panel, split_spec, job, options)))
                except ModelError as e:
                    outcomes.append((job, e))
        return outcomes

    def run(self) -> RunSummary:
        config = self.config
        panel = self.load_panel()
        split_spec = split(panel, config.train_fraction)
        jobs = self.jobs(panel)
        logger.info(f"{len(jobs)} jobs over {panel.T} weeks ({len(split_spec.test_range)} test weeks)")

        keep = set(config.locations or panel.location_ids)
        records, attributions, failures, logs, hyper = [], [], [], {}, {}
        files: List[Path] = []
        for job, outcome in self.execute(panel, split_spec, jobs):
            if isinstance(outcome, ModelError):
                logger.error(f"{job.name} failed: {outcome}")
                failures.append({"job": job.name, "error": str(outcome)})
                continue
            records.extend(r for r in outcome.records if r.location in keep)
            attributions.extend(a for a in outcome.attributions if a.location in keep)
            logs[job.name] = outcome.logs
            hyper[job.name] = outcome.hyperparameters
            if outcome.checkpoint is not None:
                files.append(self.repo.save_checkpoint(
                    outcome.checkpoint, job.name, config.seed, gru_retrain=config.gru_retrain, horizon=job.horizon,
                ))

        frame = records_to_frame(records) if records else pd.DataFrame(columns=FORECAST_COLUMNS)
        files.append(self.repo.save_forecasts(frame))
        ordering: Dict[str, List[List[Any]]] = {}
        if not frame.empty:
            report = Stats.evaluate(frame)
            files.extend(self.repo.save_report(report))
            files.extend(self.repo.save_attribution(a) for a in attributions)
            files.extend(emit_plots(report, attributions, self.repo.path(Repository.PLOTS)))
            ordering = median_orderings(report)

        manifest = {
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "gru_retrain": config.gru_retrain,
            "versions": versions(),
            "complete": not failures,
            "failures": failures,
            "files": sorted(self.repo.relative(Path(f)) for f in files),
            "ordering": ordering,
            "hyperparameters": hyper,
            "log": logs,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        self.repo.save_manifest(manifest)
        exit_code = EXIT_MODEL if failures else EXIT_OK
        return RunSummary(exit_code, frame, failures, manifest["files"], manifest)


def median_orderings(report: EvaluationReport) -> Dict[str, List[List[Any]]]:
    """Manifest form of the median-RMSE ordering: horizon -> [[label, median], ...]."""
    return {
        str(int(h)): [[label, value] for label, value in Stats.median_ordering(report, h)]
        for h in report.horizons
    }


def versions() -> Dict[str, str]:
    return {
        "flunow": flunow.__version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "pyyaml": yaml.__version__,
    }


def run_experiment(config: ExperimentConfig) -> int:
    """Runs the experiment and maps errors onto exit codes (0 ok, 1 config, 2 data, 3 model)."""
    try:
        return ExperimentRunner(config).run().exit_code
    except ConfigError as e:
        logger.error(f"config error: {e}")
        return EXIT_CONFIG
    except DataError as e:
        logger.error(f"data error: {e}")
        return EXIT_DATA
    except ModelError as e:
        logger.error(f"model error: {e}")
        return EXIT_MODEL
