import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from flunow.errors import DataError
from flunow.gru import save_checkpoint
from flunow.lasso import coefficient_table
from flunow.forest import importance_table
from flunow.models import (
    FORECAST_COLUMNS,
    RMSE_COLUMNS,
    WILCOXON_COLUMNS,
    AttributionMap,
    EvaluationReport,
    GruParameters,
    LinearModel,
)

logger = logging.getLogger(__name__)


class Repository:
    """
    File store for one run directory: forecast log, report tables, attribution dumps,
    GRU checkpoints and the run manifest. Every file has a single writer.
    """

    FORECASTS = "forecasts.csv"
    RMSE = "rmse.csv"
    WILCOXON = "wilcoxon.csv"
    MANIFEST = "manifest.json"
    ATTRIBUTIONS = "attributions"
    CHECKPOINTS = "checkpoints"
    PLOTS = "plots"

    def __init__(self, root="runs/latest"):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def relative(self, path: Path) -> str:
        return Path(os.path.relpath(path, self.root)).as_posix()

    #  Forecasts and reports

    def save_forecasts(self, frame: pd.DataFrame) -> Path:
        path = self.path(self.FORECASTS)
        frame[FORECAST_COLUMNS].to_csv(path, index=False, lineterminator="\n")
        return path

    def load_forecasts(self) -> pd.DataFrame:
        frame = self._read(self.path(self.FORECASTS), FORECAST_COLUMNS)
        frame["use_queries"] = frame["use_queries"].astype(bool)
        return frame

    def save_report(self, report: EvaluationReport) -> List[Path]:
        """rmse.csv always; wilcoxon.csv only when some model was compared against persistence."""
        rmse_path = self.path(self.RMSE)
        wilcoxon_path = self.path(self.WILCOXON)
        report.rmse[RMSE_COLUMNS].to_csv(rmse_path, index=False, lineterminator="\n")
        if report.wilcoxon.empty:
            wilcoxon_path.unlink(missing_ok=True)
            return [rmse_path]
        report.wilcoxon[WILCOXON_COLUMNS].to_csv(wilcoxon_path, index=False, lineterminator="\n")
        return [rmse_path, wilcoxon_path]

    def load_report(self) -> EvaluationReport:
        rmse = self._read(self.path(self.RMSE), RMSE_COLUMNS)
        rmse["use_queries"] = rmse["use_queries"].astype(bool)
        wilcoxon_path = self.path(self.WILCOXON)
        if wilcoxon_path.exists() and wilcoxon_path.stat().st_size > 0:
            wilcoxon = self._read(wilcoxon_path, WILCOXON_COLUMNS)
        else:
            wilcoxon = pd.DataFrame(columns=WILCOXON_COLUMNS)
        return EvaluationReport(rmse=rmse, wilcoxon=wilcoxon)

    @staticmethod
    def _read(path: Path, columns: List[str]) -> pd.DataFrame:
        if not path.exists():
            raise DataError(f"{path}: no such file")
        frame = pd.read_csv(path, dtype={"week": str, "location": str})
        if list(frame.columns) != columns:
            raise DataError(f"{path}: malformed header {list(frame.columns)}, expected {','.join(columns)}")
        return frame

    #  Attributions

    def save_attribution(self, attribution: AttributionMap) -> Path:
        """
        coefficients -> feature,coefficient; importances -> feature,importance (both sorted by
        magnitude); saliency -> one row per lag step, one column per input channel.
        """
        path = self.path(self.ATTRIBUTIONS, f"{attribution.name}.csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        if attribution.kind == "coefficients":
            model = LinearModel(np.asarray(attribution.values), 0.0, 0.0, True, 0, attribution.row_labels)
            frame = coefficient_table(model)
        elif attribution.kind == "importances":
            frame = importance_table(attribution)
        elif attribution.kind == "saliency":
            frame = pd.DataFrame(attribution.values, columns=list(attribution.col_labels))
            frame.insert(0, "step", list(attribution.row_labels))
        else:
            raise ValueError(f"unknown attribution kind '{attribution.kind}'")
        frame.to_csv(path, index=False, lineterminator="\n")
        return path

    def load_attributions(self) -> List[AttributionMap]:
        maps = []
        for path in sorted(self.path(self.ATTRIBUTIONS).glob("*.csv")):
            model, q, horizon, location = path.stem.split("_", 3)
            frame = pd.read_csv(path)
            common = dict(model=model, use_queries=(q == "q"), location=location, horizon=int(horizon.lstrip("h")))
            if list(frame.columns) == ["feature", "coefficient"]:
                maps.append(AttributionMap(kind="coefficients", values=frame["coefficient"].to_numpy(),
                                           row_labels=tuple(frame["feature"]), **common))
            elif list(frame.columns) == ["feature", "importance"]:
                maps.append(AttributionMap(kind="importances", values=frame["importance"].to_numpy(),
                                           row_labels=tuple(frame["feature"]), **common))
            elif frame.columns[0] == "step":
                maps.append(AttributionMap(kind="saliency", values=frame.iloc[:, 1:].to_numpy(dtype=float),
                                           row_labels=tuple(frame["step"]), col_labels=tuple(frame.columns[1:]),
                                           **common))
            else:
                logger.warning(f"{path}: unrecognised attribution layout, skipped")
        return maps

    #  Checkpoints and manifest

    def save_checkpoint(self, params: GruParameters, name: str, seed: int, **meta) -> Path:
        return save_checkpoint(params, self.path(self.CHECKPOINTS, f"{name}.json"), seed, **meta)

    def save_manifest(self, manifest: Dict[str, Any]) -> Path:
        path = self.path(self.MANIFEST)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
        return path

    def load_manifest(self) -> Optional[Dict[str, Any]]:
        path = self.path(self.MANIFEST)
        if not path.exists():
            return None
        return json.loads(path.read_text())
