import logging
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats as sps

from .errors import InconclusiveTestError
from .models import (
    EvaluationReport,
    ForecastRecord,
    RMSE_COLUMNS,
    WILCOXON_COLUMNS,
    WilcoxonResult,
    records_to_frame,
)

logger = logging.getLogger(__name__)

EXACT_LIMIT = 25


class Stats:
    """
    Scoring and significance testing used by the evaluation protocol.
    """

    @staticmethod
    def rmse(predicted: Sequence[float], actual: Sequence[float]) -> float:
        p = np.asarray(predicted, dtype=float)
        a = np.asarray(actual, dtype=float)
        if p.shape != a.shape or p.ndim != 1:
            raise ValueError("predicted and actual must be 1-D lists of equal length")
        if p.size == 0:
            raise ValueError("cannot score an empty list")
        return float(np.sqrt(np.mean((p - a) ** 2)))

    @staticmethod
    def pearson(a: Sequence[float], b: Sequence[float]) -> float:
        x = np.asarray(a, dtype=float)
        y = np.asarray(b, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("pearson needs two 1-D series of equal length")
        if x.size < 2:
            raise ValueError("pearson needs at least 2 observations")
        xc = x - x.mean()
        yc = y - y.mean()
        sx = math.sqrt(float(xc @ xc))
        sy = math.sqrt(float(yc @ yc))
        if sx == 0.0 or sy == 0.0:
            raise ValueError("zero variance: correlation undefined for a constant series")
        r = float(xc @ yc) / (sx * sy)
        return max(-1.0, min(1.0, r))

    @staticmethod
    def max_statistic(n: int) -> float:
        """
        Largest attainable min(W+, W-) for n non-zero differences.
        n=37 -> 351.5, n=159 -> 6360.
        """
        return n * (n + 1) / 4

    @staticmethod
    def signed_rank_null_counts(n: int) -> np.ndarray:
        """
        counts[s] = number of sign assignments of ranks 1..n with W+ = s.
        Subset-sum recursion over ranks; total is 2**n.
        """
        top = n * (n + 1) // 2
        counts = np.zeros(top + 1, dtype=np.float64)
        counts[0] = 1.0
        for rank in range(1, n + 1):
            counts[rank:] = counts[rank:] + counts[: top + 1 - rank].copy()
        return counts

    @staticmethod
    def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], method: str = "auto") -> WilcoxonResult:
        """
        Two-sided paired signed-rank test of a against b.
        Zero differences are dropped; the statistic is min(W+, W-).
        method: auto | exact | approx
        """
        x = np.asarray(a, dtype=float)
        y = np.asarray(b, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("signed-rank test needs paired lists of equal length")
        d = x - y
        d = d[d != 0]
        n = int(d.size)
        if n == 0:
            raise InconclusiveTestError("all paired differences are zero; no decision possible")

        absd = np.abs(d)
        ranks = sps.rankdata(absd, method="average")
        w_plus = float(ranks[d > 0].sum())
        w_minus = float(ranks[d < 0].sum())
        w = min(w_plus, w_minus)
        _, tie_sizes = np.unique(absd, return_counts=True)
        has_ties = bool((tie_sizes > 1).any())

        if method == "auto":
            method = "exact" if n <= EXACT_LIMIT and not has_ties else "approx"
        if method == "exact":
            if has_ties:
                raise ValueError("exact null distribution requires untied absolute differences")
            counts = Stats.signed_rank_null_counts(n)
            tail = counts[: int(math.floor(w)) + 1].sum() / 2.0 ** n
            p = min(1.0, 2.0 * tail)
            label = "exact"
        elif method == "approx":
            mean = n * (n + 1) / 4.0
            var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_sizes ** 3) - tie_sizes).sum()) / 48.0
            z = (w - mean + 0.5) / math.sqrt(var)
            p = min(1.0, 2.0 * float(sps.norm.cdf(z)))
            label = "normal-approximation"
        else:
            raise ValueError(f"unknown method '{method}'")
        return WilcoxonResult(w_statistic=w, p_value=p, n_effective=n, method=label, w_plus=w_plus, w_minus=w_minus)

    @staticmethod
    def rmse_table(frame: pd.DataFrame) -> pd.DataFrame:
        rows = []
        for (model, use_q, horizon, location), group in frame.groupby(
            ["model", "use_queries", "horizon", "location"], sort=True
        ):
            rows.append([model, bool(use_q), int(horizon), location, Stats.rmse(group["predicted"], group["actual"])])
        return pd.DataFrame(rows, columns=RMSE_COLUMNS)

    @staticmethod
    def evaluate(records) -> EvaluationReport:
        """
        Per-location RMSE for every (model, use_queries, horizon), and a signed-rank test of
        every non-persistence entry against persistence at the same horizon.
        `records` is a list of ForecastRecord or a forecast-log DataFrame.
        """
        frame = records if isinstance(records, pd.DataFrame) else records_to_frame(records)
        if frame.empty:
            raise ValueError("no forecast records to evaluate")
        rmse = Stats.rmse_table(frame)
        tests = []
        baseline = rmse[rmse["model"] == "P"]
        for (model, use_q, horizon), group in rmse.groupby(["model", "use_queries", "horizon"], sort=True):
            if model == "P":
                continue
            base = baseline[baseline["horizon"] == horizon].groupby("location")["rmse"].first()
            paired = group.set_index("location")["rmse"]
            common = sorted(set(paired.index) & set(base.index))
            if not common:
                continue
            try:
                res = Stats.wilcoxon_signed_rank(paired.loc[common].to_numpy(), base.loc[common].to_numpy())
            except InconclusiveTestError as e:
                logger.warning(f"{model} (queries={use_q}) h={horizon}: {e}")
                continue
            tests.append([model, bool(use_q), int(horizon), res.w_statistic, res.p_value, res.n_effective, res.method])
        return EvaluationReport(rmse=rmse, wilcoxon=pd.DataFrame(tests, columns=WILCOXON_COLUMNS))

    @staticmethod
    def median_ordering(report: EvaluationReport, horizon: int) -> List[Tuple[str, float]]:
        """(label, median per-location RMSE) sorted ascending for one horizon."""
        sub = report.rmse[report.rmse["horizon"] == horizon]
        medians: Dict[str, float] = {}
        for (model, use_q), group in sub.groupby(["model", "use_queries"], sort=True):
            label = f"{model}+GT" if use_q else model
            medians[label] = float(group["rmse"].median())
        return sorted(medians.items(), key=lambda kv: (kv[1], kv[0]))
