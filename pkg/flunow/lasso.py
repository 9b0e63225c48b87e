import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .models import AttributionMap, LinearModel

logger = logging.getLogger(__name__)


def soft_threshold(z: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


def objective(X: np.ndarray, y: np.ndarray, coefficients: np.ndarray, intercept: float, lam: float) -> float:
    """(1 / 2n) * RSS + lam * ||coefficients||_1"""
    r = np.asarray(y, dtype=float) - np.asarray(X, dtype=float) @ coefficients - intercept
    return float(r @ r) / (2.0 * r.size) + lam * float(np.abs(coefficients).sum())


def fit_lasso(
    X,
    y,
    lam: float,
    tol: float = 1e-6,
    max_iter: int = 1000,
    feature_names: Sequence[str] = (),
    check_descent: bool = False,
) -> LinearModel:
    """
    Cyclic coordinate descent on (1/2n)||y - X b - b0||^2 + lam ||b||_1 with an
    unpenalized intercept. Columns are centred (never rescaled) so the intercept
    has the closed form mean(y) - mean(X) . b after every sweep.

    Stops when the largest coefficient change over a sweep drops below tol, or after
    max_iter sweeps.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: X {X.shape}, y {y.shape}")
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot fit on zero samples")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise ValueError("design matrix or targets contain undefined values")

    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    residual = y - y_mean
    col_sq = (Xc ** 2).sum(axis=0) / n
    beta = np.zeros(p)

    converged = False
    sweeps = 0
    previous = objective(Xc, residual + y_mean, beta, y_mean, lam) if check_descent else None
    while sweeps < max_iter:
        sweeps += 1
        max_change = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            rho = float(Xc[:, j] @ residual) / n + col_sq[j] * old
            new = soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                residual -= Xc[:, j] * (new - old)
                beta[j] = new
                max_change = max(max_change, abs(new - old))
        if check_descent:
            current = objective(Xc, y - y_mean, beta, 0.0, lam)
            if current > previous + 1e-12 * max(1.0, abs(previous)):
                raise ArithmeticError(f"objective increased at sweep {sweeps}: {previous} -> {current}")
            previous = current
        if max_change < tol:
            converged = True
            break

    if not converged:
        logger.debug(f"lasso stopped after {sweeps} sweeps without reaching tol={tol}")
    intercept = y_mean - float(x_mean @ beta)
    return LinearModel(
        coefficients=beta,
        intercept=intercept,
        lam=lam,
        converged=converged,
        iterations=sweeps,
        feature_names=tuple(feature_names),
    )


def predict_linear(model: LinearModel, x):
    """intercept + coefficients . x for one vector, or one value per row of a matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.coefficients.shape[0]:
        raise ValueError(f"expected {model.coefficients.shape[0]} features, got {x.shape[-1]}")
    out = x @ model.coefficients + model.intercept
    return float(out) if x.ndim == 1 else out


def coefficient_table(model: LinearModel) -> pd.DataFrame:
    """feature,coefficient sorted by |coefficient| descending (ties by feature name)."""
    names = model.feature_names or tuple(f"x{j}" for j in range(model.coefficients.size))
    frame = pd.DataFrame({"feature": names, "coefficient": model.coefficients})
    order = sorted(range(len(frame)), key=lambda i: (-abs(frame["coefficient"].iat[i]), frame["feature"].iat[i]))
    return frame.iloc[order].reset_index(drop=True)


def coefficient_attribution(
    model: LinearModel,
    location: str,
    horizon: int,
    kind: str = "LR",
    use_queries: bool = False,
    coefficients: Optional[np.ndarray] = None,
) -> AttributionMap:
    values = model.coefficients if coefficients is None else np.asarray(coefficients, dtype=float)
    return AttributionMap(
        kind="coefficients",
        model=kind,
        use_queries=use_queries,
        location=location,
        horizon=horizon,
        values=np.array(values, dtype=float),
        row_labels=tuple(model.feature_names),
    )
