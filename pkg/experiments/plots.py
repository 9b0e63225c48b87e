import io
import logging
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from flunow.models import AttributionMap, EvaluationReport, ModelKind

logger = logging.getLogger(__name__)

MODEL_ORDER = [k.value for k in ModelKind]
SVG_STYLE = {"svg.hashsalt": "flunow", "svg.fonttype": "path"}
TOP_FEATURES = 20


def _label(model: str, use_queries: bool) -> str:
    return f"{model}+GT" if use_queries else model


def _save_svg(fig, path: Path, table: pd.DataFrame) -> Path:
    """Write the figure as SVG with `table` embedded as CSV in a comment after the XML prolog."""
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    svg = buf.getvalue()
    data = table.to_csv(index=False, lineterminator="\n").replace("--", "- -")
    head, sep, rest = svg.partition("?>\n")
    if not sep:
        head, rest = "", svg
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{head}{sep}<!-- data\n{data}-->\n{rest}")
    return path


def plot_rmse(report: EvaluationReport, horizon: int, path: Path) -> Path:
    """RMSE distribution over locations per model, both query settings side by side."""
    sub = report.rmse[report.rmse["horizon"] == horizon]
    groups = sorted(
        sub.groupby(["model", "use_queries"]),
        key=lambda kv: (MODEL_ORDER.index(kv[0][0]) if kv[0][0] in MODEL_ORDER else len(MODEL_ORDER), kv[0][1]),
    )
    labels = [_label(model, bool(q)) for (model, q), _ in groups]
    data = [g["rmse"].to_numpy() for _, g in groups]

    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(labels)), 4.5))
    positions = np.arange(1, len(labels) + 1)
    # violins need spread; fall back to boxes for degenerate groups
    if all(np.unique(d).size > 1 for d in data):
        parts = ax.violinplot(data, positions=positions, showmedians=True)
        for body, (_, q) in zip(parts["bodies"], [k for k, _ in groups]):
            body.set_facecolor("tab:orange" if q else "tab:blue")
            body.set_alpha(0.6)
    else:
        ax.boxplot(data, positions=positions)
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("RMSE per location")
    ax.set_title(f"Prediction error, h = {horizon} week{'s' if horizon > 1 else ''}")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save_svg(fig, path, sub.reset_index(drop=True))


def plot_attribution(attribution: AttributionMap, path: Path) -> Path:
    title = f"{_label(attribution.model, attribution.use_queries)} {attribution.location}, h = {attribution.horizon}"
    values = np.asarray(attribution.values, dtype=float)
    if attribution.kind == "saliency":
        # channels x steps, so one column per lag step
        grid = values.T
        fig, ax = plt.subplots(figsize=(max(6, 0.15 * grid.shape[1] + 3), max(3, 0.25 * grid.shape[0] + 1.5)))
        image = ax.imshow(grid, aspect="auto", cmap="viridis", interpolation="nearest")
        ax.set_yticks(np.arange(grid.shape[0]))
        ax.set_yticklabels(attribution.col_labels, fontsize=6)
        ax.set_xlabel("lag step (latest on the right)")
        fig.colorbar(image, ax=ax, label="|d output / d input|")
        ax.set_title(f"GRU saliency: {title}")
        table = pd.DataFrame(values, columns=list(attribution.col_labels))
        table.insert(0, "step", list(attribution.row_labels))
    else:
        order = np.argsort(-np.abs(values), kind="mergesort")[:TOP_FEATURES]
        names = [attribution.row_labels[i] for i in order][::-1]
        shown = values[order][::-1]
        fig, ax = plt.subplots(figsize=(7, max(3, 0.3 * len(names) + 1)))
        ax.barh(np.arange(len(names)), shown, color=["tab:red" if v < 0 else "tab:blue" for v in shown])
        ax.set_yticks(np.arange(len(names)))
        ax.set_yticklabels(names, fontsize=7)
        ax.axvline(0.0, color="black", linewidth=0.8)
        heading = "coefficients" if attribution.kind == "coefficients" else "importances"
        ax.set_title(f"{attribution.model} {heading}: {title}")
        column = "coefficient" if attribution.kind == "coefficients" else "importance"
        table = pd.DataFrame({"feature": list(attribution.row_labels), column: values})
    fig.tight_layout()
    return _save_svg(fig, path, table)


def emit_plots(report: EvaluationReport, attributions: Sequence[AttributionMap], out_dir) -> List[Path]:
    """One RMSE figure per horizon and one panel per attribution map."""
    if report.rmse.empty:
        raise ValueError("cannot plot an empty report")
    out = Path(out_dir)
    written = []
    with plt.rc_context(SVG_STYLE):
        for horizon in report.horizons:
            written.append(plot_rmse(report, horizon, out / f"rmse_h{horizon}.svg"))
        for attribution in attributions:
            written.append(plot_attribution(attribution, out / f"attr_{attribution.name}.svg"))
    logger.info(f"wrote {len(written)} plots to {out}")
    return written
