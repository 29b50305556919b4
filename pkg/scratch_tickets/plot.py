"""Static SVG figures from results CSVs."""
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .results import SchemaError, read_results  # noqa: E402

_LOGGER = logging.getLogger(__name__)

Rows = List[Dict[str, str]]

KIND_COLUMNS: Dict[str, Sequence[str]] = {
    "ratio_curve": ("provenance", "ratio", "attack", "epsilon", "natural_acc", "robust_acc"),
    "transfer_heatmap": ("model", "attack_source", "robust_acc"),
    "distance_bars": ("model", "epsilon", "feature_distance"),
}

KIND_STAGES: Dict[str, Sequence[str]] = {
    "ratio_curve": ("search", "eval", "finetune", "train"),
    "transfer_heatmap": ("transfer",),
    "distance_bars": ("distance",),
}

_DENSE = ("NaturalDense", "AdversarialDense")

_SVG_STYLE = {
    "svg.fonttype": "none",
    "svg.hashsalt": "scratch-tickets",
    "font.size": 9,
}


def _check(rows: Rows, kind: str) -> None:
    if kind not in KIND_COLUMNS:
        raise SchemaError(f"Unknown plot kind '{kind}'. Choices: {list(KIND_COLUMNS)}")

    if not rows:
        raise SchemaError(f"No result rows to plot for {kind}")

    missing = [column for column in KIND_COLUMNS[kind] if column not in rows[0]]
    if missing:
        raise SchemaError(f"{kind} rows are missing columns: {', '.join(missing)}")


def select_rows(rows: Rows, kind: str) -> Rows:
    """Rows of the stages that feed `kind`."""
    stages = KIND_STAGES[kind]
    return [row for row in rows if row.get("stage", stages[0]) in stages]


def _float(row: Mapping[str, str], column: str) -> float:
    try:
        return float(row[column])
    except (TypeError, ValueError) as err:
        raise SchemaError(f"Column {column} is not numeric: {row.get(column)!r}") from err


def _save(figure: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_SVG_STYLE):
        figure.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    _LOGGER.info("Wrote %s", path)
    return path


# -----------------------------------------------------------------------------


def ratio_curve(rows: Rows, path: Path, title: str = "") -> Path:
    """Natural and robust accuracy against the remaining ratio.

    Dense checkpoints are drawn as dashed horizontal baselines.
    """
    curves: Dict[str, List[Mapping[str, str]]] = OrderedDict()
    baselines: List[Mapping[str, str]] = []
    for row in rows:
        if row["provenance"] in _DENSE:
            baselines.append(row)
        elif row["ratio"] and row["robust_acc"]:
            label = f"{row['provenance'] or 'ticket'} {row['attack']} eps={row['epsilon']}"
            curves.setdefault(label, []).append(row)

    if not curves and not baselines:
        raise SchemaError("No ratio rows with robust accuracy to plot")

    with matplotlib.rc_context(_SVG_STYLE):
        figure = Figure(figsize=(5.5, 3.8))
        axes = figure.add_subplot()
        for label, points in curves.items():
            points = sorted(points, key=lambda row: _float(row, "ratio"))
            ratios = [100 * _float(row, "ratio") for row in points]
            line = axes.plot(ratios, [_float(row, "natural_acc") for row in points], marker="o", label=f"{label} natural")
            axes.plot(
                ratios,
                [_float(row, "robust_acc") for row in points],
                marker="s",
                linestyle=":",
                color=line[0].get_color(),
                label=f"{label} robust",
            )

        for row in baselines:
            for column, color in (("natural_acc", "tab:gray"), ("robust_acc", "black")):
                if row[column]:
                    axes.axhline(
                        _float(row, column),
                        linestyle="--",
                        color=color,
                        linewidth=1.0,
                        label=f"{row['provenance']} {column.split('_')[0]}",
                    )

        axes.set_xlabel("Remaining ratio (%)")
        axes.set_ylabel("Accuracy")
        axes.set_ylim(0.0, 1.0)
        axes.set_title(title or "Accuracy vs. remaining ratio")
        axes.legend(fontsize=7)
        return _save(figure, path)


def transfer_heatmap(rows: Rows, path: Path, title: str = "") -> Path:
    """Matrix of target accuracy (columns) under attacks from each source (rows)."""
    sources = list(OrderedDict.fromkeys(row["attack_source"] for row in rows))
    targets = list(OrderedDict.fromkeys(row["model"] for row in rows))
    matrix = np.full((len(sources), len(targets)), np.nan)
    for row in rows:
        matrix[sources.index(row["attack_source"]), targets.index(row["model"])] = _float(row, "robust_acc")

    with matplotlib.rc_context(_SVG_STYLE):
        figure = Figure(figsize=(1.2 * len(targets) + 2.0, 1.0 * len(sources) + 1.5))
        axes = figure.add_subplot()
        image = axes.imshow(matrix, cmap="viridis", vmin=0.0, vmax=1.0)
        for i in range(len(sources)):
            for j in range(len(targets)):
                if np.isfinite(matrix[i, j]):
                    axes.text(
                        j,
                        i,
                        f"{matrix[i, j]:.2f}",
                        ha="center",
                        va="center",
                        color="white" if matrix[i, j] < 0.5 else "black",
                    )

        axes.set_xticks(range(len(targets)))
        axes.set_xticklabels(targets, rotation=45, ha="right")
        axes.set_yticks(range(len(sources)))
        axes.set_yticklabels(sources)
        axes.set_xlabel("Evaluated ticket")
        axes.set_ylabel("Attack source")
        axes.set_title(title or "Robust accuracy under transferred attacks")
        figure.colorbar(image, ax=axes)
        return _save(figure, path)


def distance_bars(rows: Rows, path: Path, title: str = "") -> Path:
    """Feature distance grouped by epsilon, one bar per model."""
    epsilons = sorted({_float(row, "epsilon") for row in rows})
    models = list(OrderedDict.fromkeys(row["model"] for row in rows))
    values = np.zeros((len(models), len(epsilons)))
    for row in rows:
        values[models.index(row["model"]), epsilons.index(_float(row, "epsilon"))] = _float(row, "feature_distance")

    width = 0.8 / len(models)
    positions = np.arange(len(epsilons))
    with matplotlib.rc_context(_SVG_STYLE):
        figure = Figure(figsize=(5.5, 3.8))
        axes = figure.add_subplot()
        for index, model in enumerate(models):
            axes.bar(positions + index * width, values[index], width, label=model)

        axes.set_xticks(positions + 0.4 - width / 2)
        axes.set_xticklabels([f"{eps:g}" for eps in epsilons])
        axes.set_xlabel("Noise epsilon")
        axes.set_ylabel("Normalized feature distance")
        axes.set_title(title or "Feature distance under random noise")
        axes.legend(fontsize=7)
        return _save(figure, path)


_PLOTTERS = {
    "ratio_curve": ratio_curve,
    "transfer_heatmap": transfer_heatmap,
    "distance_bars": distance_bars,
}


def plot(
    results: Union[str, Path, Rows],
    kind: str,
    path: Union[str, Path],
    title: str = "",
    filter_stages: bool = True,
) -> Path:
    """Render one figure kind from a results CSV (or its parsed rows) to SVG."""
    if isinstance(results, (str, Path)):
        rows = read_results(results, required=())
    else:
        rows = list(results)

    if kind in KIND_STAGES and filter_stages:
        rows = select_rows(rows, kind)
    _check(rows, kind)
    return _PLOTTERS[kind](rows, Path(path), title)


def group_rows(rows: Rows, columns: Sequence[str]) -> Dict[tuple, Rows]:
    groups: Dict[tuple, Rows] = OrderedDict()
    for row in rows:
        groups.setdefault(tuple(row.get(column, "") for column in columns), []).append(row)
    return groups


def plot_filename(kind: str, keys: Optional[tuple] = None) -> str:
    if not keys or not any(keys):
        return f"{kind}.svg"
    suffix = "-".join(str(key).replace(".", "p") for key in keys if key)
    return f"{kind}-{suffix}.svg"
