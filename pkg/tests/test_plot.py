import pytest

from scratch_tickets.plot import group_rows, plot, plot_filename
from scratch_tickets.results import SchemaError


def _curve_row(provenance, ratio, natural, robust, stage="eval"):
    return {
        "stage": stage,
        "model": f"{provenance}-{ratio}",
        "provenance": provenance,
        "ratio": ratio,
        "attack": "pgd20",
        "epsilon": "0.1",
        "natural_acc": natural,
        "robust_acc": robust,
    }


def test_ratio_curve(tmp_path):
    rows = [
        _curve_row("RST", "0.05", "0.9", "0.6"),
        _curve_row("RST", "0.01", "0.8", "0.5"),
        _curve_row("AdversarialDense", "1.0", "0.95", "0.7"),
        _curve_row("RST", "0.1", "0.1", "0.1", stage="r2s"),
    ]
    path = plot(rows, "ratio_curve", tmp_path / "plots" / "curve.svg")
    text = path.read_text(encoding="utf-8")
    assert text.startswith("<?xml")
    assert "Remaining ratio (%)" in text


def test_single_point_curve(tmp_path):
    path = plot([_curve_row("RST", "0.05", "0.9", "0.6")], "ratio_curve", tmp_path / "one.svg")
    assert path.exists()


def test_transfer_heatmap_labels(tmp_path):
    rows = [
        {"stage": "transfer", "model": target, "attack_source": source, "robust_acc": value}
        for source, target, value in (
            ("a", "a", "0.5"),
            ("a", "b", "0.8125"),
            ("b", "a", "0.875"),
            ("b", "b", "0.25"),
        )
    ]
    text = plot(rows, "transfer_heatmap", tmp_path / "heat.svg").read_text(encoding="utf-8")
    assert "0.81" in text
    assert "0.25" in text
    assert "0.8125" not in text


def test_distance_bars(tmp_path):
    rows = [
        {"stage": "distance", "model": model, "epsilon": eps, "feature_distance": value}
        for model, eps, value in (("rst", "0.05", "0.1"), ("rst", "0.1", "0.2"), ("dense", "0.05", "0.4"))
    ]
    assert plot(rows, "distance_bars", tmp_path / "bars.svg").exists()


def test_plot_from_csv(tmp_path):
    path = tmp_path / "results.csv"
    path.write_text(
        "stage,model,epsilon,feature_distance\ndistance,rst,0.1,0.3\n",
        encoding="utf-8",
    )
    assert plot(path, "distance_bars", tmp_path / "bars.svg").exists()


def test_plot_errors(tmp_path):
    with pytest.raises(SchemaError, match="No result rows"):
        plot([], "ratio_curve", tmp_path / "empty.svg")

    with pytest.raises(SchemaError, match="missing columns: attack_source, robust_acc"):
        plot([{"stage": "transfer", "model": "a"}], "transfer_heatmap", tmp_path / "bad.svg")

    with pytest.raises(SchemaError, match="Unknown plot kind"):
        plot([{"model": "a"}], "pie", tmp_path / "pie.svg")

    with pytest.raises(SchemaError, match="not numeric"):
        plot(
            [{"stage": "distance", "model": "a", "epsilon": "wide", "feature_distance": "0.1"}],
            "distance_bars",
            tmp_path / "bad.svg",
        )

    assert not (tmp_path / "empty.svg").exists()


def test_grouping_and_filenames():
    rows = [{"attack": "pgd20", "epsilon": "0.1"}, {"attack": "fgsm", "epsilon": "0.1"}, {"attack": "pgd20", "epsilon": "0.1"}]
    groups = group_rows(rows, ("attack", "epsilon"))
    assert list(groups) == [("pgd20", "0.1"), ("fgsm", "0.1")]
    assert len(groups[("pgd20", "0.1")]) == 2

    assert plot_filename("ratio_curve") == "ratio_curve.svg"
    assert plot_filename("transfer_heatmap", ("pgd20", "0.1")) == "transfer_heatmap-pgd20-0p1.svg"
