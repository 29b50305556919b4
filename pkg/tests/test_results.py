import json

import pytest

from scratch_tickets.config import AttackConfig
from scratch_tickets.const import RESULT_COLUMNS, __version__
from scratch_tickets.evaluate import EvalReport
from scratch_tickets.file_hash import get_file_hash
from scratch_tickets.initializers import InitSpec
from scratch_tickets.masking import Pattern
from scratch_tickets.prng import Prng
from scratch_tickets.results import ResultWriter, SchemaError, read_results, report_row, write_manifest
from scratch_tickets.search import random_mask_ticket


def _report(model="ticket", robust=0.5):
    return EvalReport(model, 0.75, robust, 64, AttackConfig.named("pgd20", 0.1), model)


def test_report_row(mlp_spec):
    ticket = random_mask_ticket(mlp_spec, InitSpec("signed_kaiming_constant", 3), 0.5, Pattern.ROW, Prng(0))
    row = report_row(_report(), "eval", "abc", ticket, feature_distance=None)

    assert set(row) == set(RESULT_COLUMNS)
    assert row["attack"] == "pgd20"
    assert row["norm"] == "linf"
    assert row["steps"] == 20
    assert row["arch"] == "toy_mlp"
    assert row["pattern"] == "row"
    assert row["provenance"] == "RandomMask"
    assert row["seed"] == 3

    with pytest.raises(SchemaError, match="Unknown result columns"):
        report_row(_report(), "eval", "abc", colour="red")


def test_write_stage_replaces_rows_in_stage_order(tmp_path):
    writer = ResultWriter(tmp_path)
    writer.write_stage("eval", [report_row(_report("a"), "eval", "h")])
    writer.write_stage("search", [report_row(_report("b"), "search", "h")])
    writer.write_stage("eval", [report_row(_report("c", None), "eval", "h")])

    rows = read_results(writer.csv_path)
    assert [(row["stage"], row["model"]) for row in rows] == [("search", "b"), ("eval", "c")]
    assert rows[1]["robust_acc"] == ""
    assert rows[0]["natural_acc"] == "0.75"

    lines = writer.json_path.read_text(encoding="utf-8").splitlines()
    typed = json.loads(lines[1])
    assert typed["robust_acc"] is None
    assert typed["samples"] == 64
    assert typed["epsilon"] == 0.1


def test_rewrite_is_byte_identical(tmp_path):
    writer = ResultWriter(tmp_path)
    rows = [report_row(_report(), "eval", "h")]
    writer.write_stage("eval", rows)
    first = get_file_hash(writer.csv_path)
    writer.write_stage("eval", rows)
    assert get_file_hash(writer.csv_path) == first


def test_read_results_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_results(tmp_path / "results.csv")
    assert read_results(tmp_path / "results.csv", missing_ok=True) == []

    path = tmp_path / "partial.csv"
    path.write_text("stage,model\neval,a\n", encoding="utf-8")
    with pytest.raises(SchemaError, match="missing columns: config_hash"):
        read_results(path)
    assert read_results(path, required=("stage",)) == [{"stage": "eval", "model": "a"}]


def test_manifest_accumulates_stages(tmp_path):
    write_manifest(tmp_path, {"seed": 1}, "h", 1, "search", {"b.rstk": "2", "a.rstk": "1"})
    path = write_manifest(tmp_path, {"seed": 1}, "h", 1, "eval", {}, extra={"rows": 4})

    manifest = json.loads(path.read_text(encoding="utf-8"))
    assert manifest["version"] == __version__
    assert manifest["config_hash"] == "h"
    assert list(manifest["stages"]["search"]["files"]) == ["a.rstk", "b.rstk"]
    assert manifest["stages"]["eval"]["rows"] == 4
