import json

import pytest
from numpy.testing import assert_array_equal

from scratch_tickets.__main__ import apply_overrides, build_parser, main
from scratch_tickets.checkpoint import Provenance, load_checkpoint
from scratch_tickets.config import RunConfig
from scratch_tickets.file_hash import get_config_hash
from scratch_tickets.results import read_results
from scratch_tickets.runner import Runner, StageError

PIPELINE_INI = """
[run]
name = toy-pipeline
seed = 1
dataset = toy
train_limit = 32
test_limit = 16
eval_batch_size = 8
stages = search, train, finetune, eval, transfer, r2s, plot

[network]
arch = toy_mlp
ratios = 25%, 0.5

[search]
epochs = 2
milestones =
batch_size = 16
attack = fgsm_rs
random_baseline = yes

[train]
epochs = 2
milestones =
batch_size = 16

[finetune]
epochs = 1
milestones =
batch_size = 16
mode = both

[attack]
epsilon = 0.1
eval = pgd3

[r2s]
checkpoints = rst-*.rstk
adaptive = none, eot

[plot]
kinds = ratio_curve, transfer_heatmap
"""


def _toy_config(tmp_path, **overrides) -> RunConfig:
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "run.ini"
    path.write_text(PIPELINE_INI, encoding="utf-8")
    return RunConfig.load(path).with_overrides(output_dir=str(tmp_path / "runs"), **overrides)


def test_full_pipeline(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(PIPELINE_INI, encoding="utf-8")
    assert main(["run", "-c", str(path), "-o", str(tmp_path / "runs")]) == 0

    config = RunConfig.load(path).with_overrides(output_dir=str(tmp_path / "runs"))
    run_dir = tmp_path / "runs" / get_config_hash(config.to_dict())
    names = sorted(p.name for p in (run_dir / "checkpoints").iterdir())
    assert names == [
        "dense-adversarial.rstk",
        "ft-inherit-rst-signed_kaiming_constant-element-r0.25.rstk",
        "ft-inherit-rst-signed_kaiming_constant-element-r0.5.rstk",
        "ft-reinit-rst-signed_kaiming_constant-element-r0.25.rstk",
        "ft-reinit-rst-signed_kaiming_constant-element-r0.5.rstk",
        "random-signed_kaiming_constant-element-r0.25.rstk",
        "random-signed_kaiming_constant-element-r0.5.rstk",
        "rst-signed_kaiming_constant-element-r0.25.rstk",
        "rst-signed_kaiming_constant-element-r0.5.rstk",
    ]
    dense = load_checkpoint(run_dir / "checkpoints" / "dense-adversarial.rstk")
    assert dense.provenance == Provenance.ADVERSARIAL_DENSE
    assert set(dense.metrics) == {"natural_acc", "pgd3@0.1"}

    rows = read_results(run_dir / "results.csv")
    stages = [row["stage"] for row in rows]
    assert stages == sorted(stages, key=["search", "train", "finetune", "eval", "transfer", "r2s"].index)
    assert stages.count("search") == 4
    assert stages.count("eval") == 9
    assert stages.count("transfer") == 81
    # two adaptive settings times two modes
    assert stages.count("r2s") == 4
    assert all(row["config_hash"] == run_dir.name for row in rows)

    r2s_rows = [row for row in rows if row["stage"] == "r2s"]
    assert {row["attack_source"] for row in r2s_rows} == {"none/sampled", "none/exact", "eot/sampled", "eot/exact"}
    assert r2s_rows[0]["provenance"] == "R2S:RST"

    plots = sorted(p.name for p in (run_dir / "plots").iterdir())
    assert plots == ["ratio_curve.svg", "transfer_heatmap-pgd3-0p1.svg"]

    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["seed"] == 1
    assert set(manifest["stages"]) == {"search", "train", "finetune", "eval", "transfer", "r2s", "plot"}
    assert "checkpoints/rst-signed_kaiming_constant-element-r0.5.rstk" in manifest["stages"]["search"]["files"]
    assert manifest["stages"]["r2s"]["overhead"]["r2s[0.25,0.5]"]["tickets"] == 2


def test_rerun_is_deterministic(tmp_path):
    first = Runner(_toy_config(tmp_path / "a"))
    first.run("search")
    second = Runner(_toy_config(tmp_path / "b", jobs=2))
    second.run("search")

    for path in sorted(first.checkpoint_dir.iterdir()):
        one = load_checkpoint(path)
        two = load_checkpoint(second.checkpoint_dir / path.name)
        for name, mask in one.masks.items():
            assert_array_equal(two.masks[name], mask)

    assert first.config_hash != second.config_hash
    assert [row["natural_acc"] for row in read_results(first.writer.csv_path)] == [
        row["natural_acc"] for row in read_results(second.writer.csv_path)
    ]


def test_stage_errors_are_tagged(tmp_path):
    runner = Runner(_toy_config(tmp_path))
    with pytest.raises(StageError, match=r"^\[eval\] FileNotFoundError: No checkpoints"):
        runner.run("eval")

    with pytest.raises(StageError, match="Unknown stage"):
        runner.run("deploy")


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["eval", "-o", str(tmp_path)]) == 2
    assert capsys.readouterr().err.splitlines()[-1].startswith("[eval] FileNotFoundError")

    assert main(["search", "--ratio", "150%", "-o", str(tmp_path)]) == 2
    assert capsys.readouterr().err.splitlines()[-1].startswith("[search] ratio must lie in (0, 1]")

    assert main(["eval", "-c", str(tmp_path / "missing.ini")]) == 2
    assert "Cannot read config" in capsys.readouterr().err


def test_cli_overrides():
    parser = build_parser()
    args = parser.parse_args(["search", "--ratio", "5%", "--ratio", "0.1", "--eps", "0.2", "--attack", "fgsm", "-j", "3"])
    config = apply_overrides(RunConfig(), args)
    assert config.ratios == pytest.approx((0.05, 0.1))
    assert config.epsilon == 0.2
    assert config.eval_epsilons == (0.2,)
    assert config.search_attack == "fgsm"
    assert config.eval_attacks == ("pgd20",)
    assert config.jobs == 3

    args = parser.parse_args(["eval", "--attack", "pgd20", "--attack", "fgsm"])
    assert apply_overrides(RunConfig(), args).eval_attacks == ("pgd20", "fgsm")
