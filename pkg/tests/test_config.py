import pytest

from scratch_tickets.config import AttackConfig, ConfigError, Norm, RunConfig, SearchSchedule, load_run_config
from scratch_tickets.file_hash import get_config_hash

RUN_INI = """
[run]
name = toy
seed = 3
jobs = 2
dataset = toy
train_limit = 32
stages = search, eval

[network]
arch = toy_mlp
init = signed_kaiming_constant, kaiming_normal
pattern = element, row
ratios = 5%, 0.1

[search]
epochs = 4
milestones = 2, 3
batch_size = 16
attack = fgsm_rs

[attack]
epsilon = 0.05
eval = pgd20, l2pgd10
epsilons = 0.05, 0.1

[r2s]
candidate_sets = 0.05, 0.1 | 0.2
adaptive = none, eot
"""


def _write(tmp_path, text: str):
    path = tmp_path / "run.ini"
    path.write_text(text, encoding="utf-8")
    return path


@pytest.mark.parametrize(
    "name,norm,steps,alpha,random_start",
    [
        ("fgsm", Norm.LINF, 1, 0.1, False),
        ("fgsm_rs", Norm.LINF, 1, 0.125, True),
        ("pgd7_rs", Norm.LINF, 7, 0.025, True),
        ("pgd20", Norm.LINF, 20, 0.025, False),
        ("l2pgd10", Norm.L2, 10, 0.025, False),
    ],
)
def test_named_presets(name, norm, steps, alpha, random_start):
    cfg = AttackConfig.named(name, 0.1)
    assert cfg.norm == norm
    assert cfg.steps == steps
    assert cfg.alpha == pytest.approx(alpha)
    assert cfg.random_start == random_start
    assert cfg.label == name


def test_unknown_attack():
    with pytest.raises(ConfigError, match="Unknown attack"):
        AttackConfig.named("cw", 0.1)


def test_load_run_config(tmp_path):
    config = load_run_config(_write(tmp_path, RUN_INI))
    assert config.name == "toy"
    assert config.seed == 3
    assert config.jobs == 2
    assert config.stages == ("search", "eval")
    assert config.inits == ("signed_kaiming_constant", "kaiming_normal")
    assert config.patterns == ("element", "row")
    assert config.ratios == pytest.approx((0.05, 0.1))
    assert config.search == SearchSchedule(epochs=4, milestones=(2, 3), batch_size=16)
    assert config.train == SearchSchedule()
    assert config.search_attack == "fgsm_rs"
    assert config.eval_attacks == ("pgd20", "l2pgd10")
    assert config.eval_epsilons == (0.05, 0.1)
    assert config.r2s_candidate_sets == ((0.05, 0.1), (0.2,))
    assert config.r2s_adaptive == ("none", "eot")


def test_l2_attacks_use_their_own_radius():
    config = RunConfig(epsilon=0.1, l2_epsilon=1.5)
    assert config.attack("pgd20").epsilon == 0.1
    assert config.attack("l2pgd20", 0.1).epsilon == 1.5
    assert config.search_attack_config().random_start


@pytest.mark.parametrize(
    "text,message",
    [
        ("[run]\nsed = 3\n", "Unknown key 'sed'"),
        ("[runner]\nseed = 3\n", r"Unknown section \[runner\]"),
        ("[run]\nseed = three\n", r"\[run\] seed"),
        ("[run]\nprecision = half\n", "Invalid precision"),
        ("[run]\nstages = search, deploy\n", "Invalid stage"),
        ("[network]\nratios = 0.5, 1.5\n", "ratio must lie"),
        ("[search]\nreinit_head = maybe\n", "not a boolean"),
    ],
)
def test_config_errors(tmp_path, text, message):
    with pytest.raises(ConfigError, match=message):
        load_run_config(_write(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read config"):
        load_run_config(tmp_path / "missing.ini")


def test_config_hash_is_stable():
    first = get_config_hash(RunConfig(seed=1).to_dict())
    assert first == get_config_hash(RunConfig(seed=1).to_dict())
    assert first != get_config_hash(RunConfig(seed=2).to_dict())
    assert len(first) == 16


def test_overrides():
    config = RunConfig().with_overrides(seed=9, jobs=None, ratios=(0.5,))
    assert config.seed == 9
    assert config.jobs == 1
    assert config.ratios == (0.5,)

    with pytest.raises(ConfigError, match="Unknown config fields"):
        RunConfig().with_overrides(colour="red")

    round_trip = RunConfig.from_dict(RunConfig(seed=4).to_dict())
    assert round_trip.seed == 4
    assert round_trip.search == SearchSchedule()
