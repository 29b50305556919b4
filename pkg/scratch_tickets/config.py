"""Attack, schedule and run configuration"""
import configparser
import re
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from .const import DEFAULT_BOUNDS, STAGES


class ConfigError(ValueError):
    pass


class Norm(str, Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class AttackConfig:
    """Additive perturbation attack: FGSM, FGSM-RS, PGD-t (L-inf or L2)."""

    norm: Norm
    epsilon: float
    """Radius of the perturbation ball in input units ([0, 1] scale for images)"""

    alpha: float
    """Step size"""

    steps: int
    random_start: bool = False
    bounds: Tuple[float, float] = DEFAULT_BOUNDS
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        # epsilon == 0 is the null attack: x_adv == x
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.bounds[0] < self.bounds[1]:
            raise ConfigError(f"bounds must satisfy lo < hi, got {self.bounds}")

    @property
    def label(self) -> str:
        return self.name or f"{self.norm.value}-pgd{self.steps}"

    @staticmethod
    def named(
        name: str,
        epsilon: float,
        alpha: Optional[float] = None,
        bounds: Tuple[float, float] = DEFAULT_BOUNDS,
    ) -> "AttackConfig":
        """Build a preset: fgsm, fgsm_rs, pgdN, pgdN_rs, l2pgdN, l2pgdN_rs.

        Default step sizes: FGSM uses epsilon, FGSM-RS 1.25 * epsilon and
        every PGD variant epsilon / 4.
        """
        key = name.strip().lower()
        if key == "fgsm":
            return AttackConfig(Norm.LINF, epsilon, _step(alpha, epsilon, 1.0), 1, False, bounds, key)

        if key == "fgsm_rs":
            return AttackConfig(Norm.LINF, epsilon, _step(alpha, epsilon, 1.25), 1, True, bounds, key)

        match = re.fullmatch(r"(l2)?pgd(\d+)(_rs)?", key)
        if match is None:
            raise ConfigError(f"Unknown attack '{name}'. Use fgsm, fgsm_rs, pgdN[_rs] or l2pgdN[_rs]")

        norm = Norm.L2 if match.group(1) else Norm.LINF
        steps = int(match.group(2))
        return AttackConfig(
            norm, epsilon, _step(alpha, epsilon, 0.25), steps, bool(match.group(3)), bounds, key
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.label,
            "norm": self.norm.value,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "steps": self.steps,
            "random_start": self.random_start,
            "bounds": list(self.bounds),
        }


def _step(alpha: Optional[float], epsilon: float, factor: float) -> float:
    if alpha is not None:
        return alpha
    # keep alpha > 0 for the null attack
    return factor * epsilon if epsilon > 0 else 1e-3


@dataclass(frozen=True)
class SearchSchedule:
    """SGD with momentum and step decay at milestone epochs."""

    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    milestones: Tuple[int, ...] = (15, 23)
    gamma: float = 0.1
    weight_decay: float = 0.0
    batch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or self.gamma <= 0:
            raise ConfigError("learning rate and decay factor must be strictly positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for milestone in self.milestones if epoch >= milestone)
        return self.lr * (self.gamma ** decays)

    @staticmethod
    def from_dict(config: Dict[str, Any]) -> "SearchSchedule":
        return SearchSchedule(**config)


# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment run depends on."""

    name: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    jobs: int = 1
    precision: str = "double"
    dataset: str = "mnist"
    train_limit: int = 0
    test_limit: int = 0
    eval_batch_size: int = 256
    stages: Tuple[str, ...] = ("search",)
    #
    arch: str = "desk_cnn"
    inits: Tuple[str, ...] = ("signed_kaiming_constant",)
    patterns: Tuple[str, ...] = ("element",)
    ratios: Tuple[float, ...] = (0.05, 0.1, 0.2)
    #
    search: SearchSchedule = field(default_factory=SearchSchedule)
    search_attack: str = "pgd7_rs"
    source: str = ""
    reinit_head: bool = False
    random_baseline: bool = False
    dense_baseline: str = ""
    #
    train: SearchSchedule = field(default_factory=SearchSchedule)
    train_mode: str = "adversarial"
    #
    finetune: SearchSchedule = field(default_factory=SearchSchedule)
    finetune_mode: str = "inherit"
    finetune_checkpoints: Tuple[str, ...] = ()
    #
    epsilon: float = 0.1
    alpha: Optional[float] = None
    eval_attacks: Tuple[str, ...] = ("pgd20",)
    epsilons: Tuple[float, ...] = ()
    l2_epsilon: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    #
    eval_checkpoints: Tuple[str, ...] = ()
    transfer_checkpoints: Tuple[str, ...] = ()
    r2s_checkpoints: Tuple[str, ...] = ()
    r2s_adaptive: Tuple[str, ...] = ("none", "eot", "ensemble")
    r2s_mode: str = "both"
    r2s_per_batch: bool = False
    r2s_candidate_sets: Tuple[Tuple[float, ...], ...] = ()
    distance_checkpoints: Tuple[str, ...] = ()
    distance_epsilons: Tuple[float, ...] = (0.05, 0.1, 0.2)
    plot_kinds: Tuple[str, ...] = ("ratio_curve", "transfer_heatmap", "distance_bars")

    def __post_init__(self):
        _choice("precision", self.precision, ("double", "single"))
        _choice("dataset", self.dataset, ("mnist", "fashion-mnist", "cifar10", "toy"))
        _choice("train_mode", self.train_mode, ("natural", "adversarial"))
        _choice("finetune_mode", self.finetune_mode, ("inherit", "reinit", "both"))
        _choice("r2s_mode", self.r2s_mode, ("sampled", "exact", "both"))
        for stage in self.stages:
            _choice("stage", stage, STAGES)
        for adaptive in self.r2s_adaptive:
            _choice("r2s adaptive", adaptive, ("none", "eot", "ensemble"))
        for kind in self.plot_kinds:
            _choice("plot kind", kind, ("ratio_curve", "transfer_heatmap", "distance_bars"))
        for ratio in self.ratios:
            if not 0 < ratio <= 1:
                raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if not self.lo < self.hi:
            raise ConfigError(f"lo must be < hi, got {self.lo}, {self.hi}")

    @property
    def bounds(self) -> Tuple[float, float]:
        return (self.lo, self.hi)

    @property
    def eval_epsilons(self) -> Tuple[float, ...]:
        return self.epsilons or (self.epsilon,)

    def attack(self, name: str, epsilon: Optional[float] = None) -> AttackConfig:
        """Named attack at `epsilon` (L2 presets use l2_epsilon)."""
        if name.lower().startswith("l2"):
            radius = self.l2_epsilon
        else:
            radius = self.epsilon if epsilon is None else epsilon
        return AttackConfig.named(name, radius, self.alpha, self.bounds)

    def search_attack_config(self) -> AttackConfig:
        return self.attack(self.search_attack)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"Unknown config fields: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @staticmethod
    def from_dict(config: Dict[str, Any]) -> "RunConfig":
        values = dict(config)
        for key in ("search", "train", "finetune"):
            if isinstance(values.get(key), dict):
                values[key] = SearchSchedule.from_dict(values[key])
        return RunConfig(**values)

    @staticmethod
    def load(path: Union[str, Path]) -> "RunConfig":
        return load_run_config(path)


def _choice(label: str, value: str, choices: Tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(f"Invalid {label} '{value}'. Choices: {list(choices)}")


# -----------------------------------------------------------------------------
# INI schema


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text}")


def parse_ratio(text: str) -> float:
    text = text.strip()
    if text.endswith("%"):
        return float(text[:-1]) / 100.0
    return float(text)


def _list(parse: Callable[[str], Any]) -> Callable[[str], Tuple[Any, ...]]:
    def parse_list(text: str) -> Tuple[Any, ...]:
        return tuple(parse(item) for item in text.split(",") if item.strip())

    return parse_list


def _strip(text: str) -> str:
    return text.strip()


def _candidate_sets(text: str) -> Tuple[Tuple[float, ...], ...]:
    return tuple(_list(parse_ratio)(group) for group in text.split("|") if group.strip())


_SCHEDULE_KEYS: Dict[str, Callable[[str], Any]] = {
    "epochs": int,
    "lr": float,
    "momentum": float,
    "milestones": _list(int),
    "gamma": float,
    "weight_decay": float,
    "batch_size": int,
}

_SCHEMA: Dict[str, Dict[str, Tuple[str, Callable[[str], Any]]]] = {
    "run": {
        "name": ("name", _strip),
        "output_dir": ("output_dir", _strip),
        "seed": ("seed", int),
        "jobs": ("jobs", int),
        "precision": ("precision", _strip),
        "dataset": ("dataset", _strip),
        "train_limit": ("train_limit", int),
        "test_limit": ("test_limit", int),
        "eval_batch_size": ("eval_batch_size", int),
        "stages": ("stages", _list(_strip)),
    },
    "network": {
        "arch": ("arch", _strip),
        "init": ("inits", _list(_strip)),
        "pattern": ("patterns", _list(_strip)),
        "ratios": ("ratios", _list(parse_ratio)),
    },
    "search": {
        "attack": ("search_attack", _strip),
        "source": ("source", _strip),
        "reinit_head": ("reinit_head", _bool),
        "random_baseline": ("random_baseline", _bool),
        "dense_baseline": ("dense_baseline", _strip),
    },
    "train": {"mode": ("train_mode", _strip)},
    "finetune": {
        "mode": ("finetune_mode", _strip),
        "checkpoints": ("finetune_checkpoints", _list(_strip)),
    },
    "attack": {
        "epsilon": ("epsilon", float),
        "alpha": ("alpha", float),
        "eval": ("eval_attacks", _list(_strip)),
        "epsilons": ("epsilons", _list(float)),
        "l2_epsilon": ("l2_epsilon", float),
        "lo": ("lo", float),
        "hi": ("hi", float),
    },
    "eval": {"checkpoints": ("eval_checkpoints", _list(_strip))},
    "transfer": {"checkpoints": ("transfer_checkpoints", _list(_strip))},
    "r2s": {
        "checkpoints": ("r2s_checkpoints", _list(_strip)),
        "adaptive": ("r2s_adaptive", _list(_strip)),
        "mode": ("r2s_mode", _strip),
        "per_batch": ("r2s_per_batch", _bool),
        "candidate_sets": ("r2s_candidate_sets", _candidate_sets),
    },
    "distance": {
        "checkpoints": ("distance_checkpoints", _list(_strip)),
        "epsilons": ("distance_epsilons", _list(float)),
    },
    "plot": {"kinds": ("plot_kinds", _list(_strip))},
}

_SCHEDULE_SECTIONS = ("search", "train", "finetune")


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Parse an INI run description; unknown sections or keys are errors."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as config_file:
            parser.read_file(config_file)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"Cannot read config {path}: {err}") from err

    values: Dict[str, Any] = {}
    schedules: Dict[str, Dict[str, Any]] = {section: {} for section in _SCHEDULE_SECTIONS}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"Unknown section [{section}] in {path}")

        for key, text in parser.items(section):
            try:
                if key in _SCHEMA[section]:
                    field_name, parse = _SCHEMA[section][key]
                    values[field_name] = parse(text)
                elif section in _SCHEDULE_SECTIONS and key in _SCHEDULE_KEYS:
                    schedules[section][key] = _SCHEDULE_KEYS[key](text)
                else:
                    raise ConfigError(f"Unknown key '{key}' in section [{section}] of {path}")
            except ValueError as err:
                if isinstance(err, ConfigError):
                    raise
                raise ConfigError(f"[{section}] {key} = {text!r}: {err}") from err

    for section, schedule in schedules.items():
        values[section] = SearchSchedule(**schedule)

    return RunConfig(**values)
