"""Stage pipelines for one RunConfig.

Every stage writes into runs/<config hash>/: checkpoints/, results.csv,
results.jsonl, plots/ and manifest.json.
"""
import glob
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from .checkpoint import Provenance, TicketCheckpoint
from .config import AttackConfig, RunConfig
from .const import STAGES
from .datasets import Dataset, load_dataset
from .evaluate import EvalReport, evaluate, feature_distance, transfer_matrix
from .file_hash import get_config_hash, get_file_hash
from .initializers import InitSpec
from .masking import Pattern
from .nets import NetworkSpec, network_spec
from .plot import group_rows, plot, plot_filename, select_rows
from .prng import Prng
from .r2s import R2SPolicy, r2s_evaluate, r2s_overhead
from .results import ResultWriter, Row, SchemaError, read_results, report_row, write_manifest
from .search import finetune_ticket, random_mask_ticket, search_rst, search_rtt, train_dense
from .tensor import set_default_dtype

_LOGGER = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = ".rstk"

T = TypeVar("T")
R = TypeVar("R")


class StageError(RuntimeError):
    """An error raised inside a pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _key(value: float) -> str:
    return f"{value:.6g}"


class Runner:
    def __init__(self, config: RunConfig, data_root: Optional[Union[str, Path]] = None):
        self.config = config
        self.config_hash = get_config_hash(config.to_dict())
        self.run_dir = Path(config.output_dir) / self.config_hash
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.plot_dir = self.run_dir / "plots"
        self.dtype = np.float64 if config.precision == "double" else np.float32
        self.prng = Prng(config.seed)
        self.writer = ResultWriter(self.run_dir)
        self.data_root = data_root
        self._dataset: Optional[Dataset] = None

    # -------------------------------------------------------------------------

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            cfg = self.config
            self._dataset = load_dataset(
                cfg.dataset, self.data_root, cfg.train_limit, cfg.test_limit, cfg.seed, self.dtype
            )
            _LOGGER.info(
                "Dataset %s: %s train / %s test, input %s",
                self._dataset.name,
                len(self._dataset.train),
                len(self._dataset.test),
                self._dataset.input_shape,
            )
        return self._dataset

    def network_spec(self) -> NetworkSpec:
        return network_spec(self.config.arch, self.dataset.input_shape, self.dataset.num_classes)

    def attacks(self) -> List[AttackConfig]:
        """Every configured eval attack at every configured epsilon."""
        seen: Dict[Tuple[str, float], AttackConfig] = {}
        for name in self.config.eval_attacks:
            for epsilon in self.config.eval_epsilons:
                attack = self.config.attack(name, epsilon)
                seen.setdefault((attack.label, attack.epsilon), attack)
        return list(seen.values())

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Results in item order; independent items fan out over --jobs threads."""
        if self.config.jobs == 1 or len(items) < 2:
            return [fn(item) for item in items]

        with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
            return list(executor.map(fn, items))

    def run(self, stage: str) -> Path:
        if stage not in STAGES:
            raise StageError(stage, f"Unknown stage. Choices: {list(STAGES)}")

        set_default_dtype(self.dtype)
        _LOGGER.info("Stage %s -> %s", stage, self.run_dir)
        try:
            getattr(self, f"_stage_{stage}")()
        except StageError:
            raise
        except Exception as err:
            raise StageError(stage, f"{type(err).__name__}: {err}") from err

        return self.run_dir

    # -------------------------------------------------------------------------
    # checkpoints and rows

    def _save(self, ticket: TicketCheckpoint, name: str, rows: Sequence[Row] = ()) -> Path:
        """Store the ticket with its accuracies from `rows` as metrics."""
        for row in rows:
            ticket.metrics["natural_acc"] = row["natural_acc"]
            if row["robust_acc"] is not None:
                ticket.metrics[f"{row['attack']}@{_key(row['epsilon'])}"] = row["robust_acc"]
        return ticket.save(self.checkpoint_dir / f"{name}{CHECKPOINT_SUFFIX}")

    def _checkpoints(self, patterns: Sequence[str]) -> List[Path]:
        if not patterns:
            paths = sorted(self.checkpoint_dir.glob(f"*{CHECKPOINT_SUFFIX}"))
            if not paths:
                raise FileNotFoundError(f"No checkpoints in {self.checkpoint_dir}")
            return paths

        paths: List[Path] = []
        for pattern in patterns:
            matches = sorted(glob.glob(pattern)) or sorted(glob.glob(str(self.checkpoint_dir / pattern)))
            if not matches:
                raise FileNotFoundError(f"No checkpoint matches {pattern}")
            paths.extend(Path(match) for match in matches if Path(match) not in paths)
        return paths

    def _load(self, patterns: Sequence[str]) -> List[Tuple[str, TicketCheckpoint]]:
        return [(path.stem, TicketCheckpoint.load(path)) for path in self._checkpoints(patterns)]

    def _eval_rows(self, stage: str, name: str, ticket: TicketCheckpoint) -> List[Row]:
        network = ticket.to_network(self.dtype)
        test = self.dataset.test
        rows = []
        for attack in self.attacks():
            report = evaluate(
                network,
                test,
                attack,
                self.prng.split("eval", name, attack.label, _key(attack.epsilon)),
                self.config.eval_batch_size,
                name=name,
            )
            rows.append(report_row(report, stage, self.config_hash, ticket))
        return rows

    def _finish(self, stage: str, rows: Sequence[Row], files: Iterable[Path], extra: Optional[Dict[str, Any]] = None):
        if rows:
            self.writer.write_stage(stage, rows)

        hashes = {str(path.relative_to(self.run_dir)): get_file_hash(path) for path in files}
        for path in (self.writer.csv_path, self.writer.json_path):
            if rows and path.exists():
                hashes[path.name] = get_file_hash(path)
        write_manifest(
            self.run_dir, self.config.to_dict(), self.config_hash, self.config.seed, stage, hashes, extra
        )

    # -------------------------------------------------------------------------
    # stages

    def _stage_search(self) -> None:
        cfg = self.config
        dataset = self.dataset
        spec = self.network_spec()
        attack = cfg.search_attack_config()
        source = TicketCheckpoint.load(cfg.source) if cfg.source else None
        jobs = [(init, pattern, ratio) for init in cfg.inits for pattern in cfg.patterns for ratio in cfg.ratios]

        def job(key: Tuple[str, str, float]) -> List[Tuple[str, TicketCheckpoint]]:
            init_name, pattern, ratio = key
            prng = self.prng.split("search", init_name, pattern, _key(ratio))
            init = InitSpec(init_name, cfg.seed)
            if source is not None:
                ticket = search_rtt(
                    source, dataset, ratio, Pattern(pattern), attack, cfg.search, prng, cfg.reinit_head, dtype=self.dtype
                )
                prefix = "rtt-adv" if ticket.provenance == Provenance.ADVERSARIAL_RTT else "rtt-nat"
            else:
                ticket = search_rst(spec, init, dataset, ratio, Pattern(pattern), attack, cfg.search, prng, dtype=self.dtype)
                prefix = "rst"

            tickets = [(f"{prefix}-{init_name}-{pattern}-r{_key(ratio)}", ticket)]
            if cfg.random_baseline and source is None:
                baseline = random_mask_ticket(
                    spec, init, ratio, Pattern(pattern), prng.split("random"), dataset.train, dtype=self.dtype
                )
                tickets.append((f"random-{init_name}-{pattern}-r{_key(ratio)}", baseline))
            return tickets

        rows: List[Row] = []
        files: List[Path] = []
        for tickets in self._map(job, jobs):
            for name, ticket in tickets:
                ticket_rows = self._eval_rows("search", name, ticket)
                files.append(self._save(ticket, name, ticket_rows))
                rows.extend(ticket_rows)

        if cfg.dense_baseline:
            path = Path(cfg.dense_baseline)
            rows.extend(self._eval_rows("search", path.stem, TicketCheckpoint.load(path)))

        self._finish("search", rows, files)

    def _stage_train(self) -> None:
        cfg = self.config
        init = InitSpec(cfg.inits[0], cfg.seed)
        ticket = train_dense(
            self.network_spec(),
            init,
            self.dataset,
            cfg.train_mode,
            cfg.search_attack_config(),
            cfg.train,
            self.prng.split("train", cfg.train_mode),
            dtype=self.dtype,
        )
        name = f"dense-{cfg.train_mode}"
        rows = self._eval_rows("train", name, ticket)
        path = self._save(ticket, name, rows)
        self._finish("train", rows, [path])

    def _stage_finetune(self) -> None:
        cfg = self.config
        modes = ("inherit", "reinit") if cfg.finetune_mode == "both" else (cfg.finetune_mode,)
        patterns = cfg.finetune_checkpoints or (f"rst-*{CHECKPOINT_SUFFIX}",)
        attack = cfg.search_attack_config()
        rows: List[Row] = []
        files: List[Path] = []
        for stem, ticket in self._load(patterns):
            for mode in modes:
                tuned = finetune_ticket(
                    ticket,
                    mode,
                    self.dataset,
                    attack,
                    cfg.finetune,
                    self.prng.split("finetune", stem, mode),
                    dtype=self.dtype,
                )
                name = f"ft-{mode}-{stem}"
                tuned_rows = self._eval_rows("finetune", name, tuned)
                files.append(self._save(tuned, name, tuned_rows))
                rows.extend(tuned_rows)

        self._finish("finetune", rows, files)

    def _stage_eval(self) -> None:
        rows: List[Row] = []
        for stem, ticket in self._load(self.config.eval_checkpoints):
            rows.extend(self._eval_rows("eval", stem, ticket))
        self._finish("eval", rows, [])

    def _stage_transfer(self) -> None:
        loaded = self._load(self.config.transfer_checkpoints)
        names = [stem for stem, _ in loaded]
        networks = [ticket.to_network(self.dtype) for _, ticket in loaded]
        test = self.dataset.test
        batch_size = self.config.eval_batch_size
        natural = [evaluate(network, test, batch_size=batch_size).natural_acc for network in networks]

        rows: List[Row] = []
        for attack in self.attacks():
            prng = self.prng.split("transfer", attack.label, _key(attack.epsilon))
            matrix = transfer_matrix(networks, test, attack, prng, batch_size)
            for i, source in enumerate(names):
                for j, (target, ticket) in enumerate(loaded):
                    report = EvalReport(target, natural[j], float(matrix[i, j]), len(test), attack, source)
                    rows.append(report_row(report, "transfer", self.config_hash, ticket))

        self._finish("transfer", rows, [])

    def _candidate_sets(self, loaded: List[Tuple[str, TicketCheckpoint]]) -> List[List[Tuple[str, TicketCheckpoint]]]:
        if not self.config.r2s_candidate_sets:
            return [loaded]

        sets = []
        for ratios in self.config.r2s_candidate_sets:
            chosen = [item for item in loaded if any(np.isclose(item[1].ratio, ratio) for ratio in ratios)]
            if not chosen:
                raise FileNotFoundError(f"No candidate checkpoint has a ratio in {list(ratios)}")
            sets.append(chosen)
        return sets

    def _stage_r2s(self) -> None:
        cfg = self.config
        modes = ("sampled", "exact") if cfg.r2s_mode == "both" else (cfg.r2s_mode,)
        test = self.dataset.test
        rows: List[Row] = []
        overheads: Dict[str, Dict[str, float]] = {}
        for candidates in self._candidate_sets(self._load(cfg.r2s_checkpoints)):
            policy = R2SPolicy([ticket for _, ticket in candidates], per_batch=cfg.r2s_per_batch, dtype=self.dtype)
            overheads[policy.label] = r2s_overhead(policy)
            first = policy.candidates[0]
            for attack in self.attacks():
                for adaptive in cfg.r2s_adaptive:
                    for mode in modes:
                        prng = self.prng.split("r2s", policy.label, attack.label, _key(attack.epsilon), adaptive)
                        report = r2s_evaluate(
                            policy, test, attack, adaptive, prng, mode, cfg.eval_batch_size
                        )
                        rows.append(
                            report_row(
                                report,
                                "r2s",
                                self.config_hash,
                                provenance=f"R2S:{first.provenance.value}",
                                arch=first.spec_id.split(":")[0],
                                init=first.init.method.value,
                                pattern=first.pattern.value,
                                seed=first.init.seed,
                            )
                        )

        self._finish("r2s", rows, [], {"overhead": overheads})

    def _stage_distance(self) -> None:
        cfg = self.config
        test = self.dataset.test
        lo, hi = self.dataset.bounds
        rows: List[Row] = []
        for stem, ticket in self._load(cfg.distance_checkpoints):
            network = ticket.to_network(self.dtype)
            report = evaluate(network, test, batch_size=cfg.eval_batch_size, name=stem)
            for epsilon in cfg.distance_epsilons:
                distance = feature_distance(
                    network,
                    test,
                    epsilon,
                    self.prng.split("distance", stem, _key(epsilon)),
                    cfg.eval_batch_size,
                    (lo, hi),
                )
                rows.append(
                    report_row(
                        report, "distance", self.config_hash, ticket, epsilon=epsilon, feature_distance=distance
                    )
                )

        self._finish("distance", rows, [])

    def _stage_plot(self) -> None:
        rows = read_results(self.writer.csv_path)
        files: List[Path] = []
        for kind in self.config.plot_kinds:
            selected = select_rows(rows, kind)
            if not selected:
                _LOGGER.warning("No rows for %s; skipping", kind)
                continue

            groups = group_rows(selected, ("attack", "epsilon")) if kind == "transfer_heatmap" else {(): selected}
            for keys, group in groups.items():
                path = self.plot_dir / plot_filename(kind, keys)
                files.append(plot(group, kind, path, filter_stages=False))

        if not files:
            raise SchemaError(f"Nothing to plot for {list(self.config.plot_kinds)} in {self.writer.csv_path}")

        self._finish("plot", [], files)


def run(config: RunConfig, stages: Optional[Sequence[str]] = None, data_root=None) -> Path:
    """Execute `stages` (default: the config's own list) in order."""
    runner = Runner(config, data_root)
    for stage in stages or config.stages:
        runner.run(stage)
    return runner.run_dir
