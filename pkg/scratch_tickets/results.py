"""Result rows (CSV + JSON lines) and the run manifest."""
import csv
import json
import logging
import platform
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .checkpoint import TicketCheckpoint
from .const import RESULT_COLUMNS, STAGES, __version__
from .evaluate import EvalReport

_LOGGER = logging.getLogger(__name__)

Row = Dict[str, Any]


class SchemaError(ValueError):
    pass


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def report_row(
    report: EvalReport,
    stage: str,
    config_hash: str,
    checkpoint: Optional[TicketCheckpoint] = None,
    **extra: Any,
) -> Row:
    """One CSV row for a report, optionally describing the evaluated ticket."""
    row: Row = {column: None for column in RESULT_COLUMNS}
    row.update(
        config_hash=config_hash,
        stage=stage,
        model=report.model,
        split="test",
        samples=report.samples,
        natural_acc=report.natural_acc,
        robust_acc=report.robust_acc,
        attack_source=report.attack_source,
    )
    if report.attack is not None:
        row.update(
            attack=report.attack.label,
            norm=report.attack.norm.value,
            epsilon=report.attack.epsilon,
            alpha=report.attack.alpha,
            steps=report.attack.steps,
        )
    if checkpoint is not None:
        row.update(
            provenance=checkpoint.provenance.value,
            arch=checkpoint.spec_id.split(":")[0],
            init=checkpoint.init.method.value,
            pattern=checkpoint.pattern.value,
            ratio=checkpoint.ratio,
            seed=checkpoint.init.seed,
        )

    unknown = set(extra) - set(RESULT_COLUMNS)
    if unknown:
        raise SchemaError(f"Unknown result columns: {sorted(unknown)}")
    row.update(extra)
    return row


class ResultWriter:
    """Single writer for results.csv and results.jsonl.

    Writing a stage replaces that stage's previous rows; rows stay grouped in
    stage order, so an unchanged rerun rewrites byte-identical files.
    """

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)
        self.csv_path = self.run_dir / "results.csv"
        self.json_path = self.run_dir / "results.jsonl"

    def write_stage(self, stage: str, rows: Sequence[Row]) -> Path:
        kept = [row for row in read_results(self.csv_path, missing_ok=True) if row["stage"] != stage]
        combined = kept + [{column: _format(row.get(column)) for column in RESULT_COLUMNS} for row in rows]
        order = {name: index for index, name in enumerate(STAGES)}
        combined.sort(key=lambda row: order.get(row["stage"], len(order)))

        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.csv_path, "w", encoding="utf-8", newline="") as csv_file:
            writer = csv.DictWriter(csv_file, fieldnames=RESULT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(combined)

        with open(self.json_path, "w", encoding="utf-8") as json_file:
            for row in combined:
                json.dump(_typed(row), json_file, sort_keys=True)
                json_file.write("\n")

        _LOGGER.info("Wrote %s %s rows to %s", len(rows), stage, self.csv_path)
        return self.csv_path


def _typed(row: Mapping[str, str]) -> Dict[str, Any]:
    typed: Dict[str, Any] = {}
    for column in RESULT_COLUMNS:
        text = row.get(column, "")
        if text == "":
            typed[column] = None
            continue
        try:
            typed[column] = int(text) if text.lstrip("-").isdigit() else float(text)
        except ValueError:
            typed[column] = text
    return typed


def read_results(
    path: Union[str, Path],
    required: Iterable[str] = RESULT_COLUMNS,
    missing_ok: bool = False,
) -> List[Dict[str, str]]:
    """Rows of a results CSV as strings; missing columns raise SchemaError."""
    path = Path(path)
    if not path.exists():
        if missing_ok:
            return []
        raise FileNotFoundError(f"No results at {path}")

    with open(path, "r", encoding="utf-8", newline="") as csv_file:
        reader = csv.DictReader(csv_file)
        missing = [column for column in required if column not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path} is missing columns: {', '.join(missing)}")
        return [dict(row) for row in reader]


# -----------------------------------------------------------------------------


def write_manifest(
    run_dir: Union[str, Path],
    config: Dict[str, Any],
    config_hash: str,
    seed: int,
    stage: str,
    files: Dict[str, str],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Record config hash, seed, versions and the md5 of every written file."""
    path = Path(run_dir) / "manifest.json"
    manifest: Dict[str, Any] = {}
    if path.exists():
        with open(path, "r", encoding="utf-8") as manifest_file:
            manifest = json.load(manifest_file)

    manifest.update(
        config_hash=config_hash,
        seed=seed,
        version=__version__,
        numpy=np.__version__,
        python=platform.python_version(),
        config=config,
    )
    stages = manifest.setdefault("stages", {})
    stages[stage] = {"files": dict(sorted(files.items())), **(extra or {})}

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as manifest_file:
        json.dump(manifest, manifest_file, indent=2, sort_keys=True)
        manifest_file.write("\n")

    _LOGGER.debug("Wrote %s", path)
    return path
