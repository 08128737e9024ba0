"""
Result tables and run directories: CSV artefacts, manifests and stored clearings.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import pandas as pd

from . import config
from .market import ClearingProblem, ClearingResult
from .plp import PlanResult

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CLEARINGS = "clearings.json"
TRANSCRIPT = "transcript.jsonl"

# Column order and dtypes per table kind; the first column is the sort key.
SCHEMAS: Dict[str, Dict[str, str]] = {
    "switches": {
        "k": "int64",
        "served": "float64",
        "price": "float64",
        "energy": "float64",
        "total_cost": "float64",
        "locations": "object",
        "heuristic": "bool",
    },
    "der": {
        "K": "float64",
        "price": "float64",
        "served": "float64",
        "energy": "float64",
        "total_cost": "float64",
        "welfare": "float64",
        "net_welfare": "float64",
        "site_signal": "float64",
    },
    "steps": {
        "step": "int64",
        "lambda": "float64",
        "welfare": "float64",
        "iterations": "int64",
        "converged": "bool",
        "congested_lines": "int64",
    },
}


class ResultError(Exception):
    """Raised when a result table or run directory is malformed."""


@dataclass
class ResultTable:
    kind: str
    rows: List[Dict] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in SCHEMAS:
            raise ResultError(f"unknown table kind {self.kind}")
        key = self.key
        values = [row[key] for row in self.rows]
        if values != sorted(values):
            raise ResultError(f"rows sorted by {key} ascending")

    @property
    def key(self) -> str:
        return next(iter(SCHEMAS[self.kind]))

    @property
    def columns(self) -> List[str]:
        return list(SCHEMAS[self.kind])

    def frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=self.columns)
        return frame.astype(SCHEMAS[self.kind])

    def equals(self, other: "ResultTable") -> bool:
        return (
            self.kind == other.kind
            and self.metadata == other.metadata
            and self.frame().equals(other.frame())
        )


def switch_table(results: Sequence[PlanResult], metadata: Dict[str, str]) -> ResultTable:
    rows = [
        {
            "k": r.count,
            "served": r.served,
            "price": r.unit_price,
            "energy": r.energy,
            "total_cost": r.total_cost,
            "locations": r.plan.locations,
            "heuristic": r.heuristic,
        }
        for r in results
    ]
    return ResultTable("switches", rows, dict(metadata))


def der_table(results: Sequence[PlanResult], metadata: Dict[str, str]) -> ResultTable:
    rows = [
        {
            "K": r.plan.total_der,
            "price": r.unit_price,
            "served": r.served,
            "energy": r.energy,
            "total_cost": r.total_cost,
            "welfare": r.welfare,
            "net_welfare": r.net_welfare,
            "site_signal": r.site_signal if r.site_signal is not None else 0.0,
        }
        for r in results
    ]
    return ResultTable("der", rows, dict(metadata))


def step_table(
    results: Sequence[ClearingResult],
    iterations: Sequence[int],
    converged: Sequence[bool],
    metadata: Dict[str, str],
    tolerance: float = 1e-6,
) -> ResultTable:
    rows = [
        {
            "step": r.step,
            "lambda": r.duals.lam,
            "welfare": r.welfare,
            "iterations": it,
            "converged": ok,
            "congested_lines": sum(1 for m, n in zip(r.duals.mu, r.duals.nu) if m + n > tolerance),
        }
        for r, it, ok in zip(results, iterations, converged)
    ]
    return ResultTable("steps", rows, dict(metadata))


def write_table(table: ResultTable, path: Path) -> Path:
    """CSV with `# key=value` metadata lines ahead of the header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# kind={table.kind}\n")
        for key in sorted(table.metadata):
            handle.write(f"# {key}={table.metadata[key]}\n")
        table.frame().to_csv(handle, index=False, lineterminator="\n")
    logger.debug("wrote %s table with %d rows to %s", table.kind, len(table.rows), path)
    return path


def read_table(path: Path) -> ResultTable:
    path = Path(path)
    metadata: Dict[str, str] = {}
    kind = None
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            if key == "kind":
                kind = value
            else:
                metadata[key] = value
    if kind not in SCHEMAS:
        raise ResultError(f"{path} has no known table kind")
    frame = pd.read_csv(
        path,
        comment="#",
        float_precision="round_trip",
        keep_default_na=False,
        dtype={"locations": str} if kind == "switches" else None,
    )
    frame = frame.astype(SCHEMAS[kind])
    rows = frame.to_dict(orient="records")
    return ResultTable(kind, rows, metadata)


def table_metadata(scenario_digest: str, seed: int, command: str) -> Dict[str, str]:
    return {
        "scenario_digest": scenario_digest,
        "seed": str(seed),
        "code_version": config.CODE_VERSION,
        "command": command,
    }


@contextmanager
def run_directory(path: Path, command: str, scenario_digest: str, seed: int) -> Iterator["RunDirectory"]:
    """Open a run directory; the manifest is written on exit with every artefact recorded."""
    run = RunDirectory(Path(path), command, scenario_digest, seed)
    run.path.mkdir(parents=True, exist_ok=True)
    try:
        yield run
    finally:
        run.write_manifest()


@dataclass
class RunDirectory:
    path: Path
    command: str
    scenario_digest: str
    seed: int
    artifacts: List[str] = field(default_factory=list)
    extra: Dict = field(default_factory=dict)

    def file(self, name: str) -> Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.path / name

    def write_manifest(self) -> Path:
        manifest = {
            "command": self.command,
            "scenario_digest": self.scenario_digest,
            "seed": self.seed,
            "code_version": config.CODE_VERSION,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "artifacts": sorted(self.artifacts),
        }
        manifest.update(self.extra)
        target = self.path / MANIFEST
        target.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        logger.info("%s: %d artefacts in %s", self.command, len(self.artifacts), self.path)
        return target


def read_manifest(path: Path) -> Dict:
    target = Path(path) / MANIFEST
    if not target.exists():
        raise ResultError(f"{path} is not a run directory (no {MANIFEST})")
    return json.loads(target.read_text(encoding="utf-8"))


def write_clearings(pairs: Iterable[Tuple[ClearingProblem, ClearingResult]], path: Path) -> Path:
    records = [{"problem": p.to_dict(), "result": r.to_dict()} for p, r in pairs]
    Path(path).write_text(json.dumps(records, sort_keys=True), encoding="utf-8")
    return Path(path)


def read_clearings(path: Path) -> List[Tuple[ClearingProblem, ClearingResult]]:
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ResultError(f"cannot read stored clearings {path}: {exc}") from exc
    return [(ClearingProblem.from_dict(r["problem"]), ClearingResult.from_dict(r["result"])) for r in records]


def write_json(payload: Dict, path: Path) -> Path:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return Path(path)


def find_clearings(run_path: Path) -> Optional[Path]:
    target = Path(run_path) / CLEARINGS
    return target if target.exists() else None
