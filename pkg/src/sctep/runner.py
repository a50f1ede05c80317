"""Coalition evaluation engine: parallel solves, append-only journal, resume.

One work unit is one coalition = one NLP solve from a flat start, so results
are independent of worker count and completion order. Completed records are
appended to a newline-delimited JSON journal as they arrive; a manifest file
pins the case hash, objective, solver settings, and player list so a resumed
run can only reuse values produced under identical inputs.
"""

from __future__ import annotations

import json
import hashlib
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, asdict, replace
from pathlib import Path

from .network import NetworkCase, case_hash
from .formulation import build_nlp
from .solver import SolverSettings, solve

# Deterministic flat-start retry schedule for solves that fail to converge.
# The first rungs only change the barrier trajectory; the last rung also
# strengthens the flat-direction anchor, which shifts objective values by
# amounts far below every comparison tolerance (it fires on near-degenerate
# zero-curtailment coalitions where the default anchor is too weak).
RETRY_LADDER = (
    {},
    {"mu_init": 1.0},
    {"mu_init": 0.01, "max_iter": 800},
    {"tiebreak": 1e-3, "mu_init": 1.0, "max_iter": 800},
)


@dataclass(frozen=True)
class SolveRecord:
    mask: int
    objective: float
    status: str
    iterations: int
    wall_time: float
    attempts: int = 1


class JournalMismatchError(RuntimeError):
    """Journal on disk was produced under different inputs."""


def settings_hash(settings: SolverSettings) -> str:
    canon = json.dumps(settings.key(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def manifest_for(case: NetworkCase, objective_tag: str, players: tuple[int, ...],
                 settings: SolverSettings) -> dict:
    return {
        "case_hash": case_hash(case),
        "case_name": case.name,
        "objective": objective_tag,
        "players": list(players),
        "settings": settings.key(),
        "settings_hash": settings_hash(settings),
    }


class Journal:
    """Append-only run journal: manifest.json + values.jsonl in one directory."""

    def __init__(self, directory: str | Path, manifest: dict, resume: bool = False):
        self.dir = Path(directory)
        self.manifest_path = self.dir / "manifest.json"
        self.values_path = self.dir / "values.jsonl"
        self.dir.mkdir(parents=True, exist_ok=True)
        if self.manifest_path.exists():
            on_disk = json.loads(self.manifest_path.read_text())
            stable = {k: v for k, v in on_disk.items() if k not in ("created_at",)}
            want = dict(manifest)
            if stable != want:
                if not resume:
                    raise JournalMismatchError(
                        f"{self.dir}: journal already exists for different inputs")
                raise JournalMismatchError(
                    f"{self.dir}: manifest mismatch, refusing to reuse values "
                    f"(case/objective/settings/players differ)")
        else:
            doc = dict(manifest)
            doc["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def load_records(self) -> dict[int, SolveRecord]:
        out: dict[int, SolveRecord] = {}
        if not self.values_path.exists():
            return out
        for line in self.values_path.read_text().splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            rec = SolveRecord(mask=int(doc["mask"]), objective=float(doc["objective"]),
                              status=str(doc["status"]), iterations=int(doc["iterations"]),
                              wall_time=float(doc["wall_time"]),
                              attempts=int(doc.get("attempts", 1)))
            out.setdefault(rec.mask, rec)
        return out

    def append(self, rec: SolveRecord) -> None:
        with self.values_path.open("a") as fh:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def mask_option_ids(mask: int, players: tuple[int, ...]) -> frozenset[int]:
    return frozenset(players[i] for i in range(len(players)) if mask >> i & 1)


def solve_coalition(case: NetworkCase, objective_tag: str, mask: int,
                    players: tuple[int, ...], settings: SolverSettings) -> SolveRecord:
    problem = build_nlp(case, mask_option_ids(mask, players), objective_tag)
    t0 = time.perf_counter()
    result = None
    attempts = 0
    for overrides in RETRY_LADDER:
        attempts += 1
        result = solve(problem, replace(settings, **overrides) if overrides else settings)
        if result.is_optimal:
            break
    return SolveRecord(mask=mask, objective=result.objective, status=result.status,
                       iterations=result.iterations,
                       wall_time=time.perf_counter() - t0, attempts=attempts)


def _worker(args) -> SolveRecord:
    case, objective_tag, mask, players, settings = args
    return solve_coalition(case, objective_tag, mask, players, settings)


def execute(case: NetworkCase, objective_tag: str, masks, players: tuple[int, ...],
            settings: SolverSettings = SolverSettings(), workers: int = 1,
            journal: Journal | None = None) -> tuple[dict[int, SolveRecord], dict]:
    """Evaluate every coalition mask exactly once; returns (records, stats).

    Duplicate masks are deduplicated; masks already present in the journal are
    reused without re-solving. Store contents are a pure function of
    (case, objective, settings, plan) regardless of `workers`.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    plan = sorted(set(int(m) for m in masks))
    records: dict[int, SolveRecord] = {}
    if journal is not None:
        for mask, rec in journal.load_records().items():
            records[mask] = rec
    todo = [m for m in plan if m not in records]
    stats = {"requested": len(plan), "reused": len(plan) - len(todo), "solved": len(todo)}

    def note(rec: SolveRecord) -> None:
        records[rec.mask] = rec
        if journal is not None:
            journal.append(rec)

    if workers == 1 or len(todo) <= 1:
        for mask in todo:
            note(solve_coalition(case, objective_tag, mask, players, settings))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_worker, (case, objective_tag, m, players, settings))
                       for m in todo]
            for fut in as_completed(futures):
                note(fut.result())
    return {m: records[m] for m in plan}, stats
