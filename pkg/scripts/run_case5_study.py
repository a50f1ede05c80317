"""Full coalitional study of the bundled 5-bus case.

Runs both valuation metrics end to end: baseline solve, option screening,
exact 256-coalition games, Shapley ranking, and the long-format
marginal-contribution tables (the data behind violin plots). Artifacts land
in ./case5_study/ with journals, so an interrupted run resumes.

Usage: python scripts/run_case5_study.py [workers]
"""

import sys
import time
from pathlib import Path

import numpy as np

from sctep import bundled_case_path
from sctep.cli import main as cli


def run(workers: int = 1) -> None:
    case = str(bundled_case_path())
    out = Path("case5_study")
    out.mkdir(exist_ok=True)
    w = str(workers)

    print("== validate")
    assert cli(["validate", case]) == 0

    for objective in ("curtailment", "cost"):
        print(f"\n== baseline and grand-coalition solves ({objective})")
        assert cli(["solve", case, "--objective", objective, "--coalition", "none",
                    "--out", str(out / f"solve_{objective}_none.json")]) == 0
        assert cli(["solve", case, "--objective", objective, "--coalition", "all",
                    "--out", str(out / f"solve_{objective}_all.json")]) == 0

        print(f"\n== screening ({objective})")
        assert cli(["screen", case, "--objective", objective,
                    "--out", str(out / f"screen_{objective}.csv"),
                    "--workers", w]) == 0

        print(f"\n== exact game over all 8 options ({objective})")
        t0 = time.perf_counter()
        assert cli(["game", case, "--objective", objective, "--exact",
                    "--workers", w,
                    "--run-dir", str(out / f"run_{objective}"),
                    "--out", str(out / f"game_{objective}.json")]) == 0
        print(f"   game wall time: {time.perf_counter() - t0:.0f}s")

        assert cli(["report", str(out / f"game_{objective}.json"),
                    "--format", "csv", "--out", str(out / f"mc_{objective}.csv")]) == 0
        assert cli(["report", str(out / f"game_{objective}.json"),
                    "--format", "json", "--out", str(out / f"report_{objective}.json")]) == 0

    print(f"\nartifacts in {out}/")


if __name__ == "__main__":
    run(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
