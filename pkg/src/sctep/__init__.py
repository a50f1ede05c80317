"""Stochastic AC security-constrained transmission expansion planning with
coalitional valuation of investment options."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_case_path(name: str = "case5") -> Path:
    """Filesystem path of a bundled case file (e.g. 'case5')."""
    return Path(resources.files("sctep").joinpath(f"cases/{name}.json"))
