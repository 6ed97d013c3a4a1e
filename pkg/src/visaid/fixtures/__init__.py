"""Shipped toy fixtures: a four-topic corpus small enough for sub-minute runs.

Regenerate with scripts/make_fixtures.py (deterministic).
"""

from importlib import resources
from pathlib import Path


def path(name: str) -> Path:
    """Filesystem path of a fixture file."""
    candidate = Path(str(resources.files(__package__) / name))
    if not candidate.exists():
        raise FileNotFoundError(f"fixture {name!r} not found")
    return candidate
