"""Scenario documents bundled with the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def bundled_names() -> list[str]:
    root = resources.files(__package__)
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_path(name: str) -> Path:
    """Resolve a bundled scenario by bare name ("honest_payment")."""
    candidate = resources.files(__package__) / f"{name}.json"
    with resources.as_file(candidate) as path:
        if not path.exists():
            raise FileNotFoundError(
                f"no bundled scenario {name!r}; available: {', '.join(bundled_names())}"
            )
        return path


__all__ = ["bundled_names", "bundled_path"]
