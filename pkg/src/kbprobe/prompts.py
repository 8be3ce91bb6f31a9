"""Prompt template registry and rendering."""

from __future__ import annotations

import re
import sys
from importlib import resources
from typing import Mapping, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TEMPLATE_KEYS = (
    "sequential.t1",
    "sequential.tn",
    "reflective.tn",
    "taxonomy.level1",
    "taxonomy.level2",
    "taxonomy.leaf_t1",
    "taxonomy.leaf_tn",
    "profiles.generate",
    "profiles.extract",
    "judge.dedup",
    "judge.audit",
)

POINTS_CAP = 200

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def load_default_templates() -> dict[str, str]:
    raw = resources.files("kbprobe").joinpath("templates.toml").read_text(encoding="utf-8")
    return dict(tomllib.loads(raw))


class TemplateRegistry:
    def __init__(self, overrides: Optional[Mapping[str, str]] = None):
        self.templates = load_default_templates()
        for key, value in (overrides or {}).items():
            if key not in TEMPLATE_KEYS:
                raise KeyError(f"unknown template key {key!r}")
            self.templates[key] = value

    def render(self, key: str, **values) -> str:
        template = self.templates[key]

        def fill(m: re.Match) -> str:
            name = m.group(1)
            if name not in values:
                raise KeyError(f"template {key!r} needs placeholder {{{name}}}")
            return str(values[name])

        # single pass, so braces inside substituted values are left alone
        return _PLACEHOLDER.sub(fill, template)


def format_points(points: Sequence[str], cap: int = POINTS_CAP) -> str:
    """Bullet list of the most recent `cap` points, noting how many were dropped."""
    omitted = max(0, len(points) - cap)
    lines = [f"- {p}" for p in points[omitted:]]
    if omitted:
        lines.insert(0, f"...and {omitted} earlier points omitted")
    return "\n".join(lines)


def extend_history(history: str, prompt: str, response: str) -> str:
    """Append one exchange to a flat transcript.

    Continuation prompts already begin with the prior transcript, so only the
    first prompt needs its own "User:" line.
    """
    head = prompt if history else f"User: {prompt}"
    return f"{head}\nAssistant: {response}"


def repair_suffix(existing: Sequence[str]) -> str:
    return "\nDo not repeat any of: " + "; ".join(existing) + "."
