"""Prompt template loading and {{placeholder}} substitution.

Templates ship inside the package under ``eligo/prompts/`` and can be
overridden per site by pointing ``prompts_dir`` at a directory holding
files with the same names.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from .errors import PromptError

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")

TEMPLATE_NAMES = (
    "role_crc",
    "role_jd",
    "role_ie",
    "stance_pos",
    "stance_neg",
    "judge_r1",
    "judge_final",
    "convert",
    "refine",
)


def load_template(name: str, prompts_dir: str | Path | None = None) -> str:
    """Return the template text; a prompts_dir override wins over package data."""
    if prompts_dir is not None:
        override = Path(prompts_dir) / f"{name}.txt"
        if override.is_file():
            return override.read_text(encoding="utf-8")
    try:
        return resources.files("eligo").joinpath(f"prompts/{name}.txt").read_text(
            encoding="utf-8"
        )
    except FileNotFoundError:
        raise PromptError(f"no prompt template named {name!r}")


def render(template: str, **values: str) -> str:
    """Substitute {{name}} placeholders in a single pass.

    A placeholder with no value raises; substituted text is never rescanned,
    so values may safely contain braces.
    """

    def _substitute(match: re.Match) -> str:
        key = match.group(1)
        if key not in values:
            raise PromptError(f"template placeholder {{{{{key}}}}} has no value")
        return values[key]

    return _PLACEHOLDER_RE.sub(_substitute, template)
