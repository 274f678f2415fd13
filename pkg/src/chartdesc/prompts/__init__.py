"""Versioned prompt templates shipped with the package.

Each ``<name>.txt`` holds a ``version:`` line, then ``===SYSTEM===`` and
``===USER===`` sections using ``$placeholders``. ``fact_rules.txt`` is a shared
fragment that is substituted as ``$fact_rules``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template
from typing import Mapping, Optional

# Description-generation prompt, sent verbatim as the only user text.
GENERATION_PROMPT = "Write a description of the chart(s) in a paragraph of at least 150 words"

TEMPLATE_NAMES = (
    "extract_facts",
    "repair_facts",
    "extract_schema",
    "segment_levels",
    "faithfulness",
    "acuity",
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: str
    system: str
    user: str

    def render(self, **values: str) -> tuple[str, str]:
        values.setdefault("fact_rules", fact_rules())
        return (
            Template(self.system).substitute(values).strip(),
            Template(self.user).substitute(values).strip(),
        )


def _read(name: str) -> str:
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def fact_rules() -> str:
    return _read("fact_rules").strip()


def parse_template(name: str, text: str) -> PromptTemplate:
    head, _, rest = text.partition("\n")
    if not head.startswith("version:"):
        raise ValueError(f"prompt {name!r} must start with a 'version:' line")
    system, sep, user = rest.partition("===USER===")
    if not sep or "===SYSTEM===" not in system:
        raise ValueError(f"prompt {name!r} needs ===SYSTEM=== and ===USER=== sections")
    system = system.split("===SYSTEM===", 1)[1]
    return PromptTemplate(name, head.split(":", 1)[1].strip(), system, user)


def load(name: str, overrides: Optional[Mapping[str, str]] = None) -> PromptTemplate:
    """Load a template, preferring a file path from ``overrides[name]``."""
    if overrides and name in overrides:
        return parse_template(name, Path(overrides[name]).read_text(encoding="utf-8"))
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    return parse_template(name, _read(name))


def versions(overrides: Optional[Mapping[str, str]] = None) -> dict[str, str]:
    return {name: load(name, overrides).version for name in TEMPLATE_NAMES}
