"""Instruction -> task attributes -> module selection.

A :class:`Lexicon` is an ordered list of rules, each a case-insensitive
substring or regular expression mapped to an attribute label.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .algebra import DEFAULT_SCALE, GENERAL_QUERY, CompositionSpec
from .errors import ConfigError


class UnmatchedInstructionWarning(UserWarning):
    pass


class MissingModuleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Rule:
    pattern: str
    attribute: str
    regex: bool = False

    def __post_init__(self):
        if not self.pattern or not self.attribute:
            raise ConfigError("lexicon rules need a non-empty pattern and attribute")
        if self.regex:
            try:
                object.__setattr__(self, "_compiled", re.compile(self.pattern, re.IGNORECASE))
            except re.error as exc:
                raise ConfigError(f"bad regular expression {self.pattern!r}: {exc}") from None

    def matches(self, text: str) -> bool:
        if self.regex:
            return self._compiled.search(text) is not None
        return self.pattern.lower() in text.lower()


# Labels follow the attribute set used for the instruction-tuned training
# collection; patterns are keyword-level.
DEFAULT_RULES = (
    Rule("scientific", "Science"),
    Rule("science", "Science"),
    Rule(r"\bpaper\b", "Science", regex=True),
    Rule("answer", "QA"),
    Rule("question", "QA"),
    Rule("verify", "Fact-Checking"),
    Rule("claim", "Fact-Checking"),
    Rule("counter argue", "Fact-Checking"),
    Rule("fact", "Fact-Checking"),
    Rule("wikipedia", "Wikipedia"),
    Rule("summar", "Summarization"),
    Rule("news", "News"),
    Rule("medical", "Medical"),
    Rule(r"\bbiomedical\b", "Medical", regex=True),
    Rule("legal", "Legal"),
    Rule("dialogue", "Dialogue"),
    Rule("conversation", "Dialogue"),
    Rule("caption", "Caption"),
    Rule("paraphrase", "Sentence-Paraphrase"),
)


@dataclass(frozen=True)
class Lexicon:
    rules: tuple[Rule, ...]

    @classmethod
    def default(cls) -> "Lexicon":
        return cls(DEFAULT_RULES)

    @classmethod
    def from_json(cls, data) -> "Lexicon":
        """Build from a JSON array of ``{"pattern", "regex", "attribute"}`` (or a path to one)."""
        if isinstance(data, (str, Path)):
            try:
                data = json.loads(Path(data).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"lexicon is not valid JSON: {exc}") from None
        if not isinstance(data, list):
            raise ConfigError("lexicon must be a JSON array")
        rules = []
        for item in data:
            if not isinstance(item, dict) or set(item) - {"pattern", "regex", "attribute"}:
                raise ConfigError(f"bad lexicon entry: {item!r}")
            rules.append(Rule(str(item.get("pattern", "")), str(item.get("attribute", "")), bool(item.get("regex", False))))
        return cls(tuple(rules))

    def to_json(self) -> list[dict]:
        return [{"pattern": r.pattern, "regex": r.regex, "attribute": r.attribute} for r in self.rules]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    attributes: Mapping[str, float] = field(default_factory=dict)
    instruction: str | None = None

    def __post_init__(self):
        attrs = {str(k): float(v) for k, v in dict(self.attributes).items()}
        for k, v in attrs.items():
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"attribute weight for {k!r} must be finite and >= 0, got {v}")
        object.__setattr__(self, "attributes", attrs)

    def __hash__(self):
        return hash((self.name, tuple(sorted(self.attributes.items())), self.instruction))

    @classmethod
    def from_json(cls, data) -> "TaskSpec":
        if isinstance(data, (str, Path)):
            data = json.loads(Path(data).read_text(encoding="utf-8"))
        if not isinstance(data, dict) or "name" not in data:
            raise ConfigError("task spec must be an object with a 'name'")
        extra = set(data) - {"name", "instruction", "attributes"}
        if extra:
            raise ConfigError(f"unknown task spec keys: {sorted(extra)}")
        return cls(data["name"], data.get("attributes", {}), data.get("instruction"))

    def to_json(self) -> dict:
        d = {"name": self.name, "attributes": dict(self.attributes)}
        if self.instruction is not None:
            d["instruction"] = self.instruction
        return d


def decompose(instruction: str, lexicon: Lexicon | None = None, name: str = "task") -> TaskSpec:
    """Attributes whose rules match ``instruction``, each with weight 1.0.

    When nothing matches, the TaskSpec has no attributes (the general task) and an
    :class:`UnmatchedInstructionWarning` is issued.
    """
    lexicon = lexicon or Lexicon.default()
    found: dict[str, float] = {}
    for rule in lexicon.rules:
        if rule.attribute not in found and rule.matches(instruction):
            found[rule.attribute] = 1.0
    if not found:
        warnings.warn(f"no lexicon rule matches instruction {instruction!r}", UnmatchedInstructionWarning, stacklevel=2)
    return TaskSpec(name, dict(sorted(found.items())), instruction)


def select_modules(task: TaskSpec, available, scale: float = DEFAULT_SCALE, general: str = GENERAL_QUERY) -> CompositionSpec:
    """One term per attribute that has a trained module.

    ``available`` is anything supporting ``name in available``. Missing
    modules are dropped with a :class:`MissingModuleWarning`; the result
    degrades to the general prompt alone.
    """
    terms = []
    for attr, weight in task.attributes.items():
        if attr in available:
            terms.append((attr, weight))
        else:
            warnings.warn(f"no trained module for attribute {attr!r}; dropped", MissingModuleWarning, stacklevel=2)
    return CompositionSpec(tuple(terms), scale, general)
