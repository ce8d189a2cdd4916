"""Module arithmetic over prompt stacks and the composition rule.

Every operation returns a fresh :class:`PromptStack`; inputs are never
mutated. Coefficients are unrestricted reals, so scaling, averaging and
subtraction are all special cases of :func:`combine`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoder import PromptStack
from .errors import CompositionError, ExprSyntaxError, ModuleLookupError

GENERAL_QUERY = "general-query"
GENERAL_PASSAGE = "general-passage"
DEFAULT_SCALE = 0.5


@dataclass(frozen=True)
class CompositionSpec:
    """``P_general + (scale / N) * sum(coef_i * P_i)``, N = count of nonzero coefficients."""

    terms: tuple[tuple[str, float], ...] = ()
    scale: float = DEFAULT_SCALE
    general: str = GENERAL_QUERY

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((str(n), float(c)) for n, c in self.terms))
        if not all(np.isfinite(c) for _, c in self.terms) or not np.isfinite(self.scale):
            raise CompositionError("composition coefficients must be finite")

    @property
    def normalizer(self) -> int:
        return sum(1 for _, c in self.terms if c != 0.0)

    def names(self) -> list[str]:
        return [n for n, _ in self.terms]

    def with_scale(self, scale: float) -> "CompositionSpec":
        return CompositionSpec(self.terms, scale, self.general)

    def to_dict(self) -> dict:
        return {"general": self.general, "terms": [list(t) for t in self.terms], "scale": self.scale}

    def __str__(self) -> str:
        if not self.terms:
            return self.general
        body = " + ".join(f"{c:g}*{n}" for n, c in self.terms).replace("+ -", "- ")
        return f"{self.general} + {self.scale:g}/{self.normalizer}*({body})"


def _check_same(stacks: Sequence[PromptStack]) -> None:
    shape = stacks[0].values.shape
    for s in stacks[1:]:
        if s.values.shape != shape:
            raise CompositionError(f"prompt shape mismatch: {shape} vs {s.values.shape}")


def scale(w: float, p: PromptStack) -> PromptStack:
    if not np.isfinite(w):
        raise CompositionError("scale weight must be finite")
    return PromptStack(w * p.values)


def combine(stacks: Sequence[PromptStack], coefs: Sequence[float]) -> PromptStack:
    """Linear combination, accumulated left to right."""
    if not stacks or len(stacks) != len(coefs):
        raise CompositionError("need one coefficient per stack and at least one stack")
    _check_same(stacks)
    out = coefs[0] * stacks[0].values
    for s, c in zip(stacks[1:], coefs[1:]):
        out = out + c * s.values
    return PromptStack(out)


def add(a: PromptStack, b: PromptStack) -> PromptStack:
    _check_same([a, b])
    return PromptStack(a.values + b.values)


def average(stacks: Sequence[PromptStack]) -> PromptStack:
    if not stacks:
        raise CompositionError("cannot average an empty list of modules")
    _check_same(stacks)
    if len(stacks) == 1:
        return stacks[0].copy()
    total = stacks[0].values
    for s in stacks[1:]:
        total = total + s.values
    return PromptStack(total / len(stacks))


def subtract(a: PromptStack, b: PromptStack) -> PromptStack:
    _check_same([a, b])
    return PromptStack(a.values - b.values)


def _lookup(modules, name: str) -> PromptStack:
    try:
        return modules[name]
    except KeyError:
        raise ModuleLookupError(f"unknown module {name!r}") from None


def compose_final(spec: CompositionSpec, modules: Mapping[str, PromptStack]) -> PromptStack:
    """Final query-side prompt for a composition spec.

    ``modules`` is any mapping from name to stack (a plain dict or a
    :class:`~modret.registry.Registry`). With no nonzero terms the general
    stack is returned unchanged.
    """
    general = _lookup(modules, spec.general)
    live = [(n, c) for n, c in spec.terms if c != 0.0]
    stacks = [_lookup(modules, n) for n, _ in live]
    _check_same([general] + stacks)
    if not live:
        return general.copy()
    mix = combine(stacks, [c for _, c in live]).values
    return PromptStack(general.values + (spec.scale / len(live)) * mix)


def composed_stack(spec: CompositionSpec, modules: Mapping[str, PromptStack]) -> PromptStack:
    """The raw linear combination ``sum(coef_i * P_i)`` (no general, no scale)."""
    if not spec.terms:
        raise CompositionError("expression has no terms")
    stacks = [_lookup(modules, n) for n, _ in spec.terms]
    return combine(stacks, [c for _, c in spec.terms])


# expression parser ------------------------------------------------------

_NAME = re.compile(r"[A-Za-z0-9_-]+")
_NUMBER = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.coefs: dict[str, float] = {}

    def error(self, msg: str):
        raise ExprSyntaxError(msg, len(self.text[: self.pos].encode("utf-8")))

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def name(self) -> str:
        self.skip()
        m = _NAME.match(self.text, self.pos)
        if not m:
            self.error("expected module name")
        self.pos = m.end()
        return m.group()

    def emit(self, name: str, coef: float):
        self.coefs[name] = self.coefs.get(name, 0.0) + coef

    def term(self, sign: float):
        self.skip()
        coef = 1.0
        num = _NUMBER.match(self.text, self.pos)
        if num and self.text[num.end() :].lstrip().startswith("*"):
            coef = float(num.group())
            self.pos = num.end()
            self.expect("*")
            self.skip()
        word = self.name()
        if word == "avg" and self.peek() == "(":
            self.pos += 1
            names = [self.name()]
            while self.peek() == ",":
                self.pos += 1
                names.append(self.name())
            self.expect(")")
            for n in names:
                self.emit(n, sign * coef / len(names))
        else:
            self.emit(word, sign * coef)

    def parse(self) -> dict[str, float]:
        if not self.peek():
            return {}
        sign = 1.0
        if self.peek() in "+-":
            sign = -1.0 if self.peek() == "-" else 1.0
            self.pos += 1
        self.term(sign)
        while True:
            ch = self.peek()
            if not ch:
                return self.coefs
            if ch not in "+-":
                self.error(f"unexpected character {ch!r}")
            self.pos += 1
            self.term(-1.0 if ch == "-" else 1.0)


def parse_expr(text: str, scale: float = DEFAULT_SCALE, general: str = GENERAL_QUERY) -> CompositionSpec:
    """Parse ``"0.7*qa + 0.3*fc"``, ``"wiki_fc - wiki"``, ``"avg(sci, wiki)"`` ...

    Repeated names have their coefficients summed; an empty string yields a
    spec with no terms.
    """
    coefs = _Parser(text).parse()
    return CompositionSpec(tuple(coefs.items()), scale, general)
