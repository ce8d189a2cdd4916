"""Module-arithmetic experiments on synthetic worlds.

Every experiment follows the same recipe per seed: build a world, train the
general prompts on an even mix of every world attribute (phase 1), train
the attribute modules the experiment needs (phase 2), then score a grid of
cells. A cell is ``P_general + w * M`` where ``M`` is a named module or a
linear combination of modules; the composition that produced it is kept with the
result. Cells are averaged over seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .algebra import GENERAL_QUERY, CompositionSpec, combine, compose_final
from .decomposer import TaskSpec
from .encoder import Backbone, EncoderConfig, PromptStack, encode_texts
from .errors import ConfigError, ModuleLookupError
from .index import build_index, search_many
from .metrics import mean_metric, ndcg_at_k
from .numcore import derive_seed
from .synthgen import SynthConfig, SynthTask, gen_task, gen_world
from .trainer import TrainConfig, init_general, train_general, train_joint

KINDS = ("scaling", "addition", "subtraction", "combination", "zero-shot")


def _default_synth() -> SynthConfig:
    return SynthConfig(
        attributes=("alpha", "beta", "theta", "gamma", "delta"),
        sublexicon=16,
        shared=64,
        query_len=4,
        passage_len=6,
        hard_negatives=5,
        queries=200,
        passages=1500,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    synth: SynthConfig = field(default_factory=_default_synth)
    phase1: TrainConfig = field(
        default_factory=lambda: TrainConfig(phase=1, lr_general=3e-2, optimizer="adam", epochs=10)
    )
    phase2: TrainConfig = field(
        default_factory=lambda: TrainConfig(phase=2, lr_general=3e-5, lr_attribute=3e-2, optimizer="adam", epochs=10)
    )
    phase1_attributes: tuple[str, ...] | None = None  # None: every world attribute
    attr_a: str = "alpha"
    attr_b: str = "beta"
    attr_c: str = "theta"
    distractors: tuple[str, ...] = ("gamma", "delta")
    general_queries: int = 1000
    train_queries: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2)
    scale: float = 0.5
    scaling_weights: tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
    mix_weights: tuple[float, ...] = (0.7, 0.5, 0.3)
    k: int = 10

    def __post_init__(self):
        object.__setattr__(self, "distractors", tuple(self.distractors))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "scaling_weights", tuple(float(w) for w in self.scaling_weights))
        object.__setattr__(self, "mix_weights", tuple(float(w) for w in self.mix_weights))
        if self.phase1_attributes is not None:
            object.__setattr__(self, "phase1_attributes", tuple(self.phase1_attributes))
            bad = [n for n in self.phase1_attributes if n not in self.synth.attributes]
            if bad or not self.phase1_attributes:
                raise ConfigError(f"phase1_attributes must be a non-empty subset of the world, bad: {bad}")
        names = [self.attr_a, self.attr_b, self.attr_c, *self.distractors]
        if len(set(names)) != len(names):
            raise ConfigError("experiment attribute roles must be distinct")
        missing = [n for n in names if n not in self.synth.attributes]
        if missing:
            raise ConfigError(f"attributes {missing} are not in the synthetic world")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.synth.vocab_size != self.encoder.vocab_size:
            raise ConfigError("synth.vocab_size must equal encoder.vocab_size")
        if self.phase1.phase != 1 or self.phase2.phase != 2:
            raise ConfigError("phase1/phase2 configs have the wrong phase")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        for k in ("distractors", "seeds", "scaling_weights", "mix_weights"):
            d[k] = list(d[k])
        if self.phase1_attributes is not None:
            d["phase1_attributes"] = list(self.phase1_attributes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        nested = {"encoder": EncoderConfig, "synth": SynthConfig, "phase1": TrainConfig, "phase2": TrainConfig}
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown experiment config keys: {sorted(bad)}")
        base = cls()
        kw = {}
        for k, v in d.items():
            if k in nested:
                sub = getattr(base, k)
                sub_known = {f.name for f in fields(nested[k])}
                extra = set(v) - sub_known
                if extra:
                    raise ConfigError(f"unknown keys in {k}: {sorted(extra)}")
                kw[k] = replace(sub, **v)
            else:
                kw[k] = v
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# plans ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainTask:
    name: str
    weights: Mapping[str, float]  # query attribute mix
    spec: Mapping[str, float]  # attribute modules composed during training


@dataclass(frozen=True)
class Cell:
    column: str
    module: str | None  # expression for M, None for general only
    terms: tuple[tuple[str, float], ...]  # M as a combination of trained modules
    w: float


@dataclass(frozen=True)
class EvalRow:
    name: str
    weights: Mapping[str, float]
    cells: tuple[Cell, ...]


@dataclass(frozen=True)
class Plan:
    modules: tuple[str, ...]
    train: tuple[TrainTask, ...]
    rows: tuple[EvalRow, ...]


def _expr(terms) -> str:
    if len(terms) > 1 and len({c for _, c in terms}) == 1 and abs(terms[0][1] * len(terms) - 1) < 1e-12:
        return f"avg({','.join(n for n, _ in terms)})"
    out = ""
    for n, c in terms:
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        piece = n if mag == 1 else f"{mag:g}*{n}"
        out += (f" {sign} " if out else ("-" if c < 0 else "")) + piece
    return out


def _cell(column: str, terms, w: float) -> Cell:
    terms = tuple((n, float(c)) for n, c in terms)
    return Cell(column, _expr(terms), terms, float(w))


GENERAL_CELL = Cell("general", None, (), 0.0)


def make_plan(kind: str, cfg: ExperimentConfig) -> Plan:
    a, b, c = cfg.attr_a, cfg.attr_b, cfg.attr_c
    w = cfg.scale
    if kind == "scaling":
        cells = [GENERAL_CELL] + [_cell(f"w={x:g}", [(a, 1.0)], x) for x in cfg.scaling_weights]
        return Plan((a,), (TrainTask(a, {a: 1.0}, {a: 1.0}),), (EvalRow(a, {a: 1.0}, tuple(cells)),))
    if kind == "addition":
        cells = (
            GENERAL_CELL,
            _cell(a, [(a, 1.0)], w),
            _cell(b, [(b, 1.0)], w),
            _cell("sum", [(a, 1.0), (b, 1.0)], w),
            _cell("avg", [(a, 0.5), (b, 0.5)], w),
        )
        train = (TrainTask(a, {a: 1.0}, {a: 1.0}), TrainTask(b, {b: 1.0}, {b: 1.0}))
        return Plan((a, b), train, (EvalRow(f"{a}+{b}", {a: 0.5, b: 0.5}, cells),))
    if kind == "subtraction":
        ab = f"{a}_{b}"
        cells = (
            GENERAL_CELL,
            _cell(a, [(a, 1.0)], w),
            _cell(ab, [(ab, 1.0)], w),
            _cell(f"{ab}-{a}", [(ab, 1.0), (a, -1.0)], w),
        )
        train = (TrainTask(a, {a: 1.0}, {a: 1.0}), TrainTask(ab, {a: 0.5, b: 0.5}, {ab: 1.0}))
        return Plan((a, ab), train, (EvalRow(b, {b: 1.0}, cells),))
    if kind == "combination":
        mixes = [(1.0, 0.0)] + [(x, 1.0 - x) for x in cfg.mix_weights] + [(0.0, 1.0)]
        cells = [GENERAL_CELL]
        for x, y in mixes:
            terms = [(n, v) for n, v in ((a, x), (b, y)) if v != 0.0]
            label = a if y == 0 else b if x == 0 else f"{x:g}{a}+{y:g}{b}"
            cells.append(_cell(label, terms, w))
        rows = tuple(
            EvalRow(f"{x:g}{a}+{1 - x:g}{b}", {a: x, b: round(1.0 - x, 12)}, tuple(cells)) for x in cfg.mix_weights
        )
        train = (TrainTask(a, {a: 1.0}, {a: 1.0}), TrainTask(b, {b: 1.0}, {b: 1.0}))
        return Plan((a, b), train, rows)
    if kind == "zero-shot":
        train = (
            TrainTask(f"{a}+{b}", {a: 0.5, b: 0.5}, {a: 1.0, b: 1.0}),
            TrainTask(f"{a}+{c}", {a: 0.5, c: 0.5}, {a: 1.0, c: 1.0}),
        )

        def row(attrs):
            cells = (GENERAL_CELL, _cell("composed", [(n, 1.0 / len(attrs)) for n in attrs], w))
            return EvalRow("+".join(attrs), {n: 1.0 / len(attrs) for n in attrs}, cells)

        return Plan((a, b, c), train, (row([b, c]), row([a, b, c])))
    raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")


# report -----------------------------------------------------------------------


@dataclass
class ExperimentReport:
    kind: str
    seeds: list[int]
    config_digest: str
    rows: list[str]
    columns: list[str]
    cells: dict[str, dict[str, dict]]  # row -> column -> {mean, per_seed, spec, module}

    def mean(self, row: str, column: str) -> float:
        return self.cells[row][column]["mean"]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "seeds": self.seeds,
            "config_digest": self.config_digest,
            "rows": self.rows,
            "columns": self.columns,
            "cells": self.cells,
        }

    def table(self) -> str:
        head = ["task"] + self.columns
        body = []
        for r in self.rows:
            line = [r]
            for c in self.columns:
                cell = self.cells[r].get(c)
                line.append("-" if cell is None else f"{cell['mean']:.4f}")
            body.append(line)
        widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(v.ljust(widths[0]) if i == 0 else v.rjust(widths[i]) for i, v in enumerate(row))
        lines = [f"{self.kind}  NDCG@10 mean over seeds {self.seeds}", fmt(head), fmt(["-" * x for x in widths])]
        lines += [fmt(x) for x in body]
        return "\n".join(lines) + "\n"


# execution --------------------------------------------------------------------


def _task_seed(seed: int, name: str, split: str) -> int:
    return derive_seed(seed, f"task:{name}:{split}")


class Phase1Cache(dict):
    """In-memory store of phase-1 general prompts keyed by everything they depend on."""

    @staticmethod
    def key(cfg: ExperimentConfig, seed: int) -> str:
        d = {
            "seed": seed,
            "encoder": cfg.encoder.to_dict(),
            "synth": cfg.synth.to_dict(),
            "phase1": cfg.phase1.to_dict(),
            "phase1_attributes": cfg.phase1_attributes,
            "general_queries": cfg.general_queries,
        }
        return json.dumps(d, sort_keys=True)


def train_phase1(cfg: ExperimentConfig, backbone: Backbone, world, seed: int, cache: Phase1Cache | None = None):
    key = Phase1Cache.key(cfg, seed)
    if cache is not None and key in cache:
        q, p = cache[key]
        return q.copy(), p.copy()
    attrs = cfg.phase1_attributes or cfg.synth.attributes
    n = cfg.general_queries
    task = gen_task(world, {a: 1.0 / len(attrs) for a in attrs}, "general", _task_seed(seed, "general", "train"), queries=n,
                    passages=n * (1 + cfg.synth.hard_negatives), negative_attributes=[],
                    spec=TaskSpec("general"))
    res = train_general(backbone, task.passages, task.train_examples(), replace(cfg.phase1, seed=seed),
                        init=init_general(backbone, seed))
    if cache is not None:
        cache[key] = (res.general_query.copy(), res.general_passage.copy())
    return res.general_query, res.general_passage


def _eval_task(cfg: ExperimentConfig, world, row: EvalRow, seed: int) -> SynthTask:
    return gen_task(world, row.weights, row.name.replace("+", "_"), _task_seed(seed, row.name, "eval"),
                    negative_attributes=list(cfg.distractors))


def run_seed(kind: str, cfg: ExperimentConfig, seed: int, plan: Plan, cache: Phase1Cache | None = None,
             log: Callable[[str], None] | None = None) -> dict[str, dict[str, float]]:
    """Train and score every cell of ``plan`` for one seed."""
    say = log or (lambda s: None)
    backbone = Backbone.init(cfg.encoder)
    world = gen_world(replace(cfg.synth, seed=seed))
    gq, gp = train_phase1(cfg, backbone, world, seed, cache)
    say(f"seed {seed}: phase 1 done")
    # training corpora are per task; merge them so every example id resolves
    corpus: dict[str, str] = {}
    examples = []
    for t in plan.train:
        n = cfg.train_queries
        task = gen_task(world, t.weights, t.name.replace("+", "_"), _task_seed(seed, t.name, "train"), queries=n,
                        passages=n * (1 + cfg.synth.hard_negatives), negative_attributes=list(cfg.distractors))
        corpus.update(task.passages)
        examples.extend(task.train_examples(TaskSpec(t.name, dict(t.spec))))
    res = train_joint(backbone, corpus, examples, replace(cfg.phase2, seed=seed), (gq, gp), list(plan.modules))
    say(f"seed {seed}: phase 2 done")
    modules: dict[str, PromptStack] = {GENERAL_QUERY: res.general_query, **res.attributes}
    out: dict[str, dict[str, float]] = {}
    for row in plan.rows:
        task = _eval_task(cfg, world, row, seed)
        index = build_index(task.passages, backbone, res.general_passage)
        qids = list(task.queries)
        texts = [task.queries[q] for q in qids]
        out[row.name] = {}
        for cell in row.cells:
            spec = cell_spec(cell, modules)
            prompt = compose_final(spec, modules)
            Q = encode_texts(backbone, texts, prompt.values)
            ranked = search_many(index, Q, cfg.k)
            rankings = {q: [pid for pid, _ in r] for q, r in zip(qids, ranked)}
            out[row.name][cell.column] = mean_metric(rankings, task.qrels, ndcg_at_k, cfg.k)[0]
    return out


def cell_spec(cell: Cell, modules: dict[str, PromptStack]) -> CompositionSpec:
    """Register ``M`` for a cell (when it is a combination) and return ``P_g + w * M``."""
    if cell.module is None:
        return CompositionSpec()
    if len(cell.terms) == 1 and cell.terms[0][1] == 1.0:
        return CompositionSpec(((cell.terms[0][0], 1.0),), cell.w)
    if cell.module not in modules:
        modules[cell.module] = combine([modules[n] for n, _ in cell.terms], [c for _, c in cell.terms])
    return CompositionSpec(((cell.module, 1.0),), cell.w)


def run_experiment(
    kind: str,
    config: ExperimentConfig | None = None,
    modules: Sequence[str] | None = None,
    tasks: Sequence[str] | None = None,
    cache: Phase1Cache | None = None,
    log: Callable[[str], None] | None = None,
) -> ExperimentReport:
    """Run one experiment kind over ``config.seeds``.

    ``modules`` and ``tasks`` optionally restrict the report to cells using
    only those modules and to those evaluation rows; unknown names raise
    before any training starts.
    """
    cfg = config or ExperimentConfig()
    plan = make_plan(kind, cfg)
    if modules is not None:
        unknown = [m for m in modules if m not in plan.modules]
        if unknown:
            raise ModuleLookupError(f"experiment {kind!r} has no module(s) {unknown}; available {list(plan.modules)}")
        keep = set(modules)
        rows = tuple(
            replace(r, cells=tuple(c for c in r.cells if all(n in keep for n, _ in c.terms))) for r in plan.rows
        )
        plan = replace(plan, rows=rows)
    if tasks is not None:
        names = [r.name for r in plan.rows]
        unknown = [t for t in tasks if t not in names]
        if unknown:
            raise ModuleLookupError(f"experiment {kind!r} has no task(s) {unknown}; available {names}")
        plan = replace(plan, rows=tuple(r for r in plan.rows if r.name in set(tasks)))

    per_seed = [run_seed(kind, cfg, s, plan, cache, log) for s in cfg.seeds]
    columns: list[str] = []
    for r in plan.rows:
        for c in r.cells:
            if c.column not in columns:
                columns.append(c.column)
    cells: dict[str, dict[str, dict]] = {}
    for r in plan.rows:
        cells[r.name] = {}
        for c in r.cells:
            vals = [ps[r.name][c.column] for ps in per_seed]
            spec = CompositionSpec(((c.module, 1.0),), c.w) if c.module else CompositionSpec()
            cells[r.name][c.column] = {
                "mean": math.fsum(vals) / len(vals),
                "per_seed": vals,
                "spec": str(spec),
                "module": c.module,
                "terms": [list(t) for t in c.terms],
                "w": c.w,
            }
    return ExperimentReport(kind, list(cfg.seeds), cfg.digest(), [r.name for r in plan.rows], columns, cells)
