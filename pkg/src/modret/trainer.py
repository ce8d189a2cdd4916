"""Two-phase contrastive training of prompt stacks over a frozen backbone.

Phase 1 trains only the general query and passage prompts. Phase 2 trains
attribute prompts jointly with the general ones (at a much lower rate);
each example's query prompt is built with :func:`compose_final`, so the
gradient reaching attribute ``i`` is ``(w / N) * coef_i`` times the
gradient of the composed stack.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .algebra import GENERAL_QUERY, CompositionSpec, compose_final
from .decomposer import TaskSpec
from .encoder import Backbone, Embedding, PromptStack, backward, encode_batch, tokenize
from .errors import ConfigError, DataError
from .numcore import Rng, derive_seed

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    phase: int = 1
    lr_general: float | None = None  # None -> 7e-3 in phase 1, 7e-6 in phase 2
    lr_attribute: float = 7e-3
    batch_size: int = 8
    negatives: int = 5
    epochs: int = 5
    seed: int = 0
    scale: float = 0.5
    optimizer: str = "sgd"
    max_steps: int | None = None

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ConfigError(f"phase must be 1 or 2, got {self.phase}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.general_lr <= 0 or self.lr_attribute <= 0:
            raise ConfigError("learning rates must be positive")
        if self.negatives < 1:
            raise ConfigError("need at least one negative per positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    @property
    def general_lr(self) -> float:
        if self.lr_general is not None:
            return self.lr_general
        return 7e-3 if self.phase == 1 else 7e-6

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainExample:
    query: str
    positive: str
    negatives: tuple[str, ...]
    task: TaskSpec = field(default_factory=lambda: TaskSpec("general"))

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if self.positive in self.negatives:
            raise DataError(f"positive {self.positive!r} also listed as a negative")


@dataclass
class TrainResult:
    general_query: PromptStack
    general_passage: PromptStack
    attributes: dict[str, PromptStack]
    losses: list[float]
    epoch_losses: list[float]


def nll_loss(q: Embedding, positive: Embedding, negatives: Sequence[Embedding]) -> float:
    """``-log softmax`` of the positive among ``[positive] + negatives`` by inner product."""
    if not negatives:
        raise ConfigError("nll_loss needs at least one negative")
    s = np.array([np.dot(q.vector, positive.vector)] + [np.dot(q.vector, n.vector) for n in negatives])
    m = s.max()
    return float(-(s[0] - m) + math.log(np.sum(np.exp(s - m))))


def batch_nll(Q: np.ndarray, P: np.ndarray, targets: np.ndarray):
    """Mean NLL of each query row's target among all passage rows.

    Returns ``(loss, dQ, dP)``.
    """
    S = Q @ P.T
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    Z = E.sum(axis=1, keepdims=True)
    A = E / Z
    rows = np.arange(len(targets))
    loss = float(np.mean(np.log(Z[:, 0]) - S[rows, targets]))
    dS = A
    dS[rows, targets] -= 1.0
    dS /= len(targets)
    return loss, dS @ P, dS.T @ Q


class _Optimizer:
    """Per-parameter SGD or Adam state; updates arrays in place."""

    def __init__(self, kind: str, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.kind = kind
        self.b1, self.b2, self.eps = b1, b2, eps
        self.state: dict[str, list] = {}

    def step(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if self.kind == "sgd":
            param -= lr * grad
            return
        st = self.state.setdefault(key, [np.zeros_like(grad), np.zeros_like(grad), 0])
        m, v = st[0], st[1]
        st[2] += 1
        t = st[2]
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        v += (1 - self.b2) * grad * grad
        param -= lr * (m / (1 - self.b1**t)) / (np.sqrt(v / (1 - self.b2**t)) + self.eps)


def route_gradients(specs: Sequence[CompositionSpec], composed_grads: np.ndarray) -> dict[str, np.ndarray]:
    """Attribute gradients from per-example gradients of composed prompts.

    Example ``b`` contributes ``(scale / N_b) * coef`` times its composed
    gradient to every attribute it names with a nonzero coefficient.
    Attributes no example touches are absent from the result.
    """
    out: dict[str, np.ndarray] = {}
    for spec, g in zip(specs, composed_grads):
        n = spec.normalizer
        for name, coef in spec.terms:
            if coef == 0.0:
                continue
            contrib = (spec.scale / n) * coef * g
            out[name] = out[name] + contrib if name in out else contrib
    return out


def init_general(backbone: Backbone, seed: int) -> tuple[PromptStack, PromptStack]:
    cfg = backbone.config
    q = PromptStack.gaussian(cfg, Rng(derive_seed(seed, "general-query")))
    p = PromptStack.gaussian(cfg, Rng(derive_seed(seed, "general-passage")))
    return q, p


def _check_examples(corpus: Mapping[str, str], examples: Sequence[TrainExample], config: TrainConfig):
    if not examples:
        raise ConfigError("no training examples")
    for ex in examples:
        for pid in (ex.positive,) + ex.negatives:
            if pid not in corpus:
                raise DataError(f"passage id {pid!r} not in corpus")
        if len(ex.negatives) < config.negatives:
            raise DataError(f"example has {len(ex.negatives)} negatives, config needs {config.negatives}")


def _run(
    backbone: Backbone,
    corpus: Mapping[str, str],
    examples: Sequence[TrainExample],
    config: TrainConfig,
    gq: np.ndarray,
    gp: np.ndarray,
    attrs: dict[str, np.ndarray],
    log: Callable[[dict], None] | None,
) -> tuple[list[float], list[float]]:
    cfg = backbone.config
    opt = _Optimizer(config.optimizer)
    order_rng = Rng(derive_seed(config.seed, f"order-phase{config.phase}"))
    tok_cache: dict[str, list[int]] = {}

    def toks(text: str) -> list[int]:
        if text not in tok_cache:
            tok_cache[text] = tokenize(text, cfg)
        return tok_cache[text]

    specs = [
        CompositionSpec(tuple(ex.task.attributes.items()), config.scale) if config.phase == 2 else CompositionSpec()
        for ex in examples
    ]
    losses: list[float] = []
    epoch_losses: list[float] = []
    step = 0
    nneg = config.negatives
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(examples))
        acc = []
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = order[start : start + config.batch_size]
            qseq = [toks(examples[i].query) for i in idx]
            pseq = []
            for i in idx:
                ex = examples[i]
                pseq.append(toks(corpus[ex.positive]))
                pseq.extend(toks(corpus[n]) for n in ex.negatives[:nneg])
            if config.phase == 2:
                mods = {GENERAL_QUERY: PromptStack(gq)}
                mods.update((k, PromptStack(v)) for k, v in attrs.items())
                qpre = np.stack([compose_final(specs[i], mods).values for i in idx])
            else:
                qpre = gq
            Q, qc = encode_batch(backbone, qseq, qpre, keep_cache=True)
            Pm, pc = encode_batch(backbone, pseq, gp, keep_cache=True)
            targets = np.arange(len(idx)) * (nneg + 1)
            loss, dQ, dP = batch_nll(Q, Pm, targets)
            gq_grad = backward(backbone, qc, dQ)
            gp_grad = backward(backbone, pc, dP)
            if config.phase == 2:
                per_ex = gq_grad
                gq_grad = per_ex.sum(axis=0)
                for name, g in route_gradients([specs[i] for i in idx], per_ex).items():
                    opt.step(name, attrs[name], g, config.lr_attribute)
            opt.step(GENERAL_QUERY, gq, gq_grad, config.general_lr)
            opt.step("general-passage", gp, gp_grad, config.general_lr)
            losses.append(loss)
            acc.append(loss)
            if log is not None:
                log({"step": step, "epoch": epoch, "loss": loss, "phase": config.phase})
            step += 1
        if acc:
            epoch_losses.append(float(np.mean(acc)))
    return losses, epoch_losses


def train_general(
    backbone: Backbone,
    corpus: Mapping[str, str],
    examples: Sequence[TrainExample],
    config: TrainConfig,
    init: tuple[PromptStack, PromptStack] | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Phase 1: fit the general query and passage prompts only."""
    if config.phase != 1:
        raise ConfigError("train_general needs a phase-1 config")
    _check_examples(corpus, examples, config)
    q0, p0 = init if init is not None else init_general(backbone, config.seed)
    q0.check_config(backbone.config)
    p0.check_config(backbone.config)
    gq, gp = q0.values.copy(), p0.values.copy()
    losses, ep = _run(backbone, corpus, examples, config, gq, gp, {}, log)
    return TrainResult(PromptStack(gq), PromptStack(gp), {}, losses, ep)


def train_joint(
    backbone: Backbone,
    corpus: Mapping[str, str],
    examples: Sequence[TrainExample],
    config: TrainConfig,
    general: tuple[PromptStack, PromptStack],
    attributes: Sequence[str],
    init: Mapping[str, PromptStack] | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Phase 2: attribute prompts (zero-initialised unless ``init``) plus general prompts.

    Every attribute named by an example must be in ``attributes``.
    """
    if config.phase != 2:
        raise ConfigError("train_joint needs a phase-2 config")
    if not attributes:
        raise ConfigError("train_joint needs a non-empty attribute set")
    _check_examples(corpus, examples, config)
    allowed = set(attributes)
    for ex in examples:
        bad = set(ex.task.attributes) - allowed
        if bad:
            raise DataError(f"example of task {ex.task.name!r} names unknown attributes {sorted(bad)}")
    init = dict(init or {})
    attrs = {}
    for name in attributes:
        st = init.get(name) or PromptStack.zeros(backbone.config)
        st.check_config(backbone.config)
        attrs[name] = st.values.copy()
    gq, gp = general[0].values.copy(), general[1].values.copy()
    losses, ep = _run(backbone, corpus, examples, config, gq, gp, attrs, log)
    return TrainResult(
        PromptStack(gq), PromptStack(gp), {k: PromptStack(v) for k, v in attrs.items()}, losses, ep
    )
