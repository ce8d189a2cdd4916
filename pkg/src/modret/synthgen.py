"""Attribute-structured synthetic retrieval worlds.

A world has a content lexicon ``K`` (the words queries are made of), one
sublexicon ``S_a`` per attribute and a shared filler lexicon. Attribute
``a`` owns a bijection ``sigma_a: K[i] -> S_a[pi_a[i]]``. A relevant
passage for a query under ``a`` holds the ``sigma_a`` images of the query's
content words plus filler; hard negatives hold the images under some other
attribute's bijection, so matching them needs the right mapping.

All word forms are chosen so that no two world words share a tokenizer
bucket for the configured vocabulary size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .decomposer import TaskSpec
from .errors import ConfigError, DataError
from .metrics import Qrels, read_qrels, write_qrels
from .numcore import Rng, derive_seed, fnv1a64
from .trainer import TrainExample
from .encoder import N_RESERVED


@dataclass(frozen=True)
class SynthConfig:
    attributes: tuple[str, ...] = ("alpha", "beta")
    sublexicon: int = 64
    shared: int = 256
    passages: int = 2000
    queries: int = 200
    query_len: int = 8
    passage_len: int = 24
    hard_negatives: int = 5
    seed: int = 0
    vocab_size: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.attributes or len(set(self.attributes)) != len(self.attributes):
            raise ConfigError("attributes must be a non-empty list of distinct names")
        if min(self.sublexicon, self.passages, self.queries, self.query_len, self.passage_len) < 1:
            raise ConfigError("synthetic counts must be positive")
        if self.shared < 0 or self.hard_negatives < 0:
            raise ConfigError("shared lexicon and hard negatives must be >= 0")
        if self.query_len > self.sublexicon:
            raise ConfigError("query_len cannot exceed the sublexicon size")
        if self.passage_len < self.query_len:
            raise ConfigError("passage_len must be >= query_len")
        if self.passage_len > self.query_len and self.shared == 0:
            raise ConfigError("filler needs a non-empty shared lexicon")
        need = self.sublexicon * (1 + len(self.attributes)) + self.shared
        if need > self.vocab_size - N_RESERVED:
            raise ConfigError(f"world needs {need} distinct buckets, vocabulary has {self.vocab_size - N_RESERVED}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attributes"] = list(self.attributes)
        return d


@dataclass(frozen=True)
class World:
    config: SynthConfig
    content: tuple[str, ...]
    sublexicons: Mapping[str, tuple[str, ...]]
    perms: Mapping[str, tuple[int, ...]]
    shared: tuple[str, ...]

    def sigma(self, attribute: str) -> dict[str, str]:
        if attribute not in self.perms:
            raise ConfigError(f"unknown attribute {attribute!r}")
        sub, perm = self.sublexicons[attribute], self.perms[attribute]
        return {w: sub[perm[i]] for i, w in enumerate(self.content)}

    def sigma_inverse(self, attribute: str) -> dict[str, str]:
        return {v: k for k, v in self.sigma(attribute).items()}

    def apply(self, attribute: str, words: Sequence[str]) -> list[str]:
        s = self.sigma(attribute)
        return [s[w] for w in words]


def gen_world(config: SynthConfig) -> World:
    rng = Rng(derive_seed(config.seed, "world"))
    used: set[int] = set()
    span = config.vocab_size - N_RESERVED

    def words(tag: str, n: int) -> tuple[str, ...]:
        out, j = [], 0
        while len(out) < n:
            w = f"{tag}{j}"
            j += 1
            b = fnv1a64(w.encode("utf-8")) % span
            if b not in used:
                used.add(b)
                out.append(w)
        return tuple(out)

    content = words("k", config.sublexicon)
    subs = {a: words(f"{a.lower()}_", config.sublexicon) for a in config.attributes}
    shared = words("w", config.shared)
    perms = {a: tuple(Rng(derive_seed(rng.next_u64(), a)).permutation(config.sublexicon)) for a in config.attributes}
    return World(config, content, subs, perms, shared)


@dataclass
class SynthTask:
    name: str
    spec: TaskSpec
    queries: dict[str, str]
    passages: dict[str, str]
    qrels: Qrels
    examples: list[dict]
    query_attribute: dict[str, str] = field(default_factory=dict)

    def train_examples(self, spec: TaskSpec | None = None) -> list[TrainExample]:
        spec = spec or self.spec
        return [TrainExample(self.queries[e["query_id"]], e["positive"], tuple(e["negatives"]), spec) for e in self.examples]

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_jsonl(d / "corpus.jsonl", [{"id": k, "text": v} for k, v in self.passages.items()])
        write_jsonl(d / "queries.jsonl", [{"id": k, "text": v} for k, v in self.queries.items()])
        write_jsonl(d / "examples.jsonl", self.examples)
        write_qrels(self.qrels, d / "qrels.txt")
        (d / "task.json").write_text(json.dumps(self.spec.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, directory) -> "SynthTask":
        d = Path(directory)
        spec = TaskSpec.from_json(d / "task.json")
        passages = {r["id"]: r["text"] for r in read_jsonl(d / "corpus.jsonl")}
        queries = {r["id"]: r["text"] for r in read_jsonl(d / "queries.jsonl")}
        ex_path = d / "examples.jsonl"
        examples = read_jsonl(ex_path) if ex_path.exists() else []
        qrels = read_qrels(d / "qrels.txt")
        return cls(spec.name, spec, queries, passages, qrels, examples)


def stratified_counts(weights: Mapping[str, float], n: int) -> dict[str, int]:
    """Exact-ratio split of ``n`` by largest remainder (ties in key order)."""
    raw = {a: w * n for a, w in weights.items()}
    counts = {a: int(v) for a, v in raw.items()}
    rest = n - sum(counts.values())
    order = sorted(weights, key=lambda a: (-(raw[a] - counts[a]), list(weights).index(a)))
    for a in order[:rest]:
        counts[a] += 1
    return counts


def gen_task(
    world: World,
    weights: Mapping[str, float],
    name: str,
    seed: int,
    queries: int | None = None,
    passages: int | None = None,
    negative_attributes: Sequence[str] | None = None,
    spec: TaskSpec | None = None,
) -> SynthTask:
    """Queries, passages, qrels and training examples for one task.

    Each query is assigned one attribute in exact proportion to ``weights``.
    Hard negatives apply bijections from ``negative_attributes`` (default:
    world attributes outside the task) to the same content words; with no
    negative attributes they are same-attribute passages over other content.
    Passage ids are assigned after shuffling.
    """
    cfg = world.config
    nq = cfg.queries if queries is None else queries
    npass = cfg.passages if passages is None else passages
    if not weights:
        raise ConfigError("task needs at least one attribute weight")
    for a, w in weights.items():
        if a not in world.perms:
            raise ConfigError(f"weight names attribute {a!r} not in the world")
        if w < 0:
            raise ConfigError("weights must be >= 0")
    if abs(sum(weights.values()) - 1.0) > 1e-9:
        raise ConfigError(f"weights must sum to 1, got {sum(weights.values())}")
    if negative_attributes is None:
        negative_attributes = [a for a in cfg.attributes if a not in weights]
    for a in negative_attributes:
        if a not in world.perms:
            raise ConfigError(f"negative attribute {a!r} not in the world")
    h = cfg.hard_negatives
    if npass < nq * (1 + h):
        raise ConfigError(f"{npass} passages cannot hold {nq} positives with {h} negatives each")

    rng = Rng(seed)
    sigmas = {a: world.sigma(a) for a in world.perms}
    n_fill = cfg.passage_len - cfg.query_len

    def passage(attr: str, content: list[str]) -> str:
        toks = [sigmas[attr][w] for w in content] + [rng.choice(world.shared) for _ in range(n_fill)]
        rng.shuffle(toks)
        return " ".join(toks)

    counts = stratified_counts(weights, nq)
    assign = [a for a in weights for _ in range(counts[a])]
    rng.shuffle(assign)
    live = [a for a in weights if weights[a] > 0]

    if nq > math.comb(cfg.sublexicon, cfg.query_len):
        raise ConfigError(f"{nq} queries exceed the {math.comb(cfg.sublexicon, cfg.query_len)} distinct content sets")
    # distinct content per query, and no other passage carries a query's
    # (attribute, content) pair, so the judged positive is the only match
    contents = []
    seen: set[frozenset] = set()
    while len(contents) < nq:
        c = rng.sample(world.content, cfg.query_len)
        if frozenset(c) not in seen:
            seen.add(frozenset(c))
            contents.append(c)
    taken = {(a, frozenset(c)) for a, c in zip(assign, contents)}

    def free_content(attr: str) -> list[str]:
        while True:
            c = rng.sample(world.content, cfg.query_len)
            if (attr, frozenset(c)) not in taken:
                return c

    qtexts, qattr, items = [], [], []  # items: (text, owner query index or -1, role)
    for qi, (attr, content) in enumerate(zip(assign, contents)):
        qtexts.append(" ".join(content))
        qattr.append(attr)
        items.append((passage(attr, content), qi, "pos"))
        for j in range(h):
            if negative_attributes:
                na = negative_attributes[j % len(negative_attributes)] if j < len(negative_attributes) else rng.choice(negative_attributes)
                items.append((passage(na, content), qi, "neg"))
            else:
                items.append((passage(attr, free_content(attr)), qi, "neg"))
    pool = live + list(negative_attributes)
    while len(items) < npass:
        a = rng.choice(pool)
        items.append((passage(a, free_content(a)), -1, "fill"))
    rng.shuffle(items)

    qids = [f"{name}-q{i:05d}" for i in range(nq)]
    passages_out: dict[str, str] = {}
    pos: dict[int, str] = {}
    negs: dict[int, list[str]] = {i: [] for i in range(nq)}
    for pi, (text, owner, role) in enumerate(items):
        pid = f"{name}-p{pi:06d}"
        passages_out[pid] = text
        if role == "pos":
            pos[owner] = pid
        elif role == "neg":
            negs[owner].append(pid)
    qrels = {qids[i]: {pos[i]: 1} for i in range(nq)}
    examples = [{"query_id": qids[i], "positive": pos[i], "negatives": negs[i], "task": name} for i in range(nq)]
    spec = spec or TaskSpec(name, dict(weights))
    return SynthTask(
        name, spec, dict(zip(qids, qtexts)), passages_out, qrels, examples, dict(zip(qids, qattr))
    )


def write_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: {exc}") from None
    return out
