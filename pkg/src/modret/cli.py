"""Command-line entry point: ``modret <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .algebra import GENERAL_PASSAGE, GENERAL_QUERY, compose_final, composed_stack, parse_expr
from .decomposer import Lexicon, TaskSpec, decompose, select_modules
from .encoder import Backbone, EncoderConfig, encode_texts
from .errors import ConfigError, DataError, ModretError
from .harness import KINDS, ExperimentConfig, Phase1Cache, run_experiment
from .index import PassageIndex, build_index, search, search_many
from .metrics import mean_metric, ndcg_at_k, read_qrels, recall_at_k
from .registry import ModuleDescriptor, Registry, load_module, save_module
from .synthgen import SynthConfig, SynthTask, gen_task, gen_world, read_jsonl
from .trainer import TrainConfig, train_general, train_joint

ENCODER_FILE = "encoder.json"
RUN_KEYS = {"seed", "encoder", "train", "synth", "experiment", "paths"}
PATH_KEYS = {"registry", "corpus", "qrels", "lexicon"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# config -------------------------------------------------------------------


def load_run_config(path: str | None) -> dict:
    """Parse and validate a run config file (unknown keys rejected)."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    bad = set(data) - RUN_KEYS
    if bad:
        raise ConfigError(f"unknown config keys: {sorted(bad)}")
    for key, cls in (("encoder", EncoderConfig), ("train", TrainConfig), ("synth", SynthConfig)):
        extra = set(data.get(key, {})) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown keys in {key}: {sorted(extra)}")
    paths = data.get("paths", {})
    extra = set(paths) - PATH_KEYS
    if extra:
        raise ConfigError(f"unknown keys in paths: {sorted(extra)}")
    for k in ("corpus", "qrels", "lexicon"):
        if k in paths and not Path(paths[k]).exists():
            raise ConfigError(f"path {k}={paths[k]} does not exist")
    return data


def _pick(args, run: dict, name: str, section: str | None = None, default=None):
    """Flag value if given, else config value, else ``default``."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    src = run.get(section, {}) if section else run
    return src.get(name, default)


def _seed(args, run, required: bool = False) -> int:
    v = _pick(args, run, "seed")
    if v is None:
        if required:
            raise UsageError("--seed is required (or set \"seed\" in --config)")
        return 0
    return int(v)


def _registry_dir(args, run) -> Path:
    d = args.registry or run.get("paths", {}).get("registry")
    if d is None:
        raise UsageError("--registry is required")
    return Path(d)


def _backbone(reg_dir: Path, run: dict, create: bool = False, overrides: dict | None = None) -> Backbone:
    path = reg_dir / ENCODER_FILE
    if path.exists():
        cfg = EncoderConfig(**json.loads(path.read_text(encoding="utf-8")))
    elif create:
        cfg = EncoderConfig(**{**run.get("encoder", {}), **(overrides or {})})
        reg_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    else:
        raise DataError(f"{reg_dir} has no {ENCODER_FILE}; run train-general first")
    return Backbone.init(cfg)


def _train_config(args, run, phase: int) -> TrainConfig:
    base = {k: v for k, v in run.get("train", {}).items()}
    base["phase"] = phase
    for name in ("lr_general", "lr_attribute", "batch_size", "negatives", "epochs", "optimizer", "max_steps", "scale"):
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    base["seed"] = _seed(args, run, required=True)
    return TrainConfig(**base)


def _load_tasks(dirs) -> list[SynthTask]:
    if not dirs:
        raise UsageError("at least one --data/--tasks directory is required")
    return [SynthTask.read(d) for d in dirs]


def _emit(args, obj, text: str) -> None:
    if args.json:
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _log_writer(path):
    if path is None:
        return None, None
    fh = open(path, "w", encoding="utf-8")
    return fh, lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")


# commands -----------------------------------------------------------------


def cmd_gen(args, run) -> int:
    seed = _seed(args, run, required=True)
    scfg = dict(run.get("synth", {}))
    if args.attributes:
        scfg["attributes"] = [a for a in args.attributes.split(",") if a]
    for name in ("queries", "passages", "hard_negatives", "query_len", "passage_len", "sublexicon", "shared"):
        v = getattr(args, name)
        if v is not None:
            scfg[name] = v
    # the world is shared by every task generated with the same world seed;
    # --seed only drives task sampling
    if args.world_seed is not None:
        scfg["seed"] = args.world_seed
    synth = SynthConfig(**scfg)
    weights = {}
    for part in (args.weights or "").split(","):
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"--weights entries look like name=value, got {part!r}")
        k, v = part.split("=", 1)
        weights[k.strip()] = float(v)
    if not weights:
        weights = {synth.attributes[0]: 1.0}
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    world = gen_world(synth)
    neg = args.negative_attributes.split(",") if args.negative_attributes else None
    task = gen_task(world, weights, args.name, seed, negative_attributes=neg)
    task.write(out)
    (out / "synth.json").write_text(json.dumps(synth.to_dict(), indent=2) + "\n", encoding="utf-8")
    summary = {"task": args.name, "queries": len(task.queries), "passages": len(task.passages), "out": str(out)}
    _emit(args, summary, f"wrote {len(task.queries)} queries and {len(task.passages)} passages to {out}")
    return 0


def cmd_train_general(args, run) -> int:
    reg_dir = _registry_dir(args, run)
    reg = Registry(reg_dir)
    overrides = {k: getattr(args, k) for k in ("layers", "dim", "heads", "ffn_dim", "prompt_len") if getattr(args, k) is not None}
    backbone = _backbone(reg_dir, run, create=True, overrides=overrides)
    for name in (GENERAL_QUERY, GENERAL_PASSAGE):
        if name in reg and not args.force:
            raise FileExistsError(f"module {name} exists in {reg_dir}; pass --force to overwrite")
    tasks = _load_tasks(args.data)
    corpus, examples = {}, []
    for t in tasks:
        corpus.update(t.passages)
        examples.extend(t.train_examples(TaskSpec(t.name)))
    cfg = _train_config(args, run, 1)
    fh, log = _log_writer(args.log)
    try:
        res = train_general(backbone, corpus, examples, cfg, log=log)
    finally:
        if fh:
            fh.close()
    shape = res.general_query.shape
    reg.save(ModuleDescriptor(GENERAL_QUERY, "general-query", shape, seed=cfg.seed, created_by="train-general"), res.general_query, force=True)
    reg.save(ModuleDescriptor(GENERAL_PASSAGE, "general-passage", shape, seed=cfg.seed, created_by="train-general"), res.general_passage, force=True)
    summary = {"steps": len(res.losses), "epoch_losses": res.epoch_losses}
    _emit(args, summary, "epoch losses: " + " ".join(f"{x:.4f}" for x in res.epoch_losses))
    return 0


def cmd_train_joint(args, run) -> int:
    reg_dir = _registry_dir(args, run)
    reg = Registry(reg_dir)
    backbone = _backbone(reg_dir, run)
    tasks = _load_tasks(args.data)
    attrs = [a for a in args.attributes.split(",") if a] if args.attributes else sorted({a for t in tasks for a in t.spec.attributes})
    existing = [a for a in attrs if a in reg]
    if existing and not args.force:
        raise FileExistsError(f"modules {existing} exist in {reg_dir}; pass --force to overwrite")
    corpus, examples = {}, []
    for t in tasks:
        corpus.update(t.passages)
        examples.extend(t.train_examples())
    cfg = _train_config(args, run, 2)
    fh, log = _log_writer(args.log)
    try:
        res = train_joint(backbone, corpus, examples, cfg, (reg[GENERAL_QUERY], reg[GENERAL_PASSAGE]), attrs, log=log)
    finally:
        if fh:
            fh.close()
    shape = res.general_query.shape
    reg.save(ModuleDescriptor(GENERAL_QUERY, "general-query", shape, seed=cfg.seed, created_by="train-joint"), res.general_query, force=True)
    reg.save(ModuleDescriptor(GENERAL_PASSAGE, "general-passage", shape, seed=cfg.seed, created_by="train-joint"), res.general_passage, force=True)
    for a, st in res.attributes.items():
        reg.save(ModuleDescriptor(a, "attribute", shape, attribute=a, seed=cfg.seed, created_by="train-joint"), st, force=True)
    summary = {"steps": len(res.losses), "epoch_losses": res.epoch_losses, "attributes": attrs}
    _emit(args, summary, f"trained {', '.join(attrs)}; epoch losses: " + " ".join(f"{x:.4f}" for x in res.epoch_losses))
    return 0


def cmd_compose(args, run) -> int:
    reg = Registry(_registry_dir(args, run))
    spec = parse_expr(args.expr)
    stack = composed_stack(spec, reg)
    out = Path(args.out)
    name = args.name or out.name.removesuffix(".rmod")
    desc = ModuleDescriptor(name, "composed", stack.shape, seed=_seed(args, run), created_by=f"compose {args.expr}")
    save_module(desc, stack, out, force=args.force)
    _emit(args, {"out": str(out), "terms": [list(t) for t in spec.terms]}, f"wrote {out}")
    return 0


def cmd_decompose(args, run) -> int:
    lex_path = args.lexicon or run.get("paths", {}).get("lexicon")
    lexicon = Lexicon.from_json(lex_path) if lex_path else Lexicon.default()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        task = decompose(args.instruction, lexicon, name=args.name)
        out = {"task": task.to_json(), "matched": bool(task.attributes)}
        if args.registry:
            spec = select_modules(task, Registry(args.registry), scale=args.scale)
            out["composition"] = spec.to_dict()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    attrs = ", ".join(task.attributes) or "(none)"
    _emit(args, out, f"attributes: {attrs}")
    return 0


def cmd_build_index(args, run) -> int:
    reg_dir = _registry_dir(args, run)
    reg = Registry(reg_dir)
    backbone = _backbone(reg_dir, run)
    corpus_path = args.corpus or run.get("paths", {}).get("corpus")
    if corpus_path is None:
        raise UsageError("--corpus is required")
    corpus = {r["id"]: r["text"] for r in read_jsonl(corpus_path)}
    index = build_index(corpus, backbone, reg[GENERAL_PASSAGE])
    index.save(args.out, force=args.force)
    _emit(args, {"out": args.out, "passages": len(index), "digest": index.digest()}, f"indexed {len(index)} passages into {args.out}")
    return 0


def cmd_retrieve(args, run) -> int:
    reg_dir = _registry_dir(args, run)
    reg = Registry(reg_dir)
    backbone = _backbone(reg_dir, run)
    index = PassageIndex.load(args.index)
    if index.encoder_digest != backbone.digest():
        raise DataError("index was built with a different backbone")
    spec = parse_expr(args.expr, scale=args.scale)
    prompt = compose_final(spec, reg)
    q = encode_texts(backbone, [args.query], prompt.values)[0]
    hits = search(index, q, args.k)
    text = "\n".join(f"{i + 1:>3}  {pid}  {s:.6f}" for i, (pid, s) in enumerate(hits))
    _emit(args, {"query": args.query, "spec": spec.to_dict(), "hits": [[p, s] for p, s in hits]}, text)
    return 0


def cmd_evaluate(args, run) -> int:
    reg_dir = _registry_dir(args, run)
    reg = Registry(reg_dir)
    backbone = _backbone(reg_dir, run)
    results = {}
    lines = []
    for t in _load_tasks(args.tasks):
        if args.modules is not None:
            spec = parse_expr(args.modules, scale=args.scale)
        else:
            spec = select_modules(t.spec, reg, scale=args.scale)
        index = build_index(t.passages, backbone, reg[GENERAL_PASSAGE])
        qids = list(t.queries)
        row = {}
        for label, s in (("general", parse_expr("", scale=args.scale)), ("composed", spec)):
            prompt = compose_final(s, reg)
            Q = encode_texts(backbone, [t.queries[q] for q in qids], prompt.values)
            ranked = {q: [p for p, _ in r] for q, r in zip(qids, search_many(index, Q, args.k))}
            nd, skipped = mean_metric(ranked, t.qrels, ndcg_at_k, args.k)
            rc, _ = mean_metric(ranked, t.qrels, recall_at_k, args.k)
            row[label] = {"ndcg": nd, "recall": rc, "skipped": skipped, "spec": str(s)}
        results[t.name] = row
        lines.append(f"{t.name:<20} general {row['general']['ndcg']:.4f}  composed {row['composed']['ndcg']:.4f}  [{row['composed']['spec']}]")
    _emit(args, results, "\n".join(lines))
    return 0


def cmd_experiment(args, run) -> int:
    exp = dict(run.get("experiment", {}))
    if args.seeds:
        exp["seeds"] = [int(s) for s in args.seeds.split(",")]
    elif args.seed is not None:
        exp["seeds"] = [args.seed]
    cfg = ExperimentConfig.from_dict(exp)
    modules = args.modules.split(",") if args.modules else None
    tasks = args.tasks.split(",") if args.tasks else None
    log = (lambda s: print(s, file=sys.stderr, flush=True)) if args.verbose else None
    report = run_experiment(args.kind, cfg, modules=modules, tasks=tasks, cache=Phase1Cache(), log=log)
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise FileExistsError(f"{out} exists; pass --force to overwrite")
        out.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(args, report.to_json(), report.table())
    return 0


def cmd_inspect(args, run) -> int:
    desc, stack = load_module(args.file)
    info = desc.to_json()
    v = stack.values
    stats = {"l2": float(np.linalg.norm(v)), "max_abs": float(np.max(np.abs(v))) if v.size else 0.0}
    if args.json:
        print(json.dumps({"descriptor": info, "stats": stats}, indent=2, sort_keys=True))
    else:
        for k, val in info.items():
            print(f"{k:<11} {json.dumps(val)}")
        print(f"{'l2':<11} {stats['l2']:.6g}")
    return 0


# parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modret", description="Modular prompt dense retrieval.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="run config JSON; flags override it")
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.set_defaults(func=func)
        return sp

    def train_flags(sp):
        sp.add_argument("--registry")
        sp.add_argument("--data", nargs="+", help="task directories written by gen")
        sp.add_argument("--lr-general", dest="lr_general", type=float)
        sp.add_argument("--lr-attribute", dest="lr_attribute", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--negatives", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--max-steps", dest="max_steps", type=int)
        sp.add_argument("--optimizer", choices=("sgd", "adam"))
        sp.add_argument("--log", help="write JSONL training log here")

    sp = add("gen", cmd_gen, "generate a synthetic task")
    sp.add_argument("--out", required=True)
    sp.add_argument("--name", default="task")
    sp.add_argument("--attributes", help="comma-separated world attributes")
    sp.add_argument("--weights", help="e.g. alpha=0.7,beta=0.3")
    sp.add_argument("--negative-attributes", dest="negative_attributes")
    sp.add_argument("--world-seed", dest="world_seed", type=int, help="world seed (default: synth.seed from config, else 0)")
    for flag in ("queries", "passages", "hard-negatives", "query-len", "passage-len", "sublexicon", "shared"):
        sp.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=int)

    sp = add("train-general", cmd_train_general, "phase 1: train the general prompts")
    train_flags(sp)
    for flag in ("layers", "dim", "heads", "ffn-dim", "prompt-len"):
        sp.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=int)

    sp = add("train-joint", cmd_train_joint, "phase 2: train attribute prompts")
    train_flags(sp)
    sp.add_argument("--attributes", help="comma-separated attribute set (default: from the tasks)")
    sp.add_argument("--scale", type=float)

    sp = add("compose", cmd_compose, "write a module combination as a new module")
    sp.add_argument("--registry")
    sp.add_argument("--expr", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--name")

    sp = add("decompose", cmd_decompose, "map an instruction to attributes")
    sp.add_argument("--instruction", required=True)
    sp.add_argument("--lexicon")
    sp.add_argument("--registry")
    sp.add_argument("--name", default="task")
    sp.add_argument("--scale", type=float, default=0.5)

    sp = add("build-index", cmd_build_index, "encode a corpus into an index file")
    sp.add_argument("--registry")
    sp.add_argument("--corpus")
    sp.add_argument("--out", required=True)

    sp = add("retrieve", cmd_retrieve, "search an index with a composed query prompt")
    sp.add_argument("--registry")
    sp.add_argument("--index", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--expr", default="")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--scale", type=float, default=0.5)

    sp = add("evaluate", cmd_evaluate, "NDCG@k of general vs composed prompts on tasks")
    sp.add_argument("--registry")
    sp.add_argument("--tasks", nargs="+", required=True)
    sp.add_argument("--modules", help="composition expression (default: from each task's attributes)")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--scale", type=float, default=0.5)

    sp = add("experiment", cmd_experiment, "run a module-arithmetic experiment")
    sp.add_argument("--kind", required=True, choices=KINDS)
    sp.add_argument("--seeds", help="comma-separated seeds (default from config)")
    sp.add_argument("--modules")
    sp.add_argument("--tasks")
    sp.add_argument("--out")
    sp.add_argument("--verbose", action="store_true")

    sp = add("inspect", cmd_inspect, "print a module file's descriptor")
    sp.add_argument("file")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        run = load_run_config(args.config)
        return args.func(args, run)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ModretError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileExistsError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
