"""Ranking metrics and TREC qrels I/O."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError, DataError

Qrels = dict[str, dict[str, int]]


def dcg(grades: Sequence[int]) -> float:
    return sum((2.0**g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg_at_k(ranking: Sequence[str], row: Mapping[str, int], k: int = 10) -> float:
    """Exponential-gain NDCG@k; 0.0 when the row has no positive grade."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    ideal = dcg(sorted((g for g in row.values() if g > 0), reverse=True)[:k])
    if ideal == 0.0:
        return 0.0
    return dcg([row.get(pid, 0) for pid in ranking[:k]]) / ideal


def recall_at_k(ranking: Sequence[str], row: Mapping[str, int], k: int = 10) -> float:
    if k < 1:
        raise ConfigError("k must be >= 1")
    rel = {pid for pid, g in row.items() if g > 0}
    if not rel:
        return 0.0
    return len(rel.intersection(ranking[:k])) / len(rel)


def has_relevant(row: Mapping[str, int] | None) -> bool:
    return bool(row) and any(g > 0 for g in row.values())


def mean_metric(rankings: Mapping[str, Sequence[str]], qrels: Qrels, metric=ndcg_at_k, k: int = 10) -> tuple[float, int]:
    """Macro average over queries with at least one relevant passage.

    Returns ``(mean, n_skipped)``; queries lacking judgements are skipped.
    """
    vals = []
    skipped = 0
    for qid, ranking in rankings.items():
        row = qrels.get(qid)
        if not has_relevant(row):
            skipped += 1
            continue
        vals.append(metric(ranking, row, k))
    return (math.fsum(vals) / len(vals) if vals else 0.0), skipped


def read_qrels(path) -> Qrels:
    """TREC ``qid 0 docid rel`` lines."""
    out: Qrels = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{n}: expected 4 columns, got {len(parts)}")
        qid, _, pid, rel = parts
        try:
            g = int(rel)
        except ValueError:
            raise DataError(f"{path}:{n}: relevance {rel!r} is not an integer") from None
        if g < 0:
            raise DataError(f"{path}:{n}: negative relevance grade")
        out.setdefault(qid, {})[pid] = g
    return out


def format_qrels(qrels: Qrels) -> str:
    return "".join(f"{q} 0 {p} {g}\n" for q, row in qrels.items() for p, g in row.items())


def write_qrels(qrels: Qrels, path) -> None:
    Path(path).write_text(format_qrels(qrels), encoding="utf-8")
