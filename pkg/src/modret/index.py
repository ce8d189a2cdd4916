"""Exact maximum-inner-product search over passage embeddings.

Passages are encoded once with the passage-side general prompt. Query-side
composition never touches the index, so one index serves every composed
model.

``.ridx`` layout, little-endian::

    b"REMOPIDX" | u32 version=1 | u32 meta_len | meta JSON | n*d float32 rows | u32 crc32(rows)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoder import Backbone, Embedding, PromptStack, encode_texts
from .errors import ConfigError, CorruptionError, DataError, ModuleFormatError, ShapeError, UnsupportedVersionError
from .numcore import digest_arrays
from .registry import atomic_write

MAGIC = b"REMOPIDX"
VERSION = 1


@dataclass(frozen=True)
class PassageIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray
    encoder_digest: str
    prompt_digest: str

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ShapeError(f"index matrix {self.matrix.shape} does not match {len(self.ids)} ids")
        self.matrix.flags.writeable = False
        # sort key for the tie rule: rank of each id in ascending order
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        rank = np.empty(len(self.ids), dtype=np.int64)
        rank[order] = np.arange(len(self.ids))
        object.__setattr__(self, "_id_rank", rank)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def digest(self) -> str:
        return digest_arrays([self.matrix, np.frombuffer("\n".join(self.ids).encode(), dtype=np.uint8)])

    def to_bytes(self) -> bytes:
        meta = json.dumps(
            {
                "ids": list(self.ids),
                "d": self.dim,
                "encoder_digest": self.encoder_digest,
                "prompt_digest": self.prompt_digest,
            },
            sort_keys=True,
        ).encode("utf-8")
        rows = np.ascontiguousarray(self.matrix, dtype="<f4").tobytes()
        return b"".join([MAGIC, struct.pack("<II", VERSION, len(meta)), meta, rows, struct.pack("<I", zlib.crc32(rows))])

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PassageIndex":
        if blob[: len(MAGIC)] != MAGIC:
            raise ModuleFormatError("not an index file")
        if len(blob) < 16:
            raise CorruptionError("truncated index header")
        version, meta_len = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported index version {version}")
        body = 16 + meta_len
        if len(blob) < body + 4:
            raise CorruptionError("truncated index file")
        try:
            meta = json.loads(blob[16:body].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptionError(f"unreadable index metadata: {exc}") from None
        rows = blob[body:-4]
        if zlib.crc32(rows) != struct.unpack("<I", blob[-4:])[0]:
            raise CorruptionError("index checksum mismatch")
        n, d = len(meta["ids"]), int(meta["d"])
        if len(rows) != n * d * 4:
            raise ModuleFormatError("index row block disagrees with metadata")
        mat = np.frombuffer(rows, dtype="<f4").astype(np.float64).reshape(n, d)
        return cls(tuple(meta["ids"]), mat, meta["encoder_digest"], meta["prompt_digest"])

    def save(self, path, force: bool = False) -> None:
        path = Path(path)
        if path.exists() and not force:
            raise FileExistsError(f"{path} exists; pass force=True to overwrite")
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "PassageIndex":
        return cls.from_bytes(Path(path).read_bytes())


def build_index(corpus: Mapping[str, str], backbone: Backbone, passage_prompt: PromptStack | None) -> PassageIndex:
    """Encode every passage once; row order follows ``corpus`` iteration order."""
    if not corpus:
        raise DataError("cannot index an empty corpus")
    if passage_prompt is not None:
        passage_prompt.check_config(backbone.config)
    ids = tuple(corpus)
    prefix = None if passage_prompt is None or passage_prompt.shape[1] == 0 else passage_prompt.values
    mat = encode_texts(backbone, [corpus[i] for i in ids], prefix)
    pd = passage_prompt.digest() if passage_prompt is not None else ""
    return PassageIndex(ids, mat, backbone.digest(), pd)


def _rank(index: PassageIndex, scores: np.ndarray, k: int) -> np.ndarray:
    # lexsort: last key is primary -> descending score, then ascending id
    return np.lexsort((index._id_rank, -scores))[:k]


def search(index: PassageIndex, q, k: int = 10) -> list[tuple[str, float]]:
    """Exact top-``k`` by descending inner product; ties go to the smaller id."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    v = q.vector if isinstance(q, Embedding) else np.asarray(q, dtype=np.float64)
    if v.shape != (index.dim,):
        raise ShapeError(f"query dimension {v.shape} does not match index dimension {index.dim}")
    # same kernel as search_many so single and batched scores agree bitwise
    return search_many(index, v[None, :], k)[0]


def search_many(index: PassageIndex, Q: np.ndarray, k: int = 10) -> list[list[tuple[str, float]]]:
    if k < 1:
        raise ConfigError("k must be >= 1")
    if Q.ndim != 2 or Q.shape[1] != index.dim:
        raise ShapeError(f"query matrix {Q.shape} does not match index dimension {index.dim}")
    out = []
    for q in Q:
        # one matrix-vector product per query: scores do not depend on batch size
        row = index.matrix @ q
        out.append([(index.ids[i], float(row[i])) for i in _rank(index, row, k)])
    return out
