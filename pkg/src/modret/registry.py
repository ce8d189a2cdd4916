"""Named on-disk storage of prompt stacks (``.rmod`` files).

Layout, little-endian::

    b"REMOPMOD" | u32 version=1 | u32 meta_len | meta JSON (utf-8)
    | L*2*P*d float32 payload (layer-major, keys before values) | u32 crc32(payload)

Payloads are stored at 32-bit precision and widened to float64 on load.
"""

from __future__ import annotations

import fcntl
import json
import os
import struct
import tempfile
import warnings
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .encoder import PromptStack
from .errors import (
    ConfigError,
    CorruptionError,
    ModuleFormatError,
    ModuleLookupError,
    UnsupportedVersionError,
)

MAGIC = b"REMOPMOD"
VERSION = 1
SUFFIX = ".rmod"
KINDS = ("general-query", "general-passage", "attribute", "composed")


@dataclass(frozen=True)
class ModuleDescriptor:
    name: str
    kind: str
    shape: tuple[int, int, int]
    attribute: Optional[str] = None
    seed: int = 0
    created_by: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown module kind {self.kind!r}")
        if not self.name:
            raise ConfigError("module name must be non-empty")
        object.__setattr__(self, "shape", tuple(int(x) for x in self.shape))

    def to_json(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModuleDescriptor":
        try:
            return cls(
                name=d["name"],
                kind=d["kind"],
                shape=tuple(d["shape"]),
                attribute=d.get("attribute"),
                seed=int(d.get("seed", 0)),
                created_by=d.get("created_by", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModuleFormatError(f"bad module metadata: {exc}") from None


def encode_module(desc: ModuleDescriptor, stack: PromptStack) -> bytes:
    if tuple(desc.shape) != stack.shape:
        raise ModuleFormatError(f"descriptor shape {desc.shape} does not match payload {stack.shape}")
    meta = json.dumps(desc.to_json(), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(stack.values, dtype="<f4").tobytes()
    return b"".join(
        [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, payload, struct.pack("<I", zlib.crc32(payload))]
    )


def decode_module(blob: bytes) -> tuple[ModuleDescriptor, PromptStack]:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        if len(blob) < len(MAGIC) and MAGIC.startswith(blob) and blob:
            raise CorruptionError("truncated module file")
        raise ModuleFormatError("not a module file")
    if len(blob) < 16:
        raise CorruptionError("truncated module header")
    version, meta_len = struct.unpack_from("<II", blob, 8)
    if version > VERSION or version < 1:
        raise UnsupportedVersionError(f"unsupported module version {version}")
    body = 16 + meta_len
    if len(blob) < body + 4:
        raise CorruptionError("truncated module file")
    try:
        meta = json.loads(blob[16:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable metadata: {exc}") from None
    desc = ModuleDescriptor.from_json(meta)
    payload = blob[body:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    L, P, d = desc.shape
    expected = L * 2 * P * d * 4
    # checksum first: truncation shows up as a mismatch, an intact payload
    # of the wrong size is a metadata problem
    if zlib.crc32(payload) != crc:
        raise CorruptionError("payload checksum mismatch (file corrupt or truncated)")
    if len(payload) != expected:
        raise ModuleFormatError(f"payload size {len(payload)} disagrees with shape {desc.shape}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(L, 2, P, d)
    return desc, PromptStack(values)


@contextmanager
def _locked(path: Path) -> Iterator[None]:
    lock = path.with_name(path.name + ".lock")
    with open(lock, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_module(desc: ModuleDescriptor, stack: PromptStack, path, force: bool = False) -> None:
    path = Path(path)
    blob = encode_module(desc, stack)
    with _locked(path):
        if path.exists() and not force:
            raise FileExistsError(f"{path} exists; pass force=True to overwrite")
        atomic_write(path, blob)


def load_module(path) -> tuple[ModuleDescriptor, PromptStack]:
    return decode_module(Path(path).read_bytes())


def read_descriptor_json(path) -> dict:
    """Raw metadata dict as stored in the file (validated)."""
    desc, _ = load_module(path)
    return desc.to_json()


def list_modules(directory) -> list[ModuleDescriptor]:
    """Descriptors of valid modules in ``directory`` sorted by name.

    Unreadable or corrupt files emit a :class:`UserWarning` and are skipped.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise OSError(f"not a readable directory: {directory}")
    out = []
    for p in sorted(directory.glob(f"*{SUFFIX}")):
        try:
            out.append(load_module(p)[0])
        except (ModuleFormatError, OSError) as exc:
            warnings.warn(f"skipping {p.name}: {exc}", stacklevel=2)
    return sorted(out, key=lambda d: d.name)


class Registry:
    """A directory of modules addressable by name (``<dir>/<name>.rmod``).

    Supports ``registry[name]`` so it can be passed wherever a mapping of
    stacks is expected.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self._cache: dict[str, tuple[ModuleDescriptor, PromptStack]] = {}

    def path(self, name: str) -> Path:
        return self.directory / f"{name}{SUFFIX}"

    def save(self, desc: ModuleDescriptor, stack: PromptStack, force: bool = False) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        p = self.path(desc.name)
        save_module(desc, stack, p, force=force)
        self._cache.pop(desc.name, None)
        return p

    def load(self, name: str) -> tuple[ModuleDescriptor, PromptStack]:
        if name not in self._cache:
            p = self.path(name)
            if not p.exists():
                raise ModuleLookupError(f"unknown module {name!r} in {self.directory}")
            self._cache[name] = load_module(p)
        return self._cache[name]

    def __getitem__(self, name: str) -> PromptStack:
        return self.load(name)[1]

    def __contains__(self, name: str) -> bool:
        return self.path(name).exists()

    def descriptors(self) -> list[ModuleDescriptor]:
        return list_modules(self.directory)

    def names(self) -> list[str]:
        return [d.name for d in self.descriptors()]
