"""Frozen transformer encoder with deep key/value prefix prompts.

A prompt stack holds, for every layer, ``P`` key rows and ``P`` value rows
that are prepended to that layer's attention keys and values. Real tokens
attend to them; prefix positions are never queried. The pooled output is
the hidden state at the BOS position after the last layer.

Only prompt gradients are produced by :func:`backward`; the backbone is
never differentiated, and its arrays are write-protected after init.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numcore import (
    Rng,
    digest_arrays,
    fnv1a64,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    softmax_backward,
    softmax_rows,
)

PAD, BOS, UNK = 0, 1, 2
N_RESERVED = 3


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 1024
    max_len: int = 64
    prompt_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.prompt_len < 0:
            raise ConfigError("prompt_len must be >= 0")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError("vocab_size must exceed the 3 reserved ids")
        if min(self.layers, self.dim, self.heads, self.ffn_dim, self.max_len) < 1:
            raise ConfigError("encoder sizes must be positive")

    @property
    def prompt_shape(self) -> tuple[int, int, int, int]:
        return (self.layers, 2, self.prompt_len, self.dim)

    def to_dict(self) -> dict:
        return asdict(self)


def tokenize(text: str, config: EncoderConfig) -> list[int]:
    """Lowercase, split on whitespace, hash each word into ``[3, V)``; BOS first."""
    span = config.vocab_size - N_RESERVED
    ids = [BOS]
    for word in text.lower().split():
        ids.append(N_RESERVED + fnv1a64(word.encode("utf-8")) % span)
    return ids[: config.max_len]


_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class Backbone:
    """Token embeddings, per-layer attention/FFN weights and layer norms.

    Initialised once from ``config.seed`` and then frozen: every array is
    marked read-only, so an accidental in-place update raises.
    """

    def __init__(self, config: EncoderConfig, embed: np.ndarray, layers: list[dict], final: dict):
        self.config = config
        self.embed = embed
        self.layers = layers
        self.final = final
        for a in self._arrays():
            a.flags.writeable = False

    @classmethod
    def init(cls, config: EncoderConfig) -> "Backbone":
        rng = Rng(config.seed)
        d, f = config.dim, config.ffn_dim
        embed = rng.normal((config.vocab_size, d), 1.0)
        layers = []
        for _ in range(config.layers):
            layers.append(
                {
                    "ln1_g": np.ones(d),
                    "ln1_b": np.zeros(d),
                    "wq": rng.normal((d, d), 1.0 / math.sqrt(d)),
                    "wk": rng.normal((d, d), 1.0 / math.sqrt(d)),
                    "wv": rng.normal((d, d), 1.0 / math.sqrt(d)),
                    "wo": rng.normal((d, d), 1.0 / math.sqrt(d)),
                    "ln2_g": np.ones(d),
                    "ln2_b": np.zeros(d),
                    "w1": rng.normal((d, f), 1.0 / math.sqrt(d)),
                    "b1": np.zeros(f),
                    "w2": rng.normal((f, d), 1.0 / math.sqrt(f)),
                    "b2": np.zeros(d),
                }
            )
        final = {"g": np.ones(d), "b": np.zeros(d)}
        return cls(config, embed, layers, final)

    def _arrays(self) -> list[np.ndarray]:
        out = [self.embed]
        for lp in self.layers:
            out.extend(lp[k] for k in _LAYER_KEYS)
        out.extend([self.final["g"], self.final["b"]])
        return out

    def digest(self) -> str:
        """SHA-256 over every parameter's bytes."""
        return digest_arrays(self._arrays())


class PromptStack:
    """Per-layer key and value prefixes, array shape ``(L, 2, P, d)``.

    ``values[l, 0]`` is layer ``l``'s key block, ``values[l, 1]`` its value block.
    """

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 4 or values.shape[1] != 2:
            raise ShapeError(f"prompt stack must have shape (L, 2, P, d), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ShapeError("prompt stack contains non-finite values")
        self.values = values

    @classmethod
    def zeros(cls, config: EncoderConfig) -> "PromptStack":
        return cls(np.zeros(config.prompt_shape))

    @classmethod
    def gaussian(cls, config: EncoderConfig, rng: Rng, std: float = 0.02) -> "PromptStack":
        return cls(rng.normal(config.prompt_shape, std))

    @property
    def shape(self) -> tuple[int, int, int]:
        """(L, P, d)"""
        L, _, P, d = self.values.shape
        return (L, P, d)

    def copy(self) -> "PromptStack":
        return PromptStack(self.values.copy())

    def digest(self) -> str:
        return digest_arrays([self.values])

    def check_config(self, config: EncoderConfig) -> None:
        if self.values.shape != config.prompt_shape:
            raise ConfigError(
                f"prompt shape {self.values.shape} does not match encoder {config.prompt_shape}"
            )

    def __repr__(self) -> str:
        L, P, d = self.shape
        return f"PromptStack(L={L}, P={P}, d={d})"


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    norm: float

    @classmethod
    def of(cls, vector: np.ndarray) -> "Embedding":
        v = np.asarray(vector, dtype=np.float64)
        return cls(v, float(np.linalg.norm(v)))


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    return tokens, tokens != PAD


def _heads(x: np.ndarray, H: int) -> np.ndarray:
    B, n, d = x.shape
    return x.reshape(B, n, H, d // H).transpose(0, 2, 1, 3)


def _merge(x: np.ndarray) -> np.ndarray:
    B, H, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, H * dh)


def _layer_forward(x, lp, pk, pv, keymask, nq, H):
    B, T, d = x.shape
    scale = 1.0 / math.sqrt(d // H)
    a, ln1 = layer_norm(x, lp["ln1_g"], lp["ln1_b"])
    qh = _heads(a[:, :nq] @ lp["wq"], H)
    kh = _heads(a @ lp["wk"], H)
    vh = _heads(a @ lp["wv"], H)
    P = 0 if pk is None else pk.shape[1]
    if P:
        pkh = np.broadcast_to(_heads(pk, H), (B, H, P, d // H))
        pvh = np.broadcast_to(_heads(pv, H), (B, H, P, d // H))
        kh = np.concatenate([pkh, kh], axis=2)
        vh = np.concatenate([pvh, vh], axis=2)
        keymask = np.concatenate([np.ones((B, P), dtype=bool), keymask], axis=1)
    attn = softmax_rows((qh @ kh.transpose(0, 1, 3, 2)) * scale, keymask[:, None, None, :])
    o = _merge(attn @ vh)
    x1 = x[:, :nq] + o @ lp["wo"]
    c, ln2 = layer_norm(x1, lp["ln2_g"], lp["ln2_b"])
    z = c @ lp["w1"] + lp["b1"]
    hid, t = gelu(z)
    x2 = x1 + hid @ lp["w2"] + lp["b2"]
    cache = (ln1, qh, kh, vh, attn, ln2, z, t, P, nq, T)
    return x2, cache


def _layer_backward(dx2, lp, cache, H):
    ln1, qh, kh, vh, attn, ln2, z, t, P, nq, T = cache
    B = dx2.shape[0]
    d = lp["wq"].shape[0]
    scale = 1.0 / math.sqrt(d // H)
    dz = gelu_backward(dx2 @ lp["w2"].T, z, t)
    dx1 = dx2 + layer_norm_backward(dz @ lp["w1"].T, ln2)
    doh = _heads(dx1 @ lp["wo"].T, H)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    ds = softmax_backward(attn, dattn) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    da = _merge(dkh[:, :, P:]) @ lp["wk"].T + _merge(dvh[:, :, P:]) @ lp["wv"].T
    da[:, :nq] += _merge(dqh) @ lp["wq"].T
    dx = layer_norm_backward(da, ln1)
    dx[:, :nq] += dx1
    dpk = _merge(dkh[:, :, :P]) if P else None
    dpv = _merge(dvh[:, :, :P]) if P else None
    return dx, dpk, dpv


def encode_batch(backbone: Backbone, seqs: list[list[int]], prefix: np.ndarray | None, keep_cache: bool = False):
    """Encode token sequences; returns ``(embeddings (B, d), cache)``.

    ``prefix`` is ``None`` (no prompt), a shared array ``(L, 2, P, d)`` or a
    per-sequence array ``(B, L, 2, P, d)``.
    """
    cfg = backbone.config
    tokens, mask = pad_batch(seqs)
    B = tokens.shape[0]
    if prefix is not None:
        expect = cfg.prompt_shape[:2] + cfg.prompt_shape[3:]
        shp = prefix.shape
        ok = (prefix.ndim == 4 and shp[:2] + shp[3:] == expect) or (
            prefix.ndim == 5 and shp[0] == B and shp[1:3] + shp[4:] == expect
        )
        if not ok:
            raise ConfigError(f"prompt shape {shp} incompatible with encoder {cfg.prompt_shape}")
        if prefix.ndim == 4:
            prefix = prefix[None]
    x = backbone.embed[tokens]
    caches = []
    n_layers = len(backbone.layers)
    for li, lp in enumerate(backbone.layers):
        nq = 1 if li == n_layers - 1 else x.shape[1]
        pk = pv = None
        if prefix is not None:
            pk, pv = prefix[:, li, 0], prefix[:, li, 1]
        x, c = _layer_forward(x, lp, pk, pv, mask, nq, cfg.heads)
        if keep_cache:
            caches.append(c)
    out, lnf = layer_norm(x[:, 0], backbone.final["g"], backbone.final["b"])
    cache = (caches, lnf, None if prefix is None else prefix.shape) if keep_cache else None
    return out, cache


def backward(backbone: Backbone, cache, dout: np.ndarray) -> np.ndarray:
    """Gradient of a loss w.r.t. the prefix given ``dL/d(embeddings)``.

    The result has the prefix shape passed to :func:`encode_batch` (a shared
    prefix accumulates over the batch).
    """
    caches, lnf, pshape = cache
    if pshape is None:
        raise ConfigError("no prompt to differentiate")
    H = backbone.config.heads
    dx = layer_norm_backward(dout, lnf)[:, None, :]
    Bp, L = pshape[0], pshape[1]
    grads = np.zeros((dout.shape[0],) + tuple(pshape[1:]))
    for li in range(L - 1, -1, -1):
        dx, dpk, dpv = _layer_backward(dx, backbone.layers[li], caches[li], H)
        if dpk is not None:
            grads[:, li, 0] = dpk
            grads[:, li, 1] = dpv
    if Bp == 1:
        return grads.sum(axis=0)
    return grads


def encode(tokens: list[int], prompt: PromptStack | None, backbone: Backbone) -> Embedding:
    if prompt is not None:
        prompt.check_config(backbone.config)
        if prompt.shape[1] == 0:
            prompt = None
    out, _ = encode_batch(backbone, [tokens], None if prompt is None else prompt.values)
    return Embedding.of(out[0])


def encode_texts(
    backbone: Backbone, texts: list[str], prefix: np.ndarray | None, batch_size: int = 256
) -> np.ndarray:
    """Embeddings for many texts, chunked; row order follows ``texts``."""
    cfg = backbone.config
    seqs = [tokenize(t, cfg) for t in texts]
    out = np.empty((len(seqs), cfg.dim))
    per_item = prefix is not None and prefix.ndim == 5
    for s in range(0, len(seqs), batch_size):
        chunk = prefix[s : s + batch_size] if per_item else prefix
        out[s : s + batch_size] = encode_batch(backbone, seqs[s : s + batch_size], chunk)[0]
    return out


def score(q: Embedding, p: Embedding) -> float:
    """Inner product, no normalisation."""
    if q.vector.shape != p.vector.shape:
        raise ShapeError(f"embedding dimension mismatch: {q.vector.shape} vs {p.vector.shape}")
    return float(np.dot(q.vector, p.vector))
