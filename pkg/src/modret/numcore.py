"""Dense float64 kernels, hand-written backward passes and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every kernel
here is deterministic for identical inputs on one platform.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import EvaluationError, ShapeError

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Child seed for a named sub-stream: ``seed`` XOR a hash of ``label``, then mixed."""
    _, out = splitmix64((seed ^ fnv1a64(label.encode("utf-8"))) & _MASK64)
    return out


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    The stream depends only on the 64-bit seed, never on the platform or on
    numpy's own generators. Single owner; not thread safe.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK64
        result = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def integers(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n

    def gauss(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        g = self.gauss
        out = np.fromiter((g() for _ in range(n)), dtype=np.float64, count=n)
        return (out * std).reshape(shape)

    def uniform(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        r = self.random
        return np.fromiter((r() for _ in range(n)), dtype=np.float64, count=n).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        self.shuffle(items)
        return items

    def shuffle(self, items: list) -> None:
        """Fisher-Yates in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items: Sequence):
        return items[self.integers(len(items))]

    def sample(self, items: Sequence, k: int) -> list:
        """k distinct elements, order random."""
        if k > len(items):
            raise ValueError("sample larger than population")
        pool = list(items)
        for i in range(k):
            j = i + self.integers(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax along the last axis with max subtraction.

    ``mask`` (broadcastable, True = keep) zeroes excluded positions exactly.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ShapeError("softmax of an empty matrix")
    if mask is not None:
        m = np.where(mask, m, -np.inf)
    mx = np.max(m, axis=-1, keepdims=True)
    e = np.exp(m - mx)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Normalize the last axis, then scale and shift.

    Returns ``(out, cache)``; ``cache`` feeds :func:`layer_norm_backward`.
    """
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ShapeError(f"layer_norm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout: np.ndarray, cache) -> np.ndarray:
    """Gradient with respect to the layer-norm input (gain and bias are frozen)."""
    xhat, inv, gain = cache
    dxhat = dout * gain
    return inv * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray):
    """tanh-approximated GELU; returns ``(out, tanh_term)``."""
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dout: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x) * (1.0 - t * t)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * dt)


def grad_check(
    f: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: list[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)`` with one gradient array per
    parameter. Parameters are perturbed in place and restored. The error of a
    coordinate is ``|ga - gfd| / max(1, |ga|, |gfd|)``.
    """
    value, grads = f(params)
    if not np.isfinite(value):
        raise EvaluationError(f"function value is not finite: {value}")
    worst = 0.0
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        flat = p.reshape(-1)  # view; params must be contiguous
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)[0]
            flat[i] = orig - h
            fm = f(params)[0]
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError("non-finite value during finite differencing")
            gfd = (fp - fm) / (2.0 * h)
            ga = gflat[i]
            err = abs(ga - gfd) / max(1.0, abs(ga), abs(gfd))
            worst = max(worst, err)
    return worst


def digest_arrays(arrays: Sequence[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()
