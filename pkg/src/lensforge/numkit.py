"""Deterministic numerical kernels shared by every stage of the pipeline.

Arrays are plain ``numpy.ndarray`` objects in float64.  Randomness comes from
a xoshiro256** generator seeded through splitmix64, so that draws are
reproducible independently of numpy's own bit generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy.optimize import linear_sum_assignment

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
HUNGARIAN_MAX_N = 512


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------

def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix integer keys into a seed, e.g. ``derive_seed(seed, prompt_id)``."""
    state = seed & MASK64
    _, out = splitmix64(state)
    for key in keys:
        state = (out ^ ((key & MASK64) * GOLDEN_GAMMA)) & MASK64
        _, out = splitmix64(state)
    return out


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _xoshiro_fill(s, n):
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3
    return out


class Rng:
    """xoshiro256** generator. Single owner; never share across threads."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        st = self.seed
        words = []
        for _ in range(4):
            st, out = splitmix64(st)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    def spawn(self, *keys: int) -> "Rng":
        """Independent child generator keyed by ``keys`` (not by draw history)."""
        return Rng(derive_seed(self.seed, *keys))

    def state(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._state)

    def next_u64(self, n: int) -> np.ndarray:
        return _xoshiro_fill(self._state, int(n))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits."""
        bits = self.next_u64(n) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller on consecutive uniform pairs; both outputs are used."""
        if n < 1:
            raise DomainError(f"need n >= 1 normal draws, got {n}")
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def normal_like(self, shape) -> np.ndarray:
        size = int(np.prod(shape))
        return self.normal(size).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        if k > n:
            raise DomainError(f"cannot choose {k} of {n} without replacement")
        return self.permutation(n)[:k]

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)


def sample_standard_normal(rng: Rng, n: int) -> np.ndarray:
    return rng.normal(n)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite entries in matmul result")
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), lr=lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update. Mutates ``state`` and returns new params."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(f"adam shapes disagree: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """Adam over a dict of named parameter arrays."""

    lr: float = 1e-4
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.zeros_like(params[name], lr=self.lr)
            params[name] = adam_step(params[name], g, st)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(
    loss: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grads: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max over coordinates of |central difference - analytic| / (|analytic| + 1e-8)."""
    params = np.array(params, dtype=np.float64)
    analytic_grads = np.asarray(analytic_grads, dtype=np.float64)
    if params.shape != analytic_grads.shape:
        raise ShapeError(f"gradient shape {analytic_grads.shape} != params {params.shape}")
    flat = params.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss(params))
        flat[i] = orig - h
        down = float(loss(params))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        numeric = (up - down) / (2.0 * h)
        a = analytic_grads.reshape(-1)[i]
        worst = max(worst, abs(numeric - a) / (abs(a) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------

def loglog_fit(xs, ys) -> tuple[float, float]:
    """OLS of ln y on ln x. Returns ``(slope, intercept)``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeError("loglog_fit needs two 1-d sequences of equal length")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise DomainError("loglog_fit requires strictly positive xs and ys")
    if np.unique(xs).size < 2:
        raise DomainError("loglog_fit requires at least two distinct xs")
    lx, ly = np.log(xs), np.log(ys)
    mx, my = lx.mean(), ly.mean()
    slope = float(np.sum((lx - mx) * (ly - my)) / np.sum((lx - mx) ** 2))
    return slope, float(my - slope * mx)


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------

def assignment_min_cost(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact minimum-cost perfect matching on a square cost matrix.

    Returns ``(perm, total)`` where row ``i`` is matched to column ``perm[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"assignment needs a square matrix, got {cost.shape}")
    n = cost.shape[0]
    if n > HUNGARIAN_MAX_N:
        raise ShapeError(f"assignment capped at n={HUNGARIAN_MAX_N}, got {n}")
    if not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise DomainError("assignment costs must be finite and nonnegative")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())
