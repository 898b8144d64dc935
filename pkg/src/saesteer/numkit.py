"""Shared numerical kernels: top-k masking, Adam, scaling, classification metrics,
correlation statistics and seeded random streams.

All reductions run in float64 and in a fixed order so results are reproducible
bit for bit given the same seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """PCG64 generator for ``seed`` optionally specialised by ``keys``.

    Keys let independent stages (corpus, lm, sae, ...) draw from unrelated
    streams without coordinating seeds.
    """
    if not keys:
        return np.random.Generator(np.random.PCG64(seed))
    words = [seed] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def derive_seed(seed: int, *keys: int | str) -> int:
    return int(make_rng(seed, *keys).integers(0, 2**62))


def _key_word(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return int.from_bytes(hashlib.sha256(str(key).encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# Top-k
# ---------------------------------------------------------------------------

def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, sorted ascending.

    Ties at the cut-off go to the lower index. Works on a vector or a 2-D batch.
    """
    values = np.asarray(values)
    d = values.shape[-1]
    if not 1 <= k <= d:
        raise ValueError(f"invalid k: {k} (length {d})")
    batched = values.ndim == 2
    v = values if batched else values[None, :]
    if k == d:
        idx = np.broadcast_to(np.arange(d), v.shape).copy()
        return idx if batched else idx[0]
    # k-th largest value per row, then strict winners plus lowest-index ties
    kth = -np.partition(-v, k - 1, axis=1)[:, k - 1 : k]
    above = v > kth
    tied = v == kth
    need = k - above.sum(axis=1, keepdims=True)
    take = above | (tied & (np.cumsum(tied, axis=1) <= need))
    rows, idx = np.nonzero(take)
    if rows.size != v.shape[0] * k:
        raise FloatingPointError("top-k input contains NaN")
    idx = idx.reshape(v.shape[0], k)
    return idx if batched else idx[0]


def topk_select(v: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(indices, masked)`` keeping the k largest entries of ``v``."""
    v = np.asarray(v, dtype=np.float64)
    idx = topk_indices(v, k)
    masked = np.zeros_like(v)
    if v.ndim == 1:
        masked[idx] = v[idx]
    else:
        rows = np.arange(v.shape[0])[:, None]
        masked[rows, idx] = v[rows, idx]
    return idx, masked


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **kw)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step, applied in place to ``param`` and ``state``."""
    if param.shape != grad.shape or state.m1.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m1.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m1 *= b1
    state.m1 += (1.0 - b1) * grad
    state.m2 *= b2
    state.m2 += (1.0 - b2) * (grad * grad)
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    denom = np.sqrt(state.m2 / c2)
    denom += state.eps
    param -= (lr / c1) * state.m1 / denom
    return param, state


# ---------------------------------------------------------------------------
# Scaling and classification metrics
# ---------------------------------------------------------------------------

def minmax_scale(column: np.ndarray) -> np.ndarray:
    """Map to [0, 1]; a constant column maps to all zeros."""
    v = np.asarray(column, dtype=np.float64)
    if v.size == 0:
        return v.copy()
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int = 0


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf1(pred: np.ndarray, truth: np.ndarray) -> ClassMetrics:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.sum(pred & truth))
    n_pred = int(pred.sum())
    n_true = int(truth.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    return ClassMetrics(precision, recall, f1_from_pr(precision, recall), n_true)


def per_class_metrics(pred: np.ndarray, truth: np.ndarray, classes: Sequence[int]) -> list[ClassMetrics]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return [prf1(pred == c, truth == c) for c in classes]


def macro_f1(per_class: Sequence[ClassMetrics] | Sequence[float]) -> float:
    if len(per_class) == 0:
        raise ValueError("macro_f1 needs at least one class")
    vals = [m.f1 if isinstance(m, ClassMetrics) else float(m) for m in per_class]
    return float(sum(vals) / len(vals))


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

def pearson(xs: np.ndarray, ys: np.ndarray) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two vectors of equal length")
    if x.size < 3:
        raise ValueError("pearson needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("degenerate input: zero variance")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def spearman(xs: np.ndarray, ys: np.ndarray) -> float:
    return pearson(rankdata(xs, method="average"), rankdata(ys, method="average"))


STATISTICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "pearson": pearson,
    "spearman": spearman,
}


def perm_pvalue(xs, ys, stat: str, n_perm: int, rng: np.random.Generator) -> float:
    """Two-sided permutation p-value, ``(1 + #|perm| >= |obs|) / (1 + n_perm)``."""
    if n_perm < 100:
        raise ValueError("n_perm must be at least 100")
    fn = STATISTICS[stat]
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    observed = abs(fn(x, y))
    if stat == "spearman":
        x, y = rankdata(x, method="average"), rankdata(y, method="average")
    # permuted statistics share the centring of y, so evaluate them in one matmul
    dx = x - x.mean()
    dy = y - y.mean()
    norm = np.sqrt((dx @ dx) * (dy @ dy))
    perms = np.argsort(rng.random((n_perm, y.size)), axis=1)
    stats = np.abs(dy[perms] @ dx) / norm
    hits = int(np.sum(stats >= observed - 1e-12))
    return (1 + hits) / (1 + n_perm)
