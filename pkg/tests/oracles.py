"""Independent reference computations used by the tests.

Each oracle takes a deliberately naive route (dense loops, autograd, scipy)
so that it shares no code path with the implementation it checks.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment, minimize
from scipy.special import logsumexp

from saesteer.sae import SaeParams


# --- SAE ---------------------------------------------------------------------

def naive_support(z: np.ndarray, m: int, k: int) -> list[int]:
    """Top min(k, m) of the first m entries by a full stable sort."""
    prefix = z[:m]
    order = sorted(range(m), key=lambda i: (-prefix[i], i))
    return sorted(order[: min(k, m)])


def naive_prefix_recon(params: SaeParams, x: np.ndarray, m: int, k: int) -> np.ndarray:
    z = np.maximum(params.W_enc @ x + params.b_enc, 0.0)
    out = params.b_dec.copy()
    for i in naive_support(z, m, k):
        out = out + z[i] * params.W_dec[i]
    return out


def naive_ordered_loss(params: SaeParams, X: np.ndarray, weights: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Batch-mean weighted loss and per-truncation mean terms, recomputed from scratch per m."""
    X = np.atleast_2d(X)
    per = np.zeros(params.d_sae)
    for x in X:
        for m in range(1, params.d_sae + 1):
            r = x - naive_prefix_recon(params, x, m, k)
            per[m - 1] += weights[m - 1] * float(r @ r)
    per /= X.shape[0]
    return float(per.sum()), per


def autograd_ordered(params: SaeParams, X: np.ndarray, weights: np.ndarray, k: int) -> dict[str, np.ndarray]:
    """Gradients of the naive per-m loss by torch autograd, supports held constant."""
    t = {n: torch.tensor(a, requires_grad=True) for n, a in params.arrays().items()}
    Xt = torch.tensor(np.atleast_2d(X))
    A = Xt @ t["W_enc"].T + t["b_enc"]
    Z = torch.relu(A)
    Zn = Z.detach().numpy()
    total = torch.zeros((), dtype=torch.float64)
    for b in range(Xt.shape[0]):
        for m in range(1, params.d_sae + 1):
            mask = torch.zeros(params.d_sae, dtype=torch.float64)
            mask[naive_support(Zn[b], m, k)] = 1.0
            xhat = (Z[b] * mask) @ t["W_dec"] + t["b_dec"]
            total = total + weights[m - 1] * ((Xt[b] - xhat) ** 2).sum()
    (total / Xt.shape[0]).backward()
    return {n: v.grad.numpy() for n, v in t.items()}


def finite_difference(loss, params: SaeParams, eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Fourth-order central differences of ``loss(params)`` for every parameter entry."""
    out = {}
    for name, arr in params.arrays().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            f = []
            for step in (2, 1, -1, -2):
                flat[i] = old + step * eps
                f.append(loss(params))
            flat[i] = old
            gflat[i] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * eps)
        out[name] = g
    return out


def max_rel_error(analytic: dict, reference: dict, floor: float = 1e-4) -> float:
    """max |a - r| / max(|a|, |r|, floor); the floor keeps exact zeros from dividing roundoff."""
    worst = 0.0
    for name, ref in reference.items():
        got = analytic[name]
        scale = np.maximum(np.maximum(np.abs(got), np.abs(ref)), floor)
        worst = max(worst, float((np.abs(got - ref) / scale).max()))
    return worst


def greedy_matching(true_atoms: np.ndarray, learned: np.ndarray) -> np.ndarray:
    """Greedy one-to-one matching on |cosine|; returns the matched cosine per true atom."""
    a = true_atoms / np.linalg.norm(true_atoms, axis=1, keepdims=True)
    norms = np.linalg.norm(learned, axis=1, keepdims=True)
    b = learned / np.where(norms == 0, 1, norms)
    C = a @ b.T
    out = np.zeros(a.shape[0])
    used_a = np.zeros(a.shape[0], dtype=bool)
    used_b = np.zeros(b.shape[0], dtype=bool)
    for flat in np.argsort(-C, axis=None):
        i, j = divmod(int(flat), b.shape[0])
        if used_a[i] or used_b[j]:
            continue
        out[i] = C[i, j]
        used_a[i] = used_b[j] = True
        if used_a.all():
            break
    return out


def optimal_matching(true_atoms: np.ndarray, learned: np.ndarray) -> np.ndarray:
    """Hungarian matching, an upper bound on the greedy score."""
    a = true_atoms / np.linalg.norm(true_atoms, axis=1, keepdims=True)
    b = learned / np.maximum(np.linalg.norm(learned, axis=1, keepdims=True), 1e-300)
    C = a @ b.T
    rows, cols = linear_sum_assignment(-C)
    out = np.zeros(a.shape[0])
    out[rows] = C[rows, cols]
    return out


# --- probes ------------------------------------------------------------------

def lbfgs_logreg(X: np.ndarray, y: np.ndarray, C: float, classes: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Minimise mean cross-entropy + ||W||^2 / (2 C n) with scipy's L-BFGS.

    Returns (weights K x d, intercept K, objective value).
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    K = classes.size
    Y = (y[:, None] == classes[None, :]).astype(np.float64)

    def f(theta):
        W = theta[: K * d].reshape(K, d)
        b = theta[K * d :]
        S = X @ W.T + b
        lse = logsumexp(S, axis=1)
        obj = float((lse - (S * Y).sum(axis=1)).mean() + (W * W).sum() / (2 * C * n))
        P = np.exp(S - lse[:, None])
        G = (P - Y) / n
        gW = G.T @ X + W / (C * n)
        return obj, np.concatenate([gW.ravel(), G.sum(axis=0)])

    res = minimize(f, np.zeros(K * (d + 1)), jac=True, method="L-BFGS-B",
                   options={"maxiter": 20000, "gtol": 1e-12, "ftol": 1e-15})
    return res.x[: K * d].reshape(K, d), res.x[K * d :], float(res.fun)


def exhaustive_threshold_f1(column: np.ndarray, labels: np.ndarray, thresholds) -> tuple[float, float]:
    """Best (threshold, F1) by explicit counting; ties keep the lower threshold."""
    lo, hi = column.min(), column.max()
    scaled = np.zeros_like(column, dtype=np.float64) if hi == lo else (column - lo) / (hi - lo)
    best = (None, -1.0)
    for t in sorted(thresholds):
        tp = fp = fn = 0
        for s, lab in zip(scaled, labels):
            pred = s >= t
            tp += pred and lab
            fp += pred and not lab
            fn += (not pred) and lab
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        if f1 > best[1]:
            best = (t, f1)
    return best
