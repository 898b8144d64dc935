"""Linear probes and activation-threshold feature selection.

A multinomial logistic regression is fit on latent (or raw neuron)
activations; its per-class coefficients rank latents, and the top-ranked
latents are validated one by one by binarising their MinMax-scaled
activations at a handful of thresholds and scoring F1 against the concept.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from saesteer import sae as sae_mod
from saesteer.io import PROBE_MAGIC, ActivationSet, read_blob, write_blob
from saesteer.numkit import ClassMetrics, macro_f1, minmax_scale, per_class_metrics, prf1

CONCEPTS = {"region": "residue", "j": "sequence", "v": "sequence"}


@dataclass
class ProbeConfig:
    c_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    folds: int = 3
    max_iter: int = 300
    tol: float = 1e-5
    top_n: int = 500
    thresholds: tuple[float, ...] = (0.1, 0.2, 0.5, 0.8, 0.9)
    f1_cut: float = 0.5

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if not self.c_grid:
            raise ValueError("c_grid must not be empty")
        if not all(0 < t < 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1)")
        if not 0 < self.f1_cut < 1:
            raise ValueError("f1_cut must lie in (0, 1)")


@dataclass
class LogReg:
    weights: np.ndarray  # (n_classes, n_features)
    intercept: np.ndarray  # (n_classes,)
    classes: np.ndarray
    n_iter: int = 0
    objective: float = float("nan")

    def decision(self, X) -> np.ndarray:
        return np.asarray(X @ self.weights.T) + self.intercept

    def predict(self, X) -> np.ndarray:
        return self.classes[self.decision(X).argmax(axis=1)]


@dataclass
class ProbeResult:
    weights: np.ndarray
    intercept: np.ndarray
    classes: np.ndarray
    best_c: float
    cv_scores: dict[float, dict[str, float]]
    train_metric: float
    val_metric: float = float("nan")
    val_accuracy: float = float("nan")
    per_class: list[ClassMetrics] = field(default_factory=list)

    @property
    def model(self) -> LogReg:
        return LogReg(self.weights, self.intercept, self.classes)


@dataclass
class FeatureRecord:
    latent: int
    concept: int
    best_threshold: float
    precision: float
    recall: float
    f1: float
    layer: int = 0
    is_feature: bool = False


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------

def featurize(acts: ActivationSet, params: sae_mod.SaeParams | None = None, level: str = "residue",
              concept: str = "region", k: int | None = None):
    """Design matrix, labels and sequence ids for a probe.

    With an SAE the matrix holds its top-k latent activations as a sparse CSR
    matrix of width d_sae (zeros off-support); without one it is the dense
    neuron matrix. Sequence level mean-pools the residue rows of each sequence.
    """
    if params is not None:
        if k is None:
            raise ValueError("k is required when featurizing through an SAE")
        idx, vals = sae_mod.encode_batch(params, np.asarray(acts.x, dtype=np.float64), k)
        n = len(acts)
        X = sp.csr_matrix((vals.ravel(), idx.ravel(), np.arange(0, n * k + 1, k)), shape=(n, params.d_sae))
        X.eliminate_zeros()
    else:
        X = np.asarray(acts.x, dtype=np.float64)
    labels = {"region": acts.region, "j": acts.j_id, "v": acts.v_id}[concept]
    if level == "residue":
        return X, np.asarray(labels), np.asarray(acts.seq_id)
    if level != "sequence":
        raise ValueError(f"unknown level {level!r}")
    seqs, inverse, counts = np.unique(acts.seq_id, return_inverse=True, return_counts=True)
    pool = sp.csr_matrix((1.0 / counts[inverse], (inverse, np.arange(len(acts)))), shape=(seqs.size, len(acts)))
    pooled = pool @ X
    if sp.issparse(pooled):
        pooled = pooled.tocsr()
        pooled.sort_indices()
    first = np.zeros(seqs.size, dtype=np.int64)
    first[inverse[::-1]] = np.arange(len(acts))[::-1]
    return pooled, np.asarray(labels)[first], seqs


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

def _objective(X, Y, W, b, reg):
    S = np.asarray(X @ W) + b
    lse = logsumexp(S, axis=1)
    n = X.shape[0]
    loss = (lse.sum() - np.einsum("nk,nk->", S, Y)) / n + 0.5 * reg * np.einsum("dk,dk->", W, W)
    return loss, S, lse


def logreg_objective(model: LogReg, X, y, C: float) -> float:
    """Mean cross-entropy plus ``||W||^2 / (2 C n)``."""
    Y = (np.asarray(y)[:, None] == model.classes[None, :]).astype(np.float64)
    return float(_objective(X, Y, model.weights.T, model.intercept, 1.0 / (C * X.shape[0]))[0])


def fit_logreg(X, y, C: float, max_iter: int = 300, tol: float = 1e-5, init: LogReg | None = None) -> LogReg:
    """Multinomial L2 logistic regression by accelerated gradient descent.

    Minimises ``mean CE + ||W||^2 / (2 C n)`` (the intercept is not penalised)
    with backtracking line search and gradient-based restarts, stopping when
    the gradient norm drops below ``tol`` or after ``max_iter`` iterations.
    """
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("logistic regression needs at least two classes")
    n, d = X.shape
    K = classes.size
    Y = (y[:, None] == classes[None, :]).astype(np.float64)
    reg = 1.0 / (C * n)

    def value_grad(W, b):
        loss, S, lse = _objective(X, Y, W, b, reg)
        D = (np.exp(S - lse[:, None]) - Y) / n
        gW = np.asarray(X.T @ D) + reg * W
        return loss, gW, D.sum(axis=0)

    if init is not None:
        W, b = init.weights.T.copy(), init.intercept.copy()
    else:
        W, b = np.zeros((d, K)), np.zeros(K)
    Wy, by = W.copy(), b.copy()
    t = 1.0
    L = 1.0
    prev = np.inf
    it = 0
    f_cur = np.inf
    for it in range(1, max_iter + 1):
        f_y, gW, gb = value_grad(Wy, by)
        gnorm2 = float(np.einsum("dk,dk->", gW, gW) + gb @ gb)
        if np.sqrt(gnorm2) < tol:
            W, b, f_cur = Wy, by, f_y
            break
        while True:
            Wn, bn = Wy - gW / L, by - gb / L
            f_new = _objective(X, Y, Wn, bn, reg)[0]
            if f_new <= f_y - 0.5 * gnorm2 / L + 1e-15 * abs(f_y):
                break
            L *= 2.0
        if f_new > prev:
            # restart momentum
            t = 1.0
            Wy, by = W.copy(), b.copy()
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        Wy, by = Wn + mom * (Wn - W), bn + mom * (bn - b)
        W, b, t = Wn, bn, t_next
        prev = f_cur = f_new
        L *= 0.8
    return LogReg(W.T.copy(), b.copy(), classes, it, float(f_cur))


def _shuffled_folds(n: int, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    return np.array_split(rng.permutation(n), folds)


def _rows(X, idx):
    return X[idx]


def cv_grid_search(X, y, config: ProbeConfig, rng: np.random.Generator) -> ProbeResult:
    """Pick C by mean validation macro-F1 over shuffled folds, then refit on all rows."""
    y = np.asarray(y)
    classes = np.unique(y)
    folds = _shuffled_folds(len(y), config.folds, rng)
    scores: dict[float, dict[str, float]] = {}
    best_c, best_score = None, -np.inf
    # each fold warm-starts from its solution at the previous (smaller) C
    warm: list[LogReg | None] = [None] * len(folds)
    for C in sorted(set(config.c_grid)):
        f1s, accs = [], []
        for i, held in enumerate(folds):
            train = np.concatenate([f for j, f in enumerate(folds) if j != i])
            model = warm[i] = fit_logreg(_rows(X, train), y[train], C, config.max_iter, config.tol, init=warm[i])
            pred = model.predict(_rows(X, held))
            f1s.append(macro_f1(per_class_metrics(pred, y[held], classes)))
            accs.append(float(np.mean(pred == y[held])))
        scores[C] = {"macro_f1": float(np.mean(f1s)), "accuracy": float(np.mean(accs))}
        if scores[C]["macro_f1"] > best_score:
            best_c, best_score = C, scores[C]["macro_f1"]
    model = fit_logreg(X, y, best_c, config.max_iter, config.tol)
    train_metric = macro_f1(per_class_metrics(model.predict(X), y, classes))
    return ProbeResult(model.weights, model.intercept, classes, best_c, scores, train_metric)


def evaluate_probe(result: ProbeResult, X, y) -> ProbeResult:
    """Fill the validation fields (macro-F1, accuracy, per-class metrics)."""
    y = np.asarray(y)
    pred = result.model.predict(X)
    result.per_class = per_class_metrics(pred, y, result.classes)
    result.val_metric = macro_f1(result.per_class)
    result.val_accuracy = float(np.mean(pred == y))
    return result


# ---------------------------------------------------------------------------
# Latent selection
# ---------------------------------------------------------------------------

def rank_latents(result: ProbeResult | np.ndarray, concept: int, top_n: int = 500, sign: int = 1) -> np.ndarray:
    """Latents with the largest positive (``sign=-1``: most negative) weights for a class."""
    if isinstance(result, ProbeResult):
        row = np.flatnonzero(result.classes == concept)
        if row.size == 0:
            raise ValueError(f"class {concept} not in probe classes {result.classes.tolist()}")
        w = result.weights[row[0]] * sign
    else:
        w = np.asarray(result, dtype=np.float64) * sign
    pos = np.flatnonzero(w > 0)
    order = pos[np.lexsort((pos, -w[pos]))]
    return order[:top_n]


def threshold_sweep(column: np.ndarray, labels: np.ndarray, config: ProbeConfig,
                    latent: int = -1, concept: int = 1, layer: int = 0) -> FeatureRecord:
    """Best-F1 threshold for an already MinMax-scaled latent column.

    The latent counts as a feature only if its best F1 is strictly above
    ``config.f1_cut``. Ties between thresholds go to the lower threshold.
    """
    col = np.asarray(column, dtype=np.float64)
    truth = np.asarray(labels).astype(bool)
    best = None
    for thr in sorted(config.thresholds):
        m = prf1(col >= thr, truth)
        if best is None or m.f1 > best[1].f1:
            best = (thr, m)
    thr, m = best
    return FeatureRecord(int(latent), int(concept), float(thr), m.precision, m.recall, m.f1, layer,
                         bool(m.f1 > config.f1_cut))


def select_features(X_val, y_val, latents: Sequence[int], concept: int, config: ProbeConfig,
                    layer: int = 0) -> list[FeatureRecord]:
    """Threshold-sweep every candidate latent on validation data."""
    truth = np.asarray(y_val) == concept
    X_val = X_val.tocsc() if sp.issparse(X_val) else np.asarray(X_val)
    records = []
    for lat in latents:
        col = X_val[:, lat]
        col = col.toarray().ravel() if sp.issparse(col) else np.asarray(col).ravel()
        records.append(threshold_sweep(minmax_scale(col), truth, config, lat, concept, layer))
    return records


def feature_report(records: Sequence[FeatureRecord], concepts: Sequence[int]) -> list[tuple[int, int, float]]:
    """Per concept: (concept, feature count, max F1).

    Max F1 is taken over accepted features, or over all swept candidates when
    none was accepted.
    """
    rows = []
    for c in concepts:
        mine = [r for r in records if r.concept == c]
        feats = [r for r in mine if r.is_feature]
        pool = feats or mine
        rows.append((int(c), len(feats), max((r.f1 for r in pool), default=0.0)))
    return rows


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_probe(path: Path | str, result: ProbeResult, meta: dict | None = None) -> None:
    info = dict(meta or {})
    info.update(
        kind="probe",
        best_c=result.best_c,
        cv_scores={repr(c): s for c, s in result.cv_scores.items()},
        train_metric=result.train_metric,
        val_metric=result.val_metric,
        val_accuracy=result.val_accuracy,
    )
    write_blob(path, PROBE_MAGIC, info, {"weights": result.weights, "intercept": result.intercept,
                                         "classes": result.classes.astype(np.int64)})


def load_probe(path: Path | str) -> tuple[ProbeResult, dict]:
    meta, arrays = read_blob(path, PROBE_MAGIC)
    scores = {float(c): s for c, s in meta["cv_scores"].items()}
    result = ProbeResult(arrays["weights"], arrays["intercept"], arrays["classes"], meta["best_c"], scores,
                         meta["train_metric"], meta["val_metric"], meta["val_accuracy"])
    return result, meta
