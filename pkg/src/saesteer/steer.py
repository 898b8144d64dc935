"""Steering sweeps: add a scaled decoder row to the hidden state during generation.

A sweep generates one library per steering factor, classifies each sequence's
J segment and correlates the steering factor with the target-class share.
Every factor reuses the same seed, so the random draws are common across the
sweep and the zero-factor library equals the unsteered one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from saesteer import grammar, hostlm
from saesteer import sae as sae_mod
from saesteer.io import ActivationSet
from saesteer.numkit import make_rng, pearson, perm_pvalue, spearman

UNKNOWN_LABEL = "unknown"


def steering_hook(params: sae_mod.SaeParams | np.ndarray, latent: int, alpha: float):
    """Return ``h -> h + alpha * W_dec[latent]``; accepts numpy arrays or torch tensors."""
    W_dec = params.W_dec if isinstance(params, sae_mod.SaeParams) else np.asarray(params)
    if not 0 <= latent < W_dec.shape[0]:
        raise ValueError(f"latent {latent} out of range 0..{W_dec.shape[0] - 1}")
    direction = np.array(W_dec[latent], dtype=np.float64)
    alpha = float(alpha)
    cached: dict = {}

    def hook(h):
        if isinstance(h, torch.Tensor):
            d = cached.get(h.dtype)
            if d is None:
                d = cached[h.dtype] = torch.as_tensor(direction, dtype=h.dtype)
            return h + alpha * d
        return np.asarray(h) + alpha * direction

    return hook


def alpha_grid(magnitude: float, n: int = 13, span: float = 6.0) -> tuple[float, ...]:
    """Symmetric grid of ``n`` factors in ``[-span, span] * magnitude`` containing 0."""
    if n < 1 or n % 2 == 0:
        raise ValueError("alpha grid size must be odd so that it contains 0")
    grid = np.linspace(-span, span, n) * magnitude
    grid[n // 2] = 0.0
    return tuple(float(a) for a in grid)


@dataclass
class SteeringSpec:
    layer: int
    latent: int
    alphas: tuple[float, ...]
    n_per_alpha: int = 1000
    temperature: float = 1.0
    seed: int = 0
    target_class: int = 3
    min_confidence: float = 0.0  # calls below this count as unknown
    quality_confidence: float = 0.6  # calls below this are reported as low-confidence
    n_perm: int = 9999

    def __post_init__(self):
        if 0.0 not in self.alphas:
            raise ValueError("alpha grid must contain 0")
        if self.n_per_alpha < 100:
            raise ValueError("n_per_alpha must be at least 100")
        if len(set(self.alphas)) != len(self.alphas):
            raise ValueError("alpha grid contains duplicates")


@dataclass
class SteeringReport:
    alphas: np.ndarray
    class_names: list[str]
    proportions: np.ndarray  # (n_alpha, n_classes + 1); last column is unknown
    target_class: int
    mean_length: np.ndarray
    baseline: np.ndarray
    baseline_identical: bool
    pearson_r: float = float("nan")
    pearson_p: float = 1.0
    spearman_rho: float = float("nan")
    spearman_p: float = 1.0
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    low_confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def unknown_fraction(self) -> np.ndarray:
        return self.proportions[:, -1]

    @property
    def target_proportion(self) -> np.ndarray:
        return self.proportions[:, self.target_class]

    def rows(self):
        for a, row in zip(self.alphas, self.proportions):
            for name, p in zip(self.class_names, row):
                yield float(a), name, float(p)

    def summary(self) -> dict:
        return {
            "target_class": grammar.j_name(self.target_class),
            "pearson_r": _finite_or_none(self.pearson_r),
            "pearson_p": self.pearson_p,
            "spearman_rho": _finite_or_none(self.spearman_rho),
            "spearman_p": self.spearman_p,
            "alphas": self.alphas.tolist(),
            "target_proportion": self.target_proportion.tolist(),
            "mean_length": self.mean_length.tolist(),
            "unknown_fraction": self.unknown_fraction.tolist(),
            "low_confidence_fraction": self.low_confidence.tolist(),
            "degenerate_alphas": self.alphas[self.degenerate].tolist(),
            "baseline": dict(zip(self.class_names, self.baseline.tolist())),
            "baseline_identical": self.baseline_identical,
        }


def _finite_or_none(x: float) -> float | None:
    # JSON has no NaN
    return float(x) if np.isfinite(x) else None


def class_proportions(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Shares of classes ``0..n_classes-1`` followed by the unknown share."""
    labels = np.asarray(labels)
    counts = np.bincount(np.where(labels < 0, n_classes, labels), minlength=n_classes + 1)
    return counts / labels.size


def _classify(gspec: grammar.GrammarSpec, lib: list[str], min_confidence: float):
    calls = [grammar.classify_j(gspec, s) for s in lib]
    labels = np.array([j for j, _ in calls], dtype=np.int64)
    conf = np.array([c for _, c in calls])
    labels[conf < min_confidence] = grammar.UNKNOWN
    return labels, conf


def generate_library(model: hostlm.TinyLM, spec: SteeringSpec, hook=None) -> list[str]:
    rng = make_rng(spec.seed, "steer", spec.layer)
    return hostlm.generate(model, spec.n_per_alpha, spec.temperature, rng,
                           hook=hook, hook_layer=spec.layer if hook is not None else None)


def run_sweep(model: hostlm.TinyLM, params: sae_mod.SaeParams, spec: SteeringSpec,
              gspec: grammar.GrammarSpec | None = None) -> SteeringReport:
    gspec = gspec or grammar.GrammarSpec()
    n_cls = gspec.n_j
    names = [grammar.j_name(j) for j in range(n_cls)] + [UNKNOWN_LABEL]
    alphas = np.asarray(spec.alphas, dtype=np.float64)
    props = np.zeros((alphas.size, n_cls + 1))
    lengths = np.zeros(alphas.size)
    low = np.zeros(alphas.size)
    zero_library = None
    for i, a in enumerate(alphas):
        lib = generate_library(model, spec, steering_hook(params, spec.latent, a))
        labels, conf = _classify(gspec, lib, spec.min_confidence)
        props[i] = class_proportions(labels, n_cls)
        lengths[i] = np.mean([len(s) for s in lib])
        low[i] = np.mean(conf < spec.quality_confidence)
        if a == 0.0:
            zero_library = lib
    baseline_lib = generate_library(model, spec)
    baseline = class_proportions(_classify(gspec, baseline_lib, spec.min_confidence)[0], n_cls)
    report = SteeringReport(alphas, names, props, spec.target_class, lengths, baseline,
                            baseline_identical=baseline_lib == zero_library,
                            degenerate=props[:, -1] >= 1.0, low_confidence=low)
    keep = ~report.degenerate
    xs, ys = alphas[keep], report.target_proportion[keep]
    rng = make_rng(spec.seed, "steer-perm")
    for name, stat in (("pearson", pearson), ("spearman", spearman)):
        try:
            value = stat(xs, ys)
        except ValueError:
            # too few points or a flat response: no evidence of a trend
            continue
        p = perm_pvalue(xs, ys, name, spec.n_perm, rng)
        if name == "pearson":
            report.pearson_r, report.pearson_p = value, p
        else:
            report.spearman_rho, report.spearman_p = value, p
    return report


# ---------------------------------------------------------------------------
# Positional histograms
# ---------------------------------------------------------------------------

def position_mass(values: np.ndarray, position: np.ndarray, j_start: np.ndarray | None = None,
                  align: str = "absolute") -> tuple[np.ndarray, np.ndarray]:
    """Fraction of total activation mass at each (absolute or J-relative) position."""
    values = np.asarray(values, dtype=np.float64)
    pos = np.asarray(position, dtype=np.int64)
    if align == "j_anchored":
        if j_start is None:
            raise ValueError("j_anchored alignment needs j_start")
        pos = pos - np.asarray(j_start, dtype=np.int64)
    elif align != "absolute":
        raise ValueError(f"unknown alignment {align!r}")
    total = values.sum()
    if total <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    keys, inverse = np.unique(pos[values > 0], return_inverse=True)
    mass = np.bincount(inverse, weights=values[values > 0], minlength=keys.size)
    return keys, mass / total


def latent_column(params: sae_mod.SaeParams, X: np.ndarray, latent: int, k: int) -> np.ndarray:
    """Top-k activation of one latent on every row (0 where it is not selected)."""
    idx, vals = sae_mod.encode_batch(params, np.asarray(X, dtype=np.float64), k)
    return np.where(idx == latent, vals, 0.0).sum(axis=1)


def positional_histogram(params: sae_mod.SaeParams, acts: ActivationSet, latent: int, k: int,
                         align: str = "absolute", j_class: int | None = None):
    if not 0 <= latent < params.d_sae:
        raise ValueError(f"latent {latent} out of range 0..{params.d_sae - 1}")
    if j_class is not None:
        acts = acts.subset(acts.j_id == j_class)
    col = latent_column(params, acts.x, latent, k)
    return position_mass(col, acts.position, acts.j_start, align)
