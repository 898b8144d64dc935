"""TopK and Ordered sparse autoencoders with analytic gradients.

Encoder ``z = topk(relu(W_enc x + b_enc))``, decoder ``x_hat = z W_dec + b_dec``
where row ``i`` of ``W_dec`` is the decoder direction of latent ``i``.

The Ordered objective sums weighted reconstruction errors over every prefix
``m = 1..d_sae`` of the dictionary. Truncation ``m`` keeps the top
``min(k, m)`` of the first ``m`` ReLU activations. As ``m`` grows, a latent
enters the support once and, if it is displaced by ``k`` stronger later
latents, leaves it for good, so each latent is active on one contiguous
interval ``[i, exit_i)`` of truncations. Prefix reconstructions are then a
cumulative sum of enter/leave events, and decoder gradients are differences
of a suffix sum of per-truncation residual gradients.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from saesteer.io import SAE_MAGIC, read_blob, write_blob
from saesteer.numkit import AdamState, adam_update, topk_indices

VARIANTS = ("topk", "ordered")
DEFAULT_EXPANSION = {"topk": 32, "ordered": 8}


@dataclass
class SaeConfig:
    d_in: int
    expansion: int | None = None  # TopK 32, Ordered 8
    k: int = 32
    variant: str = "topk"
    batch: int = 8
    lr: float | None = None
    weight_scheme: str = "harmonic"
    gamma: float = 0.99
    l1_coeff: float = 0.0
    ordered_form: str = "nonlinear"  # or "linear": literal prefix product, no ReLU/bias/top-k
    stride: int = 1
    epochs: int = 1
    log_every: int = 500

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.expansion is None:
            self.expansion = DEFAULT_EXPANSION[self.variant]
        if not 1 <= self.k <= self.d_in <= self.d_sae:
            raise ValueError(f"need 1 <= k <= d_in <= d_sae, got k={self.k}, d_in={self.d_in}, d_sae={self.d_sae}")
        if self.ordered_form not in ("nonlinear", "linear"):
            raise ValueError(f"unknown ordered_form {self.ordered_form!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def d_sae(self) -> int:
        return self.d_in * self.expansion

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return default_lr(self.variant, self.d_sae)


def default_lr(variant: str, d_sae: int) -> float:
    if variant == "topk":
        return 2e-4 / math.sqrt(d_sae / 16384)
    return 1e-4


@dataclass
class SaeParams:
    W_enc: np.ndarray  # (d_sae, d_in)
    b_enc: np.ndarray  # (d_sae,)
    W_dec: np.ndarray  # (d_sae, d_in), row i is the decoder vector of latent i
    b_dec: np.ndarray  # (d_in,)

    NAMES = ("W_enc", "b_enc", "W_dec", "b_dec")

    @property
    def d_sae(self) -> int:
        return self.W_enc.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_enc.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.NAMES}

    def copy(self) -> "SaeParams":
        return SaeParams(*(a.copy() for a in self.arrays().values()))


@dataclass
class SparseLatents:
    indices: np.ndarray  # strictly increasing
    values: np.ndarray
    d_sae: int

    def dense(self) -> np.ndarray:
        z = np.zeros(self.d_sae)
        z[self.indices] = self.values
        return z


@dataclass
class LossBreakdown:
    recon: float
    sparsity_term: float = 0.0
    per_truncation: np.ndarray | None = None

    @property
    def total(self) -> float:
        return self.recon + self.sparsity_term


def init_params(config: SaeConfig, rng: np.random.Generator) -> SaeParams:
    bound = 1.0 / math.sqrt(config.d_in)
    W_enc = rng.uniform(-bound, bound, size=(config.d_sae, config.d_in))
    W_dec = W_enc / np.linalg.norm(W_enc, axis=1, keepdims=True)
    return SaeParams(W_enc, np.zeros(config.d_sae), W_dec, np.zeros(config.d_in))


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def preactivations(params: SaeParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"dimension mismatch: input {x.shape[-1]}, d_in {params.d_in}")
    return x @ params.W_enc.T + params.b_enc


def encode_topk(params: SaeParams, x: np.ndarray, k: int) -> SparseLatents:
    z = np.maximum(preactivations(params, x), 0.0)
    if z.ndim != 1:
        raise ValueError("encode_topk takes a single vector; use encode_batch for batches")
    idx = topk_indices(z, k)
    return SparseLatents(idx, z[idx], params.d_sae)


def encode_batch(params: SaeParams, X: np.ndarray, k: int, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Top-k ``(indices, values)`` for every row, each of shape (n, k)."""
    n = X.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    vals = np.empty((n, k))
    for lo in range(0, n, chunk):
        z = np.maximum(preactivations(params, X[lo : lo + chunk]), 0.0)
        i = topk_indices(z, k)
        idx[lo : lo + chunk] = i
        vals[lo : lo + chunk] = np.take_along_axis(z, i, axis=1)
    return idx, vals


def decode(params: SaeParams, z: SparseLatents) -> np.ndarray:
    """Sum of active decoder rows in ascending index order, plus ``b_dec``.

    Zero-valued entries are skipped, so any two latent sets that agree on
    their nonzero entries decode to bitwise-identical vectors.
    """
    out = params.b_dec.copy()
    for i, v in zip(z.indices, z.values):
        if v != 0.0:
            out += v * params.W_dec[i]
    return out


def reconstruct(params: SaeParams, X: np.ndarray, k: int) -> np.ndarray:
    idx, vals = encode_batch(params, X, k)
    return np.einsum("nk,nkd->nd", vals, params.W_dec[idx]) + params.b_dec


def topk_loss(params: SaeParams, x: np.ndarray, k: int, l1_coeff: float = 0.0) -> LossBreakdown:
    z = encode_topk(params, x, k)
    r = np.asarray(x, dtype=np.float64) - decode(params, z)
    return LossBreakdown(float(r @ r), l1_coeff * float(np.abs(z.values).sum()))


# ---------------------------------------------------------------------------
# Ordered (nested) objective
# ---------------------------------------------------------------------------

def truncation_weights(d_sae: int, scheme: str = "harmonic", gamma: float = 0.99) -> np.ndarray:
    """Strictly decreasing weights over truncations 1..d_sae summing to 1."""
    if d_sae < 1:
        raise ValueError("d_sae must be >= 1")
    m = np.arange(1, d_sae + 1, dtype=np.float64)
    if scheme == "harmonic":
        w = 1.0 / m
    elif scheme == "geometric":
        if not 0 < gamma < 1:
            raise ValueError("geometric weights need 0 < gamma < 1")
        w = gamma ** (m - 1)
    else:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    w = w / w.sum()
    if not (w[-1] > 0 and (np.diff(w) < 0).all()):
        raise ValueError(f"{scheme} weights underflow at d_sae={d_sae}; raise gamma")
    return w


def strided_weights(weights: np.ndarray, stride: int) -> np.ndarray:
    """Keep every ``stride``-th truncation (and the last), renormalised."""
    if stride <= 1:
        return weights
    keep = np.zeros(weights.size, dtype=bool)
    keep[stride - 1 :: stride] = True
    keep[-1] = True
    w = np.where(keep, weights, 0.0)
    return w / w.sum()


def earlier_outranking(Z: np.ndarray, block: int = 64) -> np.ndarray:
    """Count, for every entry, the earlier entries that outrank it (value >= its own)."""
    Z = np.atleast_2d(Z)
    B, d = Z.shape
    out = np.zeros((B, d), dtype=np.int64)
    for lo in range(0, d, block):
        hi = min(d, lo + block)
        blk = Z[:, lo:hi]
        tri = np.tri(hi - lo, hi - lo, -1, dtype=bool)
        out[:, lo:hi] = ((blk[:, None, :] >= blk[:, :, None]) & tri[None]).sum(axis=2)
        if lo:
            for b in range(B):
                prev = np.sort(Z[b, :lo])
                out[b, lo:hi] += lo - np.searchsorted(prev, blk[b], side="left")
    return out


def ordered_exits(Z: np.ndarray, k: int) -> np.ndarray:
    """Exit truncation for every latent; latent ``i`` is active for t in [i, exit_i).

    ``t`` is a 0-based truncation index (truncation m = t + 1). Entries that
    are zero or never reach the top-k of their own prefix get ``exit_i = i``
    (an empty interval). Only latents that do enter can displace an active
    latent, so exits are resolved among those candidates alone.
    """
    Z = np.atleast_2d(Z)
    B, d = Z.shape
    exits = np.tile(np.arange(d, dtype=np.int64), (B, 1))
    if k >= d:
        exits[Z > 0] = d
        return exits
    earlier = earlier_outranking(Z)
    cand = (Z > 0) & (earlier < k)
    for b in range(B):
        c = np.flatnonzero(cand[b])
        if c.size == 0:
            continue
        zc = Z[b, c]
        need = k - earlier[b, c]
        # later[a, j]: candidate j comes after a and strictly outranks it
        later = (zc[None, :] > zc[:, None]) & (c[None, :] > c[:, None])
        hit = np.cumsum(later, axis=1) >= need[:, None]
        exits[b, c] = np.where(hit.any(axis=1), c[hit.argmax(axis=1)], d)
    return exits


def truncation_latents(params: SaeParams, x: np.ndarray, m: int, k: int) -> SparseLatents:
    """Support of truncation ``m`` derived from the enter/exit intervals."""
    if not 1 <= m <= params.d_sae:
        raise ValueError(f"truncation {m} outside 1..{params.d_sae}")
    z = np.maximum(preactivations(params, x), 0.0)
    exits = ordered_exits(z[None], k)[0]
    t = m - 1
    idx = np.flatnonzero((np.arange(params.d_sae) <= t) & (exits > t))
    return SparseLatents(idx, z[idx], params.d_sae)


def prefix_reconstruction(params: SaeParams, x: np.ndarray, m: int, k: int) -> np.ndarray:
    return decode(params, truncation_latents(params, x, m, k))


def _ordered_forward(params: SaeParams, X: np.ndarray, k: int, form: str):
    """Prefix reconstructions for a batch: returns (A, Z, exits, active, Xhat)."""
    B = X.shape[0]
    d = params.d_sae
    if form == "linear":
        A = X @ params.W_enc.T
        Z = A
        exits = np.full((B, d), d, dtype=np.int64)
    else:
        A = X @ params.W_enc.T + params.b_enc
        Z = np.maximum(A, 0.0)
        exits = ordered_exits(Z, k)
    active = exits > np.arange(d)[None, :]
    contrib = (Z * active)[:, :, None] * params.W_dec[None, :, :]  # (B, d, d_in)
    events = contrib.copy()
    leaving = active & (exits < d)
    bi, li = np.nonzero(leaving)
    # at most one latent leaves per truncation, so (b, exit) pairs are unique
    events[bi, exits[bi, li]] -= contrib[bi, li]
    Xhat = np.cumsum(events, axis=1)
    if form != "linear":
        Xhat += params.b_dec
    return A, Z, exits, active, Xhat


def ordered_loss(params: SaeParams, x: np.ndarray, weights: np.ndarray, k: int,
                 l1_coeff: float = 0.0, form: str = "nonlinear") -> LossBreakdown:
    """Weighted sum of prefix reconstruction errors (batch mean for 2-D input)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (params.d_sae,):
        raise ValueError(f"weight length {weights.size} != d_sae {params.d_sae}")
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, Z, exits, active, Xhat = _ordered_forward(params, X, k, form)
    R = Xhat - X[:, None, :]
    per = weights[None, :] * np.einsum("btd,btd->bt", R, R)
    sparsity = l1_coeff * _final_support_l1(Z, exits, params.d_sae) if l1_coeff else 0.0
    per_mean = per.mean(axis=0)
    return LossBreakdown(float(per.sum(axis=1).mean()), float(sparsity), per_mean)


def _final_support_l1(Z, exits, d) -> float:
    return float((np.abs(Z) * (exits >= d)).sum(axis=1).mean())


def unweighted_prefix_errors(params: SaeParams, X: np.ndarray, k: int, truncations, form: str = "nonlinear") -> np.ndarray:
    """Mean squared error ||x - x_hat^(m)||^2 over rows, for each requested m."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    ts = np.asarray(truncations) - 1
    out = np.zeros(ts.size)
    for lo in range(0, X.shape[0], 64):
        xb = X[lo : lo + 64]
        _, _, _, _, Xhat = _ordered_forward(params, xb, k, form)
        R = Xhat[:, ts, :] - xb[:, None, :]
        out += np.einsum("btd,btd->t", R, R)
    return out / X.shape[0]


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

@dataclass
class SaeGrads:
    W_enc: np.ndarray
    b_enc: np.ndarray
    W_dec: np.ndarray
    b_dec: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in SaeParams.NAMES}


def grad_topk(params: SaeParams, X: np.ndarray, k: int, l1_coeff: float = 0.0) -> tuple[LossBreakdown, SaeGrads]:
    """Mean batch loss and its gradients with the top-k support held fixed."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    A = X @ params.W_enc.T + params.b_enc
    Z = np.maximum(A, 0.0)
    idx = topk_indices(Z, k)
    rows = np.arange(B)[:, None]
    vals = Z[rows, idx]
    Xhat = np.einsum("bk,bkd->bd", vals, params.W_dec[idx]) + params.b_dec
    R = Xhat - X
    recon = float(np.einsum("bd,bd->", R, R)) / B
    sparsity = l1_coeff * float(vals.sum()) / B
    G = (2.0 / B) * R
    Zk = np.zeros_like(Z)
    Zk[rows, idx] = vals
    dW_dec = Zk.T @ G
    dz = np.zeros_like(Z)
    dz[rows, idx] = np.einsum("bd,bkd->bk", G, params.W_dec[idx]) + l1_coeff / B
    dA = dz * (A > 0)
    grads = SaeGrads(dA.T @ X, dA.sum(axis=0), dW_dec, G.sum(axis=0))
    return LossBreakdown(recon, sparsity), grads


def grad_ordered(params: SaeParams, X: np.ndarray, weights: np.ndarray, k: int,
                 l1_coeff: float = 0.0, form: str = "nonlinear") -> tuple[LossBreakdown, SaeGrads]:
    """Mean batch Ordered loss and its gradients.

    The prefix reconstruction only changes where a candidate latent enters,
    so truncations are grouped into runs between entries, each weighted by
    the summed truncation weights it covers. A latent active on runs
    ``[a, e)`` receives the suffix-sum difference ``S[a] - S[e]`` of the
    per-run residual gradients.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (params.d_sae,):
        raise ValueError(f"weight length {weights.size} != d_sae {params.d_sae}")
    if form == "linear":
        return _grad_ordered_dense(params, X, weights, k, l1_coeff, form)
    B = X.shape[0]
    d = params.d_sae
    A = X @ params.W_enc.T + params.b_enc
    Z = np.maximum(A, 0.0)
    exits = ordered_exits(Z, k)
    cand = exits > np.arange(d)[None, :]
    n = max(int(cand.sum(axis=1).max()), 1)
    rows, cols = np.nonzero(cand)
    slot = (np.cumsum(cand, axis=1) - 1)[rows, cols]
    pos = np.full((B, n), d, dtype=np.int64)
    val = np.zeros((B, n))
    ex = np.full((B, n), d, dtype=np.int64)
    pos[rows, slot] = cols
    val[rows, slot] = Z[rows, cols]
    ex[rows, slot] = exits[rows, cols]
    # run r covers truncations [bounds[r], bounds[r+1]); run 0 precedes every entry
    bounds = np.concatenate([np.zeros((B, 1), dtype=np.int64), pos, np.full((B, 1), d, dtype=np.int64)], axis=1)
    cw = np.concatenate([[0.0], np.cumsum(weights)])
    P = cw[bounds[:, 1:]] - cw[bounds[:, :-1]]  # (B, n + 1)
    exit_run = np.stack([np.searchsorted(pos[b], ex[b], side="left") + 1 for b in range(B)])
    W_sel = params.W_dec[np.minimum(pos, d - 1)]
    contrib = val[:, :, None] * W_sel  # (B, n, d_in)
    events = np.zeros((B, n + 1, params.d_in))
    events[:, 1:] = contrib
    leaving = (ex < d) & (val > 0)
    bi, ai = np.nonzero(leaving)
    events[bi, exit_run[bi, ai]] -= contrib[bi, ai]
    Y = np.cumsum(events, axis=1) + params.b_dec
    R = Y - X[:, None, :]
    sq = np.einsum("brd,brd->br", R, R)
    G = (2.0 / B) * P[:, :, None] * R
    suffix = np.zeros((B, n + 2, params.d_in))
    suffix[:, : n + 1] = np.cumsum(G[:, ::-1], axis=1)[:, ::-1]
    S = suffix[:, 1 : n + 1] - np.take_along_axis(suffix, exit_run[:, :, None], axis=1)
    dW_dec = np.zeros_like(params.W_dec)
    dz = np.zeros((B, d))
    real = pos < d
    for b in range(B):
        m = real[b]
        dW_dec[pos[b, m]] += val[b, m, None] * S[b, m]
        dz[b, pos[b, m]] = np.einsum("ad,ad->a", S[b, m], W_sel[b, m])
    sparsity = 0.0
    if l1_coeff:
        final = (exits >= d) & (Z > 0)
        sparsity = l1_coeff * float(Z[final].sum()) / B
        dz += (l1_coeff / B) * final
    dA = dz * (A > 0)
    grads = SaeGrads(dA.T @ X, dA.sum(axis=0), dW_dec, G.sum(axis=(0, 1)))
    return LossBreakdown(float((P * sq).sum()) / B, sparsity), grads


def _grad_ordered_dense(params, X, weights, k, l1_coeff, form):
    B = X.shape[0]
    d = params.d_sae
    A, Z, exits, active, Xhat = _ordered_forward(params, X, k, form)
    R = Xhat - X[:, None, :]
    per = weights[None, :] * np.einsum("btd,btd->bt", R, R)
    G = (2.0 / B) * weights[None, :, None] * R
    suffix = np.zeros((B, d + 1, params.d_in))
    suffix[:, :d] = np.cumsum(G[:, ::-1], axis=1)[:, ::-1]
    S = suffix[:, :d] - np.take_along_axis(suffix, exits[:, :, None], axis=1)
    S *= active[:, :, None]
    dW_dec = np.einsum("bt,btd->td", Z, S)
    dz = np.einsum("btd,td->bt", S, params.W_dec)
    sparsity = 0.0
    if l1_coeff:
        final = exits >= d
        sparsity = l1_coeff * float((np.abs(Z) * final).sum()) / B
        dz += (l1_coeff / B) * final * np.sign(Z)
    if form == "linear":
        dA, db_enc, db_dec = dz, np.zeros(d), np.zeros(params.d_in)
    else:
        dA = dz * (A > 0)
        db_enc, db_dec = dA.sum(axis=0), G.sum(axis=(0, 1))
    grads = SaeGrads(dA.T @ X, db_enc, dW_dec, db_dec)
    return LossBreakdown(float(per.sum()) / B, sparsity, per.mean(axis=0)), grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)  # (step, recon, sparsity_term, dead_fraction, wallclock)
    header: tuple[str, ...] = ("step", "recon", "sparsity_term", "dead_fraction", "wallclock")

    @property
    def recon(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


def train_sae(config: SaeConfig, data: np.ndarray, rng: np.random.Generator,
              params: SaeParams | None = None, deterministic: bool = True) -> tuple[SaeParams, TrainLog]:
    """Single-pass (per epoch) streaming Adam training over shuffled rows of ``data``."""
    n = data.shape[0]
    if n < 1:
        raise ValueError("training data must contain at least one row")
    if data.shape[1] != config.d_in:
        raise ValueError(f"data width {data.shape[1]} != d_in {config.d_in}")
    if params is None:
        params = init_params(config, rng)
    states = {name: AdamState.zeros_like(a) for name, a in params.arrays().items()}
    lr = config.learning_rate
    weights = None
    if config.variant == "ordered":
        weights = strided_weights(truncation_weights(config.d_sae, config.weight_scheme, config.gamma), config.stride)
    log = TrainLog()
    t0 = time.perf_counter()
    seen = np.zeros(config.d_sae, dtype=bool)
    window_recon, window_sparse, window_n = 0.0, 0.0, 0
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch):
            X = np.asarray(data[np.sort(order[lo : lo + config.batch])], dtype=np.float64)
            try:
                if config.variant == "topk":
                    loss, grads = grad_topk(params, X, config.k, config.l1_coeff)
                else:
                    loss, grads = grad_ordered(params, X, weights, config.k, config.l1_coeff, config.ordered_form)
            except FloatingPointError:
                raise FloatingPointError(f"non-finite SAE loss at step {step}") from None
            if not np.isfinite(loss.total):
                raise FloatingPointError(f"non-finite SAE loss at step {step}")
            for name, g in grads.arrays().items():
                adam_update(getattr(params, name), g, states[name], lr)
            step += 1
            seen[_active_latents(params, X, config)] = True
            window_recon += loss.recon
            window_sparse += loss.sparsity_term
            window_n += 1
            if step % config.log_every == 0:
                wall = 0.0 if deterministic else time.perf_counter() - t0
                log.rows.append((step, window_recon / window_n, window_sparse / window_n, 1.0 - seen.mean(), wall))
                seen[:] = False
                window_recon = window_sparse = 0.0
                window_n = 0
    if window_n:
        wall = 0.0 if deterministic else time.perf_counter() - t0
        log.rows.append((step, window_recon / window_n, window_sparse / window_n, 1.0 - seen.mean(), wall))
    return params, log


def _active_latents(params: SaeParams, X: np.ndarray, config: SaeConfig) -> np.ndarray:
    z = np.maximum(X @ params.W_enc.T + params.b_enc, 0.0)
    idx = topk_indices(z, config.k)
    return np.unique(idx[np.take_along_axis(z, idx, axis=1) > 0])


def mean_active_magnitude(params: SaeParams, X: np.ndarray, k: int) -> float:
    """Mean value of nonzero top-k latent activations over the rows of ``X``."""
    _, vals = encode_batch(params, np.asarray(X, dtype=np.float64), k)
    nz = vals[vals > 0]
    return float(nz.mean()) if nz.size else 0.0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_sae(path: Path | str, params: SaeParams, config: SaeConfig) -> None:
    write_blob(path, SAE_MAGIC, {"kind": "sae", "config": asdict(config)}, params.arrays())


def load_sae(path: Path | str) -> tuple[SaeParams, SaeConfig]:
    meta, arrays = read_blob(path, SAE_MAGIC)
    config = SaeConfig(**meta["config"])
    params = SaeParams(*(arrays[n] for n in SaeParams.NAMES))
    if params.W_enc.shape != (config.d_sae, config.d_in):
        raise ValueError(f"{path}: parameter shapes do not match stored config")
    return params, config
