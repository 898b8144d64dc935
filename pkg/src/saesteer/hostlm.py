"""Tiny decoder-only transformer used as the host model.

Pre-norm blocks, learned positional embeddings, zero-initialised output
projection (so an untrained model predicts the uniform distribution). The
residual stream after block ``l`` is the hidden state exposed for activation
dumps and modified by steering hooks.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from saesteer import grammar
from saesteer.grammar import BOS_ID, EOS_ID, LabeledSequence
from saesteer.io import LM_MAGIC, ActivationSet, read_blob, write_blob

Hook = Callable[[torch.Tensor], torch.Tensor]

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class LmConfig:
    vocab: int = grammar.VOCAB
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_mlp: int = 256
    context: int = 96
    lr: float = 3e-3
    batch: int = 32
    epochs: int = 5
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype}")


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_mlp)
        self.fc2 = nn.Linear(cfg.d_mlp, cfg.d_model)

    def forward(self, x: torch.Tensor, past: tuple | None = None):
        b, t, d = x.shape
        dh = d // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (a.view(b, t, self.n_heads, dh).transpose(1, 2) for a in (q, k, v))
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        t_all = k.shape[2]
        # query i sits at absolute position t_all - t + i
        qpos = torch.arange(t_all - t, t_all).unsqueeze(1)
        kpos = torch.arange(t_all).unsqueeze(0)
        scores = scores.masked_fill(kpos > qpos, float("-inf"))
        att = scores.softmax(dim=-1) @ v
        x = x + self.proj(att.transpose(1, 2).reshape(b, t, d))
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, (k, v)


class TinyLM(nn.Module):
    def __init__(self, cfg: LmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab, cfg.d_model)
        self.pos = nn.Embedding(cfg.context, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab)
        self.to(DTYPES[cfg.dtype])
        self._init(seed)

    def _init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.02)
            self.unembed.weight.zero_()
            self.unembed.bias.zero_()
            # residual-output projections scaled down by depth
            for blk in self.blocks:
                blk.proj.weight.mul_(1 / math.sqrt(2 * self.cfg.n_layers))
                blk.fc2.weight.mul_(1 / math.sqrt(2 * self.cfg.n_layers))

    @property
    def dtype(self) -> torch.dtype:
        return self.tok.weight.dtype

    def forward(
        self,
        tokens: torch.Tensor,
        hook: Hook | None = None,
        hook_layer: int | None = None,
        capture_layer: int | None = None,
        cache: list | None = None,
        start: int = 0,
    ):
        """Return ``(logits, captured, new_cache)``.

        ``hook`` rewrites the residual stream right after block ``hook_layer``
        (before any later block or the final norm). ``captured`` is the stream
        after block ``capture_layer`` (after the hook when both coincide).
        ``cache``/``start`` run incremental decoding from absolute position
        ``start``.
        """
        t = tokens.shape[1]
        if start + t > self.cfg.context:
            raise ValueError(f"sequence length {start + t} exceeds context {self.cfg.context}")
        pos = torch.arange(start, start + t)
        x = self.tok(tokens) + self.pos(pos)
        captured = None
        new_cache = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, None if cache is None else cache[i])
            new_cache.append(kv)
            if hook is not None and i == hook_layer:
                x = hook(x)
            if i == capture_layer:
                captured = x
        return self.unembed(self.ln_f(x)), captured, new_cache


# ---------------------------------------------------------------------------
# Batching and training
# ---------------------------------------------------------------------------

def _pad(seqs: Sequence[np.ndarray], context: int) -> tuple[torch.Tensor, torch.Tensor]:
    longest = max(len(s) for s in seqs)
    if longest > context:
        raise ValueError(f"sequence of length {longest} exceeds context {context}")
    toks = np.full((len(seqs), longest), EOS_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for i, s in enumerate(seqs):
        toks[i, : len(s)] = s
        mask[i, : len(s)] = True
    return torch.from_numpy(toks), torch.from_numpy(mask)


def _ids(corpus) -> list[np.ndarray]:
    out = []
    for s in corpus:
        if isinstance(s, LabeledSequence):
            out.append(s.token_ids())
        elif isinstance(s, str):
            out.append(grammar.encode(s))
        else:
            out.append(np.asarray(s, dtype=np.int64))
    return out


def sequence_loss(model: TinyLM, toks: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over real (unpadded) targets."""
    logits, _, _ = model(toks[:, :-1])
    target_mask = mask[:, 1:]
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), toks[:, 1:].reshape(-1), reduction="none")
    return (ce * target_mask.reshape(-1)).sum() / target_mask.sum()


@torch.no_grad()
def evaluate_loss(model: TinyLM, corpus, batch: int = 256) -> float:
    ids = _ids(corpus)
    total, count = 0.0, 0
    for i in range(0, len(ids), batch):
        toks, mask = _pad(ids[i : i + batch], model.cfg.context)
        n = int(mask[:, 1:].sum())
        total += sequence_loss(model, toks, mask).item() * n
        count += n
    return total / count


def unigram_entropy(corpus) -> float:
    """Entropy (nats/token) of the empirical distribution of predicted tokens."""
    ids = np.concatenate([s[1:] for s in _ids(corpus)])
    p = np.bincount(ids).astype(np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


@dataclass
class LmTrainLog:
    rows: list[tuple] = field(default_factory=list)  # (epoch, step, train_loss, val_loss, wallclock)

    @property
    def header(self) -> tuple[str, ...]:
        return ("epoch", "step", "train_loss", "val_loss", "wallclock")


def train_lm(corpus, config: LmConfig, rng: np.random.Generator, val_corpus=None,
             log_every: int = 50, deterministic: bool = True) -> tuple[TinyLM, LmTrainLog]:
    ids = _ids(corpus)
    if not ids:
        raise ValueError("empty corpus")
    longest = max(len(s) for s in ids)
    if longest > config.context:
        raise ValueError(f"sequence of length {longest} exceeds context {config.context}")
    model = TinyLM(config, seed=int(rng.integers(0, 2**31)))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    n_batches = math.ceil(len(ids) / config.batch)
    total_steps = config.epochs * n_batches
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 100) * _cosine(s, total_steps))
    log = LmTrainLog()
    t0 = time.perf_counter()
    step = 0
    running = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(ids))
        for b in range(n_batches):
            chunk = [ids[i] for i in order[b * config.batch : (b + 1) * config.batch]]
            toks, mask = _pad(chunk, config.context)
            loss = sequence_loss(model, toks, mask)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite LM loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            lv = loss.item()
            running = lv if running is None else 0.95 * running + 0.05 * lv
            if step % log_every == 0:
                log.rows.append((epoch, step, running, "", 0.0 if deterministic else time.perf_counter() - t0))
        val = evaluate_loss(model, val_corpus) if val_corpus else ""
        log.rows.append((epoch, step, running, val, 0.0 if deterministic else time.perf_counter() - t0))
    model.eval()
    return model, log


def _cosine(step: int, total: int) -> float:
    return 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))


# ---------------------------------------------------------------------------
# Hooked forward, generation, activation dumps
# ---------------------------------------------------------------------------

def _check_layer(model: TinyLM, layer: int) -> None:
    if not 0 <= layer < model.cfg.n_layers:
        raise ValueError(f"bad layer index {layer}; valid range is 0..{model.cfg.n_layers - 1}")


@torch.no_grad()
def forward_hooked(model: TinyLM, tokens, layer: int, hook: Hook | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Logits and residual-stream states after block ``layer`` for one sequence."""
    _check_layer(model, layer)
    toks = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    squeeze = toks.ndim == 1
    if squeeze:
        toks = toks[None]
    logits, hidden, _ = model(toks, hook=hook, hook_layer=layer, capture_layer=layer)
    logits, hidden = logits.numpy(), hidden.numpy()
    return (logits[0], hidden[0]) if squeeze else (logits, hidden)


@torch.no_grad()
def generate(
    model: TinyLM,
    n: int,
    temperature: float,
    rng: np.random.Generator,
    hook: Hook | None = None,
    hook_layer: int | None = None,
    batch: int = 512,
) -> list[str]:
    """Sample ``n`` sequences from BOS until EOS or the context limit.

    ``temperature == 0`` decodes greedily. Each step draws one uniform per
    sequence whether or not it has finished, so two calls with identically
    seeded ``rng`` see the same random numbers regardless of the hook.
    """
    if temperature < 0:
        raise ValueError("temperature must be positive (0 selects greedy decoding)")
    if hook is not None:
        _check_layer(model, hook_layer)
    out: list[str] = []
    for lo in range(0, n, batch):
        out.extend(_generate_batch(model, min(batch, n - lo), temperature, rng, hook, hook_layer))
    return out


def _generate_batch(model, n, temperature, rng, hook, hook_layer) -> list[str]:
    ctx = model.cfg.context
    toks = np.full((n, ctx), EOS_ID, dtype=np.int64)
    toks[:, 0] = BOS_ID
    done = np.zeros(n, dtype=bool)
    cache = None
    cur = torch.from_numpy(toks[:, :1].copy())
    for t in range(ctx - 1):
        logits, _, cache = model(cur, hook=hook, hook_layer=hook_layer, cache=cache, start=t)
        lg = logits[:, -1].to(torch.float64).numpy()
        u = rng.random(n)
        if temperature == 0:
            nxt = lg.argmax(axis=1)
        else:
            z = lg / temperature
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            cdf = np.cumsum(p, axis=1)
            nxt = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), lg.shape[1] - 1)
        nxt[done] = EOS_ID
        toks[:, t + 1] = nxt
        done |= nxt == EOS_ID
        if done.all():
            break
        cur = torch.from_numpy(nxt[:, None].astype(np.int64))
    return [grammar.decode(row) for row in toks]


@torch.no_grad()
def dump_activations(model: TinyLM, corpus: Sequence[LabeledSequence], layer: int,
                     batch: int = 256, include_specials: bool = False) -> ActivationSet:
    """Per-token hidden states at ``layer`` with sequence and region labels."""
    _check_layer(model, layer)
    xs, seq_id, position, region, v_id, j_id, j_start = [], [], [], [], [], [], []
    codes = {c: i for i, c in enumerate(grammar.REGION_CODES)}
    for lo in range(0, len(corpus), batch):
        chunk = corpus[lo : lo + batch]
        toks, _ = _pad([s.token_ids() for s in chunk], model.cfg.context)
        _, hidden, _ = model(toks, capture_layer=layer)
        hidden = hidden.to(torch.float32).numpy()
        for i, s in enumerate(chunk):
            L = len(s)
            rows = np.arange(L) if include_specials else np.arange(1, L - 1)
            xs.append(hidden[i, rows])
            seq_id.append(np.full(rows.size, lo + i))
            position.append(rows)
            reg = np.array([codes[c] for c in s.regions])
            if include_specials:
                reg = np.concatenate([[0], reg, [0]])
            region.append(reg)
            v_id.append(np.full(rows.size, s.v_id))
            j_id.append(np.full(rows.size, s.j_id))
            j_start.append(np.full(rows.size, s.j_start))
    cat = lambda parts: np.concatenate(parts).astype(np.int64)  # noqa: E731
    return ActivationSet(np.concatenate(xs), cat(seq_id), cat(position), cat(region), cat(v_id), cat(j_id), cat(j_start))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_lm(model: TinyLM, path: Path | str) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_blob(path, LM_MAGIC, {"kind": "lm", "config": asdict(model.cfg)}, arrays)


def load_lm(path: Path | str) -> TinyLM:
    meta, arrays = read_blob(path, LM_MAGIC)
    model = TinyLM(LmConfig(**meta["config"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model
