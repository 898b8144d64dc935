import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from saesteer import grammar
from saesteer.hostlm import (
    LmConfig,
    TinyLM,
    dump_activations,
    evaluate_loss,
    forward_hooked,
    generate,
    load_lm,
    save_lm,
    train_lm,
    unigram_entropy,
)
from saesteer.io import FormatError
from saesteer.numkit import make_rng

SMALL = LmConfig(d_model=16, n_layers=2, n_heads=2, d_mlp=32, context=96, epochs=1)


def _randomised(cfg: LmConfig, seed: int = 0) -> TinyLM:
    model = TinyLM(cfg, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        # the zero-initialised unembedding would hide most gradients
        model.unembed.weight.copy_(torch.randn(model.unembed.weight.shape, generator=gen, dtype=model.dtype) * 0.3)
    return model


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        LmConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError, match="dtype"):
        LmConfig(dtype="float16")


def test_untrained_loss_is_log_vocab():
    model = TinyLM(SMALL, seed=0)
    corpus = grammar.sample_corpus(grammar.GrammarSpec(), 20, make_rng(0))
    assert evaluate_loss(model, corpus) == pytest.approx(math.log(grammar.VOCAB), abs=1e-9)


def test_hidden_shape_and_bad_layer():
    model = _randomised(SMALL)
    toks = grammar.encode("ACDEFGH")
    logits, hidden = forward_hooked(model, toks, 1)
    assert hidden.shape == (9, 16) and logits.shape == (9, grammar.VOCAB)
    with pytest.raises(ValueError, match=r"valid range is 0\.\.1"):
        forward_hooked(model, toks, 2)


def test_context_limit():
    model = _randomised(LmConfig(d_model=8, n_heads=2, d_mlp=16, context=8))
    with pytest.raises(ValueError, match="exceeds context"):
        forward_hooked(model, np.zeros(9, dtype=np.int64), 0)
    with pytest.raises(ValueError, match="exceeds context"):
        train_lm(["ACDEFGHIK"], LmConfig(d_model=8, n_heads=2, d_mlp=16, context=8, epochs=1), make_rng(0))


def test_causality():
    model = _randomised(SMALL)
    toks = grammar.encode("ACDEFGHIKLMNPQ")
    for layer in (0, 1):
        _, full = forward_hooked(model, toks, layer)
        for t in (3, 8):
            _, prefix = forward_hooked(model, toks[:t], layer)
            # a shorter input changes kernel blocking, so only rounding may differ
            np.testing.assert_allclose(prefix, full[:t], rtol=0, atol=1e-14)
            changed = toks.copy()
            changed[t] = (changed[t] + 1) % 20
            _, other = forward_hooked(model, changed, layer)
            np.testing.assert_array_equal(other[:t], full[:t])
            assert not np.array_equal(other[t], full[t])


def test_backward_matches_finite_differences():
    cfg = LmConfig(vocab=6, d_model=8, n_layers=1, n_heads=2, d_mlp=16, context=10)
    model = _randomised(cfg, seed=3)
    with torch.no_grad():
        for p in model.parameters():
            # perturb norms and biases away from their trivial init
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(p.numel()), dtype=p.dtype) * 0.1)
    toks = torch.tensor([[0, 3, 1, 5, 2, 4, 1, 0], [2, 2, 5, 0, 1, 3, 4, 4]])

    def loss_fn():
        logits, _, _ = model(toks[:, :-1])
        return F.cross_entropy(logits.reshape(-1, 6), toks[:, 1:].reshape(-1))

    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for i in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                fd = (up - down) / (2 * eps)
                g = p.grad.view(-1)[i].item()
                worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-6))
    assert worst < 1e-4


def test_memorises_a_repeated_sequence():
    seq = "ACDEFGHIKLMNPQRSTVWY"
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, d_mlp=32, context=32, epochs=60, lr=1e-2, batch=8)
    model, log = train_lm([seq] * 64, cfg, make_rng(0))
    assert evaluate_loss(model, [seq]) < 0.05
    assert log.rows[-1][2] < log.rows[0][2]


def test_training_beats_unigram_and_is_reproducible():
    spec = grammar.GrammarSpec()
    corpus = grammar.sample_corpus(spec, 300, make_rng(1))
    val = grammar.sample_corpus(spec, 50, make_rng(2))
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, d_mlp=32, epochs=3, lr=1e-2)
    a, log_a = train_lm(corpus, cfg, make_rng(3), val_corpus=val)
    b, log_b = train_lm(corpus, cfg, make_rng(3), val_corpus=val)
    assert evaluate_loss(a, val) < unigram_entropy(corpus)
    assert log_a.rows == log_b.rows
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])


def test_zero_hook_is_bitwise_identity():
    model = _randomised(SMALL)
    d = torch.randn(16, dtype=model.dtype)
    plain = generate(model, 20, 1.0, make_rng(5))
    hooked = generate(model, 20, 1.0, make_rng(5), hook=lambda h: h + 0.0 * d, hook_layer=1)
    assert plain == hooked
    assert generate(model, 20, 1.0, make_rng(6)) != plain


def test_greedy_decoding_is_deterministic():
    model = _randomised(SMALL)
    a = generate(model, 3, 0.0, make_rng(0))
    b = generate(model, 3, 0.0, make_rng(99))
    assert a == b and len(set(a)) == 1
    with pytest.raises(ValueError):
        generate(model, 1, -1.0, make_rng(0))


def test_hook_is_linear_at_hook_site():
    model = _randomised(SMALL)
    toks = grammar.encode("ACDEFGHIKL")
    d = torch.randn(16, dtype=model.dtype)
    _, base = forward_hooked(model, toks, 0)
    _, one = forward_hooked(model, toks, 0, hook=lambda h: h + 1.5 * d)
    _, two = forward_hooked(model, toks, 0, hook=lambda h: h + 3.0 * d)
    delta1, delta2 = one - base, two - base
    np.testing.assert_allclose(delta2, 2 * delta1, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(delta1, np.broadcast_to(1.5 * d.numpy(), delta1.shape), rtol=1e-12, atol=1e-14)


def test_hook_only_affects_later_layers():
    model = _randomised(SMALL)
    toks = grammar.encode("ACDEFGHIKL")
    d = torch.randn(16, dtype=model.dtype, generator=torch.Generator().manual_seed(0))
    logits0, _ = forward_hooked(model, toks, 1)
    logits1, _ = forward_hooked(model, toks, 1, hook=lambda h: h + d)
    assert not np.allclose(logits0, logits1)


def test_dump_activations_labels():
    model = _randomised(SMALL)
    corpus = grammar.sample_corpus(grammar.GrammarSpec(), 4, make_rng(0))
    acts = dump_activations(model, corpus, 1)
    assert len(acts) == sum(len(s.residues) for s in corpus)
    assert acts.x.dtype == np.float32
    first = corpus[0]
    rows = acts.seq_id == 0
    assert acts.position[rows].tolist() == list(range(1, len(first) - 1))
    assert "".join(grammar.REGION_CODES[r] for r in acts.region[rows]) == first.regions
    assert set(acts.j_id[rows]) == {first.j_id}
    _, hidden = forward_hooked(model, first.token_ids(), 1)
    np.testing.assert_array_equal(acts.x[rows], hidden[1:-1].astype(np.float32))
    with_specials = dump_activations(model, corpus, 1, include_specials=True)
    assert len(with_specials) == len(acts) + 2 * len(corpus)


def test_checkpoint_roundtrip(tmp_path):
    model = _randomised(SMALL)
    save_lm(model, tmp_path / "m.bin")
    back = load_lm(tmp_path / "m.bin")
    toks = grammar.encode("ACDEF")
    np.testing.assert_array_equal(forward_hooked(model, toks, 1)[0], forward_hooked(back, toks, 1)[0])
    (tmp_path / "bad.bin").write_bytes(b"JUNKJUNK" + (tmp_path / "m.bin").read_bytes()[8:])
    with pytest.raises(FormatError, match="bad.bin"):
        load_lm(tmp_path / "bad.bin")


def test_incremental_cache_matches_full_forward():
    model = _randomised(SMALL, seed=4)
    toks = torch.tensor(grammar.encode("ACDEFGHIKLMN"))[None]
    hook = lambda h: h + 0.5  # noqa: E731
    full, cap_full, _ = model(toks, hook=hook, hook_layer=0, capture_layer=1)
    logits, cap, cache = model(toks[:, :5], hook=hook, hook_layer=0, capture_layer=1)
    parts, caps = [logits], [cap]
    for i in range(5, toks.shape[1]):
        logits, cap, cache = model(toks[:, i : i + 1], hook=hook, hook_layer=0, capture_layer=1, cache=cache, start=i)
        parts.append(logits)
        caps.append(cap)
    torch.testing.assert_close(torch.cat(parts, dim=1), full, rtol=0, atol=1e-12)
    torch.testing.assert_close(torch.cat(caps, dim=1), cap_full, rtol=0, atol=1e-12)
