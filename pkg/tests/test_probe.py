import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import exhaustive_threshold_f1, lbfgs_logreg
from saesteer.io import ActivationSet
from saesteer.numkit import make_rng, minmax_scale
from saesteer.probe import (
    FeatureRecord,
    LogReg,
    ProbeConfig,
    cv_grid_search,
    evaluate_probe,
    feature_report,
    featurize,
    fit_logreg,
    load_probe,
    logreg_objective,
    rank_latents,
    select_features,
    threshold_sweep,
)
from saesteer.sae import SaeParams, encode_batch


def _acts(n_seq=6, d=5, seed=0):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(2, 6, n_seq)
    seq_id = np.repeat(np.arange(n_seq), lengths)
    n = seq_id.size
    return ActivationSet(
        rng.normal(size=(n, d)).astype(np.float32),
        seq_id,
        np.concatenate([np.arange(1, L + 1) for L in lengths]),
        rng.integers(0, 4, n),
        np.repeat(rng.integers(0, 3, n_seq), lengths),
        np.repeat(rng.integers(0, 6, n_seq), lengths),
        np.repeat(rng.integers(40, 50, n_seq), lengths),
    )


def _problem(n=50, d=4, K=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X @ rng.normal(size=(d, K)) + rng.normal(scale=1.0, size=(n, K))).argmax(axis=1)
    return X, y


# --- featurize ---------------------------------------------------------------

def test_featurize_neurons_residue_and_sequence():
    acts = _acts()
    X, y, seqs = featurize(acts, level="residue", concept="region")
    assert X.shape == (len(acts), 5) and np.array_equal(y, acts.region)
    P, yj, ids = featurize(acts, level="sequence", concept="j")
    assert P.shape == (6, 5) and ids.tolist() == list(range(6))
    for s in range(6):
        rows = acts.x[acts.seq_id == s].astype(np.float64)
        # brute-force average by direct summation
        ref = [sum(float(r[c]) for r in rows) / len(rows) for c in range(5)]
        np.testing.assert_allclose(P[s], ref, rtol=1e-12)
        assert yj[s] == acts.j_id[acts.seq_id == s][0]
    with pytest.raises(ValueError):
        featurize(acts, level="token")


def test_featurize_identical_rows_pool_to_that_row():
    acts = _acts(n_seq=2)
    acts.x[:] = acts.x[0]
    P, _, _ = featurize(acts, level="sequence", concept="v")
    np.testing.assert_allclose(P, np.repeat(acts.x[:1].astype(np.float64), 2, axis=0), rtol=1e-15)


def test_featurize_latents_are_sparse_topk():
    acts = _acts()
    rng = np.random.default_rng(1)
    params = SaeParams(rng.normal(size=(12, 5)), np.zeros(12), rng.normal(size=(12, 5)), np.zeros(5))
    X, _, _ = featurize(acts, params, level="residue", concept="region", k=3)
    assert sp.issparse(X) and X.shape == (len(acts), 12)
    idx, vals = encode_batch(params, acts.x.astype(np.float64), 3)
    dense = np.zeros((len(acts), 12))
    np.put_along_axis(dense, idx, vals, axis=1)
    np.testing.assert_array_equal(X.toarray(), dense)
    P, _, _ = featurize(acts, params, level="sequence", concept="j", k=3)
    for s in range(6):
        np.testing.assert_allclose(P.toarray()[s], dense[acts.seq_id == s].mean(axis=0), rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError, match="k is required"):
        featurize(acts, params)


# --- logistic regression -----------------------------------------------------

def test_separable_toy():
    X = np.array([[0.0, 0.0], [0.1, 0.2], [2.0, 2.0], [2.2, 1.9]])
    y = np.array([0, 0, 1, 1])
    model = fit_logreg(X, y, 10.0)
    assert (model.predict(X) == y).all()


def test_single_class_rejected():
    with pytest.raises(ValueError, match="two classes"):
        fit_logreg(np.zeros((3, 2)), np.ones(3), 1.0)


@pytest.mark.parametrize("K,C,seed", [(2, 1.0, 0), (3, 0.1, 1), (3, 10.0, 2), (5, 1.0, 3)])
def test_objective_matches_second_optimizer(K, C, seed):
    X, y = _problem(K=K, seed=seed)
    model = fit_logreg(X, y, C, max_iter=5000, tol=1e-9)
    W, b, ref = lbfgs_logreg(X, y, C, np.unique(y))
    got = logreg_objective(model, X, y, C)
    assert abs(got - ref) < 1e-4
    assert got == pytest.approx(logreg_objective(LogReg(W, b, np.unique(y)), X, y, C), abs=1e-4)
    assert model.objective == pytest.approx(got, abs=1e-12)


def test_sparse_and_dense_fits_agree():
    X, y = _problem(seed=4)
    X[np.abs(X) < 0.5] = 0.0
    a = fit_logreg(X, y, 1.0, max_iter=200)
    b = fit_logreg(sp.csr_matrix(X), y, 1.0, max_iter=200)
    np.testing.assert_allclose(a.weights, b.weights, rtol=1e-9, atol=1e-12)


def test_strong_regularisation_gives_intercept_only():
    X, y = _problem(seed=5)
    # heavy regularisation is ill-conditioned, hence the long iteration budget
    model = fit_logreg(X, y, 1e-6, max_iter=20000, tol=1e-10)
    assert np.abs(model.weights).max() < 1e-4
    prior = np.bincount(y) / y.size
    # intercept-only softmax reproduces the class prior
    p = np.exp(model.intercept - model.intercept.max())
    np.testing.assert_allclose(p / p.sum(), prior, atol=1e-5)


def test_warm_start_reaches_same_optimum():
    X, y = _problem(seed=6)
    cold = fit_logreg(X, y, 1.0, max_iter=5000, tol=1e-9)
    warm = fit_logreg(X, y, 1.0, max_iter=5000, tol=1e-9, init=fit_logreg(X, y, 0.1, max_iter=50))
    assert warm.objective == pytest.approx(cold.objective, abs=1e-9)


# --- cross-validation --------------------------------------------------------

def test_cv_single_value_grid():
    X, y = _problem(n=60, seed=7)
    res = cv_grid_search(X, y, ProbeConfig(c_grid=(0.5,)), make_rng(0))
    assert res.best_c == 0.5 and list(res.cv_scores) == [0.5]


def test_cv_duplicates_and_determinism():
    X, y = _problem(n=90, seed=8)
    cfg = ProbeConfig(c_grid=(1.0, 0.1, 1.0))
    a = cv_grid_search(X, y, cfg, make_rng(3))
    b = cv_grid_search(X, y, cfg, make_rng(3))
    assert sorted(a.cv_scores) == [0.1, 1.0]
    assert a.best_c == b.best_c and a.cv_scores == b.cv_scores
    np.testing.assert_array_equal(a.weights, b.weights)
    best = max(a.cv_scores.values(), key=lambda s: s["macro_f1"])["macro_f1"]
    assert a.cv_scores[a.best_c]["macro_f1"] == best
    assert a.best_c == min(c for c, s in a.cv_scores.items() if s["macro_f1"] == best)


def test_cv_ties_go_to_smaller_c():
    # perfectly separable data scores 1.0 at every C
    X = np.concatenate([np.full((30, 1), -3.0), np.full((30, 1), 3.0)])
    y = np.repeat([0, 1], 30)
    res = cv_grid_search(X, y, ProbeConfig(c_grid=(10.0, 1.0, 100.0)), make_rng(0))
    assert all(s["macro_f1"] == 1.0 for s in res.cv_scores.values())
    assert res.best_c == 1.0


def test_evaluate_probe():
    X, y = _problem(n=120, seed=9)
    res = evaluate_probe(cv_grid_search(X[:80], y[:80], ProbeConfig(), make_rng(0)), X[80:], y[80:])
    pred = res.model.predict(X[80:])
    assert res.val_accuracy == pytest.approx(np.mean(pred == y[80:]))
    assert res.val_metric == pytest.approx(np.mean([m.f1 for m in res.per_class]))


# --- ranking -----------------------------------------------------------------

def test_rank_examples():
    assert rank_latents(np.array([0.5, -1.0, 2.0]), 0, top_n=2).tolist() == [2, 0]
    assert rank_latents(np.array([-0.5, -1.0]), 0).tolist() == []
    assert rank_latents(np.array([0.5, -1.0, 2.0]), 0, sign=-1).tolist() == [1]


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)), st.integers(1, 10), st.floats(0.1, 10))
def test_rank_matches_full_sort_oracle(w, top_n, scale):
    ref = [i for i in sorted(range(w.size), key=lambda i: (-w[i], i)) if w[i] > 0][:top_n]
    got = rank_latents(w, 0, top_n=top_n)
    assert got.tolist() == ref
    assert rank_latents(w * scale, 0, top_n=top_n).tolist() == ref
    assert all(w[a] >= w[b] for a, b in zip(got, got[1:]))


def test_rank_from_probe_result():
    X, y = _problem(seed=10)
    res = cv_grid_search(X, y, ProbeConfig(c_grid=(1.0,)), make_rng(0))
    got = rank_latents(res, 2, top_n=10)
    assert got.tolist() == rank_latents(res.weights[2], 0, top_n=10).tolist()
    with pytest.raises(ValueError, match="not in probe classes"):
        rank_latents(res, 7)


# --- threshold sweep ---------------------------------------------------------

def test_sweep_examples():
    cfg = ProbeConfig()
    labels = np.array([0, 1, 1, 0, 1], dtype=bool)
    rec = threshold_sweep(labels.astype(float), labels, cfg, latent=4, concept=3)
    assert rec.f1 == 1.0 and rec.is_feature and rec.best_threshold == 0.1
    for t in cfg.thresholds:
        assert threshold_sweep(labels.astype(float), labels, ProbeConfig(thresholds=(t,))).f1 == 1.0
    rec0 = threshold_sweep(np.zeros(5), labels, cfg)
    assert rec0.f1 == 0.0 and not rec0.is_feature


def test_sweep_cut_is_strict():
    # precision 1/3, recall 1 gives F1 exactly 0.5
    col = np.array([1.0, 1.0, 1.0, 0.0])
    labels = np.array([1, 0, 0, 0], dtype=bool)
    rec = threshold_sweep(col, labels, ProbeConfig())
    assert rec.f1 == 0.5 and not rec.is_feature


def test_sweep_noisy_indicator_matches_exhaustive_oracle():
    rng = np.random.default_rng(11)
    cfg = ProbeConfig()
    for trial in range(5):
        labels = rng.random(400) < 0.3
        flips = rng.random(400) < 0.1
        col = (labels ^ flips) * rng.uniform(0.2, 1.0, 400) + rng.uniform(0, 0.15, 400)
        (rec,) = select_features(col[:, None], labels.astype(int), [0], 1, cfg)
        thr, f1 = exhaustive_threshold_f1(col, labels, cfg.thresholds)
        assert abs(rec.f1 - f1) <= 0.03
        assert rec.best_threshold == thr


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 10)), st.data())
def test_sweep_idempotent_under_minmax(col, data):
    labels = np.array(data.draw(st.lists(st.booleans(), min_size=col.size, max_size=col.size)))
    cfg = ProbeConfig()
    once = threshold_sweep(minmax_scale(col), labels, cfg)
    twice = threshold_sweep(minmax_scale(minmax_scale(col)), labels, cfg)
    assert once == twice


def test_select_features_on_sparse_columns():
    rng = np.random.default_rng(12)
    y = rng.integers(0, 3, 100)
    dense = rng.random((100, 6)) * (rng.random((100, 6)) < 0.3)
    dense[:, 2] = (y == 1) * 0.7
    recs = select_features(sp.csr_matrix(dense), y, [2, 5], 1, ProbeConfig(), layer=1)
    assert [r.latent for r in recs] == [2, 5]
    assert recs[0].f1 == 1.0 and recs[0].layer == 1 and recs[0].concept == 1
    assert recs == select_features(dense, y, [2, 5], 1, ProbeConfig(), layer=1)


def test_feature_report_examples():
    assert feature_report([], [3]) == [(3, 0, 0.0)]
    rec = FeatureRecord(7, 3, 0.5, 0.9, 0.84, 0.87, 1, True)
    assert feature_report([rec], [3]) == [(3, 1, 0.87)]
    weak = FeatureRecord(8, 0, 0.5, 0.3, 0.5, 0.366, 1, False)
    assert feature_report([rec, weak], [0, 3]) == [(0, 0, 0.366), (3, 1, 0.87)]


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(folds=1)
    with pytest.raises(ValueError):
        ProbeConfig(c_grid=())
    with pytest.raises(ValueError):
        ProbeConfig(thresholds=(0.0, 0.5))


def test_probe_roundtrip(tmp_path):
    from saesteer.probe import save_probe

    X, y = _problem(seed=13)
    res = evaluate_probe(cv_grid_search(X, y, ProbeConfig(c_grid=(0.1, 1.0)), make_rng(0)), X, y)
    save_probe(tmp_path / "p.bin", res, {"concept": "j"})
    back, meta = load_probe(tmp_path / "p.bin")
    assert meta["concept"] == "j" and back.best_c == res.best_c and back.cv_scores == res.cv_scores
    np.testing.assert_array_equal(back.weights, res.weights)
    assert back.val_accuracy == res.val_accuracy
