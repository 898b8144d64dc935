"""Pipeline stages. Each reads its inputs from the workdir, validates them and
writes its outputs atomically, so any stage can be rerun on its own."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from saesteer import grammar, hostlm, probe, steer
from saesteer import sae as sae_mod
from saesteer.config import Layout, PipelineConfig, SaeSettings, SteeringSettings
from saesteer.io import read_activations, read_csv, write_activations, write_csv, write_json
from saesteer.numkit import derive_seed, make_rng

log = logging.getLogger("saesteer")


def configure_torch(deterministic: bool) -> None:
    torch.set_num_threads(1 if deterministic else torch.get_num_threads())
    torch.use_deterministic_algorithms(deterministic)


@dataclass
class Context:
    config: PipelineConfig
    layout: Layout

    @classmethod
    def create(cls, config: PipelineConfig) -> "Context":
        return cls(config, Layout(config.workdir))

    @property
    def stamp(self) -> str:
        return self.config.stamp()

    @property
    def gspec(self) -> grammar.GrammarSpec:
        return self.config.grammar.spec()

    def check_layer(self, layer: int) -> None:
        n = self.config.lm.n_layers
        if not 0 <= layer < n:
            raise ValueError(f"bad layer index {layer}; valid range is 0..{n - 1}")


def _require(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input: {p} (run the upstream stage first)")


# ---------------------------------------------------------------------------
# Corpus and host model
# ---------------------------------------------------------------------------

def cmd_gen_corpus(ctx: Context) -> None:
    g = ctx.config.grammar
    seqs = grammar.sample_corpus(ctx.gspec, g.n_sequences, make_rng(ctx.config.seed, "corpus"))
    n_train = int(round(g.n_sequences * (1 - g.val_fraction)))
    for split, part in (("train", seqs[:n_train]), ("val", seqs[n_train:])):
        grammar.write_corpus(part, *ctx.layout.corpus(split), comment=ctx.stamp)
    log.info("corpus: %d train / %d val sequences", n_train, g.n_sequences - n_train)


def load_split(ctx: Context, split: str) -> list[grammar.LabeledSequence]:
    paths = ctx.layout.corpus(split)
    _require(*paths)
    return grammar.read_corpus(*paths)


def cmd_train_lm(ctx: Context) -> hostlm.TinyLM:
    s = ctx.config.lm
    train, val = load_split(ctx, "train"), load_split(ctx, "val")
    cfg = hostlm.LmConfig(d_model=s.d_model, n_layers=s.n_layers, n_heads=s.n_heads, d_mlp=s.d_mlp,
                          context=s.context, lr=s.lr, batch=s.batch, epochs=s.epochs, dtype=s.dtype)
    model, lm_log = hostlm.train_lm(train, cfg, make_rng(ctx.config.seed, "lm"), val_corpus=val[: s.val_sequences],
                                    deterministic=ctx.config.deterministic)
    hostlm.save_lm(model, ctx.layout.lm)
    write_csv(ctx.layout.lm_log, lm_log.header, lm_log.rows, ctx.stamp)
    log.info("lm: final val loss %s", lm_log.rows[-1][3])
    return model


def load_model(ctx: Context) -> hostlm.TinyLM:
    _require(ctx.layout.lm)
    return hostlm.load_lm(ctx.layout.lm)


def cmd_dump_acts(ctx: Context, layer: int) -> None:
    ctx.check_layer(layer)
    model = load_model(ctx)
    sizes = {"train": ctx.config.acts.train_sequences, "val": ctx.config.acts.val_sequences}
    for split, n in sizes.items():
        seqs = load_split(ctx, split)[:n]
        acts = hostlm.dump_activations(model, seqs, layer)
        path, meta = ctx.layout.acts(layer, split)
        write_activations(path, acts, meta, comment=ctx.stamp)
        log.info("acts layer %d %s: %d rows", layer, split, len(acts))


def load_acts(ctx: Context, layer: int, split: str):
    ctx.check_layer(layer)
    paths = ctx.layout.acts(layer, split)
    _require(*paths)
    return read_activations(*paths)


# ---------------------------------------------------------------------------
# Sparse autoencoders
# ---------------------------------------------------------------------------

def sae_config(s: SaeSettings, d_in: int) -> sae_mod.SaeConfig:
    return sae_mod.SaeConfig(d_in=d_in, expansion=s.expansion, k=s.k, variant=s.variant, batch=s.batch, lr=s.lr,
                             weight_scheme=s.weight_scheme, gamma=s.gamma, l1_coeff=s.l1_coeff,
                             ordered_form=s.ordered_form, stride=s.stride, epochs=s.epochs)


def cmd_train_sae(ctx: Context, variant: str, layer: int) -> sae_mod.SaeParams:
    s = ctx.config.sae_settings(variant, layer)
    acts = load_acts(ctx, layer, "train")
    rows = np.arange(len(acts))
    if s.max_rows is not None and s.max_rows < rows.size:
        rows = np.sort(make_rng(ctx.config.seed, "sae-rows", variant, layer).choice(rows.size, s.max_rows, replace=False))
    data = np.asarray(acts.x[rows], dtype=np.float64)
    cfg = sae_config(s, acts.d_model)
    params, train_log = sae_mod.train_sae(cfg, data, make_rng(ctx.config.seed, "sae", variant, layer),
                                          deterministic=ctx.config.deterministic)
    out = ctx.layout.sae_dir(variant, layer)
    sae_mod.save_sae(out / "model.bin", params, cfg)
    write_csv(out / "trainlog.csv", train_log.header, train_log.rows, ctx.stamp)
    log.info("sae %s layer %d: %d rows, final recon %.4g", variant, layer, rows.size, train_log.rows[-1][1])
    return params


def load_sae(ctx: Context, variant: str, layer: int) -> tuple[sae_mod.SaeParams, sae_mod.SaeConfig]:
    path = ctx.layout.sae_dir(variant, layer) / "model.bin"
    _require(path)
    return sae_mod.load_sae(path)


# ---------------------------------------------------------------------------
# Probes and feature selection
# ---------------------------------------------------------------------------

def _probe_config(ctx: Context) -> probe.ProbeConfig:
    p = ctx.config.probe
    return probe.ProbeConfig(c_grid=p.c_grid, folds=p.folds, max_iter=p.max_iter, tol=p.tol, top_n=p.top_n,
                             thresholds=p.thresholds, f1_cut=p.f1_cut)


def _probe_data(ctx: Context, concept: str, level: str, variant: str | None, layer: int):
    train, val = load_acts(ctx, layer, "train"), load_acts(ctx, layer, "val")
    if level == "residue":
        train = train.for_sequences(np.arange(ctx.config.probe.residue_train_sequences))
        val = val.for_sequences(np.arange(ctx.config.probe.residue_val_sequences))
    params, k = None, None
    if variant is not None:
        params, cfg = load_sae(ctx, variant, layer)
        k = cfg.k
    X, y, _ = probe.featurize(train, params, level, concept, k)
    Xv, yv, _ = probe.featurize(val, params, level, concept, k)
    return X, y, Xv, yv


def _source(variant: str | None) -> str:
    return variant if variant is not None else "neurons"


def cmd_probe(ctx: Context, concept: str, level: str, variant: str | None, layer: int) -> probe.ProbeResult:
    """Fit a probe on SAE latents (``variant`` given) or raw neurons (``variant=None``)."""
    if concept not in probe.CONCEPTS:
        raise ValueError(f"unknown concept {concept!r}; choose from {sorted(probe.CONCEPTS)}")
    X, y, Xv, yv = _probe_data(ctx, concept, level, variant, layer)
    pcfg = _probe_config(ctx)
    rng = make_rng(ctx.config.seed, "probe", concept, level, _source(variant), layer)
    result = probe.evaluate_probe(probe.cv_grid_search(X, y, pcfg, rng), Xv, yv)
    out = ctx.layout.probe_dir(_source(variant), layer)
    name = f"{concept}_{level}"
    probe.save_probe(out / f"{name}.bin", result, {"concept": concept, "level": level, "source": _source(variant),
                                                   "layer": layer})
    write_csv(out / f"{name}_cv.csv", ("C", "macro_f1", "accuracy"),
              [(c, s["macro_f1"], s["accuracy"]) for c, s in sorted(result.cv_scores.items())], ctx.stamp)
    rows = [(int(c), m.precision, m.recall, m.f1, m.support) for c, m in zip(result.classes, result.per_class)]
    rows.append(("macro", "", "", result.val_metric, int(sum(m.support for m in result.per_class))))
    rows.append(("accuracy", "", "", result.val_accuracy, ""))
    write_csv(out / f"{name}_metrics.csv", ("class", "precision", "recall", "f1", "support"), rows, ctx.stamp)
    counts = np.bincount(np.asarray(y) - np.min(y))
    log.info("probe %s/%s on %s layer %d: C=%g val acc %.4f macro-F1 %.4f (train class counts %s)", concept, level,
             _source(variant), layer, result.best_c, result.val_accuracy, result.val_metric, counts.tolist())
    if variant is not None:
        ranked = []
        for c in result.classes:
            for rank, lat in enumerate(probe.rank_latents(result, int(c), pcfg.top_n)):
                ranked.append((int(c), rank, int(lat), result.weights[list(result.classes).index(c), lat]))
        write_csv(out / f"ranked_{concept}.csv", ("class", "rank", "latent", "weight"), ranked, ctx.stamp)
    return result


def load_probe_result(ctx: Context, concept: str, variant: str | None, layer: int) -> probe.ProbeResult:
    path = ctx.layout.probe_dir(_source(variant), layer) / f"{concept}_{probe.CONCEPTS[concept]}.bin"
    _require(path)
    return probe.load_probe(path)[0]


def cmd_select(ctx: Context, concept: str, variant: str, layer: int) -> list[probe.FeatureRecord]:
    level = probe.CONCEPTS[concept]
    result = load_probe_result(ctx, concept, variant, layer)
    _, _, Xv, yv = _probe_data(ctx, concept, level, variant, layer)
    pcfg = _probe_config(ctx)
    records = []
    for c in result.classes:
        cands = probe.rank_latents(result, int(c), pcfg.top_n)
        records.extend(probe.select_features(Xv, yv, cands, int(c), pcfg, layer))
    out = ctx.layout.select_dir(variant, layer)
    write_csv(out / f"features_{concept}.csv",
              ("concept", "latent", "threshold", "precision", "recall", "f1", "is_feature"),
              [(r.concept, r.latent, r.best_threshold, r.precision, r.recall, r.f1, int(r.is_feature)) for r in records],
              ctx.stamp)
    write_csv(out / f"report_{concept}.csv", ("concept", "n_features", "max_f1"),
              probe.feature_report(records, [int(c) for c in result.classes]), ctx.stamp)
    return records


# ---------------------------------------------------------------------------
# Steering
# ---------------------------------------------------------------------------

def resolve_latent(ctx: Context, s: SteeringSettings) -> int:
    if isinstance(s.latent, int):
        return s.latent
    result = load_probe_result(ctx, "j", s.variant, s.layer)
    ranked = probe.rank_latents(result, s.target_class, 1, sign=1 if s.latent == "top_positive" else -1)
    if ranked.size == 0:
        raise ValueError(f"no {s.latent} latent for class {s.target_class}")
    return int(ranked[0])


def cmd_steer(ctx: Context, s: SteeringSettings, latent: int | None = None) -> steer.SteeringReport:
    ctx.check_layer(s.layer)
    model = load_model(ctx)
    params, cfg = load_sae(ctx, s.variant, s.layer)
    latent = resolve_latent(ctx, s) if latent is None else latent
    val = load_acts(ctx, s.layer, "val")
    magnitude = sae_mod.mean_active_magnitude(params, val.x, cfg.k)
    spec = steer.SteeringSpec(
        layer=s.layer, latent=latent, alphas=steer.alpha_grid(magnitude, s.n_alphas, s.span),
        n_per_alpha=s.n_per_alpha, temperature=s.temperature, seed=derive_seed(ctx.config.seed, "steer"),
        target_class=s.target_class, min_confidence=s.min_confidence,
        quality_confidence=s.quality_confidence, n_perm=s.n_perm,
    )
    report = steer.run_sweep(model, params, spec, ctx.gspec)
    out = ctx.layout.steer_dir(s.variant, s.layer, latent)
    write_csv(out / "report.csv", ("alpha", "class", "proportion"), report.rows(), ctx.stamp)
    summary = report.summary()
    summary.update(latent=latent, variant=s.variant, layer=s.layer, magnitude=magnitude, stamp=ctx.stamp)
    write_json(out / "summary.json", summary)
    for align in ("absolute", "j_anchored"):
        pos, frac = steer.positional_histogram(params, val, latent, cfg.k, align, j_class=s.target_class)
        write_csv(out / f"histogram_{align}.csv", ("position", "fraction"), zip(pos, frac), ctx.stamp)
    log.info("steer %s latent %d: spearman %.3f (p=%.4g), pearson %.3f (p=%.4g)", s.variant, latent,
             report.spearman_rho, report.spearman_p, report.pearson_r, report.pearson_p)
    return report


# ---------------------------------------------------------------------------
# Report and full run
# ---------------------------------------------------------------------------

def _probe_sources(ctx: Context) -> list[tuple[str | None, int]]:
    layers = sorted({s.layer for s in ctx.config.sae})
    return [(s.variant, s.layer) for s in ctx.config.sae] + [(None, layer) for layer in layers]


def cmd_report(ctx: Context) -> dict:
    out = ctx.layout.report_dir
    parity, table1 = [], []
    for variant, layer in _probe_sources(ctx):
        for concept in ("region", "j"):
            level = probe.CONCEPTS[concept]
            path = ctx.layout.probe_dir(_source(variant), layer) / f"{concept}_{level}_metrics.csv"
            _require(path)
            rows = {r["class"]: r for r in read_csv(path)}
            meta = probe.load_probe(path.with_name(f"{concept}_{level}.bin"))[1]
            parity.append((_source(variant), layer, concept, level, meta["best_c"], rows["accuracy"]["f1"],
                           rows["macro"]["f1"]))
            if concept == "j":
                for key, r in rows.items():
                    if key == "accuracy":
                        continue
                    name = "macro" if key == "macro" else grammar.j_name(int(key))
                    table1.append((_source(variant), layer, name, r["precision"], r["recall"], r["f1"], r["support"]))
    write_csv(out / "probe_parity.csv", ("source", "layer", "concept", "level", "best_c", "val_accuracy",
                                         "val_macro_f1"), parity, ctx.stamp)
    write_csv(out / "table1_j_probe.csv", ("source", "layer", "class", "precision", "recall", "f1", "support"),
              table1, ctx.stamp)

    table2, table3 = [], []
    for s in ctx.config.sae:
        for concept in ("region", "j"):
            sel = ctx.layout.select_dir(s.variant, s.layer)
            _require(sel / f"report_{concept}.csv")
            for r in read_csv(sel / f"report_{concept}.csv"):
                name = grammar.j_name(int(r["concept"])) if concept == "j" else grammar.REGIONS[int(r["concept"])]
                table2.append((s.variant, s.layer, concept, name, r["n_features"], r["max_f1"]))
        for r in read_csv(ctx.layout.select_dir(s.variant, s.layer) / "features_j.csv"):
            if int(r["concept"]) == ctx.config.steering[0].target_class and r["is_feature"] == "1":
                table3.append((s.variant, s.layer, r["latent"], r["threshold"], r["precision"], r["recall"], r["f1"]))
    write_csv(out / "table2_features.csv", ("variant", "layer", "concept", "class", "n_features", "max_f1"), table2,
              ctx.stamp)
    write_csv(out / "table3_target_features.csv",
              ("variant", "layer", "latent", "threshold", "precision", "recall", "f1"), table3, ctx.stamp)

    steering = []
    for s in ctx.config.steering:
        latent = resolve_latent(ctx, s)
        path = ctx.layout.steer_dir(s.variant, s.layer, latent) / "summary.json"
        _require(path)
        summ = json.loads(path.read_text())
        steering.append((s.variant, s.layer, str(s.latent), latent, summ["spearman_rho"], summ["spearman_p"],
                         summ["pearson_r"], summ["pearson_p"], int(summ["baseline_identical"])))
    write_csv(out / "steering.csv", ("variant", "layer", "selection", "latent", "spearman_rho", "spearman_p",
                                     "pearson_r", "pearson_p", "baseline_identical"), steering, ctx.stamp)
    summary = {"stamp": ctx.stamp, "tables": sorted(p.name for p in out.glob("*.csv"))}
    write_json(out / "summary.json", summary)
    return summary


def cmd_run(ctx: Context) -> dict:
    cmd_gen_corpus(ctx)
    cmd_train_lm(ctx)
    for layer in sorted({s.layer for s in ctx.config.sae} | {s.layer for s in ctx.config.steering}):
        cmd_dump_acts(ctx, layer)
    for s in ctx.config.sae:
        cmd_train_sae(ctx, s.variant, s.layer)
    for variant, layer in _probe_sources(ctx):
        for concept in ("region", "j"):
            cmd_probe(ctx, concept, probe.CONCEPTS[concept], variant, layer)
    for s in ctx.config.sae:
        for concept in ("region", "j"):
            cmd_select(ctx, concept, s.variant, s.layer)
    for s in ctx.config.steering:
        cmd_steer(ctx, s)
    return cmd_report(ctx)
