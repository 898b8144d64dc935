"""Pipeline configuration (JSON file plus CLI overrides) and workdir layout."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from saesteer import grammar


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GrammarSettings(_Strict):
    n_sequences: int = Field(20000, ge=10)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    mutation_rate: float = Field(grammar.GrammarSpec.mutation_rate, ge=0, lt=1)
    junction_len_range: tuple[int, int] = grammar.GrammarSpec.junction_len_range
    j_class_probs: tuple[float, ...] = grammar.GrammarSpec.j_class_probs

    def spec(self) -> grammar.GrammarSpec:
        return grammar.GrammarSpec(
            mutation_rate=self.mutation_rate,
            junction_len_range=self.junction_len_range,
            j_class_probs=self.j_class_probs,
        )


class LmSettings(_Strict):
    d_model: int = 64
    n_layers: int = Field(2, ge=1)
    n_heads: int = 4
    d_mlp: int = 256
    context: int = 96
    lr: float = Field(3e-3, gt=0)
    batch: int = Field(32, ge=1)
    epochs: int = Field(5, ge=1)
    dtype: Literal["float32", "float64"] = "float64"
    val_sequences: int = Field(1000, ge=1)


class ActSettings(_Strict):
    train_sequences: int = Field(4000, ge=10)
    val_sequences: int = Field(2000, ge=10)


class SaeSettings(_Strict):
    variant: Literal["topk", "ordered"]
    layer: int = Field(1, ge=0)
    expansion: int | None = Field(None, ge=1)
    k: int = Field(32, ge=1)
    batch: int = Field(8, ge=1)
    lr: float | None = None
    weight_scheme: Literal["harmonic", "geometric"] = "harmonic"
    gamma: float = 0.99
    l1_coeff: float = 0.0
    ordered_form: Literal["nonlinear", "linear"] = "nonlinear"
    stride: int = Field(1, ge=1)
    epochs: int = Field(1, ge=1)
    max_rows: int | None = Field(None, ge=1)

    @property
    def tag(self) -> str:
        return f"{self.variant}_layer{self.layer}"


class ProbeSettings(_Strict):
    c_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    folds: int = Field(3, ge=2)
    max_iter: int = Field(300, ge=1)
    tol: float = Field(1e-5, gt=0)
    top_n: int = Field(500, ge=1)
    thresholds: tuple[float, ...] = (0.1, 0.2, 0.5, 0.8, 0.9)
    f1_cut: float = 0.5
    residue_train_sequences: int = Field(600, ge=10)
    residue_val_sequences: int = Field(600, ge=10)


class SteeringSettings(_Strict):
    variant: Literal["topk", "ordered"] = "ordered"
    layer: int = 1
    latent: int | Literal["top_positive", "top_negative"] = "top_positive"
    target_class: int = 3
    n_alphas: int = 13
    span: float = 6.0
    n_per_alpha: int = Field(500, ge=100)
    temperature: float = Field(1.0, ge=0)
    min_confidence: float = Field(0.0, ge=0, le=1)
    quality_confidence: float = Field(0.6, ge=0, le=1)
    n_perm: int = Field(9999, ge=100)

    @field_validator("n_alphas")
    @classmethod
    def _odd(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError("n_alphas must be odd so the grid contains 0")
        return v


class PipelineConfig(_Strict):
    seed: int
    workdir: str = "run"
    deterministic: bool = True
    grammar: GrammarSettings = GrammarSettings()
    lm: LmSettings = LmSettings()
    acts: ActSettings = ActSettings()
    sae: list[SaeSettings] = Field(
        default_factory=lambda: [SaeSettings(variant="topk", max_rows=240000),
                                 SaeSettings(variant="ordered", max_rows=240000)]
    )
    probe: ProbeSettings = ProbeSettings()
    steering: list[SteeringSettings] = Field(
        default_factory=lambda: [SteeringSettings(latent="top_positive"), SteeringSettings(latent="top_negative")]
    )

    @model_validator(mode="after")
    def _layers_in_range(self):
        for s in [*self.sae, *self.steering]:
            if not 0 <= s.layer < self.lm.n_layers:
                raise ValueError(f"layer {s.layer} outside 0..{self.lm.n_layers - 1}")
        tags = [s.tag for s in self.sae]
        if len(set(tags)) != len(tags):
            raise ValueError(f"duplicate SAE entries: {tags}")
        return self

    def sae_settings(self, variant: str, layer: int) -> SaeSettings:
        for s in self.sae:
            if s.variant == variant and s.layer == layer:
                return s
        raise KeyError(f"no SAE configured for variant={variant} layer={layer}")

    def config_hash(self) -> str:
        """Hash of every setting that affects outputs (the workdir does not)."""
        payload = self.model_dump(mode="json", exclude={"workdir"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stamp(self) -> str:
        return f"config {self.config_hash()} seed {self.seed}"


def load_config(path: Path | str | None, **overrides) -> PipelineConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing config file: {path}")
        data = json.loads(path.read_text())
    data.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.model_validate(data)


class Layout:
    """Where each stage reads and writes inside the workdir."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    @property
    def lock(self) -> Path:
        return self.root / ".lock"

    def corpus(self, split: str) -> tuple[Path, Path]:
        return self.root / "corpus" / f"{split}.txt", self.root / "corpus" / f"{split}_labels.csv"

    @property
    def lm(self) -> Path:
        return self.root / "lm" / "model.bin"

    @property
    def lm_log(self) -> Path:
        return self.root / "lm" / "loss.csv"

    def acts(self, layer: int, split: str) -> tuple[Path, Path]:
        d = self.root / "acts" / f"layer{layer}"
        return d / f"{split}.act", d / f"{split}_meta.csv"

    def sae_dir(self, variant: str, layer: int) -> Path:
        return self.root / "sae" / f"{variant}_layer{layer}"

    def probe_dir(self, source: str, layer: int) -> Path:
        return self.root / "probe" / f"{source}_layer{layer}"

    def select_dir(self, variant: str, layer: int) -> Path:
        return self.root / "select" / f"{variant}_layer{layer}"

    def steer_dir(self, variant: str, layer: int, latent: int) -> Path:
        return self.root / "steer" / f"{variant}_layer{layer}_latent{latent}"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"
