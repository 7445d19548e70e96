from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional


class GaussComponent(BaseModel):
    """One component of a Gaussian-mixture source"""
    model_config = ConfigDict(extra="forbid")

    weight: float = Field(..., description="Mixture weight (normalized over components)")
    mean: List[float] = Field(..., description="Component mean, one entry per dimension")
    scales: List[float] = Field(..., description="Standard deviations along the component's principal axes")
    rotation_seed: Optional[int] = Field(None, description="Seed of the random principal-axis rotation; none keeps axes aligned")

    @field_validator('weight')
    def weight_positive(cls, v):
        if v <= 0:
            raise ValueError('component weight must be positive')
        return v

    @field_validator('scales')
    def scales_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError('component scales must be positive')
        return v


class SourceConfig(BaseModel):
    """Synthetic or ingested vector source"""
    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {"kind": "gauss_mix", "dim": 8, "components": [], "seed": 7}
        }
    )

    kind: Literal["gauss_mix", "banana", "patches", "raw"] = Field("gauss_mix", description="Source family")
    dim: int = Field(8, description="Vector dimension N")
    components: List[GaussComponent] = Field(default_factory=list, description="Mixture components; empty draws a default mixture from the seed")
    seed: int = Field(7, description="Seed of the source definition and of the fixed dataset")
    num_samples: int = Field(20000, description="Dataset size before the 9:1 train/validation split")
    path: Optional[str] = Field(None, description="Raw float64 file (kind=raw) or 8-bit PGM image (kind=patches)")
    patch_shape: Optional[List[int]] = Field(None, description="Patch height and width for kind=patches; product must equal dim")

    @model_validator(mode='after')
    def consistent(self):
        if self.dim < 1:
            raise ValueError('dim must be >= 1')
        if self.num_samples < 10:
            raise ValueError('num_samples must be >= 10')
        for comp in self.components:
            if len(comp.mean) != self.dim or len(comp.scales) != self.dim:
                raise ValueError('component mean and scales must have dim entries')
        if self.kind == "raw" and not self.path:
            raise ValueError('kind=raw needs a path')
        if self.patch_shape is not None:
            if len(self.patch_shape) != 2 or self.patch_shape[0] * self.patch_shape[1] != self.dim:
                raise ValueError('patch_shape must be [height, width] with height*width == dim')
        return self


# Shift strength used when none is given
DEFAULT_SHIFT_MAGNITUDES = {"identity": 0.0, "mean_shift": 1.0, "rotate": 0.5, "heavy_tail": 3.0, "reweight": 2.0}


class ShiftConfig(BaseModel):
    """Out-of-domain perturbation of a base source"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["identity", "mean_shift", "rotate", "heavy_tail", "reweight"] = Field(..., description="Shift family")
    magnitude: float = Field(1.0, description="Shift strength: offset norm, rotation angle (rad), t degrees of freedom, or tilt")
    seed: int = Field(11, description="Seed of the shift's random direction or plane")

    @classmethod
    def with_default(cls, kind: str, magnitude: Optional[float] = None) -> "ShiftConfig":
        return cls(kind=kind, magnitude=DEFAULT_SHIFT_MAGNITUDES[kind] if magnitude is None else magnitude)


class ArchitectureConfig(BaseModel):
    """Codec network shape"""
    model_config = ConfigDict(extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [32, 32], description="Hidden widths of the analysis MLP; synthesis mirrors them")
    latent: int = Field(4, description="Latent width M")
    activation: Literal["tanh"] = Field("tanh", description="Hidden activation")
    sigma_floor: float = Field(1e-6, description="Lower clamp of latent prior scales")
    likelihood_bound: float = Field(1e-9, description="Lower clamp of latent interval masses before the log")

    @field_validator('hidden')
    def widths_positive(cls, v):
        if any(w < 1 for w in v):
            raise ValueError('hidden widths must be positive')
        return v


class SourceModelConfig(BaseModel):
    """Conditional source entropy model q(X|Xhat)"""
    model_config = ConfigDict(extra="forbid")

    mode: Literal["factorized", "causal", "weak"] = Field("factorized", description="Context structure of the source model")
    hidden: int = Field(32, description="Hidden width; matches the synthesis width by default")
    sigma_floor: float = Field(1e-4, description="Additive floor on softplus scales")


class TrainConfig(BaseModel):
    """A full experiment: the lambda x alpha x seed grid plus every run setting"""
    model_config = ConfigDict(extra="forbid")

    lambdas: List[float] = Field(default_factory=lambda: [0.0018, 0.0035, 0.0067, 0.0130], description="Rate-distortion trade-offs")
    alphas: List[float] = Field(default_factory=lambda: [0.0, 0.1, 0.3, 1.0, 3.0], description="Regularization factors; 0 is the anchor")
    seeds: List[int] = Field(default_factory=lambda: [1], description="Run seeds, each expanded into four random streams")
    steps: int = Field(200000, description="Training iterations per run")
    batch_size: int = Field(256, description="Vectors per minibatch")
    codec_lr: float = Field(1e-4, description="Adam learning rate of the compression network")
    source_lr: float = Field(1e-3, description="Adam learning rate of the source model")
    eval_every: int = Field(1000, description="Steps between validation evaluations")
    source_period: int = Field(1, description="Source-model update every this many steps")
    distortion_scale: float = Field(65025.0, description="Multiplier on lambda*MSE (8-bit range convention)")
    validation_fraction: float = Field(0.1, description="Held-out share of the dataset (9:1 split)")
    ablate_regularizer: bool = Field(False, description="Compile the regularizer out of the codec loss; the source model still trains as a monitor")
    source: SourceConfig = Field(default_factory=SourceConfig, description="Training source")
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig, description="Codec architecture")
    source_model: SourceModelConfig = Field(default_factory=SourceModelConfig, description="Source entropy model")

    @field_validator('lambdas')
    def lambdas_positive(cls, v):
        if not v or any(l <= 0 for l in v):
            raise ValueError('lambdas must be a non-empty list of positive values')
        return v

    @field_validator('alphas')
    def alphas_nonnegative(cls, v):
        if not v or any(a < 0 for a in v):
            raise ValueError('alphas must be a non-empty list of nonnegative values')
        return v

    @field_validator('seeds')
    def seeds_present(cls, v):
        if not v:
            raise ValueError('seeds must be non-empty')
        return v

    @model_validator(mode='after')
    def positive_settings(self):
        if self.steps < 0:
            raise ValueError('steps must be >= 0')
        if self.batch_size < 1 or self.eval_every < 1 or self.source_period < 1:
            raise ValueError('batch_size, eval_every and source_period must be >= 1')
        if not 0 < self.validation_fraction < 1:
            raise ValueError('validation_fraction must lie in (0, 1)')
        return self

    def run_payload(self, lmbda: float, alpha: float, seed: int) -> Dict[str, Any]:
        """Everything that determines one run's outputs"""
        payload = self.model_dump(mode="json", exclude={"lambdas", "alphas", "seeds"})
        payload.update({"lambda": float(lmbda), "alpha": float(alpha), "seed": int(seed)})
        return payload


class MetricRow(BaseModel):
    """Validation metrics at one training step"""
    step: int = Field(..., description="Training step (0 = initialization)")
    lmbda: float = Field(..., description="Rate-distortion trade-off")
    alpha: float = Field(..., description="Regularization factor")
    seed: int = Field(..., description="Run seed")
    rate_bpd: float = Field(..., description="Rate of hard-quantized latents, bits per source dimension")
    mse: float = Field(..., description="Mean squared error per dimension")
    quality_db: float = Field(..., description="-10 log10(MSE)")
    reg_bits: float = Field(..., description="Source-model NLL of X given Xhat, bits per dimension (estimate of H(X|Xhat)/N)")
    wall_time: float = Field(0.0, description="Seconds since the run started; kept out of the CSV")


class RunRecord(BaseModel):
    """Outcome of one (lambda, alpha, seed) training run"""
    run_hash: str = Field(..., description="Config hash; also the run directory name")
    lmbda: float = Field(..., description="Rate-distortion trade-off")
    alpha: float = Field(..., description="Regularization factor")
    seed: int = Field(..., description="Run seed")
    config: Dict[str, Any] = Field(..., description="Snapshot of the run-defining configuration")
    status: Literal["running", "completed", "diverged", "failed", "aborted"] = Field(..., description="Lifecycle state")
    metrics: List[MetricRow] = Field(default_factory=list, description="Evaluation rows, strictly increasing in step")
    checkpoint: Optional[str] = Field(None, description="Directory of the last good checkpoint")
    error: Optional[str] = Field(None, description="Failure context when status is not completed")
    command: Optional[str] = Field(None, description="Command line that produced the run")

    @property
    def final(self) -> Optional[MetricRow]:
        return self.metrics[-1] if self.metrics else None

    @property
    def source_mode(self) -> str:
        return self.config.get("source_model", {}).get("mode", "factorized")
