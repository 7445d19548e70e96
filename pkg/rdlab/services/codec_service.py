"""Toy transform codec: MLP analysis/synthesis, AUN training surrogate,
factorized Gaussian latent model, and the rate-distortion loss."""
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from rdlab.engine import ParamStore, Tensor, constant, load_checkpoint, ops, save_checkpoint, stop_gradient
from rdlab.engine.params import read_manifest
from rdlab.schemas.training import ArchitectureConfig
from rdlab.services.sources import SourceBatch
from rdlab.utils.common import InvalidArgument, TrainingDiverged, get_logger

logger = get_logger("codec")

BatchLike = Union[SourceBatch, np.ndarray, Tensor]


def inverse_softplus(value: float) -> float:
    return float(np.log(np.expm1(value)))


class MLP:
    """Dense tanh network whose weights live in a shared ParamStore"""

    def __init__(self, store: ParamStore, prefix: str, widths: Sequence[int], rng: np.random.Generator):
        if len(widths) < 2:
            raise InvalidArgument("MLP needs at least input and output widths")
        self.store = store
        self.prefix = prefix
        self.widths = list(widths)
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            store.add(f"{prefix}.{i}.weight", rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            store.add(f"{prefix}.{i}.bias", np.zeros(fan_out))

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        h = x
        for i in range(self.depth):
            h = ops.linear(
                h,
                self.store.get(f"{self.prefix}.{i}.weight", frozen),
                self.store.get(f"{self.prefix}.{i}.bias", frozen),
            )
            if i < self.depth - 1:
                h = ops.tanh(h)
        return h


class CodecModel:
    """Analysis T_A, synthesis T_S and the per-dimension latent prior"""

    def __init__(self, dim: int, architecture: Optional[ArchitectureConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        self.dim = dim
        self.architecture = architecture or ArchitectureConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = list(self.architecture.hidden)
        latent = self.architecture.latent
        self.store = ParamStore()
        self.analysis = MLP(self.store, "analysis", [dim, *hidden, latent], rng)
        self.synthesis = MLP(self.store, "synthesis", [latent, *reversed(hidden), dim], rng)
        self.store.add("entropy.mu", np.zeros(latent))
        self.store.add("entropy.rho", np.full(latent, inverse_softplus(1.0)))

    @classmethod
    def identity(cls, dim: int) -> "CodecModel":
        """Linear codec with T_A = T_S = identity and a unit prior"""
        model = cls(dim, ArchitectureConfig(hidden=[], latent=dim))
        model.store.load_values({
            "analysis.0.weight": np.eye(dim),
            "synthesis.0.weight": np.eye(dim),
        })
        return model

    @property
    def latent(self) -> int:
        return self.architecture.latent

    def analysis_parameters(self) -> List[str]:
        return [name for name in self.store if name.startswith("analysis.")]

    def synthesis_parameters(self) -> List[str]:
        return [name for name in self.store if name.startswith("synthesis.")]

    def latent_scales(self, frozen: bool = False) -> Tensor:
        floor = self.architecture.sigma_floor
        sigma = ops.softplus(self.store.get("entropy.rho", frozen))
        if np.any(sigma.values < floor):
            logger.warning(f"Latent scale below {floor}; clamped at the floor")
        return ops.clamp_min(sigma, floor)

    def header(self, **extra: Any) -> Dict[str, Any]:
        header = {"kind": "codec", "dim": self.dim, "architecture": self.architecture.model_dump(mode="json")}
        header.update(extra)
        return header

    def save(self, directory, **extra: Any):
        return save_checkpoint(self.store, directory, self.header(**extra))

    @classmethod
    def load(cls, directory) -> Tuple["CodecModel", Dict[str, Any]]:
        header = read_manifest(directory)["header"]
        if header.get("kind") != "codec":
            raise InvalidArgument(f"{directory} is not a codec checkpoint")
        model = cls(int(header["dim"]), ArchitectureConfig(**header["architecture"]))
        load_checkpoint(model.store, directory)
        return model, header


@dataclass
class CodecOutput:
    """y, the surrogate or hard latent, x̂, rate (bpd) and MSE"""
    y: Tensor
    latent: Tensor
    x_hat: Tensor
    rate_bpd: Tensor
    distortion: Tensor
    training: bool

    @property
    def y_tilde(self) -> Tensor:
        if not self.training:
            raise InvalidArgument("Hard-quantized output has no surrogate latent")
        return self.latent

    @property
    def u(self) -> np.ndarray:
        if self.training:
            raise InvalidArgument("Training output has no hard latent")
        return self.latent.values


def _as_tensor(x: BatchLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    values = x.values if isinstance(x, SourceBatch) else x
    return constant(values)


def _check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.values)):
        raise TrainingDiverged(f"Non-finite {what} activations", parameter=what)
    return t


def rate_bits(model: CodecModel, latent: Tensor, frozen: bool = False) -> Tensor:
    """−log2 of the latent interval masses, summed over latents, averaged over the batch, per source dimension"""
    latent = _as_tensor(latent)
    if latent.ndim != 2 or latent.shape[1] != model.latent:
        raise InvalidArgument(f"Latent shape {latent.shape} does not match width {model.latent}")
    sigma = model.latent_scales(frozen)
    d = ops.abs(latent - model.store.get("entropy.mu", frozen))
    mass = ops.gaussian_cdf((0.5 - d) / sigma) - ops.gaussian_cdf((-0.5 - d) / sigma)
    bits = -ops.log2(ops.clamp_min(mass, model.architecture.likelihood_bound))
    return ops.reduce_mean(ops.reduce_sum(bits, axis=1)) / model.dim


def mse(x: Tensor, x_hat: Tensor) -> Tensor:
    return ops.reduce_mean(ops.square(x - x_hat))


def draw_noise(noise_source, shape) -> np.ndarray:
    """Uniform(−0.5, 0.5) from a generator, or a caller-fixed array (tests force zeros)"""
    if isinstance(noise_source, np.random.Generator):
        return noise_source.uniform(-0.5, 0.5, size=shape)
    noise = np.asarray(noise_source, dtype=np.float64)
    if noise.shape != tuple(shape):
        raise InvalidArgument(f"Noise shape {noise.shape} does not match latent shape {shape}")
    if np.any(np.abs(noise) > 0.5):
        raise InvalidArgument("Noise must lie in [-0.5, 0.5]")
    return noise


def encode_train(model: CodecModel, x: BatchLike, noise_source, frozen: bool = False) -> CodecOutput:
    """AUN surrogate: ỹ = T_A(x) + ε, x̂ = T_S(ỹ); rate on ỹ"""
    x = _as_tensor(x)
    y = _check_finite(model.analysis(x, frozen), "analysis")
    y_tilde = y + constant(draw_noise(noise_source, y.shape))
    x_hat = _check_finite(model.synthesis(y_tilde, frozen), "synthesis")
    return CodecOutput(
        y=y,
        latent=y_tilde,
        x_hat=x_hat,
        rate_bpd=rate_bits(model, y_tilde, frozen),
        distortion=mse(x, x_hat),
        training=True,
    )


def encode_eval(model: CodecModel, x: BatchLike) -> CodecOutput:
    """Hard quantization u = round(T_A(x)) with ties to even; no gradient path"""
    x = stop_gradient(_as_tensor(x))
    y = _check_finite(model.analysis(x, frozen=True), "analysis")
    u = constant(np.rint(y.values))
    x_hat = _check_finite(model.synthesis(u, frozen=True), "synthesis")
    return CodecOutput(
        y=y,
        latent=u,
        x_hat=x_hat,
        rate_bpd=rate_bits(model, u, frozen=True),
        distortion=mse(x, x_hat),
        training=False,
    )


def rd_loss(output: CodecOutput, x: BatchLike, lmbda: float, distortion_scale: float = 1.0) -> Tensor:
    """Rate in bits per vector plus λ·scale·MSE"""
    if lmbda < 0:
        raise InvalidArgument(f"lambda must be >= 0, got {lmbda}")
    x = _as_tensor(x)
    if x.shape != output.x_hat.shape:
        raise InvalidArgument(f"Input shape {x.shape} does not match reconstruction {output.x_hat.shape}")
    rate_total = output.rate_bpd * float(x.shape[1])
    if lmbda == 0:
        return rate_total
    return rate_total + (lmbda * distortion_scale) * mse(x, output.x_hat)


def quality_db(mse_value: float) -> float:
    """−10·log10(MSE); infinite for a perfect reconstruction"""
    return float("inf") if mse_value <= 0 else float(-10.0 * np.log10(mse_value))
