"""Conditional source entropy model q(X|Xhat) and the regularized objective."""
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from rdlab.engine import ParamStore, Tensor, constant, load_checkpoint, ops, save_checkpoint, stop_gradient
from rdlab.engine.params import read_manifest
from rdlab.schemas.training import SourceModelConfig
from rdlab.services.codec_service import CodecOutput, rd_loss
from rdlab.services.sources import SourceBatch
from rdlab.utils.common import InvalidArgument, ModelDiverged, get_logger

logger = get_logger("regularizer")

_HALF_LOG2_2PI = 0.5 * math.log2(2.0 * math.pi)
_INV_LN2 = 1.0 / math.log(2.0)


def made_masks(dim: int, hidden: int) -> Tuple[np.ndarray, np.ndarray]:
    """Input and output masks of a one-hidden-layer autoregressive net.

    Output i reads x_j only through hidden units with j < degree <= i - 1,
    so it never sees x_i or later coordinates.
    """
    degrees_in = np.arange(1, dim + 1)
    degrees_hidden = np.arange(hidden) % max(dim - 1, 1) + 1
    mask_in = (degrees_in[:, None] <= degrees_hidden[None, :]).astype(np.float64)
    mask_out = (degrees_hidden[:, None] < degrees_in[None, :]).astype(np.float64)
    return mask_in, mask_out


class SourceModel:
    """Per-dimension Gaussian q(x_i | xhat [, x_<i]) in one of three context modes"""

    def __init__(self, dim: int, config: Optional[SourceModelConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        self.dim = dim
        self.config = config or SourceModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = ParamStore()
        width = self.config.hidden

        if self.mode == "weak":
            self.store.add("weak.scale", np.zeros(dim))
            return

        def dense(name, fan_in, fan_out, scale=1.0):
            self.store.add(f"{name}.weight", scale * rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            self.store.add(f"{name}.bias", np.zeros(fan_out))

        dense("hidden", dim, width)
        dense("mu_head", width, dim, scale=0.1)
        dense("scale_head", width, dim, scale=0.1)
        if self.mode == "causal" and dim > 1:
            self.mask_in, self.mask_out = made_masks(dim, width)
            self.lower = np.triu(np.ones((dim, dim)), k=1)
            self.store.add("context.in", rng.standard_normal((dim, width)) / np.sqrt(dim))
            self.store.add("context.bias", np.zeros(width))
            self.store.add("context.mu", 0.1 * rng.standard_normal((width, dim)) / np.sqrt(width))
            self.store.add("context.scale", 0.1 * rng.standard_normal((width, dim)) / np.sqrt(width))
            self.store.add("context.direct_mu", np.zeros((dim, dim)))
            self.store.add("context.direct_scale", np.zeros((dim, dim)))

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def has_context(self) -> bool:
        return "context.in" in self.store

    def _masked(self, name: str, mask: np.ndarray, frozen: bool) -> Tensor:
        return self.store.get(name, frozen) * constant(mask)

    def forward(self, x_hat: Tensor, x: Optional[Tensor] = None, frozen: bool = False) -> Tuple[Tensor, Tensor]:
        """(μ, σ) for every dimension; x is only read in causal mode"""
        floor = self.config.sigma_floor
        if self.mode == "weak":
            scale = self.store.get("weak.scale", frozen)
            sigma = ops.softplus(scale) + floor
            return x_hat, ops.add(ops.mul(x_hat, 0.0), sigma)

        get = lambda name: self.store.get(name, frozen)
        h = ops.tanh(ops.linear(x_hat, get("hidden.weight"), get("hidden.bias")))
        mu_offset = ops.linear(h, get("mu_head.weight"), get("mu_head.bias"))
        s = ops.linear(h, get("scale_head.weight"), get("scale_head.bias"))
        if self.has_context:
            if x is None:
                raise InvalidArgument("Causal source model needs x")
            c = ops.tanh(ops.linear(x, self._masked("context.in", self.mask_in, frozen), get("context.bias")))
            mu_offset = mu_offset + c @ self._masked("context.mu", self.mask_out, frozen) \
                + x @ self._masked("context.direct_mu", self.lower, frozen)
            s = s + c @ self._masked("context.scale", self.mask_out, frozen) \
                + x @ self._masked("context.direct_scale", self.lower, frozen)
        return x_hat + mu_offset, ops.softplus(s) + floor

    def header(self, **extra: Any) -> Dict[str, Any]:
        header = {"kind": "source_model", "dim": self.dim, "source_model": self.config.model_dump(mode="json")}
        header.update(extra)
        return header

    def save(self, directory, **extra: Any):
        return save_checkpoint(self.store, directory, self.header(**extra))

    @classmethod
    def load(cls, directory) -> Tuple["SourceModel", Dict[str, Any]]:
        header = read_manifest(directory)["header"]
        if header.get("kind") != "source_model":
            raise InvalidArgument(f"{directory} is not a source-model checkpoint")
        model = cls(int(header["dim"]), SourceModelConfig(**header["source_model"]))
        load_checkpoint(model.store, directory)
        return model, header


def _as_tensor(x: Union[SourceBatch, np.ndarray, Tensor]) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x.values if isinstance(x, SourceBatch) else x)


def gaussian_nll_bits(x: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Elementwise −log2 N(x; μ, σ²)"""
    z = (x - mu) / sigma
    return ops.square(z) * (0.5 * _INV_LN2) + ops.log2(sigma) + _HALF_LOG2_2PI


def source_nll(sm: SourceModel, x, x_hat, frozen: bool = False) -> Tensor:
    """Differential NLL of x given x̂ in bits per dimension, averaged over the batch"""
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise InvalidArgument(f"x {x.shape} and x_hat {x_hat.shape} must share a shape")
    mu, sigma = sm.forward(x_hat, stop_gradient(x), frozen)
    if not (np.all(np.isfinite(mu.values)) and np.all(np.isfinite(sigma.values))):
        raise ModelDiverged("Source model produced non-finite parameters")
    nll = ops.reduce_mean(gaussian_nll_bits(stop_gradient(x), mu, sigma))
    if not np.isfinite(nll.values):
        raise ModelDiverged("Source model NLL is not finite")
    return nll


@dataclass
class RegularizedLossBreakdown:
    """Terms of rate + λ·D + α·E[log2 q(X|Xhat)]; all bit quantities are per vector"""
    rate_bits: float
    distortion: float
    regularizer_bits: float
    total: Tensor
    alpha: float
    lmbda: float

    @property
    def total_value(self) -> float:
        return self.total.item()


def regularized_loss(codec_out: CodecOutput, x, sm: SourceModel, lmbda: float, alpha: float,
                     distortion_scale: float = 1.0) -> RegularizedLossBreakdown:
    """Stage-1 objective; the source model is read frozen so θ receives no gradient"""
    if alpha < 0:
        raise InvalidArgument(f"alpha must be >= 0, got {alpha}")
    x = _as_tensor(x)
    rd = rd_loss(codec_out, x, lmbda, distortion_scale)
    x_hat = codec_out.x_hat if alpha > 0 else stop_gradient(codec_out.x_hat)
    log_likelihood = -source_nll(sm, x, x_hat, frozen=True) * float(x.shape[1])
    total = rd + alpha * log_likelihood if alpha > 0 else rd
    return RegularizedLossBreakdown(
        rate_bits=codec_out.rate_bpd.item() * x.shape[1],
        distortion=codec_out.distortion.item(),
        regularizer_bits=log_likelihood.item(),
        total=total,
        alpha=float(alpha),
        lmbda=float(lmbda),
    )


def source_model_step_loss(sm: SourceModel, x, x_hat_frozen) -> Tensor:
    """Stage-2 objective: NLL·N with x̂ detached, so only θ gets gradients"""
    x = _as_tensor(x)
    return source_nll(sm, x, stop_gradient(_as_tensor(x_hat_frozen))) * float(x.shape[1])
