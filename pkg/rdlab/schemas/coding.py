import math
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Literal, Optional


def _check_pmf(v: List[float]) -> List[float]:
    if not v:
        raise ValueError('source distribution must be non-empty')
    if any((not math.isfinite(p)) or p < 0 for p in v):
        raise ValueError('source probabilities must be finite and nonnegative')
    total = math.fsum(v)
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f'source probabilities sum to {total!r}, not 1')
    return v


def _check_map(values: List[int], domain: int, codomain: int, label: str) -> None:
    if len(values) != domain:
        raise ValueError(f'{label} must be defined on all {domain} symbols, got {len(values)}')
    if any(not 0 <= v < codomain for v in values):
        raise ValueError(f'{label} maps outside its codomain of size {codomain}')


def _check_injective(values: List[int], label: str) -> None:
    if len(set(values)) != len(values):
        raise ValueError(f'{label} must be injective')


class DirectCodecSpec(BaseModel):
    """
    Direct coding model: quantizer X -> U followed by a bijective codebook U -> Xhat
    """
    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "source": [0.125] * 8,
                "quantizer": [0, 0, 1, 1, 2, 2, 3, 3],
                "codebook": [0, 2, 4, 6],
                "xhat_size": 8
            }
        }
    )

    source: List[float] = Field(..., description="Source pmf over X = {0, ..., |X|-1}")
    quantizer: List[int] = Field(..., description="Index u = Q(x) for every source symbol")
    codebook: List[int] = Field(..., description="Reconstruction symbol for every index u; injective")
    xhat_size: Optional[int] = Field(None, description="Size of the reconstruction alphabet (default: max codeword + 1)")

    @field_validator('source')
    def source_is_pmf(cls, v):
        return _check_pmf(v)

    @model_validator(mode='after')
    def maps_are_total(self):
        if not self.codebook:
            raise ValueError('codebook must contain at least one codeword')
        if self.xhat_size is None:
            self.xhat_size = max(self.codebook) + 1
        _check_map(self.quantizer, len(self.source), len(self.codebook), 'quantizer')
        _check_map(self.codebook, len(self.codebook), self.xhat_size, 'codebook')
        _check_injective(self.codebook, 'codebook')
        return self

    @property
    def num_indices(self) -> int:
        return len(self.codebook)


class TransformCodecSpec(BaseModel):
    """
    Transform coding model: X -T_A-> Y -Q-> U -Q^-1-> Yhat -T_S-> Xhat
    """
    model_config = ConfigDict(extra="forbid")

    source: List[float] = Field(..., description="Source pmf over X")
    analysis: List[int] = Field(..., description="Analysis transform T_A: X -> Y")
    y_size: int = Field(..., description="Size of the latent alphabet Y")
    quantizer: List[int] = Field(..., description="Quantizer Q: Y -> U")
    dequantizer: List[int] = Field(..., description="Dequantizer Q^-1: U -> Yhat; injective")
    yhat_size: int = Field(..., description="Size of the dequantized alphabet Yhat")
    synthesis: List[int] = Field(..., description="Synthesis transform T_S: Yhat -> Xhat; may merge indices")
    xhat_size: int = Field(..., description="Size of the reconstruction alphabet Xhat")

    @field_validator('source')
    def source_is_pmf(cls, v):
        return _check_pmf(v)

    @model_validator(mode='after')
    def maps_are_total(self):
        if not self.dequantizer:
            raise ValueError('dequantizer must contain at least one index')
        _check_map(self.analysis, len(self.source), self.y_size, 'analysis')
        _check_map(self.quantizer, self.y_size, len(self.dequantizer), 'quantizer')
        _check_map(self.dequantizer, len(self.dequantizer), self.yhat_size, 'dequantizer')
        _check_injective(self.dequantizer, 'dequantizer')
        _check_map(self.synthesis, self.yhat_size, self.xhat_size, 'synthesis')
        return self

    @property
    def num_indices(self) -> int:
        return len(self.dequantizer)


class IdentityCheck(BaseModel):
    """One entropy identity evaluated on an induced joint law"""
    model_config = ConfigDict(populate_by_name=True)

    name: str = Field(..., description="Identity in the form lhs=rhs")
    lhs: float = Field(..., description="Left-hand side in bits")
    rhs: float = Field(..., description="Right-hand side in bits")
    gap: float = Field(..., description="|lhs - rhs| in bits")
    passed: bool = Field(..., alias="pass", description="Whether gap <= tolerance")


class IdentityReport(BaseModel):
    """Every identity checked for one codec, plus the H(U|Xhat) residual"""
    model_config = ConfigDict(populate_by_name=True)

    kind: Literal["direct", "transform"] = Field(..., description="Coding model the identities belong to")
    identities: List[IdentityCheck] = Field(..., description="Per-identity results")
    residual_H_U_given_Xhat: float = Field(..., description="H(U|Xhat) in bits")
    seed: Optional[int] = Field(None, description="Generator seed of the spec, when randomized")

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.identities)

    def check(self, name: str) -> IdentityCheck:
        for item in self.identities:
            if item.name == name:
                return item
        raise KeyError(name)


class VerificationFailure(BaseModel):
    """A failing spec serialized for replay"""
    seed: Optional[int] = Field(None, description="Generator seed of the failing spec")
    kind: Literal["direct", "transform"] = Field(..., description="Coding model")
    spec: dict = Field(..., description="The spec document, replayable with --replay")
    report: IdentityReport = Field(..., description="The failing report")
    mutant: bool = Field(False, description="Whether the synthesis map was corrupted by the error-path hook")


class BatchVerificationReport(BaseModel):
    """Summary of a randomized identity verification batch"""
    kind: Literal["direct", "transform"] = Field(..., description="Coding model")
    count: int = Field(..., description="Number of specs verified")
    seed: int = Field(..., description="Root seed expanded into per-spec seeds")
    max_alphabet: int = Field(..., description="Largest source alphabet generated")
    passed: int = Field(..., description="Specs whose identities all pass")
    residual_positive: int = Field(..., description="Specs with H(U|Xhat) > 0.01 bits")
    max_gap: float = Field(..., description="Largest identity gap observed, in bits")
    failures: List[VerificationFailure] = Field(default_factory=list, description="Failing specs for replay")

    @property
    def ok(self) -> bool:
        return self.passed == self.count


class RateDistortionProbeResult(BaseModel):
    """Smallest I(X;Xhat) found among deterministic codecs meeting the distortion budget"""
    bits: float = Field(..., description="Best mutual information found, in bits")
    upper_bound: bool = Field(True, description="Always true: a search over a codec family bounds R(D) from above")
    exhaustive: bool = Field(..., description="Whether every partition of X was searched")
    partitions_evaluated: int = Field(..., description="Number of quantizer partitions tried")
    expected_distortion: float = Field(..., description="E[d] of the best codec")
    quantizer: List[int] = Field(..., description="Cell label of every source symbol in the best codec")
    codebook: List[int] = Field(..., description="Reconstruction symbol of every cell")
