from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import Any, Dict, List, Literal, Optional


class RdPoint(BaseModel):
    """One operating point of a codec"""
    rate_bpd: float = Field(..., description="Rate in bits per source dimension")
    quality_db: float = Field(..., description="-10 log10(MSE)")
    mse: Optional[float] = Field(None, description="Mean squared error per dimension")
    lmbda: Optional[float] = Field(None, description="Trade-off that produced the point")

    @field_validator('rate_bpd')
    def rate_nonnegative(cls, v):
        if not v >= 0:
            raise ValueError('rate must be nonnegative')
        return v


class RdCurve(BaseModel):
    """Rate-distortion points sorted by rate"""
    label: str = Field("", description="Curve name for tables and plots")
    points: List[RdPoint] = Field(..., description="Operating points, one per lambda")
    provenance: List[str] = Field(default_factory=list, description="Run hashes the points come from")

    @property
    def rates(self) -> List[float]:
        return [p.rate_bpd for p in self.points]

    @property
    def qualities(self) -> List[float]:
        return [p.quality_db for p in self.points]

    def sorted(self) -> "RdCurve":
        return self.model_copy(update={"points": sorted(self.points, key=lambda p: p.rate_bpd)})

    def scaled(self, factor: float, label: Optional[str] = None) -> "RdCurve":
        points = [p.model_copy(update={"rate_bpd": p.rate_bpd * factor}) for p in self.points]
        return RdCurve(label=label or self.label, points=points, provenance=list(self.provenance))


class BdResult(BaseModel):
    """Bjontegaard delta rate of a test curve against an anchor"""
    bd_rate_percent: float = Field(..., description="Average rate difference; negative means the test curve saves rate")
    overlap: List[float] = Field(..., description="Quality interval [low, high] in dB integrated over")
    diagnostics: Dict[str, Any] = Field(default_factory=dict, description="Fit method, residuals, projection notes")


class ProbeReport(BaseModel):
    """Theorem-style entropy identities measured on a trained codec by enumeration"""
    bins: int = Field(..., description="Reconstruction bins per dimension")
    grid_points: int = Field(..., description="Number of enumerated source points")
    num_indices: int = Field(..., description="Distinct quantization indices observed")
    num_reconstructions: int = Field(..., description="Distinct binned reconstructions observed")
    identities: List[Dict[str, Any]] = Field(..., description="Identity rows (name, lhs, rhs, gap, pass)")
    residual_H_U_given_Xhat: float = Field(..., description="H(U|Xhat) in bits")
    theorem_gap: float = Field(..., description="Gap of H(U) = H(X) - H(X|Xhat) + H(U|Xhat) in bits")
    passed: bool = Field(..., description="Every identity within tolerance")


class ReportTable(BaseModel):
    """A generic emitted table plus where it was written"""
    name: str = Field(..., description="Report name")
    columns: List[str] = Field(..., description="Column names")
    rows: List[List[Any]] = Field(..., description="Row values")
    annotations: List[str] = Field(default_factory=list, description="Context lines rendered with the table, never asserted")
    files: List[str] = Field(default_factory=list, description="Paths of emitted CSV/SVG/markdown files")


class ProbeSource(BaseModel):
    """Enumerable grid of source points embedded in the codec's input space"""
    model_config = ConfigDict(extra="forbid")

    dims: int = Field(2, description="Grid dimensions (<= 4); remaining coordinates are held at offset")
    grid: int = Field(32, description="Points per grid dimension (<= 32)")
    low: float = Field(-3.0, description="Lowest grid coordinate")
    high: float = Field(3.0, description="Highest grid coordinate (ignored for integer grids)")
    integer: bool = Field(False, description="Use the integer points low, low+1, ... instead of an even spacing")
    weights: Literal["uniform", "gaussian"] = Field("uniform", description="Probability assigned to grid points")
    offset: Optional[List[float]] = Field(None, description="Values of the non-grid coordinates; zeros when omitted")

    @field_validator('dims', 'grid')
    def at_least_one(cls, v):
        if v < 1:
            raise ValueError('dims and grid must be >= 1')
        return v
