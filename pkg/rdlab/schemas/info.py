from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import List, Optional


class JointTableDocument(BaseModel):
    """Serialized joint probability table (dense, row-major)"""

    axes: List[int] = Field(..., description="Alphabet size of each axis, in axis order")
    mass: List[float] = Field(..., description="Flat row-major probability masses")
    names: Optional[List[Optional[str]]] = Field(None, description="Optional axis names such as X, U, Xhat")
    labels: Optional[List[Optional[List[str]]]] = Field(None, description="Optional symbol labels per axis")

    @field_validator('axes')
    def axes_positive(cls, v):
        if not 2 <= len(v) <= 3:
            raise ValueError('a joint table has 2 or 3 axes')
        if any(size < 1 for size in v):
            raise ValueError('alphabet sizes must be positive')
        return v

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "axes": [2, 2],
                "mass": [0.25, 0.25, 0.25, 0.25],
                "names": ["X", "U"]
            }
        }
    )
