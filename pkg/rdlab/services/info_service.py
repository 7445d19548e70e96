"""Exact Shannon quantities over finite joint distributions, in bits.

Tables are stored in coordinate form: one row of symbol indices per
positive-mass cell plus its probability. Zero-mass cells are never stored,
which is the 0 log 0 = 0 convention.
"""
import math
import json
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import entropy as _scipy_entropy

from rdlab.config import MAX_TABLE_CELLS, PROBABILITY_TOLERANCE
from rdlab.schemas.info import JointTableDocument
from rdlab.utils.common import InvalidArgument, InvariantViolation, ResourceLimit

AxisRef = Union[int, str]


@dataclass(frozen=True)
class Alphabet:
    """A finite symbol set {0, ..., size-1} with optional labels"""
    size: int
    labels: Optional[Tuple[str, ...]] = None
    name: Optional[str] = None

    def __post_init__(self):
        if int(self.size) < 1:
            raise InvalidArgument(f"Alphabet size must be >= 1, got {self.size}")
        if self.labels is not None:
            labels = tuple(str(label) for label in self.labels)
            if len(labels) != self.size:
                raise InvalidArgument(f"Alphabet has {self.size} symbols but {len(labels)} labels")
            if len(set(labels)) != len(labels):
                raise InvalidArgument("Alphabet labels must be unique")
            object.__setattr__(self, "labels", labels)


class JointTable:
    """Immutable joint pmf over 2 or 3 finite axes"""

    def __init__(self, axes: Sequence[Alphabet], cells: np.ndarray, mass: np.ndarray):
        axes = tuple(axes)
        if not 2 <= len(axes) <= 3:
            raise InvalidArgument(f"A joint table needs 2 or 3 axes, got {len(axes)}")
        names = [a.name for a in axes if a.name is not None]
        if len(set(names)) != len(names):
            raise InvalidArgument("Axis names must be unique")

        cells = np.asarray(cells, dtype=np.int64).reshape(-1, len(axes))
        mass = np.asarray(mass, dtype=np.float64).reshape(-1)
        if cells.shape[0] != mass.shape[0]:
            raise InvalidArgument("cells and mass disagree in length")
        if cells.shape[0] > MAX_TABLE_CELLS:
            raise ResourceLimit(f"Joint table with {cells.shape[0]} cells exceeds the cap of {MAX_TABLE_CELLS}")
        sizes = np.array([a.size for a in axes], dtype=np.int64)
        if cells.size and (np.any(cells < 0) or np.any(cells >= sizes)):
            raise InvalidArgument("Cell index outside its alphabet")
        if not np.all(np.isfinite(mass)) or np.any(mass < 0):
            raise InvariantViolation("Probability masses must be finite and nonnegative")
        total = math.fsum(mass.tolist())
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise InvariantViolation(f"Probability masses sum to {total!r}, not 1 within {PROBABILITY_TOLERANCE}")

        keep = mass > 0
        cells, mass = cells[keep], mass[keep]
        if cells.shape[0]:
            # merge repeated coordinates so every stored cell is distinct
            unique, inverse = np.unique(cells, axis=0, return_inverse=True)
            if unique.shape[0] != cells.shape[0]:
                mass = np.bincount(inverse.reshape(-1), weights=mass, minlength=unique.shape[0])
                cells = unique
        cells.setflags(write=False)
        mass.setflags(write=False)
        self.axes: Tuple[Alphabet, ...] = axes
        self.cells = cells
        self.mass = mass

    @classmethod
    def from_dense(cls, array, axes: Optional[Sequence[Alphabet]] = None,
                   names: Optional[Sequence[Optional[str]]] = None) -> "JointTable":
        array = np.asarray(array, dtype=np.float64)
        if array.size > MAX_TABLE_CELLS:
            raise ResourceLimit(f"Dense table of {array.size} cells exceeds the cap of {MAX_TABLE_CELLS}")
        if axes is None:
            names = list(names) if names is not None else [None] * array.ndim
            axes = [Alphabet(size, name=name) for size, name in zip(array.shape, names)]
        if tuple(a.size for a in axes) != array.shape:
            raise InvalidArgument(f"Array shape {array.shape} does not match alphabets")
        cells = np.argwhere(array != 0)
        return cls(axes, cells, array[tuple(cells.T)])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def axis_index(self, axis: AxisRef) -> int:
        if isinstance(axis, str):
            for i, a in enumerate(self.axes):
                if a.name == axis:
                    return i
            raise InvalidArgument(f"No axis named {axis!r}")
        axis = int(axis)
        if not 0 <= axis < self.ndim:
            raise InvalidArgument(f"Axis {axis} out of range for a {self.ndim}-axis table")
        return axis

    def resolve(self, axis_subset: Union[AxisRef, Iterable[AxisRef]]) -> Tuple[int, ...]:
        if isinstance(axis_subset, (int, str)):
            axis_subset = [axis_subset]
        resolved = tuple(sorted({self.axis_index(a) for a in axis_subset}))
        return resolved

    def marginal(self, axis_subset) -> np.ndarray:
        """Positive masses of the marginal on axis_subset (support only)"""
        idx = self.resolve(axis_subset)
        if not idx:
            raise InvalidArgument("Axis subset must be non-empty")
        if len(idx) == self.ndim:
            return np.asarray(self.mass)
        _, inverse = np.unique(self.cells[:, idx], axis=0, return_inverse=True)
        return np.bincount(inverse.reshape(-1), weights=self.mass)

    def to_dense(self) -> np.ndarray:
        size = int(np.prod(self.shape))
        if size > MAX_TABLE_CELLS:
            raise ResourceLimit(f"Dense table of {size} cells exceeds the cap of {MAX_TABLE_CELLS}")
        dense = np.zeros(self.shape, dtype=np.float64)
        dense[tuple(self.cells.T)] = self.mass
        return dense

    def to_document(self) -> JointTableDocument:
        names = [a.name for a in self.axes]
        labels = [list(a.labels) if a.labels is not None else None for a in self.axes]
        return JointTableDocument(
            axes=list(self.shape),
            mass=self.to_dense().ravel(order="C").tolist(),
            names=names if any(n is not None for n in names) else None,
            labels=labels if any(l is not None for l in labels) else None,
        )

    def to_json(self) -> str:
        return self.to_document().model_dump_json(exclude_none=True)

    @classmethod
    def from_document(cls, doc: JointTableDocument) -> "JointTable":
        expected = int(np.prod(doc.axes))
        if expected > MAX_TABLE_CELLS:
            raise ResourceLimit(f"Dense table of {expected} cells exceeds the cap of {MAX_TABLE_CELLS}")
        if len(doc.mass) != expected:
            raise InvalidArgument(f"Expected {expected} masses, got {len(doc.mass)}")
        names = doc.names or [None] * len(doc.axes)
        labels = doc.labels or [None] * len(doc.axes)
        axes = [
            Alphabet(size, labels=tuple(lab) if lab is not None else None, name=name)
            for size, name, lab in zip(doc.axes, names, labels)
        ]
        return cls.from_dense(np.asarray(doc.mass, dtype=np.float64).reshape(doc.axes), axes=axes)

    @classmethod
    def from_json(cls, text: str) -> "JointTable":
        return cls.from_document(JointTableDocument.model_validate(json.loads(text)))

    def __repr__(self):
        names = ",".join(a.name or str(i) for i, a in enumerate(self.axes))
        return f"JointTable(axes=({names}), shape={self.shape}, support={self.mass.size})"


def entropy(t: JointTable, axis_subset) -> float:
    """H(axis_subset) in bits"""
    idx = t.resolve(axis_subset)
    if not idx:
        raise InvalidArgument("entropy needs a non-empty axis subset")
    p = t.marginal(idx)
    if p.size <= 1:
        return 0.0
    return float(_scipy_entropy(p, base=2))


def _disjoint(t: JointTable, first, second) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    a, b = t.resolve(first), t.resolve(second)
    if not a:
        raise InvalidArgument("Target axis set must be non-empty")
    if set(a) & set(b):
        raise InvalidArgument(f"Axis sets overlap: {a} and {b}")
    return a, b


def conditional_entropy(t: JointTable, target_axes, given_axes) -> float:
    """H(target | given) = H(target, given) - H(given)"""
    target, given = _disjoint(t, target_axes, given_axes)
    if not given:
        return entropy(t, target)
    return entropy(t, target + given) - entropy(t, given)


def mutual_information(t: JointTable, axes_a, axes_b) -> float:
    """I(a; b) = H(a) - H(a | b)"""
    a, b = _disjoint(t, axes_a, axes_b)
    if not b:
        raise InvalidArgument("Mutual information needs two non-empty axis sets")
    return entropy(t, a) - conditional_entropy(t, a, b)


def joint_from_cells(sizes: Sequence[int], names: Sequence[Optional[str]],
                         cells: np.ndarray, mass: np.ndarray) -> JointTable:
    axes: List[Alphabet] = [Alphabet(int(s), name=n) for s, n in zip(sizes, names)]
    return JointTable(axes, cells, mass)
