"""Dense float64 tensors that record the operations producing them."""
from typing import Optional, Sequence, Tuple

import numpy as np

from rdlab.utils.common import InvalidArgument


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None,
                 _ctx: Optional["Function"] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx = _ctx

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.values.size != 1:
            raise InvalidArgument(f"item needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} grad={'yes' if self.requires_grad else 'no'}>"

    def __add__(self, other): return ops.add(self, other)
    def __radd__(self, other): return ops.add(other, self)
    def __sub__(self, other): return ops.sub(self, other)
    def __rsub__(self, other): return ops.sub(other, self)
    def __mul__(self, other): return ops.mul(self, other)
    def __rmul__(self, other): return ops.mul(other, self)
    def __truediv__(self, other): return ops.div(self, other)
    def __rtruediv__(self, other): return ops.div(other, self)
    def __neg__(self): return ops.neg(self)
    def __matmul__(self, other): return ops.matmul(self, other)

    def sum(self, axis: Optional[int] = None): return ops.reduce_sum(self, axis)
    def mean(self, axis: Optional[int] = None): return ops.reduce_mean(self, axis)
    def tanh(self): return ops.tanh(self)
    def exp(self): return ops.exp(self)
    def log(self): return ops.log(self)
    def square(self): return ops.square(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad of every node requiring gradients"""
        if self.values.size != 1:
            raise InvalidArgument(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        pending = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._ctx is None:
                continue
            for parent, pg in zip(node._ctx.parents, node._ctx.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


class Function:
    """One recorded operation: forward on raw arrays, backward to parent gradients"""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        parents = tuple(lift(x) for x in inputs)
        ctx = cls(*parents)
        out = ctx.forward(*[p.values for p in parents], **kwargs)
        needs_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=needs_grad, _ctx=ctx if needs_grad else None)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError("Subclasses must implement forward")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError("Subclasses must implement backward")


def lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64, copy=True), name=name)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no path back to x's ancestors"""
    return Tensor(lift(x).values, name=getattr(x, "name", None))


from rdlab.engine import ops  # noqa: E402  (ops builds on Tensor)
