"""Differentiable operations.

Broadcasting is limited to equal shapes, scalars, and a row vector (n,) or
(1, n) added to a (batch, n) matrix.
"""
import math
from typing import Optional, Tuple

import numpy as np
from scipy.special import erfc, expit

from rdlab.engine.tensor import Function, Tensor
from rdlab.utils.common import InvalidArgument

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.ndim == 2 and small.shape in ((big.shape[1],), (1, big.shape[1])):
        return
    raise InvalidArgument(f"Shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 1:
        return grad.sum(axis=0)
    return grad.sum(axis=0, keepdims=True)


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (_unbroadcast(grad / self.b, self.a.shape),
                _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape))


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise InvalidArgument(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * expit(self.a),)


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return (2.0 * self.a * grad,)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class ClampMin(Function):
    def forward(self, a, floor: float = 0.0):
        self.mask = a >= floor
        return np.where(self.mask, a, floor)

    def backward(self, grad):
        return (grad * self.mask,)


class GaussianCdf(Function):
    def forward(self, a):
        self.a = a
        return 0.5 * erfc(-a / _SQRT2)

    def backward(self, grad):
        return (grad * _INV_SQRT_2PI * np.exp(-0.5 * self.a * self.a),)


class Sum(Function):
    def forward(self, a, axis: Optional[int] = None):
        self.shape, self.axis = a.shape, axis
        return np.sum(a, axis=axis)

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad, self.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis: Optional[int] = None):
        self.shape, self.axis = a.shape, axis
        self.count = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis)

    def backward(self, grad):
        grad = grad / self.count
        if self.axis is None:
            return (np.broadcast_to(grad, self.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.shape).copy(),)


def add(a, b) -> Tensor: return Add.apply(a, b)
def sub(a, b) -> Tensor: return Sub.apply(a, b)
def mul(a, b) -> Tensor: return Mul.apply(a, b)
def div(a, b) -> Tensor: return Div.apply(a, b)
def neg(a) -> Tensor: return Neg.apply(a)
def matmul(a, b) -> Tensor: return MatMul.apply(a, b)
def tanh(a) -> Tensor: return Tanh.apply(a)
def exp(a) -> Tensor: return Exp.apply(a)
def log(a) -> Tensor: return Log.apply(a)
def softplus(a) -> Tensor: return Softplus.apply(a)
def square(a) -> Tensor: return Square.apply(a)
def abs(a) -> Tensor: return Abs.apply(a)  # noqa: A001
def clamp_min(a, floor: float) -> Tensor: return ClampMin.apply(a, floor=floor)
def gaussian_cdf(a) -> Tensor: return GaussianCdf.apply(a)
def reduce_sum(a, axis: Optional[int] = None) -> Tensor: return Sum.apply(a, axis=axis)
def reduce_mean(a, axis: Optional[int] = None) -> Tensor: return Mean.apply(a, axis=axis)


def log2(a) -> Tensor:
    return mul(log(a), 1.0 / math.log(2.0))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)
