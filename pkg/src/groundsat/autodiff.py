"""Minimal reverse-mode autodiff on dense float64 numpy arrays.

Supports exactly the operations the training pipeline needs: dense linear
maps, elementwise exp/log/clamp/sigmoid/relu, mean/sum/max/p-norm
reductions, binary cross-entropy, and log-softmax. Values are stored
row-major in 64-bit floats; gradients accumulate across repeated backward
calls until explicitly cleared.
"""

import numpy as np

from .errors import ContractError, ShapeError

EPS = 1e-12  # probability clamp applied before any log or acos


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array plus an optional backward context."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar root; accumulates into .grad."""
        if self.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._ctx is None:
                continue
            for parent, pg in zip(node._ctx.parents, node._ctx.backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return Add.apply(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Scale.apply(_wrap(other), -1.0))

    def __rsub__(self, other):
        return Add.apply(_wrap(other), Scale.apply(self, -1.0))

    def __mul__(self, other):
        return Mul.apply(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Mul.apply(self, Reciprocal.apply(_wrap(other)))

    def __rtruediv__(self, other):
        return Mul.apply(_wrap(other), Reciprocal.apply(self))

    def __neg__(self):
        return Scale.apply(self, -1.0)

    def __matmul__(self, other):
        return MatMul.apply(self, _wrap(other))

    def __pow__(self, p):
        return PowConst.apply(self, float(p))

    @property
    def T(self):
        return Transpose.apply(self)

    def reshape(self, *shape):
        return Reshape.apply(self, shape)

    def sum(self, axis=None):
        return Sum.apply(self, axis)

    def mean(self, axis=None):
        return Mean.apply(self, axis)

    def max(self, axis=None):
        return Max.apply(self, axis)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return Relu.apply(self)

    def clamp(self, lo, hi):
        return Clamp.apply(self, lo, hi)

    def pnorm(self, p=2.0, axis=None):
        return PNorm.apply(self, float(p), axis)

    def take_rows(self, idx):
        return TakeRows.apply(self, np.asarray(idx))

    def pick(self, idx):
        return Pick.apply(self, np.asarray(idx, dtype=np.int64))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x)


def parameter(x):
    return Tensor(x, requires_grad=True)


class Function:
    """One graph node: forward computes data, backward maps grad to parents."""

    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *args):
        tensors = [a for a in args if isinstance(a, Tensor)]
        ctx = cls(*tensors)
        out = Tensor(ctx.forward(*[a.data if isinstance(a, Tensor) else a for a in args]))
        out._ctx = ctx
        return out

    def forward(self, *args):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.sa), _unbroadcast(grad, self.sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (_unbroadcast(grad * self.b, self.a.shape),
                _unbroadcast(grad * self.a, self.b.shape))


class Scale(Function):
    def forward(self, a, c):
        self.c = c
        return a * c

    def backward(self, grad):
        return (grad * self.c,)


class Reciprocal(Function):
    def forward(self, a):
        self.a = a
        return 1.0 / a

    def backward(self, grad):
        return (-grad / (self.a * self.a),)


class PowConst(Function):
    def forward(self, a, p):
        self.a, self.p = a, p
        return a ** p

    def backward(self, grad):
        return (grad * self.p * self.a ** (self.p - 1.0),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, grad):
        return (grad.T,)


class Reshape(Function):
    def forward(self, a, shape):
        self.orig = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.orig),)


class Sum(Function):
    def forward(self, a, axis):
        self.shape, self.axis = a.shape, axis
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad, self.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis):
        self.shape, self.axis = a.shape, axis
        self.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis))

    def backward(self, grad):
        g = grad / self.count
        if self.axis is None:
            return (np.broadcast_to(g, self.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, self.axis), self.shape).copy(),)


class Max(Function):
    def forward(self, a, axis):
        self.a, self.axis = a, axis
        out = np.asarray(a.max(axis=axis))
        self.out = out
        return out

    def backward(self, grad):
        if self.axis is None:
            mask = (self.a == self.out).astype(np.float64)
        else:
            mask = (self.a == np.expand_dims(self.out, self.axis)).astype(np.float64)
            grad = np.expand_dims(grad, self.axis)
        mask /= np.maximum(mask.sum(axis=self.axis, keepdims=self.axis is not None), 1.0)
        return (mask * grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))),
                            np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Clamp(Function):
    """Clamp to [lo, hi]; gradient passes through only inside the band."""

    def forward(self, a, lo, hi):
        self.mask = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, grad):
        return (grad * self.mask,)


class PNorm(Function):
    """p-norm reduction along an axis (p >= 1)."""

    def forward(self, a, p, axis):
        self.a, self.p, self.axis = a, p, axis
        self.out = np.asarray((np.abs(a) ** p).sum(axis=axis) ** (1.0 / p))
        return self.out

    def backward(self, grad):
        out = self.out if self.axis is None else np.expand_dims(self.out, self.axis)
        g = grad if self.axis is None else np.expand_dims(grad, self.axis)
        denom = np.maximum(out, EPS) ** (self.p - 1.0)
        return (g * np.sign(self.a) * np.abs(self.a) ** (self.p - 1.0) / denom,)


class LogSoftmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=-1, keepdims=True),)


class TakeRows(Function):
    def forward(self, a, idx):
        self.shape, self.idx = a.shape, idx
        return a[idx]

    def backward(self, grad):
        out = np.zeros(self.shape)
        np.add.at(out, self.idx, grad)
        return (out,)


class Pick(Function):
    """Select a[i, idx[i]] for each row i."""

    def forward(self, a, idx):
        self.shape, self.idx = a.shape, idx
        return a[np.arange(a.shape[0]), idx]

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[np.arange(self.shape[0]), self.idx] = grad
        return (out,)


def log_softmax(x):
    return LogSoftmax.apply(x)


def softmax(x):
    return LogSoftmax.apply(x).exp()


def bce(v, w):
    """Binary cross-entropy -(1/n)(sum v log w + sum (1-v) log(1-w)).

    `v` holds targets in [0, 1]; `w` holds predictions, clamped to
    [EPS, 1-EPS] before the logs so the result is always finite.
    """
    v = _wrap(v)
    w = _wrap(w)
    if v.shape != w.shape:
        raise ShapeError(f"bce operands {v.shape} vs {w.shape}")
    wc = w.clamp(EPS, 1.0 - EPS)
    terms = v * wc.log() + (1.0 - v) * (1.0 - wc).log()
    return -terms.mean()


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer `targets` under `logits` rows."""
    return -log_softmax(logits).pick(targets).mean()


class Adam:
    """Adaptive-moment optimizer with per-group learning rates.

    Parameters flagged requires_grad=False are frozen: they are skipped
    entirely and stay bit-identical across steps.
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        if groups and isinstance(groups[0], Tensor):
            raise ContractError("Adam expects [{'params': [...], 'lr': float}, ...]")
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {}
        self._v = {}
        for g in groups:
            for p in g["params"]:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                if not p.requires_grad:
                    continue
                if p.grad is None:
                    raise ContractError("trainable parameter is missing its gradient")
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad * p.grad
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def grad_check(fn, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `fn` rebuilds the scalar loss from `params` on every call. Relative
    error is |analytic - central| / (|analytic| + |central| + 1e-12),
    maximized over all entries of all parameters.
    """
    if not 0.0 < step <= 1e-3:
        raise ContractError(f"grad_check step must be in (0, 1e-3], got {step}")
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            central = (hi - lo) / (2.0 * step)
            a = analytic.ravel()[i]
            err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
