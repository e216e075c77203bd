"""Reverse-mode automatic differentiation over dense float64 matrices.

Every Tensor is 2-D. Forward ops record their parents and a backward closure;
calling backward() on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients, which makes weight sharing (the
same parameter appearing under several ops) work without special casing.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

BCE_LOGIT_CAP = 30.0


class Tensor:
    """A node of the computation graph holding a (rows, cols) float64 array."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple["Tensor", ...] = (),
                 backward: Callable[[np.ndarray], None] | None = None):
        arr = np.asarray(data, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.flat[0])

    def _accumulate(self, grad: np.ndarray, own: bool = False) -> None:
        # own=True marks a freshly allocated buffer that may be adopted as-is
        if self.grad is None:
            self.grad = grad if own else np.array(grad)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Populate grad on every ancestor with d(self)/d(ancestor)."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        return scale(self, scalar)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _require_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad @ b.data.T, own=True)
        b._accumulate(a.data.T @ grad, own=True)

    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a (1, D) row bias broadcast over a's rows."""
    broadcast = b.shape[0] == 1 and a.shape[0] != 1
    if not broadcast:
        _require_same_shape(a, b)
    elif a.shape[1] != b.shape[1]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b))

    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad)
        if broadcast:
            b._accumulate(grad.sum(axis=0, keepdims=True), own=True)
        else:
            b._accumulate(grad)

    out._backward = backward
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.data * factor, (a,))
    out._backward = lambda grad: a._accumulate(grad * factor, own=True)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,))
    out._backward = lambda grad: a._accumulate(grad * mask, own=True)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s, (a,))
    out._backward = lambda grad: a._accumulate(grad * s * (1.0 - s), own=True)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.shape[0] != rows:
            raise ValueError("concat_cols requires equal row counts")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors))
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(grad: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(grad, splits, axis=1)):
            t._accumulate(piece)

    out._backward = backward
    return out


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    cols = tensors[0].shape[1]
    for t in tensors:
        if t.shape[1] != cols:
            raise ValueError("concat_rows requires equal column counts")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors))
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward(grad: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(grad, splits, axis=0)):
            t._accumulate(piece)

    out._backward = backward
    return out


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=int)
    out = Tensor(a.data[index], (a,))

    def backward(grad: np.ndarray) -> None:
        acc = np.zeros_like(a.data)
        np.add.at(acc, index, grad)
        a._accumulate(acc, own=True)

    out._backward = backward
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop], (a,))

    def backward(grad: np.ndarray) -> None:
        acc = np.zeros_like(a.data)
        acc[start:stop] = grad
        a._accumulate(acc, own=True)

    out._backward = backward
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[:, start:stop], (a,))

    def backward(grad: np.ndarray) -> None:
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = grad
        a._accumulate(acc, own=True)

    out._backward = backward
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), (a,))
    out._backward = lambda grad: a._accumulate(np.full_like(a.data, grad.flat[0]), own=True)
    return out


class PoolPlan:
    """Precomputed padding layout for grouped max pooling over fixed groups."""

    __slots__ = ("num_groups", "num_rows", "pad_row", "valid")

    def __init__(self, group_index: np.ndarray, num_groups: int):
        groups = np.asarray(group_index, dtype=int)
        m = groups.shape[0]
        if groups.size and (groups.min() < 0 or groups.max() >= num_groups):
            raise ValueError("group indices out of range")
        counts = np.bincount(groups, minlength=num_groups)
        if (counts == 0).any():
            raise ValueError("every group needs at least one row")
        # stable sort keeps rows of one group in ascending original-row order,
        # so argmax over the padded axis lands on the lowest-index tie
        order = np.argsort(groups, kind="stable")
        starts = np.zeros(num_groups, dtype=int)
        starts[1:] = np.cumsum(counts)[:-1]
        pos_in_group = np.arange(m) - starts[groups[order]]
        self.pad_row = np.full((num_groups, int(counts.max())), -1, dtype=int)
        self.pad_row[groups[order], pos_in_group] = order
        self.valid = self.pad_row >= 0
        self.num_groups = num_groups
        self.num_rows = m


def build_pool_plan(group_index: np.ndarray, num_groups: int) -> PoolPlan:
    return PoolPlan(group_index, num_groups)


def row_max_pool_grouped(values: Tensor, group_index: np.ndarray, num_groups: int,
                         plan: PoolPlan | None = None) -> Tensor:
    """Element-wise max over rows sharing a group index -> (num_groups, D).

    Every group must receive at least one row. Gradient flows only to the
    winning row per (group, column); ties go to the lowest row index.
    """
    groups = np.asarray(group_index, dtype=int)
    m, d = values.shape
    if groups.shape != (m,):
        raise ValueError(f"group_index must have shape ({m},), got {groups.shape}")
    if plan is None:
        plan = PoolPlan(groups, num_groups)
    elif plan.num_rows != m or plan.num_groups != num_groups:
        raise ValueError("pool plan does not match the pooled values")
    pad_row, valid = plan.pad_row, plan.valid

    padded = np.where(valid[:, :, None], values.data[pad_row], -np.inf)
    out_data = padded.max(axis=1)
    arg = padded.argmax(axis=1)
    winner_rows = pad_row[np.arange(num_groups)[:, None], arg]

    out = Tensor(out_data, (values,))

    def backward(grad: np.ndarray) -> None:
        acc = np.zeros_like(values.data)
        cols = np.broadcast_to(np.arange(d), (num_groups, d))
        np.add.at(acc, (winner_rows, cols), grad)
        values._accumulate(acc, own=True)

    out._backward = backward
    return out


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE in logit space; logits are capped at +-30 for numerical safety.

    An empty batch yields loss 0 with zero gradient.
    """
    t = np.asarray(targets, dtype=float).reshape(logits.shape)
    n = logits.data.size
    if n == 0:
        out = Tensor(0.0, (logits,))
        out._backward = lambda grad: None
        return out
    x = np.clip(logits.data, -BCE_LOGIT_CAP, BCE_LOGIT_CAP)
    losses = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(losses.mean(), (logits,))
    inside = np.abs(logits.data) <= BCE_LOGIT_CAP

    def backward(grad: np.ndarray) -> None:
        g = (_sigmoid(x) - t) / n * grad.flat[0]
        logits._accumulate(np.where(inside, g, 0.0), own=True)

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, class_targets: np.ndarray,
                          mask: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy over unmasked rows, computed via log-sum-exp.

    All rows masked (or an empty batch) yields loss 0 with zero gradient.
    """
    targets = np.asarray(class_targets, dtype=int)
    n, c = logits.shape
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,) or targets.shape != (n,):
        raise ValueError("class_targets and mask must have one entry per row")
    active = np.flatnonzero(mask)
    if active.size == 0:
        out = Tensor(0.0, (logits,))
        out._backward = lambda grad: None
        return out
    if targets[active].min() < 0 or targets[active].max() >= c:
        raise ValueError("class target out of range on an unmasked row")

    x = logits.data[active]
    x_max = x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(x - x_max).sum(axis=1, keepdims=True)) + x_max
    losses = log_z[:, 0] - x[np.arange(active.size), targets[active]]
    out = Tensor(losses.mean(), (logits,))

    def backward(grad: np.ndarray) -> None:
        soft = np.exp(x - log_z)
        soft[np.arange(active.size), targets[active]] -= 1.0
        acc = np.zeros_like(logits.data)
        acc[active] = soft / active.size * grad.flat[0]
        logits._accumulate(acc, own=True)

    out._backward = backward
    return out


class Linear:
    """Single affine layer y = x @ W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            bound = math.sqrt(6.0 / in_dim)
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros((1, out_dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Mlp:
    """Two-layer perceptron with a ReLU between the affine maps."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator):
        self.first = Linear(in_dim, hidden_dim, rng)
        self.second = Linear(hidden_dim, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(relu(self.first(x)))

    def parameters(self) -> list[Tensor]:
        return self.first.parameters() + self.second.parameters()


class Madgrad:
    """Momentumized dual-averaging optimizer.

    Accumulates s_k = sum(lambda_k g) and nu_k = sum(lambda_k g*g) with
    lambda_k = lr * sqrt(k + 1), forms z = x0 - s / (cbrt(nu) + eps) and moves
    the iterate as x <- (1 - momentum) * x + momentum * z. momentum = 1 steps
    straight to the dual-averaging point.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 momentum: float = 0.1, eps: float = 1e-6):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must be in (0, 1]")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.eps = eps
        self.step_count = 0
        self.grad_sum = [np.zeros_like(p.data) for p in self.params]
        self.grad_sq_sum = [np.zeros_like(p.data) for p in self.params]
        self.x0 = [p.data.copy() for p in self.params]

    def step(self) -> None:
        lam = self.lr * math.sqrt(self.step_count + 1)
        for p, s, nu, x0 in zip(self.params, self.grad_sum, self.grad_sq_sum, self.x0):
            if p.grad is None:
                continue
            g = p.grad
            s += lam * g
            nu += lam * g * g
            z = x0 - s / (np.cbrt(nu) + self.eps)
            p.data = (1.0 - self.momentum) * p.data + self.momentum * z
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "kind": "madgrad",
            "lr": self.lr,
            "momentum": self.momentum,
            "eps": self.eps,
            "step_count": self.step_count,
            "grad_sum": [a.tolist() for a in self.grad_sum],
            "grad_sq_sum": [a.tolist() for a in self.grad_sq_sum],
            "x0": [a.tolist() for a in self.x0],
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.momentum = state["momentum"]
        self.eps = state["eps"]
        self.step_count = state["step_count"]
        self.grad_sum = [np.asarray(a, dtype=float) for a in state["grad_sum"]]
        self.grad_sq_sum = [np.asarray(a, dtype=float) for a in state["grad_sq_sum"]]
        self.x0 = [np.asarray(a, dtype=float) for a in state["x0"]]


class Adam:
    """Adam with bias correction, kept behind the same interface for ablations."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "kind": "adam",
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.step_count = state["step_count"]
        self.m = [np.asarray(a, dtype=float) for a in state["m"]]
        self.v = [np.asarray(a, dtype=float) for a in state["v"]]


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float,
                   momentum: float = 0.1) -> Madgrad | Adam:
    if kind == "madgrad":
        return Madgrad(params, lr=lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
