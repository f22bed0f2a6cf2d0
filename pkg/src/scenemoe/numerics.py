"""Dense float64 numerics with analytic backward passes.

A small define-by-run graph over 2-D tensors: exactly the primitives the
model needs, nothing more. Every op is pure and deterministic, gradients
are accumulated by `Tensor2.backward`, and `finite_diff_check` at the
bottom is the independent ground truth the analytic gradients are tested
against. No generic autodiff beyond this fixed op set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# floor below which x*log(x) switches to a linear extension (keeps the
# entropy gradient bounded when a softmax saturates to exactly 0)
XLOGX_FLOOR = 1e-12


class Tensor2:
    """A 2-D float64 tensor node in the computation graph.

    `data` is row-major; `grad` always has the same shape. Intermediate
    nodes carry a backward closure and references to their parents.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents: tuple = ()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor2 requires 2-D data, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self._parents = _parents
        self._backward: Callable[[], None] | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable node."""
        if self.data.shape != (1, 1):
            raise DimensionError(
                f"backward() starts from a 1x1 scalar, got {self.data.shape}"
            )
        order: list[Tensor2] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor2, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = self.grad + 1.0
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor2(shape={self.data.shape})"

    def __add__(self, other: "Tensor2") -> "Tensor2":
        return add(self, other)

    def __matmul__(self, other: "Tensor2") -> "Tensor2":
        return matmul(self, other)


def tensor(data) -> Tensor2:
    """Wrap raw values as a constant graph leaf."""
    return Tensor2(data)


def _same_shape(a: Tensor2, b: Tensor2, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    _same_shape(a, b, "add")
    out = Tensor2(a.data + b.data, (a, b))

    def _bw():
        a.grad += out.grad
        b.grad += out.grad

    out._backward = _bw
    return out


def add_bias(x: Tensor2, b: Tensor2) -> Tensor2:
    """x (n x d) + b (1 x d), broadcast over rows."""
    if b.rows != 1 or b.cols != x.cols:
        raise DimensionError(f"add_bias: x {x.shape} with bias {b.shape}")
    out = Tensor2(x.data + b.data, (x, b))

    def _bw():
        x.grad += out.grad
        b.grad += out.grad.sum(axis=0, keepdims=True)

    out._backward = _bw
    return out


def scale(x: Tensor2, s: float) -> Tensor2:
    s = float(s)
    out = Tensor2(x.data * s, (x,))

    def _bw():
        x.grad += out.grad * s

    out._backward = _bw
    return out


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    _same_shape(a, b, "mul")
    out = Tensor2(a.data * b.data, (a, b))

    def _bw():
        a.grad += out.grad * b.data
        b.grad += out.grad * a.data

    out._backward = _bw
    return out


def mul_const(x: Tensor2, c) -> Tensor2:
    """Elementwise product with a non-differentiable constant (broadcastable)."""
    carr = np.asarray(c, dtype=np.float64)
    out = Tensor2(x.data * carr, (x,))
    if out.data.shape != x.data.shape:
        raise DimensionError(f"mul_const: constant {carr.shape} broadcasts {x.shape} away")

    def _bw():
        x.grad += out.grad * carr

    out._backward = _bw
    return out


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = Tensor2(a.data @ b.data, (a, b))

    def _bw():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._backward = _bw
    return out


def transpose(x: Tensor2) -> Tensor2:
    out = Tensor2(x.data.T.copy(), (x,))

    def _bw():
        x.grad += out.grad.T

    out._backward = _bw
    return out


def linear(x: Tensor2, w: Tensor2, b: Tensor2 | None = None) -> Tensor2:
    """y = x @ w.T (+ b). x is (n x k), w is (m x k), b is (1 x m)."""
    if x.cols != w.cols:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and (b.rows != 1 or b.cols != w.rows):
        raise DimensionError(f"linear: weight {w.shape} vs bias {b.shape}")
    parents = (x, w) if b is None else (x, w, b)
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    out = Tensor2(y, parents)

    def _bw():
        x.grad += out.grad @ w.data
        w.grad += out.grad.T @ x.data
        if b is not None:
            b.grad += out.grad.sum(axis=0, keepdims=True)

    out._backward = _bw
    return out


def log(x: Tensor2) -> Tensor2:
    out = Tensor2(np.log(x.data), (x,))

    def _bw():
        x.grad += out.grad / x.data

    out._backward = _bw
    return out


def xlogx(x: Tensor2) -> Tensor2:
    """Elementwise x*log(x) with a linear extension below XLOGX_FLOOR."""
    safe = np.maximum(x.data, XLOGX_FLOOR)
    logsafe = np.log(safe)
    out = Tensor2(x.data * logsafe, (x,))

    def _bw():
        x.grad += out.grad * (logsafe + (x.data >= XLOGX_FLOOR))

    out._backward = _bw
    return out


def gelu(x: Tensor2) -> Tensor2:
    """tanh-form gaussian error linear unit (smooth, check-friendly)."""
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = Tensor2(0.5 * x.data * (1.0 + t), (x,))

    def _bw():
        dinner = c * (1.0 + 3 * 0.044715 * x.data**2)
        x.grad += out.grad * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * dinner)

    out._backward = _bw
    return out


def mean_rows(x: Tensor2) -> Tensor2:
    """Column means: (n x d) -> (1 x d)."""
    n = x.rows
    out = Tensor2(x.data.mean(axis=0, keepdims=True), (x,))

    def _bw():
        x.grad += np.repeat(out.grad / n, n, axis=0)

    out._backward = _bw
    return out


def sum_all(x: Tensor2) -> Tensor2:
    out = Tensor2(np.array([[x.data.sum()]]), (x,))

    def _bw():
        x.grad += out.grad[0, 0]

    out._backward = _bw
    return out


def stack_rows(parts: Sequence[Tensor2]) -> Tensor2:
    """Vertically stack tensors sharing a column count."""
    if not parts:
        raise DataError("stack_rows of empty sequence")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError(
                f"stack_rows: column counts differ ({p.shape} vs (_, {cols}))"
            )
    out = Tensor2(np.concatenate([p.data for p in parts], axis=0), tuple(parts))
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def _bw():
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += out.grad[a:b]

    out._backward = _bw
    return out


def slice_cols(x: Tensor2, start: int, stop: int) -> Tensor2:
    if not (0 <= start < stop <= x.cols):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")
    out = Tensor2(x.data[:, start:stop].copy(), (x,))

    def _bw():
        x.grad[:, start:stop] += out.grad

    out._backward = _bw
    return out


def concat_cols(parts: Sequence[Tensor2]) -> Tensor2:
    if not parts:
        raise DataError("concat_cols of empty sequence")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise DimensionError(f"concat_cols: row counts differ ({p.shape})")
    out = Tensor2(np.concatenate([p.data for p in parts], axis=1), tuple(parts))
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def _bw():
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += out.grad[:, a:b]

    out._backward = _bw
    return out


def stop_gradient(x: Tensor2) -> Tensor2:
    """Pass the value through, drop the gradient path."""
    return Tensor2(x.data.copy())


def softmax(x: Tensor2) -> Tensor2:
    """Row-wise softmax; shift-stable, rows sum to 1."""
    if x.data.size == 0:
        raise DataError("softmax of empty input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor2(y, (x,))

    def _bw():
        inner = (out.grad * y).sum(axis=1, keepdims=True)
        x.grad += y * (out.grad - inner)

    out._backward = _bw
    return out


def layer_norm(
    x: Tensor2,
    gamma: Tensor2 | None = None,
    beta: Tensor2 | None = None,
    eps: float = 1e-5,
) -> Tensor2:
    """Row-wise standardization with optional affine scale/shift.

    gamma/beta omitted means the plain (non-affine) normalization.
    """
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    for name, g in (("gamma", gamma), ("beta", beta)):
        if g is not None and (g.rows != 1 or g.cols != x.cols):
            raise DimensionError(f"layer_norm: {name} {g.shape} vs input {x.shape}")
    n = x.cols
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    out = Tensor2(y, parents)

    def _bw():
        dy = out.grad
        if beta is not None:
            beta.grad += dy.sum(axis=0, keepdims=True)
        if gamma is not None:
            gamma.grad += (dy * xhat).sum(axis=0, keepdims=True)
            dxhat = dy * gamma.data
        else:
            dxhat = dy
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        x.grad += inv * (dxhat - m1 - xhat * m2)

    out._backward = _bw
    del n
    return out


def attention(q: Tensor2, k: Tensor2, v: Tensor2, scaled: bool = True) -> Tensor2:
    """softmax(q k^T / s) v with s = sqrt(width) when scaled, else 1."""
    if q.cols != k.cols:
        raise DimensionError(f"attention: query {q.shape} vs key {k.shape}")
    if k.rows != v.rows:
        raise DimensionError(f"attention: key {k.shape} vs value {v.shape}")
    scores = matmul(q, transpose(k))
    if scaled:
        scores = scale(scores, 1.0 / math.sqrt(q.cols))
    return matmul(softmax(scores), v)


def cross_entropy(logits: Tensor2, labels) -> Tensor2:
    """Mean negative log-likelihood of integer class labels, (1 x 1)."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if y.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} logit rows vs {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DataError(f"cross_entropy: label out of range [0, {c}): {y.tolist()}")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    logp = logits.data - m - np.log(z)
    loss = -logp[np.arange(n), y].sum() / n
    out = Tensor2(np.array([[loss]]), (logits,))

    def _bw():
        g = e / z
        g[np.arange(n), y] -= 1.0
        logits.grad += out.grad[0, 0] * g / n

    out._backward = _bw
    return out


def mse(pred: Tensor2, target) -> Tensor2:
    """Mean squared error against a constant target, (1 x 1)."""
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.shape != pred.data.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    out = Tensor2(np.array([[(diff**2).mean()]]), (pred,))

    def _bw():
        pred.grad += out.grad[0, 0] * 2.0 * diff / diff.size

    out._backward = _bw
    return out


class ParamTape:
    """Named parameters with matching gradient slots and optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor2] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add_param(self, name: str, values) -> Tensor2:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor2(np.array(values, dtype=np.float64))
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor2:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor2]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def reset_optimizer(self) -> None:
        for name, t in self._params.items():
            self._m[name] = np.zeros_like(t.data)
            self._v[name] = np.zeros_like(t.data)
        self.step_count = 0

    def optimizer_state(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]


def adamw_step(
    tape: ParamTape,
    lr: float,
    warmup_ratio: float,
    weight_decay: float,
    step: int,
    total_steps: int,
    param_names: Sequence[str] | None = None,
    lr_scale: Callable[[str], float] | None = None,
) -> float:
    """One decoupled-weight-decay adaptive update over (a subset of) the tape.

    The effective learning rate ramps linearly from 0 over the first
    `warmup_ratio` fraction of `total_steps`, then stays constant.
    `lr_scale` maps a parameter name to a per-parameter multiplier
    (fine-tuning pretrained groups more gently). Returns the effective
    learning rate used.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if not 0.0 <= warmup_ratio <= 1.0:
        raise ConfigError(f"warmup_ratio must be in [0, 1], got {warmup_ratio}")
    if weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    warmup_steps = warmup_ratio * total_steps
    if warmup_steps > 0:
        eff_lr = lr * min(1.0, step / warmup_steps)
    else:
        eff_lr = lr
    tape.step_count += 1
    t = tape.step_count
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    names = tape.names() if param_names is None else list(param_names)
    for name in names:
        p = tape[name]
        g = p.grad
        m = tape._m[name]
        v = tape._v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        scaled_lr = eff_lr if lr_scale is None else eff_lr * lr_scale(name)
        p.data -= scaled_lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + weight_decay * p.data)
    return eff_lr


@dataclass
class GradCheckResult:
    """Worst relative finite-difference error per parameter group."""

    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def finite_diff_check(
    function: Callable[[], Tensor2],
    params: Sequence[tuple[str, Tensor2]],
    epsilon: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    grad_hook: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of a pure scalar function to central differences.

    `function` must rebuild its graph from the current parameter values on
    every call. When `max_per_param` is set, that many elements per tensor
    are sampled (seeded `rng` required for reproducibility); otherwise every
    element is perturbed. `grad_hook` lets a test tamper with the analytic
    gradients to prove the checker detects corruption.
    """
    base = function()
    if not np.isfinite(base.data).all():
        raise NumericError("function value is not finite")
    base.backward()
    analytic = {}
    for name, p in params:
        g = p.grad.copy()
        if grad_hook is not None:
            g = grad_hook(name, g)
        analytic[name] = g
    result = GradCheckResult()
    for name, p in params:
        flat = p.data.reshape(-1)
        n_elems = flat.size
        if max_per_param is not None and n_elems > max_per_param:
            if rng is None:
                raise ConfigError("sampled finite differences need an rng")
            idxs = rng.choice(n_elems, size=max_per_param, replace=False)
        else:
            idxs = np.arange(n_elems)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = function().item()
            flat[i] = orig - epsilon
            fm = function().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite value while perturbing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * epsilon)
            worst = max(worst, _rel_err(float(ga[i]), numeric))
            result.checked += 1
        result.per_param[name] = worst
    return result
