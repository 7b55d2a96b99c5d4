"""Minimal reverse-mode gradient engine and Adam with decoupled weight decay.

The engine records a graph of :class:`Node` objects while the forward pass
runs and walks it once in reverse topological order. It only knows the few
operations the toy denoiser needs. Batches are laid out column-wise
(features × batch).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .adapters import LinearAdapter, adalora_penalty, adalora_penalty_grad
from .errors import ConfigError, DomainError, NumericalError

LOG = logging.getLogger(__name__)


@dataclass(eq=False)
class Param:
    """A named array with its gradient buffer.

    ``value`` is shared with its owner (e.g. a :class:`LinearAdapter`) and is
    updated in place by the optimizer.
    """

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.value.dtype != np.float64:
            raise DomainError(f"Parameter {self.name} muss float64 sein")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "param", "requires_grad")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        *,
        param: Param | None = None,
        requires_grad: bool | None = None,
    ) -> None:
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param
        if requires_grad is None:
            requires_grad = any(parent.requires_grad for parent in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = grad if self.grad is None else self.grad + grad


def constant(value: np.ndarray) -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False)


def leaf(param: Param) -> Node:
    return Node(param.value, param=param, requires_grad=param.trainable)


def _shape_error(op: str, *shapes: tuple[int, ...]) -> DomainError:
    return DomainError(f"{op}: Formen passen nicht {' / '.join(str(s) for s in shapes)}")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = Node(a.value @ b.value, (a, b))

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(grad @ b.value.T)
        if b.requires_grad:
            b.accumulate(a.value.T @ grad)

    out.backward_fn = backward
    return out


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    out = Node(a.value + b.value, (a, b))

    def backward(grad: np.ndarray) -> None:
        a.accumulate(grad)
        b.accumulate(grad)

    out.backward_fn = backward
    return out


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    out = Node(a.value - b.value, (a, b))

    def backward(grad: np.ndarray) -> None:
        a.accumulate(grad)
        if b.requires_grad:
            b.accumulate(-grad)

    out.backward_fn = backward
    return out


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of equally shaped nodes."""

    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    out = Node(a.value * b.value, (a, b))

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(grad * b.value)
        if b.requires_grad:
            b.accumulate(grad * a.value)

    out.backward_fn = backward
    return out


def scale_rows(vector: Node, x: Node) -> Node:
    """``diag(vector) @ x`` for a 1-D ``vector``."""

    if vector.value.ndim != 1 or x.value.ndim != 2 or vector.shape[0] != x.shape[0]:
        raise _shape_error("scale_rows", vector.shape, x.shape)
    out = Node(vector.value[:, None] * x.value, (vector, x))

    def backward(grad: np.ndarray) -> None:
        if vector.requires_grad:
            vector.accumulate(np.sum(grad * x.value, axis=1))
        if x.requires_grad:
            x.accumulate(vector.value[:, None] * grad)

    out.backward_fn = backward
    return out


def add_bias(x: Node, bias: Node) -> Node:
    if bias.value.ndim != 1 or x.value.ndim != 2 or bias.shape[0] != x.shape[0]:
        raise _shape_error("add_bias", x.shape, bias.shape)
    out = Node(x.value + bias.value[:, None], (x, bias))

    def backward(grad: np.ndarray) -> None:
        x.accumulate(grad)
        if bias.requires_grad:
            bias.accumulate(np.sum(grad, axis=1))

    out.backward_fn = backward
    return out


def silu(x: Node) -> Node:
    sigmoid = 1.0 / (1.0 + np.exp(-x.value))
    out = Node(x.value * sigmoid, (x,))

    def backward(grad: np.ndarray) -> None:
        x.accumulate(grad * sigmoid * (1.0 + x.value * (1.0 - sigmoid)))

    out.backward_fn = backward
    return out


def concat_rows(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise DomainError("concat_rows benötigt mindestens einen Knoten")
    widths = {node.shape[1] for node in nodes}
    if len(widths) != 1:
        raise _shape_error("concat_rows", *(node.shape for node in nodes))
    out = Node(np.vstack([node.value for node in nodes]), tuple(nodes))
    bounds = np.cumsum([0, *(node.shape[0] for node in nodes)])

    def backward(grad: np.ndarray) -> None:
        for node, start, stop in zip(nodes, bounds[:-1], bounds[1:]):
            node.accumulate(grad[start:stop])

    out.backward_fn = backward
    return out


def mse_loss(pred: Node, target: np.ndarray) -> Node:
    """Mean over batch and output dimensions of the squared error."""

    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise _shape_error("mse_loss", pred.shape, target.shape)
    diff = pred.value - target
    out = Node(np.asarray(np.mean(diff * diff)), (pred,))

    def backward(grad: np.ndarray) -> None:
        pred.accumulate(grad * (2.0 / diff.size) * diff)

    out.backward_fn = backward
    return out


def scalar_sum(a: Node, b: Node) -> Node:
    if a.value.ndim != 0 or b.value.ndim != 0:
        raise _shape_error("scalar_sum", a.shape, b.shape)
    return add(a, b)


def orthogonality_penalty(a: Node, b: Node, lambda_reg: float) -> Node:
    """λ (‖AAᵀ − I‖²_F + ‖BᵀB − I‖²_F) as a scalar node."""

    out = Node(np.asarray(adalora_penalty(a.value, b.value, lambda_reg)), (a, b))

    def backward(grad: np.ndarray) -> None:
        grad_a, grad_b = adalora_penalty_grad(a.value, b.value, lambda_reg)
        a.accumulate(grad * grad_a)
        b.accumulate(grad * grad_b)

    out.backward_fn = backward
    return out


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Propagate ``∂loss`` to every trainable leaf and add it to ``Param.grad``."""

    if loss.value.ndim != 0:
        raise DomainError("backward erwartet einen skalaren Verlust")
    if not loss.requires_grad:
        return
    loss.grad = np.asarray(1.0)
    for node in reversed(_topological(loss)):
        if node.grad is None:
            continue
        if node.param is not None:
            if node.param.trainable:
                node.param.grad += node.grad
        elif node.backward_fn is not None:
            node.backward_fn(node.grad)


class Layer(Protocol):
    def __call__(self, x: Node, timesteps: np.ndarray | None = None) -> Node: ...

    def parameters(self) -> list[Param]: ...


class Linear:
    """Raw affine layer ``W x + b``."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray, *, trainable: bool = True) -> None:
        self.name = name
        self.weight = Param(f"{name}.W", np.array(weight, dtype=np.float64), trainable)
        self.bias = Param(f"{name}.b", np.array(bias, dtype=np.float64).reshape(-1), trainable)
        if self.weight.value.ndim != 2 or self.bias.value.shape[0] != self.weight.value.shape[0]:
            raise DomainError(f"Schicht {name}: Gewicht und Bias passen nicht zusammen")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.value.shape

    def freeze(self) -> None:
        self.weight.trainable = False
        self.bias.trainable = False

    def __call__(self, x: Node, timesteps: np.ndarray | None = None) -> Node:
        return add_bias(matmul(leaf(self.weight), x), leaf(self.bias))

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]


class AdaptedLinear:
    """Linear layer whose weight is replaced by a :class:`LinearAdapter`.

    Base weight, bias and the frozen init factors enter as constants; only
    A, B and S are trainable. Masks are built per batch column, so a batch
    may mix timesteps.
    """

    def __init__(self, name: str, adapter: LinearAdapter, bias: np.ndarray) -> None:
        self.name = name
        self.adapter = adapter
        self.bias = Param(f"{name}.b", np.array(bias, dtype=np.float64).reshape(-1), trainable=False)
        self.A = Param(f"{name}.A", adapter.A)
        self.B = Param(f"{name}.B", adapter.B)
        self.S = Param(f"{name}.S", adapter.S) if adapter.S is not None else None

    @property
    def shape(self) -> tuple[int, int]:
        return self.adapter.shape

    def _masks(self, timesteps: np.ndarray | None, batch: int) -> np.ndarray | None:
        if not self.adapter.kind.uses_schedule:
            return None
        if self.adapter.schedule is None:
            raise ConfigError("adapter.r_min", f"Schicht {self.name}: Maskenplan fehlt")
        if timesteps is None:
            raise DomainError(f"Schicht {self.name}: Zeitschritte für die Maske fehlen")
        steps = np.broadcast_to(np.asarray(timesteps, dtype=np.int64).reshape(-1), (batch,))
        return self.adapter.schedule.mask_columns(steps)

    def __call__(self, x: Node, timesteps: np.ndarray | None = None) -> Node:
        adapter = self.adapter
        masks = self._masks(timesteps, x.shape[1])
        out = matmul(constant(adapter.W), x)
        inner = matmul(leaf(self.A), x)
        if self.S is not None:
            inner = scale_rows(leaf(self.S), inner)
        if masks is not None:
            inner = mul(inner, constant(masks))
        out = add(out, matmul(leaf(self.B), inner))
        if adapter.kind.has_frozen_init:
            frozen = scale_rows(constant(adapter.S0), matmul(constant(adapter.A0), x))
            if masks is not None:
                frozen = mul(frozen, constant(masks))
            out = sub(out, matmul(constant(adapter.B0), frozen))
        return add_bias(out, leaf(self.bias))

    def penalty(self, lambda_reg: float) -> Node:
        return orthogonality_penalty(leaf(self.A), leaf(self.B), lambda_reg)

    def parameters(self) -> list[Param]:
        params = [self.A, self.B]
        if self.S is not None:
            params.append(self.S)
        return params + [self.bias]


class Network(Protocol):
    def __call__(self, inputs: object) -> Node: ...

    def parameters(self) -> list[Param]: ...


def forward_backward(
    net: Network,
    inputs: object,
    target: np.ndarray,
    *,
    extra_loss: Callable[[], Node | None] | None = None,
) -> float:
    """One forward pass, one reverse sweep; returns the scalar loss.

    Gradients are added to ``Param.grad`` of trainable parameters.
    """

    loss = mse_loss(net(inputs), target)
    if extra_loss is not None:
        penalty = extra_loss()
        if penalty is not None:
            loss = scalar_sum(loss, penalty)
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericalError(f"Verlust ist nicht endlich ({value})")
    backward(loss)
    return value


def evaluate_loss(net: Network, inputs: object, target: np.ndarray, extra_loss=None) -> float:
    loss = mse_loss(net(inputs), target)
    if extra_loss is not None:
        penalty = extra_loss()
        if penalty is not None:
            loss = scalar_sum(loss, penalty)
    return float(loss.value)


@dataclass
class AdamState:
    """Adam hyperparameters, moments and step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise DomainError("Lernrate muss größer als 0 sein")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise DomainError("beta1 und beta2 müssen in [0, 1) liegen")
        if not self.epsilon > 0:
            raise DomainError("epsilon muss größer als 0 sein")
        if self.weight_decay < 0:
            raise DomainError("weight_decay darf nicht negativ sein")


def adam_step(state: AdamState, params: Iterable[Param]) -> None:
    """Bias-corrected Adam update with decoupled decay; clears gradients."""

    params = list(params)
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param in params:
        if not param.trainable:
            param.zero_grad()
            continue
        m = state.first_moment.setdefault(param.name, np.zeros_like(param.value))
        v = state.second_moment.setdefault(param.name, np.zeros_like(param.value))
        if m.shape != param.value.shape:
            raise DomainError(f"Momentform passt nicht zu Parameter {param.name}")
        m *= state.beta1
        m += (1.0 - state.beta1) * param.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * param.grad * param.grad
        if state.weight_decay:
            param.value *= 1.0 - state.lr * state.weight_decay
        param.value -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        param.zero_grad()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative difference; 0 when both gradients vanish."""

    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale


def gradient_check(
    net: Network,
    inputs: object,
    target: np.ndarray,
    *,
    step: float = 1e-5,
    extra_loss: Callable[[], Node | None] | None = None,
) -> dict[str, float]:
    """Compare analytic gradients with central finite differences per parameter."""

    params = [param for param in net.parameters() if param.trainable]
    for param in params:
        param.zero_grad()
    forward_backward(net, inputs, target, extra_loss=extra_loss)
    errors: dict[str, float] = {}
    for param in params:
        analytic = param.grad.copy()
        numeric = np.zeros_like(param.value)
        flat_value = param.value.reshape(-1)
        flat_numeric = numeric.reshape(-1)
        for index in range(flat_value.size):
            original = flat_value[index]
            flat_value[index] = original + step
            plus = evaluate_loss(net, inputs, target, extra_loss)
            flat_value[index] = original - step
            minus = evaluate_loss(net, inputs, target, extra_loss)
            flat_value[index] = original
            flat_numeric[index] = (plus - minus) / (2.0 * step)
        errors[param.name] = relative_error(analytic, numeric)
        param.zero_grad()
    LOG.debug("Gradientenprüfung: %s", errors)
    return errors
