"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation is a
:class:`Function` subclass; applying one records the inputs on the output so
that :func:`backward` can walk the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class UsageError(RuntimeError):
    """The autograd engine was driven incorrectly."""


# Finite-output check after every forward op. Costs one pass over each output.
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "ctx", "name", "__weakref__")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        ctx: Optional["Function"] = None,
        name: Optional[str] = None,
    ):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.ctx = ctx
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from densedrop import ops

        return ops.add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from densedrop import ops

        return ops.mul(self, other)

    def sum(self) -> "Tensor":
        from densedrop import ops

        return ops.total(self)

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` which maps
    the output gradient to one gradient (or ``None``) per input tensor.
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if CHECK_FINITE and not np.isfinite(out).all():
            if all(np.isfinite(t.data).all() for t in inputs):
                raise NumericError(f"{cls.__name__} produced non-finite values from finite inputs")
            raise NumericError(f"{cls.__name__} received non-finite input")
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, ctx=fn if requires_grad else None)

    @property
    def op_kind(self) -> str:
        return type(self).__name__


def _topological_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for parent in node.ctx.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive their gradient in ``.grad``
    (accumulated if one is already present). Returns a map from every reached
    leaf to its gradient; tensors listed in ``params`` that the loss does not
    depend on map to zeros.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}

    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.ctx is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        parent_grads = node.ctx.backward(g)
        for parent, pg in zip(node.ctx.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{node.ctx.op_kind} returned gradient of shape {pg.shape} for input {parent.shape}"
                )
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    if params is not None:
        for p in params:
            if p not in leaves:
                leaves[p] = np.zeros_like(p.data)
    return leaves
