"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its parent tensors and a
closure mapping the output cotangent to input cotangents; ``backward`` walks
the graph in reverse topological order and accumulates ``grad`` on the leaves.
Tensors are value-semantic: ops never mutate their inputs, so concurrent
read-only use is safe.

Double precision is the default and is required by the finite-difference
gradient checks; float32 data is accepted for training runs.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

# Test hook: op names mapped to a multiplicative factor applied to the
# cotangent flowing into that op's backward, used to prove gradcheck catches
# broken gradients.  Empty in normal operation.
_GRAD_CORRUPTION: dict[str, float] = {}


def corrupt_gradient(op_name: str, factor: float) -> None:
    """Deliberately scale the backward pass of ``op_name`` (test hook)."""
    _GRAD_CORRUPTION[op_name] = factor


def clear_gradient_corruption() -> None:
    _GRAD_CORRUPTION.clear()


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional float array, row-major, (batch, channel, height, width)
    dimension order for image-like values.

    Attributes:
        data: the underlying numpy array (float64 or float32).
        requires_grad: whether backward accumulates a gradient here.
        grad: cotangent accumulated by the last ``backward`` call, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op_name")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op_name = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Iterable["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op_name: str,
    ) -> "Tensor":
        """Wrap an op result, keeping the graph only if some parent needs it.

        Raises NonFiniteError if the op produced NaN/Inf, which upholds the
        all-finite invariant after every public operation.
        """
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"operation '{op_name}' produced non-finite values")
        parents = tuple(parents)
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        out.op_name = op_name
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        """A view of the same data with no graph attached."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op_name}, grad={self.requires_grad})"

    # -- backward pass --------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` (summed if non-scalar) into every
        reachable tensor with ``requires_grad``.

        Existing ``grad`` attributes of reachable nodes are overwritten, so a
        fresh call never mixes with a previous one.
        """
        if not self.requires_grad:
            raise ShapeError("backward on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = self._topo_order()
        for node in order:
            node.grad = None
        self.grad = grad
        # Reverse topological order: every node's cotangent is complete before
        # it is propagated to its parents.
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            g = node.grad
            factor = _GRAD_CORRUPTION.get(node.op_name)
            if factor is not None:
                g = g * factor
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # Copy: closures may hand back views of the cotangent.
                    parent.grad = np.array(pg, dtype=parent.data.dtype)
                else:
                    parent.grad += pg

    def _topo_order(self) -> list["Tensor"]:
        # Iterative DFS: loss graphs through the full network are too deep for
        # recursion.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return order

    # -- operator sugar (implementations live in ops.py) -----------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __abs__(self):
        from . import ops
        return ops.absval(self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad
