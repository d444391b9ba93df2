"""Dense float64 tensors with a reverse-mode autodiff tape.

Every differentiable operation appends one ``TapeNode`` holding the op tag,
the input tensors and a closure for the backward rule.  Nodes carry a
monotonically increasing sequence number, so the recorded order is a
topological order of the forward computation and ``backward`` can replay it
in reverse, visiting each node exactly once.

Gradients accumulate: ``backward`` adds into ``Tensor.grad`` of reachable
leaves, so multi-term objectives may call it on several losses between
optimizer steps.  Callers zero grads explicitly each step.  Running
``backward`` twice on the same loss without a fresh forward is rejected.

The tape is process-global and intended for a single training thread.
Evaluation code should run under ``no_grad()`` which skips recording.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_GRAD_ENABLED = True
_NODE_COUNTER = 0


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure numpy fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeNode:
    """One recorded forward operation.

    ``backward_fn`` maps the output gradient to a tuple of gradients
    aligned with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "backward_fn", "seq", "done")

    def __init__(self, op: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        global _NODE_COUNTER
        _NODE_COUNTER += 1
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.seq = _NODE_COUNTER
        self.done = False


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    Treated as immutable by all ops; only the optimizer mutates ``data``
    in place, and only for leaf parameters.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Small operator sugar; everything delegates to ops so the tape stays
    # the single source of backward rules.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are live."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad or t.node is not None for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable leaf with d(loss)/d(leaf).

    ``loss`` must be scalar.  Repeating backward on the same recorded loss
    without re-running the forward pass is rejected, so gradients can never
    silently double up within one step.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    if loss.node.done:
        raise ContractError("backward was already run for this loss; re-run the forward pass")
    loss.node.done = True

    # Reachable subgraph in reverse forward order (seq is a topo order).
    ordered: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        ordered.append(t)
        stack.extend(t.node.inputs)
    ordered.sort(key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in ordered:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None:
                continue
            if inp.node is None:
                if inp.requires_grad:
                    _accumulate_leaf(inp, ig)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        leaf.grad = leaf.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def first_nonfinite(named: Iterable[tuple[str, Tensor]]) -> str | None:
    """Name of the first tensor holding a NaN/Inf, or None."""
    for name, t in named:
        if not t.is_finite():
            return name
    return None
