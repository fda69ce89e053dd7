"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Operations record themselves onto the innermost active ``Graph`` (entered as a
context manager). With no active graph they are plain numpy computations, so
evaluation-mode forward passes carry no autodiff overhead. Gradients of a
value reused at several graph sites accumulate by summation, which is what
makes a single shared convolution kernel receive the sum of its per-use-site
gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, ShapeError


class Tensor:
    """A contiguous row-major float64 array, optionally carrying a gradient.

    ``grad`` is ``None`` until a backward pass touches the tensor; it always
    matches ``data`` in shape. ``requires_grad`` marks leaves (parameters,
    optimized inputs) whose gradients must be produced even though no graph
    node created them.
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.requires_grad = requires_grad
        self._graph: "Graph | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach_copy(self) -> "Tensor":
        """A fresh leaf tensor with copied data and no graph identity."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, grad={'set' if self.grad is not None else 'none'})"


class Node:
    """One executed operation on the tape.

    ``backward`` maps (output gradient, per-input need flags) to per-input
    gradient arrays (``None`` where not needed).
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]],
    ):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Ordered tape of executed operations for one forward pass.

    Execution order is a topological order by construction; ``backward``
    walks it once, in reverse. A graph can be consumed by one backward pass
    only. Graph construction is single-threaded per instance.
    """

    _stack: list["Graph"] = []

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = Graph._stack.pop()
        assert popped is self

    @staticmethod
    def current() -> "Graph | None":
        return Graph._stack[-1] if Graph._stack else None

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]],
    ) -> None:
        output.node_id = len(self.nodes)
        output._graph = self
        self.nodes.append(Node(op, tuple(inputs), output, backward))


class ParamStore:
    """Registry of named trainable parameters plus non-trainable buffers.

    A shared parameter appears exactly once in ``entries`` no matter how many
    layers reference it. ``buffers`` holds state that persists but is never
    trained or counted (batch-norm running statistics). ``use_count`` is
    refreshed from the tape after each recorded forward pass.
    """

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.use_count: dict[str, int] = {}

    def add_param(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.entries or name in self.buffers:
            raise ShapeError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self.entries[name] = tensor
        return tensor

    def add_buffer(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.entries or name in self.buffers:
            raise ShapeError(f"duplicate buffer name {name!r}")
        self.buffers[name] = tensor
        return tensor

    def zero_grads(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.entries.values():
            t.requires_grad = flag

    def record_use_counts(self, graph: Graph) -> None:
        by_id = {id(t): name for name, t in self.entries.items()}
        counts = dict.fromkeys(self.entries, 0)
        for node in graph.nodes:
            for t in node.inputs:
                name = by_id.get(id(t))
                if name is not None:
                    counts[name] += 1
        self.use_count = counts

    def total_params(self) -> int:
        return sum(t.size for t in self.entries.values())

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]


def zeros(shape: Sequence[int]) -> Tensor:
    """All-zero tensor of the given shape. The shape must be non-empty."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("empty shape list")
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {list(shape)}")
    return Tensor(np.zeros(shape, dtype=np.float64))


def randn(shape: Sequence[int], seed: int, scale: float) -> Tensor:
    """Seeded pseudo-normal tensor scaled by ``scale``.

    Uses numpy's PCG64 generator, so identical (shape, seed, scale) triples
    yield bitwise-identical tensors.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("empty shape list")
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {list(shape)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.standard_normal(shape) * float(scale))


def backward(graph: Graph, loss: Tensor, params: ParamStore | None = None) -> None:
    """Reverse-mode sweep from a scalar loss over one recorded graph.

    Every tape node is visited exactly once, in reverse execution order.
    Gradients flowing into the same tensor from several use-sites sum. When
    ``params`` is given, entries the loss never touched end up with all-zero
    gradients instead of ``None``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {list(loss.shape)}")
    if loss._graph is not graph or loss.node_id is None:
        raise GraphError("loss was not produced by this graph (backward before forward?)")
    if graph._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    graph._consumed = True

    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        gout = node.output.grad
        if gout is None:
            continue  # node does not contribute to the loss
        needs = tuple(t.requires_grad or t._graph is graph for t in node.inputs)
        if not any(needs):
            continue
        gins = node.backward(gout, needs)
        for t, gi, need in zip(node.inputs, gins, needs):
            if not need or gi is None:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gi

    if params is not None:
        for t in params.entries.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def sgd_like_update(t: Tensor, delta: Tensor) -> None:
    """In-place ``data -= delta``; the gradient buffer is left untouched."""
    if t.shape != delta.shape:
        raise ShapeError(f"update shape {list(delta.shape)} != parameter shape {list(t.shape)}")
    t.data -= delta.data
