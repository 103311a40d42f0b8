"""Dense tensor with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional gradient buffer. Ops (see
ops.py) link output tensors to their inputs and attach a backward rule;
``Tensor.backward()`` replays those rules in exact reverse creation order,
accumulating gradients into every reachable ancestor.

Training runs in float32; gradient checking builds float64 graphs. Ops keep
the dtype of their inputs.
"""

from __future__ import annotations

import itertools
import zlib

import numpy as np

from .errors import ShapeError


class Tensor:
    """N-dimensional value buffer with an optional gradient buffer."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_id")

    _ids = itertools.count()

    def __init__(self, data, parents=(), backward=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self._id = next(Tensor._ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.asarray(g, dtype=self.data.dtype)

    def backward(self, seed=None):
        """Reverse sweep from this tensor.

        Nodes are processed in strictly decreasing creation order, which for a
        graph built by a forward pass is the exact reverse of the recording
        order.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed gradient requires a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        self.accumulate_grad(seed)

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(t._parents)
        for t in sorted(nodes.values(), key=lambda t: t._id, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Parameter:
    """Trainable tensor plus its optimizer state (first/second Adam moments)."""

    __slots__ = ("name", "tensor", "trainable", "moment1", "moment2", "step_count")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data)
        self.trainable = trainable
        self.moment1 = np.zeros_like(data)
        self.moment2 = np.zeros_like(data)
        self.step_count = 0

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def substream(seed: int, *names: str) -> np.random.Generator:
    """Named RNG substream.

    Every consumer of randomness (init, shuffle, dropout, synth, ...) draws
    from its own stream keyed by (seed, names), so adding a consumer never
    perturbs the draws of the others.
    """
    keys = [zlib.crc32(n.encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys]))
