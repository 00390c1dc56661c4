"""Tape-based reverse-mode autodiff and deterministic random streams.

A ``Var`` is a value (numpy array) plus an optional node id on a ``Tape``.
Every numeric operation in :mod:`punet.ops` computes its result eagerly and,
when at least one operand is an attached ``Var``, records a pullback closure
on the tape.  ``backward`` replays the pullbacks in reverse recording order
and accumulates gradients by addition, so fan-out is handled exactly once.

Tapes are rebuilt per forward pass; there is no persistent graph.  Storage
and compute default to float32; gradient checks build a float64 tape
("shadow mode") and the kernels follow the operand dtype.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import ShapeError

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, tag: str) -> int:
    """Derive a child seed from (seed, tag), stable across platforms."""
    raw = struct.pack("<Q", seed & _MASK64) + tag.encode("utf-8")
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "little")


class Rng:
    """Counter-based deterministic random stream (Philox, 64-bit seed).

    Identical seeds produce bit-identical sample sequences across runs and
    platforms.  ``child(tag)`` derives an independent stream, so modules can
    consume randomness in any order without perturbing each other.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, tag: str) -> "Rng":
        return Rng(derive_seed(self.seed, tag))

    def normal(self, shape, std=1.0, dtype=np.float32):
        out = self._gen.standard_normal(size=shape, dtype=np.float64)
        return (out * std).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32):
        out = self._gen.random(size=shape, dtype=np.float64)
        return (low + (high - low) * out).astype(dtype)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int):
        return self._gen.permutation(n)


class Parameter:
    """A named, trainable array.  Mutated in place by the optimizer."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float32)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Var:
    """A tensor value, optionally attached to a tape node.

    Detached Vars (``node is None``) never receive gradients.  An attached
    Var belongs to exactly one live tape.
    """

    __slots__ = ("value", "tape", "node")

    def __init__(self, value: np.ndarray, tape: "Tape | None" = None, node: int | None = None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self) -> "Var":
        return Var(self.value)

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Var(shape={self.value.shape}{tag})"


class Tape:
    """Ordered record of operations for one forward/backward execution.

    Single-threaded by design: one tape is owned by exactly one forward and
    the backward that follows it.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._parents: list[tuple[int, ...]] = []
        self._pullbacks: list = []
        self._bound: dict[int, Var] = {}

    def __len__(self):
        return len(self._parents)

    def record(self, value: np.ndarray, parents: tuple[int, ...], pullback) -> Var:
        """Append a node.  ``pullback(grad)`` returns one gradient per parent."""
        self._parents.append(parents)
        self._pullbacks.append(pullback)
        return Var(value, self, len(self._parents) - 1)

    def leaf(self, value) -> Var:
        v = np.ascontiguousarray(value, dtype=self.dtype)
        return self.record(v, (), None)

    def param(self, p: Parameter) -> Var:
        """Bind a Parameter as a leaf, memoized so fan-out shares one node."""
        var = self._bound.get(id(p))
        if var is None:
            var = self.leaf(p.value)
            self._bound[id(p)] = var
        return var

    def node_of(self, p: Parameter) -> int | None:
        var = self._bound.get(id(p))
        return None if var is None else var.node


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Replay adjoints in reverse order; return node id -> gradient.

    ``loss`` must be a scalar Var recorded on ``tape``.  Nodes unreachable
    from the loss get no entry.
    """
    if not isinstance(loss, Var) or loss.node is None:
        raise ShapeError("backward: loss is not attached to a tape")
    if loss.tape is not tape:
        raise ShapeError("backward: loss belongs to a different tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.value)}
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        pull = tape._pullbacks[nid]
        if pull is None:
            continue  # leaf
        parent_grads = pull(g)
        for pid, pg in zip(tape._parents[nid], parent_grads):
            if pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    return grads
