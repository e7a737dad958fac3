"""Weighted coordinate sampling with a binary sum tree.

Leaves hold the weights L_i**beta; each internal node stores the sum of its two
children. The tree lives in one flat array in heap order (root at index 1,
children of node j at 2j and 2j+1), padded with zero leaves up to a power of
two.
"""
from __future__ import annotations

import numpy as np

from .core import ContractError


class SamplingTree:
    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ContractError("weights must be a non-empty vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ContractError("weights must be finite and non-negative")
        if not np.any(w > 0):
            raise ContractError("at least one weight must be positive")
        self.n = w.size
        self.depth = max(0, int(np.ceil(np.log2(self.n))))
        self.size = 1 << self.depth
        self.nodes = np.zeros(2 * self.size)
        self.nodes[self.size:self.size + self.n] = w
        self._rebuild()
        self.visits = 0

    @classmethod
    def from_lipschitz(cls, lipschitz, beta):
        L = np.asarray(lipschitz, dtype=float)
        if beta == 0.0:
            return cls(np.ones_like(L))
        return cls(L ** beta)

    def _rebuild(self):
        nodes = self.nodes
        for j in range(self.size - 1, 0, -1):
            nodes[j] = nodes[2 * j] + nodes[2 * j + 1]

    @property
    def total(self):
        return float(self.nodes[1])

    @property
    def leaf_weights(self):
        return self.nodes[self.size:self.size + self.n].copy()

    def probabilities(self):
        return self.leaf_weights / self.total

    def prob(self, i):
        return self.nodes[self.size + i] / self.nodes[1]

    def prefix_sums(self):
        """Cumulative leaf weights [0, w_0, w_0 + w_1, ...] read off the tree."""
        out = np.zeros(self.n + 1)
        for i in range(self.n):
            out[i + 1] = self._prefix(i + 1)
        return out

    def _prefix(self, i):
        # sum of leaves [0, i) by walking up from leaf i
        if i >= self.size:
            return float(self.nodes[1])
        s = 0.0
        j = self.size + i
        while j > 1:
            if j & 1:
                s += self.nodes[j - 1]
            j >>= 1
        return s

    def draw(self, u):
        """Leaf i with prefix(i) <= u < prefix(i + 1); ties go right."""
        nodes = self.nodes
        if not 0.0 <= u < nodes[1]:
            raise ContractError(f"u={u} outside [0, {nodes[1]})")
        j = 1
        visits = 1
        size = self.size
        while j < size:
            left = nodes[2 * j]
            if u >= left and nodes[2 * j + 1] > 0.0:
                u -= left
                j = 2 * j + 1
            else:
                j = 2 * j
            visits += 1
        self.visits += visits
        return j - size

    def draw_many(self, us):
        """Vectorized :meth:`draw` over an array of values in [0, total)."""
        us = np.array(us, dtype=float, copy=True)
        if us.size and (us.min() < 0.0 or us.max() >= self.nodes[1]):
            raise ContractError("u outside [0, total)")
        nodes = self.nodes
        j = np.ones(us.shape, dtype=np.int64)
        for _ in range(self.depth):
            left = nodes[2 * j]
            go_right = (us >= left) & (nodes[2 * j + 1] > 0.0)
            us = np.where(go_right, us - left, us)
            j = 2 * j + go_right
        return j - self.size

    def update_weight(self, i, new_weight):
        if not np.isfinite(new_weight) or new_weight < 0:
            raise ContractError("weight must be finite and non-negative")
        nodes = self.nodes
        j = self.size + i
        old = nodes[j]
        if old == new_weight:
            return
        nodes[j] = new_weight
        if nodes[self.size:self.size + self.n].max() <= 0.0:
            nodes[j] = old
            raise ContractError("update would leave all weights zero")
        j >>= 1
        while j >= 1:
            nodes[j] = nodes[2 * j] + nodes[2 * j + 1]
            j >>= 1

    def check(self, rtol=1e-12):
        """Raise if some internal node differs from the sum of its children."""
        nodes = self.nodes
        for j in range(1, self.size):
            s = nodes[2 * j] + nodes[2 * j + 1]
            if abs(nodes[j] - s) > rtol * max(abs(s), 1e-300):
                raise AssertionError(f"node {j}: {nodes[j]} != {s}")
        return True

    def copy(self):
        other = object.__new__(SamplingTree)
        other.__dict__.update(self.__dict__)
        other.nodes = self.nodes.copy()
        return other


def linear_scan_draw(weights, u):
    """Reference draw by scanning cumulative sums (no tree)."""
    c = 0.0
    last = 0
    for i, w in enumerate(weights):
        if w <= 0.0:
            continue
        last = i
        if u < c + w:
            return i
        c += w
    return last


class CoordinateStream:
    """Coordinate draws backed by a numpy Generator and a sampling tree.

    Uniforms are pulled from ``rng`` in blocks; the i-th coordinate is always
    ``tree.draw(u_i * tree.total)`` for the i-th uniform, so the stream does
    not depend on the block size. When the tree is being updated on the fly,
    pass ``dynamic=True`` and indices are resolved one at a time against the
    current tree.
    """

    def __init__(self, tree, rng, block=4096, dynamic=False):
        self.tree = tree
        self.rng = rng
        self.block = block
        self.dynamic = dynamic
        self._buf = np.empty(0, dtype=np.int64)
        self._us = np.empty(0)
        self._pos = 0

    def _refill(self):
        self._us = self.rng.random(self.block)
        if not self.dynamic:
            self._buf = self.tree.draw_many(_scale(self._us, self.tree.total))
        self._pos = 0

    def next(self):
        if self._pos >= self._us.size:
            self._refill()
        p = self._pos
        self._pos += 1
        if self.dynamic:
            return self.tree.draw(_scale(self._us[p], self.tree.total))
        return int(self._buf[p])


def _scale(u, total):
    # u * total can round up to total itself
    return np.minimum(u * total, np.nextafter(total, 0.0))
