"""Giant-tour solution representation.

A solution is one Hamiltonian cycle over an expanded node set.  Single-tour
variants use the instance's node ids directly.  Multi-route variants expand
the depot into one copy per route: expanded ids 0..n_dep-1 are depot copies
and n_dep..n_dep+n-1 are customers 1..n, so each depot occurrence keeps its
own position along the cycle.  The stored order is canonically rotated so
expanded id 0 comes first; orientation is otherwise arbitrary (distances are
symmetric).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StructureError


@dataclass
class Solution:
    seq: np.ndarray          # visit order over expanded ids, seq[0] == 0
    n_customers: int
    n_dep: int = 0           # depot copies; 0 for single-tour variants
    _pos: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.seq = np.asarray(self.seq, dtype=np.int64)
        self.validate()

    @property
    def size(self) -> int:
        return self.n_customers + self.n_dep

    def validate(self):
        size = self.size
        if self.seq.shape != (size,):
            raise StructureError(f"sequence length {self.seq.shape}, expected {size}")
        counts = np.bincount(self.seq, minlength=size) if self.seq.size else []
        if len(counts) != size or np.any(counts != 1):
            raise StructureError("sequence is not a permutation of the node set")
        if self.seq[0] != 0:
            raise StructureError("sequence must start at expanded id 0")

    def pos(self) -> np.ndarray:
        """Position of each expanded id along the cycle."""
        if self._pos is None:
            p = np.empty(self.size, dtype=np.int64)
            p[self.seq] = np.arange(self.size)
            self._pos = p
        return self._pos

    def successor(self) -> np.ndarray:
        """Successor map: succ[e] is the expanded id following e."""
        succ = np.empty(self.size, dtype=np.int64)
        succ[self.seq] = np.roll(self.seq, -1)
        return succ

    def labels(self) -> np.ndarray:
        """Instance node label of each expanded id."""
        if self.n_dep == 0:
            return np.arange(self.size, dtype=np.int64)
        lab = np.empty(self.size, dtype=np.int64)
        lab[: self.n_dep] = 0
        lab[self.n_dep:] = np.arange(1, self.n_customers + 1)
        return lab

    def label_seq(self) -> np.ndarray:
        """Visit order as instance node labels (depot repeated)."""
        return self.labels()[self.seq]

    def routes(self, keep_empty: bool = False) -> list[list[int]]:
        """Customer labels per route; empty routes collapsed by default."""
        if self.n_dep == 0:
            return [self.label_seq().tolist()]
        routes: list[list[int]] = []
        cur: list[int] | None = None
        for e in self.seq:  # seq[0] is always a depot copy here
            if e < self.n_dep:
                if cur is not None:
                    routes.append(cur)
                cur = []
            else:
                cur.append(int(e - self.n_dep + 1))
        routes.append(cur if cur is not None else [])
        if not keep_empty:
            routes = [r for r in routes if r]
        return routes

    @property
    def route_count(self) -> int:
        return max(len(self.routes()), 1) if self.n_dep else 1

    def replace_seq(self, seq: np.ndarray) -> "Solution":
        return Solution(seq=canonical_rotation(seq), n_customers=self.n_customers,
                        n_dep=self.n_dep)

    def copy(self) -> "Solution":
        return Solution(seq=self.seq.copy(), n_customers=self.n_customers,
                        n_dep=self.n_dep)

    def __eq__(self, other):
        if not isinstance(other, Solution):
            return NotImplemented
        return (self.n_customers == other.n_customers and self.n_dep == other.n_dep
                and np.array_equal(self.seq, other.seq))

    def serialize(self) -> str:
        """Visit sequence as text with '|' separating routes."""
        if self.n_dep == 0:
            return " ".join(str(int(x)) for x in self.seq)
        return " | ".join(" ".join(str(c) for c in r) for r in self.routes())


def canonical_rotation(seq: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    start = int(np.argmin(seq))  # expanded id 0
    return np.roll(seq, -start)


def from_permutation(perm, n_customers: int) -> Solution:
    """Single-tour solution from a node permutation (any rotation)."""
    return Solution(seq=canonical_rotation(np.asarray(perm)), n_customers=n_customers)


def from_routes(routes: list[list[int]], n_customers: int) -> Solution:
    """Multi-route solution from customer-label routes."""
    n_dep = max(len(routes), 1)
    seq = []
    for k, route in enumerate(routes if routes else [[]]):
        seq.append(k)
        seq.extend(c - 1 + n_dep for c in route)
    return Solution(seq=canonical_rotation(np.array(seq)), n_customers=n_customers,
                    n_dep=n_dep)


def expanded_coords(instance, n_dep: int) -> np.ndarray:
    """Coordinates per expanded id (depot row repeated n_dep times)."""
    if n_dep == 0:
        return instance.coords
    return np.concatenate([np.repeat(instance.coords[:1], n_dep, axis=0),
                           instance.coords[1:]], axis=0)


def parse_solution(text: str, n_customers: int, multi_route: bool) -> Solution:
    if multi_route:
        routes = [[int(x) for x in part.split()] for part in text.split("|")]
        routes = [r for r in routes if r]
        return from_routes(routes, n_customers)
    return from_permutation([int(x) for x in text.split()], n_customers)
