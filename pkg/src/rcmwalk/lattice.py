"""Geometry of the closed boxes B_r = [-r, r]^d of Z^d.

Vertices are ordered lexicographically on their coordinates (first coordinate
most significant), which is C order for an array of shape ``(2L+1,) * d``.
Edges are ordered by tail vertex, then by axis: for every vertex the ``+e_i``
edges for ``i = 0..d-1`` that stay inside the box.  This order is also the
serialization order of environment files.

Neighbour directions are numbered ``2*i`` for ``-e_i`` and ``2*i + 1`` for
``+e_i``.
"""

from __future__ import annotations

from functools import cached_property
from itertools import product
from typing import Iterator, NamedTuple, Sequence

import numpy as np

Coord = tuple[int, ...]


class Edge(NamedTuple):
    """A nearest-neighbour bond stored as (lower endpoint, axis)."""

    tail: Coord
    axis: int

    @property
    def head(self) -> Coord:
        h = list(self.tail)
        h[self.axis] += 1
        return tuple(h)

    @classmethod
    def between(cls, x: Sequence[int], y: Sequence[int]) -> "Edge":
        diff = [b - a for a, b in zip(x, y)]
        if sorted(map(abs, diff)) != [0] * (len(diff) - 1) + [1]:
            raise ValueError(f"{tuple(x)} and {tuple(y)} are not nearest neighbours")
        axis = next(i for i, v in enumerate(diff) if v != 0)
        tail = tuple(x) if diff[axis] == 1 else tuple(y)
        return cls(tuple(int(c) for c in tail), axis)


class IncidentEdge(NamedTuple):
    edge: Edge
    direction: int
    index: int | None  # canonical edge index; None when the edge leaves the box (or no box given)

    @property
    def external(self) -> bool:
        return self.index is None


def linf(x: Sequence[int]) -> int:
    return max((abs(int(c)) for c in x), default=0)


class BoxGeometry:
    """Vertex and edge indexing of the box [-L, L]^d."""

    def __init__(self, d: int, L: int):
        if d < 1:
            raise ValueError("dimension must be >= 1")
        if L < 0:
            raise ValueError("radius must be >= 0")
        self.d = int(d)
        self.L = int(L)
        self.side = 2 * self.L + 1
        self.shape = (self.side,) * self.d

    def __repr__(self) -> str:
        return f"BoxGeometry(d={self.d}, L={self.L})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BoxGeometry) and (self.d, self.L) == (other.d, other.L)

    def __hash__(self) -> int:
        return hash((self.d, self.L))

    @property
    def vertex_count(self) -> int:
        return self.side**self.d

    @property
    def edge_count(self) -> int:
        return self.d * 2 * self.L * self.side ** (self.d - 1)

    @property
    def origin(self) -> int:
        return self.index((0,) * self.d)

    def contains(self, x: Sequence[int]) -> bool:
        return len(x) == self.d and linf(x) <= self.L

    def index(self, x: Sequence[int]) -> int:
        if not self.contains(x):
            raise ValueError(f"{tuple(x)} is not in {self!r}")
        idx = 0
        for c in x:
            idx = idx * self.side + (int(c) + self.L)
        return idx

    def coord(self, index: int) -> Coord:
        if not 0 <= index < self.vertex_count:
            raise IndexError(index)
        out = []
        for _ in range(self.d):
            index, rem = divmod(index, self.side)
            out.append(rem - self.L)
        return tuple(reversed(out))

    # -- vectorised tables -------------------------------------------------

    @cached_property
    def coords(self) -> np.ndarray:
        """``(V, d)`` integer coordinates in canonical order."""
        axes = np.meshgrid(*([np.arange(-self.L, self.L + 1)] * self.d), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1).astype(np.int64)

    @cached_property
    def norms(self) -> np.ndarray:
        """ℓ∞ norm of every vertex."""
        if self.d == 0:
            return np.zeros(1, dtype=np.int64)
        return np.abs(self.coords).max(axis=1)

    @cached_property
    def _edge_table(self) -> tuple[np.ndarray, np.ndarray]:
        inside = self.coords < self.L  # (V, d): +e_i edge stays in the box
        tails, axes = np.nonzero(inside)  # C order == canonical edge order
        return tails.astype(np.int64), axes.astype(np.int64)

    @property
    def edge_tail(self) -> np.ndarray:
        return self._edge_table[0]

    @property
    def edge_axis(self) -> np.ndarray:
        return self._edge_table[1]

    @cached_property
    def strides(self) -> np.ndarray:
        return np.array([self.side ** (self.d - 1 - i) for i in range(self.d)], dtype=np.int64)

    @cached_property
    def edge_head(self) -> np.ndarray:
        return self.edge_tail + self.strides[self.edge_axis]

    @cached_property
    def neighbors(self) -> np.ndarray:
        """``(V, 2d)`` neighbour vertex index per direction, -1 outside the box."""
        V = self.vertex_count
        out = np.full((V, 2 * self.d), -1, dtype=np.int64)
        idx = np.arange(V, dtype=np.int64)
        for i in range(self.d):
            c = self.coords[:, i]
            s = self.strides[i]
            out[:, 2 * i] = np.where(c > -self.L, idx - s, -1)
            out[:, 2 * i + 1] = np.where(c < self.L, idx + s, -1)
        return out

    @cached_property
    def incident(self) -> np.ndarray:
        """``(V, 2d)`` canonical edge index per direction, -1 outside the box."""
        out = np.full((self.vertex_count, 2 * self.d), -1, dtype=np.int64)
        e = np.arange(self.edge_count, dtype=np.int64)
        out[self.edge_tail, 2 * self.edge_axis + 1] = e
        out[self.edge_head, 2 * self.edge_axis] = e
        return out

    def edge_index(self, edge: Edge) -> int:
        """Canonical index of ``edge``; raises if the edge is not in the box."""
        tail = self.index(edge.tail)
        e = int(self.incident[tail, 2 * edge.axis + 1])
        if e < 0:
            raise ValueError(f"{edge} leaves {self!r}")
        return e

    def edge(self, index: int) -> Edge:
        return Edge(self.coord(int(self.edge_tail[index])), int(self.edge_axis[index]))

    def incident_edges(self, x: Sequence[int]) -> list[IncidentEdge]:
        return incident_edges(x, self)


def box_vertices(d: int, r: int) -> list[Coord]:
    """All vertices of B_r in canonical (lexicographic) order."""
    if d < 1 or r < 0:
        raise ValueError("need d >= 1 and r >= 0")
    return list(product(range(-r, r + 1), repeat=d))


def boundary(d: int, r: int) -> set[Coord]:
    """Sites of B_r with a neighbour outside B_r, i.e. ℓ∞ norm exactly r."""
    if r < 1:
        raise ValueError("need r >= 1")
    return {x for x in box_vertices(d, r) if linf(x) == r}


def annulus(d: int, k: int) -> set[Coord]:
    """B_{3(k+1)} minus B_{3k}; for k = 0 this removes only the origin."""
    if k < 0:
        raise ValueError("need k >= 0")
    return {x for x in box_vertices(d, 3 * (k + 1)) if linf(x) > 3 * k}


def annulus_size(d: int, k: int) -> int:
    return (6 * k + 7) ** d - (6 * k + 1) ** d


def annulus_index(norms: np.ndarray) -> np.ndarray:
    """Annulus rank of every vertex given its ℓ∞ norm; -1 for the origin."""
    return np.where(norms > 0, (norms - 1) // 3, -1)


def incident_edges(x: Sequence[int], geometry: BoxGeometry | None = None) -> list[IncidentEdge]:
    """The 2d bonds at ``x`` in direction order; flags those leaving ``geometry``."""
    x = tuple(int(c) for c in x)
    out = []
    for direction in range(2 * len(x)):
        axis, sign = divmod(direction, 2)
        y = list(x)
        y[axis] += 1 if sign else -1
        edge = Edge.between(x, y)
        index = None
        if geometry is not None and geometry.contains(x) and geometry.contains(y):
            index = geometry.edge_index(edge)
        out.append(IncidentEdge(edge, direction, index))
    return out


def neighbors_of(x: Sequence[int]) -> Iterator[Coord]:
    for direction in range(2 * len(x)):
        axis, sign = divmod(direction, 2)
        y = list(x)
        y[axis] += 1 if sign else -1
        yield tuple(y)
