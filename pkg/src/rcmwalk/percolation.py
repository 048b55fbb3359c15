"""Threshold subgraphs of a conductance field and the structures built on them.

``clusters(field, xi)`` labels the components of the subgraph of edges with
``ω_e >= xi`` (``ω_e > 0`` when ``xi == 0``).  On a finite box the infinite
cluster is represented by the largest component.  Holes are the components of
C minus C_xi, where C is the positive-conductance component containing C_xi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from rcmwalk.environment import ConductanceField, LawSpec
from rcmwalk.lattice import Coord

ISOLATED = -1

# Bond percolation thresholds on Z^d (d=2 exact, others numerical estimates).
P_C = {1: 1.0, 2: 0.5, 3: 0.2488126, 4: 0.1601314, 5: 0.1181718, 6: 0.0942019}


def supercritical(law: LawSpec, xi: float, d: int) -> bool:
    """Advisory check ``P(ω_e >= xi) > p_c(d)``."""
    pc = P_C.get(d, 1.0 / (2 * d - 1))
    return law.prob_open(xi) > pc


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.parent)

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return int(root)

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def _compress(self) -> np.ndarray:
        parent = self.parent
        while True:
            grand = parent[parent]
            if np.array_equal(grand, parent):
                return parent
            parent[:] = grand

    def union_edges(self, a: np.ndarray, b: np.ndarray) -> None:
        """Merge the sets of every pair ``(a[i], b[i])`` in one batch.

        Roots are hooked onto the smaller root index and the forest is fully
        compressed between rounds, so the loop terminates once every pair
        shares a root.  Set sizes are recomputed at the end.
        """
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        parent = self._compress()
        while a.size:
            ra, rb = parent[a], parent[b]
            split = ra != rb
            if not split.any():
                break
            a, b, ra, rb = a[split], b[split], ra[split], rb[split]
            np.minimum.at(parent, np.maximum(ra, rb), np.minimum(ra, rb))
            parent = self._compress()
        roots = self._compress()
        self.size = np.bincount(roots, minlength=len(roots))  # valid at roots

    def roots(self) -> np.ndarray:
        """Root of every element (compresses fully)."""
        return self._compress().copy()


@dataclass(frozen=True, eq=False)
class ClusterLabeling:
    """Components of the threshold subgraph ``{ω_e >= xi}``.

    Component ids are ordered by the smallest vertex index they contain.
    Vertices with no open incident edge carry the ``ISOLATED`` label and
    belong to no component.
    """

    xi: float
    labels: np.ndarray
    sizes: np.ndarray
    touches_boundary: np.ndarray
    geometry: object

    @property
    def count(self) -> int:
        return len(self.sizes)

    @cached_property
    def strong(self) -> int:
        """Largest component; ties go to the one with the smallest vertex."""
        if not self.count:
            raise ValueError(f"no open edges at threshold {self.xi}")
        return int(np.argmax(self.sizes))

    def mask(self, component: int) -> np.ndarray:
        return self.labels == component

    @property
    def strong_mask(self) -> np.ndarray:
        return self.mask(self.strong)

    def label_of(self, x: Sequence[int]) -> int:
        return int(self.labels[self.geometry.index(x)])

    def members(self, component: int) -> set[Coord]:
        g = self.geometry
        return {g.coord(int(i)) for i in np.flatnonzero(self.labels == component)}

    def rows(self) -> list[tuple[float, int, int, bool]]:
        """``(xi, component_id, size, touches_boundary)`` per component."""
        return [
            (self.xi, c, int(s), bool(t)) for c, (s, t) in enumerate(zip(self.sizes, self.touches_boundary))
        ]


def open_edges(field: ConductanceField, xi: float) -> np.ndarray:
    if xi < 0:
        raise ValueError("threshold must be >= 0")
    return field.values > 0 if xi == 0 else field.values >= xi


def _label(n: int, a: np.ndarray, b: np.ndarray, geometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    uf = UnionFind(n)
    uf.union_edges(a, b)
    roots = uf.roots()
    touched = np.zeros(n, dtype=bool)
    touched[a] = True
    touched[b] = True
    first = np.full(n, n, dtype=np.int64)
    np.minimum.at(first, roots, np.arange(n, dtype=np.int64))
    # canonical ids: components ordered by their smallest vertex
    comp_roots = np.unique(roots[touched])
    comp_roots = comp_roots[np.argsort(first[comp_roots])]
    rank = np.empty(n, dtype=np.int64)
    rank[comp_roots] = np.arange(len(comp_roots))
    labels = np.full(n, ISOLATED, dtype=np.int64)
    labels[touched] = rank[roots[touched]]
    sizes = np.bincount(labels[touched], minlength=len(comp_roots))
    on_boundary = geometry.norms == geometry.L
    tb = np.zeros(len(comp_roots), dtype=bool)
    hit = touched & on_boundary
    tb[np.unique(labels[hit])] = True
    return labels, sizes, tb


def clusters(field: ConductanceField, xi: float) -> ClusterLabeling:
    """Connected components of the edges with ``ω_e >= xi`` (``> 0`` at ``xi = 0``)."""
    g = field.geometry
    keep = open_edges(field, xi)
    labels, sizes, tb = _label(g.vertex_count, g.edge_tail[keep], g.edge_head[keep], g)
    return ClusterLabeling(float(xi), labels, sizes, tb, g)


def strong_cluster(field: ConductanceField, xi: float) -> int:
    """Component id of the finite-box stand-in for the infinite cluster C_xi."""
    return clusters(field, xi).strong


# ---------------------------------------------------------------------------
# holes and hidden sets


class HoleError(ValueError):
    pass


@dataclass(frozen=True)
class HiddenSet:
    """G_x together with its pieces F'_x and F'_y for strong neighbours y."""

    anchor: Coord
    members: frozenset[Coord]
    f_prime: frozenset[Coord]
    neighbor_pieces: dict[Coord, frozenset[Coord]]
    censored: bool = False

    def __len__(self) -> int:
        return len(self.members)


class HoleStructure:
    """C, C_xi and the holes of a field at threshold ``xi``."""

    def __init__(self, field: ConductanceField, xi: float):
        if xi <= 0:
            raise ValueError("xi must be > 0")
        self.field = field
        self.xi = float(xi)
        g = field.geometry
        self.geometry = g
        self.strong_labels = clusters(field, xi)
        self.in_strong = self.strong_labels.strong_mask
        base = clusters(field, 0.0)
        anchor = int(np.flatnonzero(self.in_strong)[0])
        self.in_c = base.labels == base.labels[anchor]
        weak = self.in_c & ~self.in_strong
        pos = field.values > 0
        sel = pos & weak[g.edge_tail] & weak[g.edge_head]
        labels, sizes, tb = _label(g.vertex_count, g.edge_tail[sel], g.edge_head[sel], g)
        # single weak vertices with no weak-weak edge are holes of size one
        lone = weak & (labels == ISOLATED)
        extra = np.flatnonzero(lone)
        labels[extra] = len(sizes) + np.arange(len(extra))
        self.hole_labels = np.where(weak, labels, ISOLATED)
        self.hole_sizes = np.concatenate([sizes, np.ones(len(extra), dtype=np.int64)])
        self.hole_censored = np.concatenate([tb, g.norms[extra] == g.L])
        nb = g.neighbors
        hl = np.where(nb >= 0, self.hole_labels[np.maximum(nb, 0)], ISOLATED)
        self._adjacent_holes = np.where(field.by_direction > 0, hl, ISOLATED)

    def _idx(self, x: Sequence[int]) -> int:
        return self.geometry.index(x)

    def in_C(self, x: Sequence[int]) -> bool:
        return bool(self.in_c[self._idx(x)])

    def in_C_xi(self, x: Sequence[int]) -> bool:
        return bool(self.in_strong[self._idx(x)])

    def hole_members(self, hole_id: int) -> frozenset[Coord]:
        g = self.geometry
        return frozenset(g.coord(int(i)) for i in np.flatnonzero(self.hole_labels == hole_id))

    def hole(self, x: Sequence[int]) -> frozenset[Coord]:
        i = self._idx(x)
        if not self.in_c[i]:
            raise HoleError(f"{tuple(x)} is not in the positive-conductance cluster C")
        h = self.hole_labels[i]
        return frozenset() if h == ISOLATED else self.hole_members(int(h))

    def hole_censored_at(self, x: Sequence[int]) -> bool:
        h = self.hole_labels[self._idx(x)]
        return bool(h != ISOLATED and self.hole_censored[h])

    def strong_neighbors(self, i: int) -> list[int]:
        nb = self.geometry.neighbors[i]
        return [int(y) for y in nb if y >= 0 and self.in_strong[y]]

    def _hidden_ids(self, i: int) -> tuple[list[int], set[int]]:
        strong_nb = self.strong_neighbors(i)
        holes = set(int(h) for h in self._adjacent_holes[i] if h != ISOLATED)
        for y in strong_nb:
            holes.update(int(h) for h in self._adjacent_holes[y] if h != ISOLATED)
        return strong_nb, holes

    def hidden_set(self, x: Sequence[int]) -> HiddenSet:
        i = self._idx(x)
        if not self.in_strong[i]:
            raise HoleError(f"{tuple(x)} is not in the strong cluster C_xi")
        g = self.geometry

        def f_prime(v: int) -> frozenset[Coord]:
            out = {g.coord(v)}
            for h in set(self._adjacent_holes[v]) - {ISOLATED}:
                out |= self.hole_members(int(h))
            return frozenset(out)

        strong_nb, holes = self._hidden_ids(i)
        fx = f_prime(i)
        pieces = {g.coord(y): f_prime(y) for y in strong_nb}
        members = frozenset(fx.union(*pieces.values()))
        censored = bool(any(self.hole_censored[h] for h in holes))
        return HiddenSet(g.coord(i), members, fx, pieces, censored)

    def hidden_size(self, i: int) -> int:
        strong_nb, holes = self._hidden_ids(i)
        return 1 + len(strong_nb) + int(sum(self.hole_sizes[h] for h in holes))

    def max_hidden_size(self, r: int) -> int:
        """Exact ``max |G_x|`` over ``x`` in C_xi ∩ B_r."""
        cand = np.flatnonzero(self.in_strong & (self.geometry.norms <= r))
        if not cand.size:
            raise HoleError(f"C_xi does not meet B_{r}")
        return max(self.hidden_size(int(i)) for i in cand)

    def hole_size_stats(self) -> dict[str, float]:
        """Summary of uncensored hole sizes."""
        s = self.hole_sizes[~self.hole_censored]
        if not s.size:
            return {"count": 0, "censored": int(self.hole_censored.sum()), "max": 0, "mean": math.nan}
        return {
            "count": int(s.size),
            "censored": int(self.hole_censored.sum()),
            "max": int(s.max()),
            "mean": float(s.mean()),
        }


def hole(field: ConductanceField, xi: float, x: Sequence[int]) -> frozenset[Coord]:
    """H_x: the component of C minus C_xi containing ``x`` (empty if ``x`` in C_xi)."""
    return HoleStructure(field, xi).hole(x)


def hidden_set(field: ConductanceField, xi: float, x: Sequence[int]) -> HiddenSet:
    """G_x = F'_x ∪ ⋃_{y in C_xi, y ~ x} F'_y for ``x`` in C_xi."""
    return HoleStructure(field, xi).hidden_set(x)


def max_hidden_size(field: ConductanceField, xi: float, r: int) -> int:
    return HoleStructure(field, xi).max_hidden_size(r)
