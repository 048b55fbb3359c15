"""Exact quenched heat kernels.

The transition kernel ``p(x, y) = ω_xy / π(x)`` is applied to a dense
distribution over the box.  Each application only touches the bounding box of
the current support (grown by one site), so an ``n``-step evolution from a
point costs about ``(2n)^d`` per step regardless of the box size.

Results are exact for the infinite lattice as long as the walk cannot feel the
box boundary, which ``heat_kernel`` and ``return_series`` enforce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from rcmwalk.environment import ConductanceField
from rcmwalk.lattice import BoxGeometry, annulus_size, linf


class BoxTooSmall(ValueError):
    pass


class ZeroWeightError(ValueError):
    """Mass placed on a vertex with π = 0, where the kernel is undefined."""


class TransitionKernel:
    """``p(x, ·)`` for every vertex of a field's box, stored per direction."""

    def __init__(self, field: ConductanceField, probs: np.ndarray | None = None):
        self.field = field
        self.geometry = field.geometry
        self.pi = field.pi
        if probs is None:
            w = field.by_direction
            probs = np.divide(w, self.pi[:, None], out=np.zeros_like(w), where=self.pi[:, None] > 0)
        self.probs = np.asarray(probs, dtype=float)
        g = self.geometry
        self._grids = []
        for k in range(2 * g.d):
            grid = np.zeros(tuple(s + 2 for s in g.shape))
            grid[(slice(1, -1),) * g.d] = self.probs[:, k].reshape(g.shape)
            self._grids.append(grid)

    @property
    def d(self) -> int:
        return self.geometry.d

    def row_sum_residual(self) -> float:
        rows = self.probs.sum(axis=1)
        live = self.pi > 0
        return float(np.max(np.abs(rows[live] - 1.0), initial=0.0))

    def evolve(
        self,
        dist: "DistributionVector",
        n: int,
        callback: Callable[[int, np.ndarray], None] | None = None,
    ) -> "DistributionVector":
        """Apply the kernel ``n`` times.

        ``callback(t, grid)`` is called after every step with the padded
        ``(side+2,)*d`` mass array; it must not modify it.
        """
        g = self.geometry
        if dist.geometry != g:
            raise ValueError("distribution lives on a different box")
        if np.any((dist.mass > 0) & (self.pi <= 0)):
            raise ZeroWeightError("distribution charges a vertex with π = 0")
        cur = np.zeros(tuple(s + 2 for s in g.shape))
        cur[(slice(1, -1),) * g.d] = dist.mass.reshape(g.shape)
        nz = np.nonzero(cur)
        if nz[0].size:
            lo = np.array([a.min() for a in nz])
            hi = np.array([a.max() for a in nz])
        else:
            lo = np.ones(g.d, dtype=int)
            hi = np.zeros(g.d, dtype=int)
        top = np.array(g.shape)  # last interior index in padded coords
        nxt = np.zeros_like(cur)
        for t in range(1, n + 1):
            src = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
            nlo = np.maximum(lo - 1, 1)
            nhi = np.minimum(hi + 1, top)
            nxt[tuple(slice(a, b + 1) for a, b in zip(nlo, nhi))] = 0.0
            block = cur[src]
            for k, grid in enumerate(self._grids):
                axis, sign = divmod(k, 2)
                shift = 1 if sign else -1
                dst = list(src)
                dst[axis] = slice(lo[axis] + shift, hi[axis] + 1 + shift)
                nxt[tuple(dst)] += block * grid[src]
            # clear the old support so the buffer can be reused next step
            cur[src] = 0.0
            cur, nxt = nxt, cur
            lo, hi = nlo, nhi
            if callback is not None:
                callback(t, cur)
        mass = cur[(slice(1, -1),) * g.d].ravel().copy()
        return DistributionVector(g, mass, dist.steps + n)


@dataclass(eq=False)
class DistributionVector:
    """Mass per vertex of a box after ``steps`` applications of the kernel."""

    geometry: BoxGeometry
    mass: np.ndarray
    steps: int = 0

    @classmethod
    def point(cls, geometry: BoxGeometry, x: Sequence[int]) -> "DistributionVector":
        m = np.zeros(geometry.vertex_count)
        m[geometry.index(x)] = 1.0
        return cls(geometry, m, 0)

    @property
    def parity(self) -> int:
        return self.steps % 2

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def at(self, x: Sequence[int]) -> float:
        return float(self.mass[self.geometry.index(x)])

    def annulus_masses(self, count: int) -> np.ndarray:
        """Mass of each annulus ``B_{3(k+1)} minus B_{3k}``, ``k < count``."""
        norms = self.geometry.norms
        k = np.where(norms > 0, (norms - 1) // 3, -1)
        keep = (k >= 0) & (k < count)
        return np.bincount(k[keep], weights=self.mass[keep], minlength=count)[:count]


def _kernel(field: ConductanceField, kernel: TransitionKernel | None) -> TransitionKernel:
    if kernel is None:
        return TransitionKernel(field)
    if kernel.field is not field:
        raise ValueError("kernel belongs to another field")
    return kernel


def step(kernel: TransitionKernel, dist: DistributionVector) -> DistributionVector:
    """One application: ``dist'(y) = Σ_x dist(x) p(x, y)``."""
    return kernel.evolve(dist, 1)


def _check_start(field: ConductanceField, o: Sequence[int], reach: int) -> None:
    g = field.geometry
    if len(o) != g.d:
        raise ValueError(f"start {tuple(o)} has the wrong dimension")
    need = reach + linf(o)
    if g.L < need:
        raise BoxTooSmall(f"exactness needs box radius >= {need}, field has L = {g.L}")
    if field.pi[g.index(o)] <= 0:
        raise ZeroWeightError(f"start {tuple(o)} has π = 0")


def heat_kernel(
    field: ConductanceField, o: Sequence[int], n: int, kernel: TransitionKernel | None = None
) -> DistributionVector:
    """``P^n(o, ·)``; requires ``L >= n + |o|∞`` so no boundary is felt."""
    _check_start(field, o, n)
    k = _kernel(field, kernel)
    return k.evolve(DistributionVector.point(field.geometry, o), n)


def return_series(
    field: ConductanceField, o: Sequence[int], n_max: int, kernel: TransitionKernel | None = None
) -> np.ndarray:
    """``P^{2n}(o, o)`` for ``n = 1..n_max`` (entry ``n - 1``)."""
    _check_start(field, o, 2 * n_max)
    k = _kernel(field, kernel)
    g = field.geometry
    at = tuple(c + g.L + 1 for c in o)
    out = np.empty(n_max)

    def record(t: int, grid: np.ndarray) -> None:
        if t % 2 == 0:
            out[t // 2 - 1] = grid[at]

    k.evolve(DistributionVector.point(g, o), 2 * n_max, record)
    return out


def annulus_mass(
    field: ConductanceField, o: Sequence[int], n: int, k: int, kernel: TransitionKernel | None = None
) -> float:
    """``P^o(X_n ∈ B_{3(k+1)} minus B_{3k})``."""
    return float(heat_kernel(field, o, n, kernel).annulus_masses(k + 1)[k])


def cs_terms(dist: DistributionVector, pi_o: float, r: int) -> np.ndarray:
    """Summands ``|B°_k|^{-1} P(X_n ∈ B°_k)^2 π(o)/(2d)`` for ``k < r // 3``."""
    count = r // 3
    d = dist.geometry.d
    sizes = np.array([annulus_size(d, k) for k in range(count)], dtype=float)
    return dist.annulus_masses(count) ** 2 / sizes * pi_o / (2 * d)


def cs_lower_bound(
    field: ConductanceField, o: Sequence[int], n: int, r: int, kernel: TransitionKernel | None = None
) -> float:
    """Cauchy–Schwarz annulus lower bound on ``P^{2n}(o, o)``."""
    dist = heat_kernel(field, o, n, kernel)
    return float(cs_terms(dist, float(field.pi[field.geometry.index(o)]), r).sum())


def full_sum(dist: DistributionVector, pi: np.ndarray, o: Sequence[int]) -> float:
    """``Σ_x P^n(o,x)^2 π(o)/π(x)``, which equals ``P^{2n}(o,o)`` by reversibility."""
    live = dist.mass > 0
    pi_o = pi[dist.geometry.index(o)]
    return float(np.sum(dist.mass[live] ** 2 / pi[live]) * pi_o)


def check_reversibility(source: ConductanceField | TransitionKernel) -> float:
    """Largest ``|π(x) p(x,y) - π(y) p(y,x)|`` over the bonds of the box."""
    k = source if isinstance(source, TransitionKernel) else TransitionKernel(source)
    g = k.geometry
    t, h, ax = g.edge_tail, g.edge_head, g.edge_axis
    forward = k.pi[t] * k.probs[t, 2 * ax + 1]
    backward = k.pi[h] * k.probs[h, 2 * ax]
    return float(np.max(np.abs(forward - backward), initial=0.0))
