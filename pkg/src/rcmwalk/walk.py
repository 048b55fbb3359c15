"""Monte Carlo walks, hitting times and the coarse-grained walk on C_xi.

Steps are drawn by inverse CDF over the 2d directions in fixed order.  A
single trajectory uses the stream keyed by ``(seed, replica)``; ensembles are
advanced in lockstep, one vectorised step at a time, with one stream per block
of replicas.

A walker standing on the box boundary would see truncated weights, so any
attempt to step from there raises ``BoxExit``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from rcmwalk import rng
from rcmwalk.environment import ConductanceField, TrapRecord
from rcmwalk.kernel import TransitionKernel, ZeroWeightError
from rcmwalk.lattice import BoxGeometry, Coord
from rcmwalk.percolation import ISOLATED, HoleStructure

INFINITE = math.inf
DEFAULT_CAP = 10**7
BLOCK = 1 << 16


class BoxExit(RuntimeError):
    pass


class CensoredHole(RuntimeError):
    pass


class WalkEngine:
    """Cumulative step tables for one field."""

    def __init__(self, field: ConductanceField, kernel: TransitionKernel | None = None):
        self.field = field
        self.geometry = g = field.geometry
        self.kernel = kernel or TransitionKernel(field)
        probs = self.kernel.probs
        cum = np.cumsum(probs, axis=1)
        live = self.kernel.pi > 0
        last = 2 * g.d - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
        # the last positive direction absorbs rounding in the cumulative sums
        cols = np.arange(2 * g.d)[None, :]
        cum = np.where(live[:, None] & (cols >= last[:, None]), 2.0, cum)
        self.cum = cum
        self.live = live
        self.neighbors = g.neighbors
        self.norms = g.norms
        self.on_boundary = g.norms >= g.L

    def start(self, o: Sequence[int]) -> int:
        i = self.geometry.index(o)
        if not self.live[i]:
            raise ZeroWeightError(f"start {tuple(o)} has π = 0")
        return i

    def advance(self, pos: np.ndarray, u: np.ndarray) -> np.ndarray:
        if np.any(self.on_boundary[pos]):
            raise BoxExit("a walker reached the box boundary; use a larger box")
        direction = (u[:, None] >= self.cum[pos]).sum(axis=1)
        return self.neighbors[pos, direction]


# ---------------------------------------------------------------------------
# single trajectories


@dataclass
class TrajectoryRecord:
    """Vertex indices ``X_0..X_n`` of one walk."""

    geometry: BoxGeometry
    path: np.ndarray
    seed: int = 0
    replica: int = 0

    @property
    def start(self) -> Coord:
        return self.geometry.coord(int(self.path[0]))

    @property
    def n_steps(self) -> int:
        return len(self.path) - 1

    def coords(self) -> np.ndarray:
        return self.geometry.coords[self.path]

    def hitting_time(self, r: int) -> int | None:
        """First ``k`` with ``|X_k|∞ = r``, or None if the path never gets there."""
        hit = np.flatnonzero(self.geometry.norms[self.path] == r)
        return int(hit[0]) if hit.size else None


def simulate(
    field: ConductanceField,
    o: Sequence[int],
    n_steps: int,
    seed: int = 0,
    replica: int = 0,
    engine: WalkEngine | None = None,
) -> TrajectoryRecord:
    """One trajectory of ``n_steps`` steps from ``o``."""
    eng = engine or WalkEngine(field)
    path = np.empty(n_steps + 1, dtype=np.int64)
    path[0] = eng.start(o)
    u = rng.stream(seed, rng.WALK, replica).random(n_steps)
    pos = path[:1].copy()
    for t in range(n_steps):
        pos = eng.advance(pos, u[t : t + 1])
        path[t + 1] = pos[0]
    return TrajectoryRecord(field.geometry, path, seed, replica)


@dataclass(frozen=True)
class HittingTime:
    value: int | None
    censored: bool


def hitting_time(
    field: ConductanceField,
    o: Sequence[int],
    r: int,
    seed: int = 0,
    replica: int = 0,
    cap: int = DEFAULT_CAP,
    engine: WalkEngine | None = None,
) -> HittingTime:
    """First time the walk from ``o`` stands on ∂B_r; censored after ``cap`` steps."""
    eng = engine or WalkEngine(field)
    g = field.geometry
    if max(abs(c) for c in o) >= r:
        raise ValueError("start must lie in B_{r-1}")
    if g.L <= r:
        raise ValueError("box radius must exceed r")
    pos = np.array([eng.start(o)])
    gen = rng.stream(seed, rng.WALK, replica)
    t = 0
    while t < cap:
        u = gen.random(min(4096, cap - t))
        for x in u:
            pos = eng.advance(pos, np.array([x]))
            t += 1
            if eng.norms[pos[0]] == r:
                return HittingTime(t, False)
    return HittingTime(None, True)


# ---------------------------------------------------------------------------
# coarse-grained walk


@dataclass
class CoarseWalk:
    """Visits of a trajectory to C_xi: ``times[l] = T_l`` and ``positions[l] = X^xi_l``."""

    times: list[int]
    positions: list[Coord]
    visit_steps: list[int] = dc_field(default_factory=list)

    def tau_hat(self, r: int) -> int | None:
        """First coarse index whose position lies outside B_r."""
        for l, x in enumerate(self.positions):
            if max(abs(c) for c in x) > r:
                return l
        return None

    def elapsed(self, l: int) -> int:
        """``T_0 + ... + T_l``: the walk time of coarse visit ``l``."""
        return self.visit_steps[l]


def coarse_grain(
    field: ConductanceField,
    xi: float,
    trajectory: TrajectoryRecord,
    structure: HoleStructure | None = None,
) -> CoarseWalk:
    s = structure or HoleStructure(field, xi)
    strong = s.in_strong[trajectory.path]
    if not strong[0]:
        raise ValueError("trajectory must start in C_xi")
    steps = np.flatnonzero(strong)
    times = [0] + np.diff(steps).tolist()
    g = field.geometry
    return CoarseWalk(times, [g.coord(int(trajectory.path[t])) for t in steps], steps.tolist())


@dataclass(frozen=True)
class CoarseStep:
    """``p_xi(x, ·)`` and ``E^x[T_1]``."""

    probs: dict[Coord, float]
    mean_time: float


def coarse_kernel(
    field: ConductanceField,
    xi: float,
    x: Sequence[int],
    structure: HoleStructure | None = None,
    kernel: TransitionKernel | None = None,
) -> CoarseStep:
    """Law of the first return of the walk from ``x`` to C_xi (after at least one step).

    Excursions into the holes next to ``x`` are resolved exactly by one
    linear solve for the absorption probabilities and mean durations.
    """
    s = structure or HoleStructure(field, xi)
    k = kernel or TransitionKernel(field)
    g = field.geometry
    i = g.index(x)
    if not s.in_strong[i]:
        raise ValueError(f"{tuple(x)} is not in C_xi")
    hole_ids = sorted({int(h) for h in s._adjacent_holes[i] if h != ISOLATED})
    if any(s.hole_censored[h] for h in hole_ids):
        raise CensoredHole(f"a hole next to {tuple(x)} touches the box boundary")
    transient = np.flatnonzero(np.isin(s.hole_labels, hole_ids)) if hole_ids else np.empty(0, dtype=np.int64)
    local = {int(v): j for j, v in enumerate(transient)}
    m = len(transient)
    Q = np.zeros((m, m))
    absorb: dict[int, np.ndarray] = {}
    for j, v in enumerate(transient):
        for dirn, y in enumerate(g.neighbors[v]):
            p = k.probs[v, dirn]
            if p <= 0:
                continue
            if int(y) in local:
                Q[j, local[int(y)]] += p
            else:
                # neighbours of a hole vertex with ω > 0 are in C_xi or in the same hole
                absorb.setdefault(int(y), np.zeros(m))[j] += p
    targets = sorted(absorb)
    out: dict[int, float] = {}
    mean = 1.0
    if m:
        A = np.eye(m) - Q
        R = np.column_stack([absorb[y] for y in targets]) if targets else np.zeros((m, 0))
        sol = np.linalg.solve(A, np.column_stack([R, np.ones(m)]))
        B, durations = sol[:, :-1], sol[:, -1]
    for dirn, y in enumerate(g.neighbors[i]):
        p = k.probs[i, dirn]
        if p <= 0:
            continue
        y = int(y)
        if s.in_strong[y]:
            out[y] = out.get(y, 0.0) + p
        else:
            j = local[y]
            for col, z in enumerate(targets):
                if B[j, col]:
                    out[z] = out.get(z, 0.0) + p * B[j, col]
            mean += p * durations[j]
    return CoarseStep({g.coord(v): pr for v, pr in sorted(out.items())}, float(mean))


# ---------------------------------------------------------------------------
# traps along a trajectory


@dataclass(frozen=True)
class TrapRank:
    """``K``: first ``k < kmax`` with the walk at ∂B_{3k} next to an outer trap."""

    K: float  # INFINITE when no rank qualifies
    hit_time: int | None  # H_{3K}
    censored: bool = False


def first_trap_rank(
    field: ConductanceField,
    trajectory: TrajectoryRecord,
    n: int,
    r: int,
    c_strong: float = 0.5,
    adjacent: np.ndarray | None = None,
) -> TrapRank:
    """Rank ``K`` along a recorded trajectory that starts at the origin.

    ``adjacent`` is the per-vertex trap-adjacency mask; computed from the
    field when omitted.
    """
    from rcmwalk.environment import trap_adjacent_mask

    if adjacent is None:
        adjacent = trap_adjacent_mask(field, n, c_strong)
    norms = field.geometry.norms[trajectory.path]
    if norms[0] != 0:
        raise ValueError("trap ranks are defined for walks started at the origin")
    for k in range(r // 3):
        hit = np.flatnonzero(norms == 3 * k)
        if not hit.size:
            return TrapRank(INFINITE, None, censored=True)
        h = int(hit[0])
        if adjacent[trajectory.path[h]]:
            return TrapRank(k, h)
    return TrapRank(INFINITE, None)


def confinement_probability(field: ConductanceField, trap: TrapRecord, n: int) -> float:
    """``P^y(X_j ∈ {y, z} for j = 1..n)`` for the trap's strong edge ``{y, z}``.

    Without holding, the walk must alternate y -> z -> y ..., so the answer is
    ``a^ceil(n/2) * b^floor(n/2)`` with ``a = ω_yz/π(y)``, ``b = ω_yz/π(z)``.
    """
    g = field.geometry
    y, z = (g.index(p) for p in trap.endpoints)
    w = field.values[trap.strong_index]
    a = w / field.pi[y]
    b = w / field.pi[z]
    return float(a ** ((n + 1) // 2) * b ** (n // 2))


# ---------------------------------------------------------------------------
# ensembles


def _blocks(n_replicas: int, block: int = BLOCK):
    for b, start in enumerate(range(0, n_replicas, block)):
        yield b, min(block, n_replicas - start)


def final_positions(
    field: ConductanceField,
    o: Sequence[int],
    n_steps: int,
    seed: int,
    n_replicas: int,
    engine: WalkEngine | None = None,
) -> np.ndarray:
    """``X_n`` (vertex index) for each of ``n_replicas`` independent walks."""
    eng = engine or WalkEngine(field)
    start = eng.start(o)
    out = []
    for b, size in _blocks(n_replicas):
        gen = rng.stream(seed, rng.ENSEMBLE, b)
        pos = np.full(size, start, dtype=np.int64)
        for _ in range(n_steps):
            pos = eng.advance(pos, gen.random(size))
        out.append(pos)
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


@dataclass
class ExitSample:
    """Per-replica hitting, coarse exit and trap-rank data for a list of radii.

    Arrays indexed by radius have shape ``(replicas, len(radii))``; -1 marks
    quantities that were not reached.  ``K = -1`` means no rank qualified.
    """

    radii: tuple[int, ...]
    H: np.ndarray  # first time on ∂B_r
    tau_hat: np.ndarray  # first coarse index outside B_r
    tau_time: np.ndarray  # walk time of that coarse visit
    K: np.ndarray
    steps: np.ndarray  # steps simulated per replica
    censored: np.ndarray  # hit the step cap before everything was decided


def exit_sample(
    field: ConductanceField,
    o: Sequence[int],
    radii: Sequence[int],
    seed: int,
    n_replicas: int,
    strong: np.ndarray | None = None,
    cap: int = DEFAULT_CAP,
    engine: WalkEngine | None = None,
    adjacent: np.ndarray | None = None,
    kmax: int = 0,
) -> ExitSample:
    """Run walks until every radius is hit, coarse-exited (when ``strong`` is
    given) and the trap rank is decided (when ``adjacent`` is given)."""
    eng = engine or WalkEngine(field)
    radii = tuple(int(r) for r in radii)
    rr = np.array(radii)
    start = eng.start(o)
    if strong is not None and not strong[start]:
        raise ValueError("coarse exit times need a start in C_xi")
    if max(abs(c) for c in o) >= min(radii):
        raise ValueError("start must lie inside every B_{r-1}")
    track_k = adjacent is not None and kmax > 0
    if track_k and eng.norms[start] != 0:
        raise ValueError("trap ranks are defined for walks started at the origin")
    parts: list[tuple[np.ndarray, ...]] = []
    for b, size in _blocks(n_replicas):
        gen = rng.stream(seed, rng.ENSEMBLE, b)
        H = np.full((size, len(rr)), -1, dtype=np.int64)
        tau = np.full((size, len(rr)), -1, dtype=np.int64)
        ttime = np.full((size, len(rr)), -1, dtype=np.int64)
        K = np.full(size, -1, dtype=np.int64)
        kdone = np.ones(size, dtype=bool)
        target = np.zeros(size, dtype=np.int64)
        if track_k:
            if adjacent[start]:
                K[:] = 0
            else:
                target[:] = 1
                kdone[:] = kmax <= 1
        steps = np.zeros(size, dtype=np.int64)
        pos = np.full(size, start, dtype=np.int64)
        coarse = np.zeros(size, dtype=np.int64)
        active = np.arange(size)
        t = 0
        while active.size and t < cap:
            t += 1
            p = eng.advance(pos[active], gen.random(active.size))
            pos[active] = p
            steps[active] = t
            nrm = eng.norms[p]
            h = H[active]
            h[(h < 0) & (nrm[:, None] >= rr[None, :])] = t
            H[active] = h
            done = np.all(h >= 0, axis=1)
            if strong is not None:
                is_s = strong[p]
                coarse[active] += is_s
                tv = tau[active]
                tt = ttime[active]
                out = (tv < 0) & is_s[:, None] & (nrm[:, None] > rr[None, :])
                tv[out] = np.broadcast_to(coarse[active][:, None], tv.shape)[out]
                tt[out] = t
                tau[active] = tv
                ttime[active] = tt
                done &= np.all(tv >= 0, axis=1)
            if track_k:
                pending = ~kdone[active]
                reach = pending & (nrm == 3 * target[active])
                if reach.any():
                    idx = active[reach]
                    found = adjacent[p[reach]]
                    K[idx[found]] = target[idx[found]]
                    target[idx[~found]] += 1
                    kdone[idx] = found | (target[idx] >= kmax)
                done &= kdone[active]
            active = active[~done]
        c = np.zeros(size, dtype=bool)
        c[active] = True
        parts.append((H, tau, ttime, K, steps, c))
    cols = [np.concatenate(x) for x in zip(*parts)]
    return ExitSample(radii, *cols)


def coarse_endpoints(
    field: ConductanceField,
    x: Sequence[int],
    strong: np.ndarray,
    seed: int,
    n_replicas: int,
    cap: int = DEFAULT_CAP,
    engine: WalkEngine | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo ``(X_{T_1}, T_1)`` for walks from ``x`` in C_xi."""
    eng = engine or WalkEngine(field)
    start = eng.start(x)
    ends, durs = [], []
    for b, size in _blocks(n_replicas):
        gen = rng.stream(seed, rng.ENSEMBLE, b)
        pos = np.full(size, start, dtype=np.int64)
        T = np.zeros(size, dtype=np.int64)
        end = np.full(size, -1, dtype=np.int64)
        active = np.arange(size)
        t = 0
        while active.size and t < cap:
            t += 1
            p = eng.advance(pos[active], gen.random(active.size))
            pos[active] = p
            hit = strong[p]
            end[active[hit]] = p[hit]
            T[active[hit]] = t
            active = active[~hit]
        ends.append(end)
        durs.append(T)
    return np.concatenate(ends), np.concatenate(durs)


def trap_ranks(
    field: ConductanceField,
    kmax: int,
    adjacent: np.ndarray,
    seed: int,
    n_replicas: int,
    horizon: int = DEFAULT_CAP,
    engine: WalkEngine | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``K`` for walks from the origin, observed up to ``horizon`` steps.

    Returns ``(K, H_3K, censored)``; ``K = -1`` encodes infinity and
    ``censored`` marks walks whose rank was still undecided at the horizon.
    """
    eng = engine or WalkEngine(field)
    g = field.geometry
    o = (0,) * g.d
    start = eng.start(o)
    Ks, hs, cs = [], [], []
    for b, size in _blocks(n_replicas):
        gen = rng.stream(seed, rng.ENSEMBLE, b)
        K = np.full(size, -1, dtype=np.int64)
        Ht = np.full(size, -1, dtype=np.int64)
        target = np.zeros(size, dtype=np.int64)
        pos = np.full(size, start, dtype=np.int64)
        if kmax > 0 and adjacent[start]:
            K[:] = 0
            Ht[:] = 0
            active = np.empty(0, dtype=np.int64)
        else:
            target[:] = 1
            active = np.arange(size) if kmax > 1 else np.empty(0, dtype=np.int64)
        t = 0
        while active.size and t < horizon:
            t += 1
            p = eng.advance(pos[active], gen.random(active.size))
            pos[active] = p
            reach = eng.norms[p] == 3 * target[active]
            if reach.any():
                idx = active[reach]
                found = adjacent[p[reach]]
                K[idx[found]] = target[idx[found]]
                Ht[idx[found]] = t
                target[idx[~found]] += 1
                finished = np.zeros(active.size, dtype=bool)
                finished[reach] = found | (target[idx] >= kmax)
                active = active[~finished]
        c = np.zeros(size, dtype=bool)
        c[active] = True
        Ks.append(K)
        hs.append(Ht)
        cs.append(c)
    return np.concatenate(Ks), np.concatenate(hs), np.concatenate(cs)


# ---------------------------------------------------------------------------
# exact first-passage expectations


def _reachable(A: sparse.csr_matrix, start: int) -> np.ndarray:
    _, lab = connected_components(A, directed=True, connection="weak")
    return lab == lab[start]


def mean_hitting_time(field: ConductanceField, o: Sequence[int], r: int) -> float:
    """``E^o[H_r]`` by solving ``h = 1 + P h`` on B_{r-1} with ``h = 0`` on ∂B_r."""
    g = field.geometry
    if g.L <= r:
        raise ValueError("box radius must exceed r")
    k = TransitionKernel(field)
    inner = np.flatnonzero((g.norms < r) & (k.pi > 0))
    local = -np.ones(g.vertex_count, dtype=np.int64)
    local[inner] = np.arange(inner.size)
    nb = g.neighbors[inner]
    pr = k.probs[inner]
    rows = np.repeat(np.arange(inner.size), nb.shape[1])
    cols = local[np.where(nb >= 0, nb, 0)].ravel()
    vals = pr.ravel()
    keep = (cols >= 0) & (vals > 0) & (nb.ravel() >= 0)
    Q = sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(inner.size,) * 2)
    s = local[g.index(o)]
    if s < 0:
        raise ValueError("start must lie in B_{r-1} with π > 0")
    part = _reachable(Q, s)
    idx = np.flatnonzero(part)
    Qs = Q[idx][:, idx]
    A = sparse.identity(idx.size, format="csc") - Qs.tocsc()
    h = spsolve(A, np.ones(idx.size))
    return float(h[np.searchsorted(idx, s)])


def mean_coarse_exit(field: ConductanceField, xi: float, o: Sequence[int], r: int) -> float:
    """``E^o[τ̂_r]`` for the coarse-grained walk, by a linear solve with ``p_xi``."""
    s = HoleStructure(field, xi)
    g = field.geometry
    k = TransitionKernel(field)
    inner = np.flatnonzero(s.in_strong & (g.norms <= r))
    local = -np.ones(g.vertex_count, dtype=np.int64)
    local[inner] = np.arange(inner.size)
    rows, cols, vals = [], [], []
    for j, v in enumerate(inner):
        step = coarse_kernel(field, xi, g.coord(int(v)), s, k)
        for z, p in step.probs.items():
            lz = local[g.index(z)]
            if lz >= 0:
                rows.append(j)
                cols.append(lz)
                vals.append(p)
    Q = sparse.csr_matrix((vals, (rows, cols)), shape=(inner.size,) * 2)
    src = local[g.index(o)]
    if src < 0:
        raise ValueError("start must lie in C_xi ∩ B_r")
    part = _reachable(Q, src)
    idx = np.flatnonzero(part)
    A = sparse.identity(idx.size, format="csc") - Q[idx][:, idx].tocsc()
    h = spsolve(A, np.ones(idx.size))
    return float(h[np.searchsorted(idx, src)])
