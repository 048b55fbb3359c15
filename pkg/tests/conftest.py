"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the package's own graph machinery:
components come from a plain BFS over coordinate tuples and hidden sets from
literal set algebra, so agreement with the implementation is meaningful.
"""

from __future__ import annotations

from collections import deque
from itertools import product

import numpy as np
import pytest
from hypothesis import settings

from rcmwalk.environment import ConductanceField, LawSpec, sample_field
from rcmwalk.lattice import BoxGeometry, Edge

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def nbrs(x):
    for axis in range(len(x)):
        for s in (-1, 1):
            y = list(x)
            y[axis] += s
            yield tuple(y)


def inside(x, L):
    return all(-L <= c <= L for c in x)


def omega(field: ConductanceField, x, y) -> float:
    """Conductance looked up by brute force through the edge definition."""
    if not (inside(x, field.L) and inside(y, field.L)):
        return 0.0
    return field.conductance(x, y)


def bfs_components(field: ConductanceField, is_open) -> list[set]:
    """Components (as coordinate sets) of the graph of edges with ``is_open(ω)``.

    Vertices with no open edge are omitted.
    """
    L, d = field.L, field.d
    seen: set = set()
    comps = []
    for x in product(range(-L, L + 1), repeat=d):
        if x in seen:
            continue
        if not any(is_open(omega(field, x, y)) for y in nbrs(x) if inside(y, L)):
            continue
        comp = {x}
        seen.add(x)
        q = deque([x])
        while q:
            v = q.popleft()
            for y in nbrs(v):
                if inside(y, L) and y not in seen and is_open(omega(field, v, y)):
                    seen.add(y)
                    comp.add(y)
                    q.append(y)
        comps.append(comp)
    return comps


def oracle_strong(comps: list[set], geometry: BoxGeometry) -> set:
    """Largest component, ties to the one holding the smallest vertex index."""
    return max(comps, key=lambda c: (len(c), -min(geometry.index(v) for v in c)))


def oracle_hidden_set(field: ConductanceField, xi: float, x) -> set:
    """G_x built straight from the definitions with BFS components."""
    g = field.geometry
    strong = oracle_strong(bfs_components(field, lambda w: w >= xi), g)
    positive = bfs_components(field, lambda w: w > 0)
    C = next(c for c in positive if strong <= c)
    weak = C - strong
    # components of C minus C_xi, using positive edges inside the weak set
    holes: dict = {}
    for v in weak:
        if v in holes:
            continue
        comp = {v}
        q = deque([v])
        while q:
            a = q.popleft()
            for b in nbrs(a):
                if b in weak and b not in comp and omega(field, a, b) > 0:
                    comp.add(b)
                    q.append(b)
        fz = frozenset(comp)
        for a in comp:
            holes[a] = fz

    def H(y):
        return holes.get(y, frozenset())

    def F_prime(v):
        out = {v}
        for y in nbrs(v):
            if omega(field, v, y) > 0:
                out |= H(y)
        return out

    G = F_prime(x)
    for y in nbrs(x):
        if y in strong:
            G |= F_prime(y)
    return G


def path_field(weights) -> ConductanceField:
    """A d=1 field on B_L, L = len(weights), with given bonds around the origin.

    ``weights[j]`` is placed on the bond ``{j - m, j - m + 1}`` with
    ``m = len(weights) // 2``; all other bonds are 0.
    """
    L = len(weights) + 1
    f = ConductanceField(BoxGeometry(1, L), np.zeros(2 * L))
    m = len(weights) // 2
    return f.with_values({Edge((j - m,), 0): w for j, w in enumerate(weights)})


@pytest.fixture
def const2():
    return ConductanceField.constant(2, 6, 1.0)


@pytest.fixture
def lp_field():
    return sample_field(LawSpec.lp(0.3), 2, 8, seed=11)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per ``@pytest.mark.criterion(k)``

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number k")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _criteria.setdefault(mark.args[0], {"ok": True, "notes": []})
    entry["ok"] &= not rep.failed
    if rep.when == "call":
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        e = _criteria[k]
        line = f"criterion {k}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["notes"]:
            line += "  (" + "; ".join(e["notes"]) + ")"
        terminalreporter.write_line(line)
