"""Conductance laws, sampled environments and trap configurations.

A law is one of

* ``constant(v)``
* ``bernoulli(p, v)`` -- value ``v`` with probability ``p``, else 0
* ``lp(gamma)`` -- polynomial lower tail, CDF ``u**gamma`` on [0, 1]
* ``uniform(a, b)``
* ``histogram(breaks, masses)`` -- piecewise uniform between breakpoints

all supported on [0, 1].  Fields are sampled by inverse CDF from a
counter-based stream keyed by the seed, one draw per canonical edge.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from rcmwalk import rng
from rcmwalk.lattice import BoxGeometry, Coord, Edge, linf

DEFAULT_C_STRONG = 0.5


class LawError(ValueError):
    pass


class EnvironmentFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# laws


_TAGS = {"constant": 0, "bernoulli": 1, "lp": 2, "uniform": 3, "histogram": 4}
_PARAM_NAMES = {
    "constant": ("v",),
    "bernoulli": ("p", "v"),
    "lp": ("gamma",),
    "uniform": ("a", "b"),
}


@dataclass(frozen=True)
class LawSpec:
    """Distribution of a single conductance."""

    kind: str
    params: tuple[float, ...] = ()
    breaks: tuple[float, ...] = ()
    masses: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in _TAGS:
            raise LawError(f"unknown law {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        self._validate()

    # constructors

    @classmethod
    def constant(cls, v: float = 1.0) -> "LawSpec":
        return cls("constant", (v,))

    @classmethod
    def bernoulli(cls, p: float, v: float = 1.0) -> "LawSpec":
        return cls("bernoulli", (p, v))

    @classmethod
    def lp(cls, gamma: float) -> "LawSpec":
        return cls("lp", (gamma,))

    @classmethod
    def uniform(cls, a: float = 0.0, b: float = 1.0) -> "LawSpec":
        return cls("uniform", (a, b))

    @classmethod
    def histogram(cls, breaks: Sequence[float], masses: Sequence[float]) -> "LawSpec":
        return cls("histogram", (), tuple(float(b) for b in breaks), tuple(float(m) for m in masses))

    def _validate(self) -> None:
        k, p = self.kind, self.params
        if k == "histogram":
            b = np.asarray(self.breaks, dtype=float)
            m = np.asarray(self.masses, dtype=float)
            if len(b) < 2 or len(m) != len(b) - 1:
                raise LawError("histogram needs k+1 breakpoints and k masses")
            if b[0] < 0 or b[-1] > 1 or np.any(np.diff(b) <= 0):
                raise LawError("histogram breakpoints must increase strictly inside [0, 1]")
            if np.any(m < 0) or not math.isclose(m.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
                raise LawError("histogram masses must be nonnegative and sum to 1")
            return
        if len(p) != len(_PARAM_NAMES[k]):
            raise LawError(f"{k} takes parameters {_PARAM_NAMES[k]}")
        if not all(math.isfinite(x) for x in p):
            raise LawError("law parameters must be finite")
        if k == "constant" and not 0 <= p[0] <= 1:
            raise LawError("constant value must lie in [0, 1]")
        if k == "bernoulli":
            if not 0 <= p[0] <= 1:
                raise LawError("bernoulli p must lie in [0, 1]")
            if not 0 < p[1] <= 1:
                raise LawError("bernoulli v must lie in (0, 1]")
        if k == "lp" and not p[0] > 0:
            raise LawError("lp gamma must be > 0")
        if k == "uniform" and not 0 <= p[0] <= p[1] <= 1:
            raise LawError("uniform needs 0 <= a <= b <= 1")

    # text form

    @classmethod
    def parse(cls, text: str) -> "LawSpec":
        """Parse ``constant:v=1``, ``bernoulli:p=0.8,v=1``, ``lp:gamma=0.05``,
        ``uniform:a=0,b=1`` or ``histogram:breaks=0;0.5;1,masses=0.3;0.7``."""
        kind, _, rest = text.strip().partition(":")
        kind = kind.strip().lower()
        if kind not in _TAGS:
            raise LawError(f"unknown law {kind!r} in {text!r}")
        kv: dict[str, str] = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, val = item.partition("=")
            if not eq:
                raise LawError(f"expected key=value, got {item!r}")
            kv[key.strip().lower()] = val.strip()
        try:
            if kind == "histogram":
                unknown = set(kv) - {"breaks", "masses"}
                if unknown:
                    raise LawError(f"unknown histogram parameter(s) {sorted(unknown)}")
                breaks = [float(x) for x in kv["breaks"].split(";")]
                masses = [float(x) for x in kv["masses"].split(";")]
                return cls.histogram(breaks, masses)
            names = _PARAM_NAMES[kind]
            unknown = set(kv) - set(names)
            if unknown:
                raise LawError(f"unknown {kind} parameter(s) {sorted(unknown)}")
            defaults = {"v": "1", "a": "0", "b": "1"}
            return cls(kind, tuple(float(kv.get(n, defaults.get(n))) for n in names))
        except KeyError as exc:
            raise LawError(f"missing parameter {exc.args[0]!r} in {text!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, LawError):
                raise
            raise LawError(f"bad numeric parameter in {text!r}") from None

    def __str__(self) -> str:
        if self.kind == "histogram":
            b = ";".join(repr(x) for x in self.breaks)
            m = ";".join(repr(x) for x in self.masses)
            return f"histogram:breaks={b},masses={m}"
        args = ",".join(f"{n}={v!r}" for n, v in zip(_PARAM_NAMES[self.kind], self.params))
        return f"{self.kind}:{args}"

    # binary form: tag + flat float vector

    @property
    def tag(self) -> int:
        return _TAGS[self.kind]

    def flat_params(self) -> tuple[float, ...]:
        if self.kind == "histogram":
            return (float(len(self.masses)), *self.breaks, *self.masses)
        return self.params

    @classmethod
    def from_flat(cls, tag: int, params: Sequence[float]) -> "LawSpec":
        kinds = {v: k for k, v in _TAGS.items()}
        if tag not in kinds:
            raise LawError(f"unknown law tag {tag}")
        kind = kinds[tag]
        if kind == "histogram":
            k = int(params[0])
            return cls.histogram(params[1 : k + 2], params[k + 2 : 2 * k + 2])
        return cls(kind, tuple(params))

    # distribution functions

    def cdf(self, u, strict: bool = False) -> np.ndarray:
        """``P(ω <= u)``, or ``P(ω < u)`` when ``strict``."""
        u = np.asarray(u, dtype=float)
        le = np.less if strict else np.less_equal
        k, p = self.kind, self.params
        if k == "constant":
            return le(p[0], u).astype(float)
        if k == "bernoulli":
            return (1 - p[0]) * le(0.0, u) + p[0] * le(p[1], u)
        if k == "lp":
            return np.clip(u, 0.0, 1.0) ** p[0]
        if k == "uniform":
            a, b = p
            if a == b:
                return le(a, u).astype(float)
            return np.clip((u - a) / (b - a), 0.0, 1.0)
        b = np.asarray(self.breaks)
        cum = np.concatenate([[0.0], np.cumsum(self.masses)])
        return np.interp(u, b, cum, left=0.0, right=1.0)

    def prob_interval(self, lo, hi) -> np.ndarray:
        """``P(ω ∈ [lo, hi])``."""
        return self.cdf(hi) - self.cdf(lo, strict=True)

    def ppf(self, q) -> np.ndarray:
        """Inverse CDF on [0, 1); used for sampling."""
        q = np.asarray(q, dtype=float)
        k, p = self.kind, self.params
        if k == "constant":
            return np.full_like(q, p[0])
        if k == "bernoulli":
            return np.where(q < p[0], p[1], 0.0)
        if k == "lp":
            return q ** (1.0 / p[0])
        if k == "uniform":
            return p[0] + (p[1] - p[0]) * q
        b = np.asarray(self.breaks)
        m = np.asarray(self.masses)
        cum = np.cumsum(m)
        cum[-1] = 1.0
        j = np.minimum(np.searchsorted(cum, q, side="right"), len(m) - 1)
        lo = cum[j] - m[j]
        frac = np.divide(q - lo, m[j], out=np.zeros_like(q), where=m[j] > 0)
        return np.clip(b[j] + frac * (b[j + 1] - b[j]), 0.0, 1.0)

    @property
    def mean(self) -> float:
        k, p = self.kind, self.params
        if k == "constant":
            return p[0]
        if k == "bernoulli":
            return p[0] * p[1]
        if k == "lp":
            return p[0] / (p[0] + 1)
        if k == "uniform":
            return 0.5 * (p[0] + p[1])
        b = np.asarray(self.breaks)
        return float(np.sum(np.asarray(self.masses) * 0.5 * (b[:-1] + b[1:])))

    def prob_open(self, xi: float = 0.0) -> float:
        """``P(ω >= xi)``, or ``P(ω > 0)`` when ``xi == 0``."""
        if xi == 0:
            return float(1.0 - self.cdf(0.0))
        return float(1.0 - self.cdf(xi, strict=True))


# ---------------------------------------------------------------------------
# condition (C)


def tail_exponent(law: LawSpec, j_range: tuple[int, int] = (10, 20)) -> float:
    """Exponent of ``P(ω ∈ [u, 2u])`` as ``u -> 0`` (``log P / log u``).

    Analytic for laws where it is known in closed form; otherwise a least
    squares slope of ``log P(ω ∈ [u, 2u])`` against ``log u`` over
    ``u = 2**-j``, ``j`` in ``j_range``.  Returns ``math.inf`` when the law
    puts no mass in those windows (no support near 0).
    """
    k, p = law.kind, law.params
    if k == "lp":
        return p[0]
    if k in ("constant", "bernoulli"):
        return math.inf
    if k == "uniform":
        return 1.0 if p[0] == 0 and p[1] > 0 else math.inf
    j = np.arange(j_range[0], j_range[1] + 1, dtype=float)
    u = 2.0**-j
    mass = law.prob_interval(u, 2 * u)
    if np.any(mass <= 0):
        return math.inf
    slope = np.polyfit(np.log(u), np.log(mass), 1)[0]
    return float(slope)


@dataclass(frozen=True)
class ConditionC:
    satisfied: bool
    beta: float
    exponent: float
    weak_edges: int


def check_condition_C(law: LawSpec, d: int, alpha: float) -> ConditionC:
    """``(4d - 2) * tail_exponent(law) < alpha``, with margin ``beta``.

    ``beta = alpha - (4d - 2) * tail_exponent`` is the exponent of the
    stretched-exponential trap-avoidance bound; it is ``-inf`` for laws
    without mass near 0.
    """
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    w = 4 * d - 2
    gamma = tail_exponent(law)
    beta = alpha - w * gamma if math.isfinite(gamma) else -math.inf
    return ConditionC(bool(beta > 0), beta, gamma, w)


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class ConductanceField:
    """One conductance per canonical edge of a box, values in [0, 1]."""

    geometry: BoxGeometry
    values: np.ndarray
    law: LawSpec | None = None
    seed: int | None = None
    _cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (self.geometry.edge_count,):
            raise ValueError(f"expected {self.geometry.edge_count} edge values, got {v.shape}")
        if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("conductances must lie in [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, d: int, L: int, value: float = 1.0) -> "ConductanceField":
        g = BoxGeometry(d, L)
        return cls(g, np.full(g.edge_count, float(value)), LawSpec.constant(value))

    @property
    def d(self) -> int:
        return self.geometry.d

    @property
    def L(self) -> int:
        return self.geometry.L

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ConductanceField)
            and self.geometry == other.geometry
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]

    def with_values(self, updates: Mapping[Edge | int, float] | np.ndarray) -> "ConductanceField":
        """A new field with some or all edge values replaced."""
        if isinstance(updates, np.ndarray):
            return ConductanceField(self.geometry, updates, self.law, self.seed)
        v = self.values.copy()
        for key, val in updates.items():
            e = key if isinstance(key, (int, np.integer)) else self.geometry.edge_index(key)
            v[e] = val
        return ConductanceField(self.geometry, v, self.law, self.seed)

    def conductance(self, x: Sequence[int], y: Sequence[int]) -> float:
        """ω_xy, 0 for pairs that are not bonds of the box."""
        try:
            return float(self.values[self.geometry.edge_index(Edge.between(x, y))])
        except ValueError:
            return 0.0

    @property
    def by_direction(self) -> np.ndarray:
        """``(V, 2d)`` conductance per vertex and direction, 0 outside the box."""
        if "dir" not in self._cache:
            inc = self.geometry.incident
            out = np.where(inc >= 0, self.values[np.maximum(inc, 0)], 0.0)
            out.flags.writeable = False
            self._cache["dir"] = out
        return self._cache["dir"]

    @property
    def pi(self) -> np.ndarray:
        """Vertex weights π(x) = Σ_y ω_xy."""
        if "pi" not in self._cache:
            pi = self.by_direction.sum(axis=1)
            pi.flags.writeable = False
            self._cache["pi"] = pi
        return self._cache["pi"]


def _sample_chunk(law: LawSpec, seed: int, start: int, stop: int) -> np.ndarray:
    return law.ppf(rng.uniforms(seed, rng.FIELD, start, stop))


def sample_field(
    law: LawSpec, d: int, L: int, seed: int, *, workers: int = 1, chunk: int = 1 << 18
) -> ConductanceField:
    """Draw i.i.d. conductances from ``law`` in canonical edge order.

    Edge ``e`` always receives draw ``e`` of the stream keyed by ``seed``, so
    the result does not depend on ``workers`` or ``chunk``.
    """
    if L < 1:
        raise ValueError("box radius must be >= 1")
    g = BoxGeometry(d, L)
    E = g.edge_count
    bounds = [(s, min(s + chunk, E)) for s in range(0, E, chunk)] or [(0, 0)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda b: _sample_chunk(law, seed, *b), bounds))
    else:
        parts = [_sample_chunk(law, seed, *b) for b in bounds]
    return ConductanceField(g, np.concatenate(parts), law, seed)


# ---------------------------------------------------------------------------
# traps


@dataclass(frozen=True)
class TrapRecord:
    """A strong edge {y, z} whose 4d-2 other incident edges are weak."""

    strong_edge: Edge
    strong_index: int
    strong_value: float
    weak_edges: tuple[int, ...]
    weak_values: tuple[float, ...]
    n: int

    @property
    def endpoints(self) -> tuple[Coord, Coord]:
        return self.strong_edge.tail, self.strong_edge.head

    @property
    def radius(self) -> int:
        """Smallest ℓ∞ norm of the two endpoints."""
        return min(linf(self.strong_edge.tail), linf(self.strong_edge.head))


def _weak_edges(geometry: BoxGeometry, e: int) -> np.ndarray:
    """Edges other than ``e`` incident to its endpoints; raises if any leaves the box."""
    ends = (geometry.edge_tail[e], geometry.edge_head[e])
    inc = geometry.incident[list(ends)].ravel()
    if np.any(inc < 0):
        raise ValueError(f"trap at {geometry.edge(e)} has incident edges outside {geometry!r}")
    return np.sort(inc[inc != e])


def _edge_id(geometry: BoxGeometry, edge: Edge | int) -> int:
    if isinstance(edge, (int, np.integer)):
        if not 0 <= edge < geometry.edge_count:
            raise IndexError(edge)
        return int(edge)
    return geometry.edge_index(edge)


def plant_trap(
    field: ConductanceField,
    strong_edge: Edge | int,
    n: int,
    c_strong: float = DEFAULT_C_STRONG,
    rng_: np.random.Generator | int | None = None,
    *,
    weak: float | None = None,
) -> tuple[ConductanceField, TrapRecord]:
    """Force a trap at ``strong_edge`` and return the new field and its record.

    The strong edge is raised to ``max(current, c_strong)``; the other
    ``4d - 2`` edges at its endpoints are redrawn uniformly in ``[1/n, 2/n]``
    (or all set to ``weak``).  Nothing else changes.
    """
    d = field.d
    if n < 4 * d:
        raise ValueError(f"trap scale n must be >= 4d = {4 * d}")
    if not 0 < c_strong <= 1:
        raise ValueError("c_strong must lie in (0, 1]")
    g = field.geometry
    e = _edge_id(g, strong_edge)
    weak_ids = _weak_edges(g, e)
    if weak is not None:
        if not 1 / n <= weak <= 2 / n:
            raise ValueError("weak conductance must lie in [1/n, 2/n]")
        weak_vals = np.full(len(weak_ids), float(weak))
    else:
        gen = rng_ if isinstance(rng_, np.random.Generator) else rng.stream(rng_ or 0, rng.PLANT, e)
        weak_vals = (1.0 + gen.random(len(weak_ids))) / n
    v = field.values.copy()
    v[e] = max(v[e], c_strong)
    v[weak_ids] = weak_vals
    new = ConductanceField(g, v, field.law, field.seed)
    record = TrapRecord(g.edge(e), e, float(v[e]), tuple(int(i) for i in weak_ids), tuple(weak_vals.tolist()), n)
    return new, record


def detect_traps(field: ConductanceField, n: int, c_strong: float = DEFAULT_C_STRONG) -> list[TrapRecord]:
    """Every edge with ω_e >= c_strong whose other incident edges all lie in [1/n, 2/n].

    Only edges whose 4d-2 neighbouring edges are inside the box qualify.
    Records come out in canonical edge order.
    """
    g = field.geometry
    v = field.values
    lo, hi = 1.0 / n, 2.0 / n
    weak_edge = (v >= lo) & (v <= hi)
    inc = g.incident
    full = np.all(inc >= 0, axis=1)
    weak_count = np.where(inc >= 0, weak_edge[np.maximum(inc, 0)], False).sum(axis=1)
    t, h = g.edge_tail, g.edge_head
    need = 2 * g.d - 1 + weak_edge.astype(np.int64)
    ok = (v >= c_strong) & full[t] & full[h] & (weak_count[t] == need) & (weak_count[h] == need)
    out = []
    for e in np.flatnonzero(ok):
        w = _weak_edges(g, int(e))
        out.append(TrapRecord(g.edge(int(e)), int(e), float(v[e]), tuple(int(i) for i in w), tuple(v[w].tolist()), n))
    return out


def trap_adjacent_mask(
    field: ConductanceField,
    n: int,
    c_strong: float = DEFAULT_C_STRONG,
    traps: Sequence[TrapRecord] | None = None,
) -> np.ndarray:
    """Boolean per vertex: the event that x neighbours a trap lying outside B_{|x|∞}."""
    g = field.geometry
    if traps is None:
        traps = detect_traps(field, n, c_strong)
    # best[v]: largest "inner radius" of a trap with an endpoint adjacent to v
    best = np.full(g.vertex_count, -1, dtype=np.int64)
    for t in traps:
        rad = t.radius
        for end in t.endpoints:
            nb = g.neighbors[g.index(end)]
            nb = nb[nb >= 0]
            best[nb] = np.maximum(best[nb], rad)
    return best > g.norms


def is_trap_adjacent(
    field: ConductanceField,
    x: Sequence[int],
    n: int,
    c_strong: float = DEFAULT_C_STRONG,
    traps: Sequence[TrapRecord] | None = None,
) -> bool:
    """True iff some trap has an endpoint adjacent to ``x`` and both endpoints
    have ℓ∞ norm larger than ``|x|∞``."""
    if traps is None:
        traps = detect_traps(field, n, c_strong)
    r = linf(x)
    x = tuple(x)
    for t in traps:
        if t.radius <= r:
            continue
        for end in t.endpoints:
            if sum(abs(a - b) for a, b in zip(end, x)) == 1:
                return True
    return False


# ---------------------------------------------------------------------------
# environment files

MAGIC = b"RCM1"
VERSION = 1


def write_field(path: str | Path, field: ConductanceField) -> None:
    """Write ``field`` in the little-endian ``RCM1`` binary format."""
    law = field.law or LawSpec.constant(0.0)
    params = law.flat_params()
    header = MAGIC + struct.pack("<IIIII", VERSION, field.d, field.L, law.tag, len(params))
    header += struct.pack(f"<{len(params)}d", *params)
    header += struct.pack("<Q", field.seed or 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.values.astype("<f8").tobytes())


def read_field(path: str | Path) -> ConductanceField:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise EnvironmentFileError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, d, L, tag, npar = struct.unpack_from("<IIIII", data, 4)
    except struct.error:
        raise EnvironmentFileError(f"{path}: truncated header") from None
    if version != VERSION:
        raise EnvironmentFileError(f"{path}: unsupported version {version}")
    off = 24
    try:
        params = struct.unpack_from(f"<{npar}d", data, off)
        off += 8 * npar
        (seed,) = struct.unpack_from("<Q", data, off)
        off += 8
        law = LawSpec.from_flat(tag, params)
    except (struct.error, LawError, IndexError) as exc:
        raise EnvironmentFileError(f"{path}: corrupt header ({exc})") from None
    g = BoxGeometry(d, L)
    body = np.frombuffer(data, dtype="<f8", offset=off)
    if body.size != g.edge_count:
        raise EnvironmentFileError(f"{path}: expected {g.edge_count} edge values, found {body.size}")
    return ConductanceField(g, body.astype(np.float64), law, seed)
