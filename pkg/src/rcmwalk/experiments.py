"""Scenario runners: decay exponents, exit-time scaling, trap encounters and
the trap mechanism behind the anomalous lower bound.

Each runner takes an :class:`ExperimentConfig` and returns a result object
with CSV-ready ``rows``, a ``summary`` dict for the manifest and a dict of
hard ``invariants`` (name -> held).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from rcmwalk import rng
from rcmwalk.environment import (
    ConductanceField,
    LawSpec,
    TrapRecord,
    plant_trap,
    read_field,
    sample_field,
    trap_adjacent_mask,
)
from rcmwalk.kernel import DistributionVector, TransitionKernel, cs_terms, full_sum, return_series
from rcmwalk.lattice import Edge, annulus_size
from rcmwalk.percolation import HoleStructure, clusters
from rcmwalk.walk import (
    WalkEngine,
    confinement_probability,
    exit_sample,
    trap_ranks,
)

KINDS = ("decay", "exit", "traps", "xinb", "alb")


class ConfigError(ValueError):
    pass


class ConditioningError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    d: int = 2
    law: LawSpec = LawSpec.constant(1.0)
    seed: int = 0
    n_grid: tuple[int, ...] = (16, 32, 64, 128, 256)
    radii: tuple[int, ...] = (8, 16, 32, 64)
    xi: float = 0.5
    alpha: float = 0.4
    n: int = 200
    c_strong: float = 0.5
    replicas: int = 1000
    envs: int = 1
    trap_radius: int = 4
    weak: float | None = None
    weak_scale: int | None = None
    cap: int = 10**7
    margin: int = 16
    max_attempts: int = 10**4
    env_file: str | None = None
    threads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown experiment {self.kind!r}; choose from {KINDS}")
        if self.d < 1:
            raise ConfigError("d: dimension must be >= 1")
        for name in ("n_grid", "radii"):
            grid = getattr(self, name)
            if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
                raise ConfigError(f"{name}: must be a strictly increasing list of positive integers")
        if self.kind in ("traps", "xinb", "alb") and not 0 < self.alpha < 0.5:
            raise ConfigError("alpha: must lie in (0, 1/2)")
        if self.replicas < 1 or self.envs < 1:
            raise ConfigError("replicas/envs: must be >= 1")
        if self.xi < 0:
            raise ConfigError("xi: must be >= 0")
        if not 0 < self.c_strong <= 1:
            raise ConfigError("c_strong: must lie in (0, 1]")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["law"] = str(self.law)
        return out


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    stderr: float
    x_range: tuple[float, float]
    points: int


def loglog_fit(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    """Least squares of ``log y`` on ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    fit = stats.linregress(np.log(x), np.log(y))
    se = float(fit.stderr) if x.size > 2 else 0.0
    return RegressionResult(float(fit.slope), float(fit.intercept), se, (float(x.min()), float(x.max())), int(x.size))


@dataclass
class ExperimentResult:
    kind: str
    header: tuple[str, ...]
    rows: list[tuple]
    summary: dict
    invariants: dict[str, bool] = dc_field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.invariants.values())

    def failed(self) -> list[str]:
        return [k for k, v in self.invariants.items() if not v]


# ---------------------------------------------------------------------------
# environments


def _origin(d: int) -> tuple[int, ...]:
    return (0,) * d


def conditioned_field(
    cfg: ExperimentConfig, env: int, L: int, xi: float = 0.0
) -> tuple[ConductanceField, int, int]:
    """Sample environment ``env`` until the origin lies in the largest
    component at threshold ``xi``.  Returns ``(field, seed, attempts)``."""
    o = _origin(cfg.d)
    if cfg.env_file:
        f = read_field(cfg.env_file)
        if f.d != cfg.d:
            raise ConfigError(f"d: config says {cfg.d} but {cfg.env_file} has d={f.d}")
        lab = clusters(f, xi)
        if not lab.count or lab.label_of(o) != lab.strong:
            raise ConditioningError(f"origin is not in the strong cluster of {cfg.env_file}")
        return f, f.seed or 0, 1
    for attempt in range(cfg.max_attempts):
        s = rng.derive_seed(cfg.seed, env, attempt)
        f = sample_field(cfg.law, cfg.d, L, s)
        lab = clusters(f, xi)
        if lab.count and lab.label_of(o) == lab.strong:
            return f, s, attempt + 1
    raise ConditioningError(f"origin not in the strong cluster after {cfg.max_attempts} draws")


def _fan_out(fn: Callable[[int], object], count: int, threads: int) -> list:
    if threads > 1 and count > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, range(count)))
    return [fn(i) for i in range(count)]


# ---------------------------------------------------------------------------
# decay exponent


def decay_exponent(cfg: ExperimentConfig) -> ExperimentResult:
    """Slope of ``log P^{2n}(o,o)`` against ``log n`` over ``cfg.n_grid``."""
    grid = np.array(cfg.n_grid)
    n_max = int(grid[-1])
    L = 2 * n_max + 1
    o = _origin(cfg.d)
    envs = 1 if cfg.env_file else cfg.envs

    def one(i: int):
        f, s, tries = conditioned_field(cfg, i, L, 0.0)
        series = return_series(f, o, n_max)
        monotone = bool(np.all(np.diff(series) <= 1e-14 * series[:-1]))
        p = series[grid - 1]
        return i, s, tries, p, loglog_fit(grid, p), monotone

    per_env = _fan_out(one, envs, cfg.threads)
    slopes = np.array([r[4].slope for r in per_env])
    mean_p = np.mean([r[3] for r in per_env], axis=0)
    averaged = loglog_fit(grid, mean_p)
    rows = []
    for i, s, _, p, _, _ in per_env:
        for n, v in zip(grid, p):
            rows.append((i, s, int(n), float(v), math.log(n), math.log(v)))
    summary = {
        "median_slope": float(np.median(slopes)),
        "slopes": slopes.tolist(),
        "stderrs": [r[4].stderr for r in per_env],
        "averaged_slope": averaged.slope,
        "averaged_stderr": averaged.stderr,
        "normal_slope": -cfg.d / 2,
        "attempts": [r[2] for r in per_env],
    }
    inv = {"even_return_monotone": all(r[5] for r in per_env)}
    return ExperimentResult("decay", ("env", "env_seed", "n", "p2n", "log_n", "log_p"), rows, summary, inv)


# ---------------------------------------------------------------------------
# exit-time scaling


def exit_scaling(cfg: ExperimentConfig) -> ExperimentResult:
    """Mean coarse exit index ``τ̂_r`` and hitting time ``H_r`` against ``r``."""
    radii = np.array(cfg.radii)
    L = int(radii[-1]) + cfg.margin
    o = _origin(cfg.d)
    envs = 1 if cfg.env_file else cfg.envs

    def one(i: int):
        f, s, _ = conditioned_field(cfg, i, L, cfg.xi)
        hs = HoleStructure(f, cfg.xi)
        sample = exit_sample(
            f, o, radii, rng.derive_seed(s, 1), cfg.replicas, strong=hs.in_strong, cap=cfg.cap, engine=WalkEngine(f)
        )
        ok = ~sample.censored
        H = sample.H[ok].astype(float)
        tau = sample.tau_hat[ok].astype(float)
        tt = sample.tau_time[ok]
        chain = bool(np.all(sample.H[ok] <= tt))
        hidden = [hs.max_hidden_size(int(r)) for r in radii]
        return i, s, H, tau, tt, chain, float(sample.censored.mean()), hidden

    per_env = _fan_out(one, envs, cfg.threads)
    rows = []
    tau_slopes, h_slopes, se_tau, se_h = [], [], [], []
    censored = []
    for i, s, H, tau, tt, _, cf, hidden in per_env:
        censored.append(cf)
        mH, mT = H.mean(axis=0), tau.mean(axis=0)
        sH = H.std(axis=0, ddof=1) / math.sqrt(len(H)) if len(H) > 1 else np.zeros_like(mH)
        sT = tau.std(axis=0, ddof=1) / math.sqrt(len(tau)) if len(tau) > 1 else np.zeros_like(mT)
        mt = tt.mean(axis=0)
        for j, r in enumerate(radii):
            rows.append((i, s, int(r), mH[j], sH[j], mT[j], sT[j], mt[j], hidden[j], cf))
        th, ft = loglog_fit(radii, mH), loglog_fit(radii, mT)
        h_slopes.append(th.slope)
        tau_slopes.append(ft.slope)
        se_h.append(th.stderr)
        se_tau.append(ft.stderr)
    summary = {
        "tau_hat_slopes": tau_slopes,
        "tau_hat_stderrs": se_tau,
        "H_slopes": h_slopes,
        "H_stderrs": se_h,
        "median_tau_hat_slope": float(np.median(tau_slopes)),
        "median_H_slope": float(np.median(h_slopes)),
        "censored_fraction": censored,
        "flagged": any(c > 0.1 for c in censored),
    }
    inv = {"H_r_le_coarse_exit_time": all(r[5] for r in per_env)}
    header = ("env", "env_seed", "r", "mean_H", "se_H", "mean_tau_hat", "se_tau_hat", "mean_tau_time", "max_hidden", "censored_fraction")
    return ExperimentResult("exit", header, rows, summary, inv)


# ---------------------------------------------------------------------------
# trap encounters


def trap_rank_count(n: int, alpha: float) -> int:
    """``floor(n**alpha / 3)``: ranks ``k = 0, ..., floor(r/3) - 1`` with ``r = n**alpha``."""
    return int(math.floor(n**alpha / 3 + 1e-12))


def trap_encounter(
    cfg: ExperimentConfig, fields: Sequence[ConductanceField] | None = None
) -> ExperimentResult:
    """Empirical ``P(K < ∞)`` for each trap scale in ``cfg.n_grid``.

    ``fields`` replaces the sampled environments (used for planted fixtures).
    """
    w = 4 * cfg.d - 2
    rows, freqs, xs = [], [], []
    per_rank: dict[int, list[float]] = {}
    for n in cfg.n_grid:
        kmax = trap_rank_count(n, cfg.alpha)
        L = 3 * kmax + 4
        found = total = censored = 0
        rank_hits = np.zeros(max(kmax, 1), dtype=np.int64)
        env_list = fields if fields is not None else None
        count = len(env_list) if env_list is not None else cfg.envs
        for i in range(count):
            if env_list is not None:
                f, s = env_list[i], rng.derive_seed(cfg.seed, n, i)
            else:
                f, s, _ = conditioned_field(replace(cfg, seed=rng.derive_seed(cfg.seed, n)), i, L, 0.0)
            if kmax == 0:
                total += cfg.replicas
                continue
            adj = trap_adjacent_mask(f, n, cfg.c_strong)
            K, _, cens = trap_ranks(f, kmax, adj, rng.derive_seed(s, 2), cfg.replicas, horizon=cfg.cap)
            ok = ~cens
            censored += int(cens.sum())
            total += int(ok.sum())
            found += int((K[ok] >= 0).sum())
            rank_hits += np.bincount(K[ok & (K >= 0)], minlength=len(rank_hits))[: len(rank_hits)]
        freq = found / total if total else 0.0
        se = math.sqrt(freq * (1 - freq) / total) if total else 0.0
        q = float(cfg.law.prob_interval(1.0 / n, 2.0 / n))
        x = n**cfg.alpha * q**w
        freqs.append(freq)
        xs.append(x)
        per_rank[n] = (rank_hits / total).tolist() if total else []
        rows.append([n, kmax, total, censored, freq, se, q, x])
    xs_a, fr_a = np.array(xs), np.array(freqs)
    if np.any(fr_a > 0) and np.any(xs_a > 0):
        res = optimize.minimize_scalar(
            lambda c: float(np.sum((fr_a - (1 - np.exp(-c * xs_a))) ** 2)),
            bounds=(0.0, 1e3 / max(xs_a.max(), 1e-300)),
            method="bounded",
        )
        c_fit = float(res.x)
    else:
        c_fit = 0.0
    for row in rows:
        row.append(1 - math.exp(-c_fit * row[7]))
    se = np.array([r[5] for r in rows])
    nondecreasing = bool(np.all(np.diff(fr_a) >= -3 * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)))
    summary = {
        "frequencies": freqs,
        "per_rank": per_rank,
        "fitted_c": c_fit,
        "nondecreasing_within_3sigma": nondecreasing,
        "all_zero": bool(not np.any(fr_a > 0)),
    }
    header = ("n", "ranks", "walks", "censored", "freq_K_finite", "se", "p_weak", "n_alpha_p_weak_pow", "predicted")
    inv = {"frequencies_in_unit_interval": bool(np.all((fr_a >= 0) & (fr_a <= 1)))}
    return ExperimentResult("traps", header, [tuple(r) for r in rows], summary, inv)


def ring_trap_fixture(d: int, L: int, n: int, radius: int = 3, c_strong: float = 0.5, seed: int = 0) -> ConductanceField:
    """Constant-1 field with a radial trap outside every point of ∂B_radius (d = 2).

    Every site ``x`` with ``|x|∞ = radius`` gets a neighbour that is the inner
    endpoint of a trap edge pointing outwards.
    """
    if d != 2:
        raise ValueError("ring fixture is two-dimensional")
    f = ConductanceField.constant(d, L, 1.0)
    R = radius + 1
    tails = []
    for j in range(-radius, radius + 1):
        tails += [((R, j), 0, +1), ((-R, j), 0, -1), ((j, R), 1, +1), ((j, -R), 1, -1)]
    for start, axis, sign in tails:
        end = list(start)
        end[axis] += sign
        edge = Edge.between(start, tuple(end))
        f, _ = plant_trap(f, edge, n, c_strong, seed)
    return f


# ---------------------------------------------------------------------------
# trap mechanism


def planted_fixture(cfg: ExperimentConfig, L: int) -> tuple[ConductanceField, TrapRecord, int]:
    """Base environment with one trap whose strong edge runs from
    ``(trap_radius, 0, ..)`` outwards along the first axis."""
    d = cfg.d
    if cfg.law.kind == "constant":
        base = ConductanceField.constant(d, L, cfg.law.params[0])
        s = cfg.seed
    else:
        base, s, _ = conditioned_field(cfg, 0, L, 0.0)
    scale = cfg.weak_scale or cfg.n
    tail = (cfg.trap_radius,) + (0,) * (d - 1)
    f, trap = plant_trap(base, Edge(tail, 0), scale, cfg.c_strong, rng.stream(s, rng.PLANT, 0), weak=cfg.weak)
    return f, trap, s


def _trap_annulus(trap: TrapRecord) -> int:
    return (trap.radius - 1) // 3


def xinb_check(cfg: ExperimentConfig, field: ConductanceField | None = None, trap: TrapRecord | None = None) -> ExperimentResult:
    """Exact annulus mass at the trap's annulus against the explicit lower bound

    ``(e^{-(4d-2)}/2) * (1/(2d)) * (1/n) * q``, with ``q`` the measured
    ``P(H_{3K} < n, K < ∞)``.  A field without traps gives a vacuous check.
    """
    d, n = cfg.d, cfg.n
    w = 4 * d - 2
    o = _origin(d)
    L = n + 1
    if field is None:
        field, trap, s = planted_fixture(cfg, L)
    else:
        s = cfg.seed
    kmax = trap_rank_count(n, cfg.alpha)
    adj = trap_adjacent_mask(field, n, cfg.c_strong)
    K, Ht, _ = trap_ranks(field, kmax, adj, rng.derive_seed(s, 3), cfg.replicas, horizon=n - 1)
    q_hat = float(np.mean((K >= 0) & (Ht < n)))
    kernel = TransitionKernel(field)
    dist = kernel.evolve(DistributionVector.point(field.geometry, o), n)
    masses = dist.annulus_masses(max(kmax, 1) + 2)
    conf_bound = (1 - w / n) ** n
    e_bound = math.exp(-w) / 2
    entry = 1 / (2 * d * n)
    factors = {
        "q_hat": q_hat,
        "confinement_bound_(1-(4d-2)/n)^n": conf_bound,
        "e^-(4d-2)/2": e_bound,
        "entry_1/(2dn)": entry,
    }
    if trap is None:
        summary = {**factors, "vacuous": True, "kmax": kmax}
        rows = [(k, float(m)) for k, m in enumerate(masses)]
        inv = {"lower_bound_vacuous": q_hat == 0.0}
        return ExperimentResult("xinb", ("k", "annulus_mass"), rows, summary, inv)
    k_trap = _trap_annulus(trap)
    conf = confinement_probability(field, trap, n)
    y = field.geometry.index(trap.endpoints[0])
    entry_actual = [
        float(kernel.probs[x, dirn])
        for x in np.flatnonzero(adj)
        for dirn, nb in enumerate(field.geometry.neighbors[x])
        if nb == y
    ]
    lower = e_bound * entry * q_hat
    mass_k = float(masses[k_trap])
    factors.update(
        {
            "confinement_exact": conf,
            "entry_min_actual": min(entry_actual) if entry_actual else math.nan,
            "annulus_mass": mass_k,
            "lower_bound": lower,
            "trap_annulus": k_trap,
            "kmax": kmax,
            "K_reachable": k_trap < kmax,
        }
    )
    inv = {
        "confinement_ge_(1-(4d-2)/n)^n": conf >= conf_bound,
        "confinement_bound_ge_e^-(4d-2)/2": conf_bound >= e_bound,
        "annulus_mass_ge_lower_bound": mass_k >= lower,
    }
    rows = [(k, float(m)) for k, m in enumerate(masses)]
    return ExperimentResult("xinb", ("k", "annulus_mass"), rows, factors, inv)


def alb_mechanism(cfg: ExperimentConfig, field: ConductanceField | None = None, trap: TrapRecord | None = None) -> ExperimentResult:
    """The Cauchy–Schwarz chain ``P^{2n}(o,o) >= Σ_k terms >= term at K``.

    Also reports ``π(o) n^{-α(d-1)} P(X_n ∈ B°_K)^2`` and the ratio
    ``P^{2n}(o,o) n^{2+α(d-1)} / π(o)``.
    """
    d, n, a = cfg.d, cfg.n, cfg.alpha
    o = _origin(d)
    L = 2 * n
    if field is None:
        field, trap, _ = planted_fixture(cfg, L)
    if field.L < 2 * n:
        raise ValueError(f"alb needs box radius >= 2n = {2 * n}")
    r = n**a
    kmax = trap_rank_count(n, a)
    kernel = TransitionKernel(field)
    gi = field.geometry.index(o)
    pi_o = float(field.pi[gi])
    dist_n = kernel.evolve(DistributionVector.point(field.geometry, o), n)
    dist_2n = kernel.evolve(dist_n, n)
    p2n = float(dist_2n.mass[gi])
    terms = cs_terms(dist_n, pi_o, int(math.floor(r + 1e-12)))
    cs = float(terms.sum())
    K = _trap_annulus(trap) if trap is not None else None
    if K is not None and K < kmax:
        single = float(terms[K])
        mass_K = float(dist_n.annulus_masses(K + 1)[K])
    else:
        single, mass_K = 0.0, 0.0
    identity = full_sum(dist_n, field.pi, o)
    summary = {
        "p2n": p2n,
        "cs_lower_bound": cs,
        "single_annulus_term": single,
        "K": K if K is not None and K < kmax else "inf",
        "annulus_mass_K": mass_K,
        "chained_bound_c1": pi_o * n ** (-a * (d - 1)) * mass_K**2,
        "annulus_size_K": annulus_size(d, K) if K is not None else 0,
        "ratio_p2n_n_pow": p2n * n ** (2 + a * (d - 1)) / pi_o,
        "full_sum_identity_residual": abs(identity - p2n),
        "pi_o": pi_o,
    }
    inv = {
        "p2n_ge_cs_lower_bound": p2n >= cs,
        "cs_lower_bound_ge_single_term": cs >= single,
        "full_sum_identity": abs(identity - p2n) <= 1e-12,
    }
    rows = [(k, float(t)) for k, t in enumerate(terms)]
    return ExperimentResult("alb", ("k", "cs_term"), rows, summary, inv)


RUNNERS: dict[str, Callable[[ExperimentConfig], ExperimentResult]] = {
    "decay": decay_exponent,
    "exit": exit_scaling,
    "traps": trap_encounter,
    "xinb": xinb_check,
    "alb": alb_mechanism,
}


def run(cfg: ExperimentConfig) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg)
