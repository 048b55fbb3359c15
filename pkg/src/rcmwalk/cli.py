"""Command line entry point: ``rcmwalk <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 invariant
violation.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Sequence

from rcmwalk.environment import (
    EnvironmentFileError,
    LawError,
    LawSpec,
    detect_traps,
    read_field,
    sample_field,
    trap_adjacent_mask,
    write_field,
)
from rcmwalk.experiments import ConditioningError, ConfigError, ExperimentConfig, KINDS, run
from rcmwalk.kernel import DistributionVector, TransitionKernel, return_series
from rcmwalk.output import config_hash, write_csv, write_manifest
from rcmwalk.percolation import HoleStructure, clusters
from rcmwalk.walk import BoxExit, exit_sample

log = logging.getLogger("rcmwalk")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4


class InvariantViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config resolution

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_HINTS = typing.get_type_hints(ExperimentConfig)


def _coerce(key: str, raw: str) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown configuration key")
    hint = _HINTS[key]
    text = raw.strip()
    try:
        if hint is LawSpec:
            return LawSpec.parse(text)
        if typing.get_origin(hint) is tuple:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        optional = type(None) in typing.get_args(hint)
        if optional and text.lower() in ("", "none"):
            return None
        base = next((t for t in typing.get_args(hint) if t is not type(None)), hint)
        if base is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if base is float:
            return float(text)
        return text
    except (ValueError, LawError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def load_config_file(path: str | Path, kind: str | None) -> tuple[str, dict[str, Any]]:
    """Read one section of an INI-style config; the section name is the kind."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    sections = parser.sections()
    if kind is None:
        if len(sections) != 1:
            raise ConfigError(f"kind: {path} has sections {sections}; pass --kind")
        kind = sections[0]
    if kind not in sections:
        raise ConfigError(f"kind: no [{kind}] section in {path}")
    values = {k: _coerce(k, v) for k, v in parser.items(kind)}
    return kind, values


def resolve_config(
    path: str | None, kind: str | None, flags: dict[str, str | None], sets: Sequence[str]
) -> ExperimentConfig:
    """Defaults < config file < command line flags (``--set`` included)."""
    values: dict[str, Any] = {}
    if path:
        kind, values = load_config_file(path, kind)
    for item in sets:
        key, eq, val = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _coerce(key.strip(), val)
    for key, val in flags.items():
        if val is not None:
            values[key] = _coerce(key, str(val))
    if kind is None:
        raise ConfigError("kind: no experiment kind given")
    values.pop("kind", None)
    return ExperimentConfig(kind=kind, **values)


# ---------------------------------------------------------------------------
# subcommands


def _coord(text: str | None, d: int) -> tuple[int, ...]:
    if not text:
        return (0,) * d
    c = tuple(int(v) for v in text.split(","))
    if len(c) != d:
        raise ConfigError(f"start: expected {d} coordinates, got {text!r}")
    return c


def cmd_gen(args) -> int:
    law = LawSpec.parse(args.law)
    f = sample_field(law, args.dim, args.radius, args.seed, workers=args.threads)
    write_field(args.out, f)
    print(f"wrote {args.out}: d={f.d} L={f.L} edges={f.geometry.edge_count} law={law} seed={args.seed}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    f = read_field(args.env)
    v = f.values
    print(f"d={f.d} L={f.L} vertices={f.geometry.vertex_count} edges={v.size}")
    print(f"law={f.law} seed={f.seed}")
    print(f"conductance min={v.min():.17g} max={v.max():.17g} mean={v.mean():.17g}")
    for xi in (0.0, args.xi):
        lab = clusters(f, xi)
        biggest = int(lab.sizes[lab.strong]) if lab.count else 0
        print(f"xi={xi:g}: clusters={lab.count} largest={biggest} isolated={int((lab.labels < 0).sum())}")
    return EXIT_OK


def cmd_clusters(args) -> int:
    f = read_field(args.env)
    lab = clusters(f, args.xi)
    header = ("xi", "component_id", "size", "touches_boundary")
    if args.out:
        write_csv(args.out, header, lab.rows())
    else:
        print(",".join(header))
        for row in lab.rows():
            print(",".join(str(int(x)) if isinstance(x, bool) else str(x) for x in row))
    return EXIT_OK


def cmd_kernel(args) -> int:
    f = read_field(args.env)
    o = _coord(args.start, f.d)
    series = return_series(f, o, args.n_max)
    write_csv(args.out, ("n", "p2n"), ((n + 1, p) for n, p in enumerate(series)))
    if args.annulus_out:
        k = TransitionKernel(f)
        dist = DistributionVector.point(f.geometry, o)
        rows = []
        for n in range(1, args.n_max + 1):
            dist = k.evolve(dist, 1)
            m = dist.annulus_masses(args.kmax)
            rows += [(n, kk, float(x)) for kk, x in enumerate(m)]
        write_csv(args.annulus_out, ("n", "k", "mass"), rows)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_walk(args) -> int:
    f = read_field(args.env)
    o = (0,) * f.d
    radii = tuple(int(r) for r in args.radii.split(","))
    strong = HoleStructure(f, args.xi).in_strong if args.xi > 0 else None
    adjacent, kmax = None, 0
    if args.trap_n:
        from rcmwalk.experiments import trap_rank_count

        adjacent = trap_adjacent_mask(f, args.trap_n, args.c_strong)
        kmax = trap_rank_count(args.trap_n, args.alpha)
    s = exit_sample(f, o, radii, args.seed, args.replicas, strong=strong, cap=args.cap, adjacent=adjacent, kmax=kmax)
    header = ["replica", "n_steps"] + [f"H_{r}" for r in radii] + [f"tau_hat_{r}" for r in radii] + ["K", "censored"]
    rows = []
    for i in range(args.replicas):
        K = "inf" if s.K[i] < 0 else int(s.K[i])
        rows.append([i, s.steps[i], *s.H[i], *s.tau_hat[i], K, bool(s.censored[i])])
    write_csv(args.out, header, rows)
    print(f"wrote {args.out}: {args.replicas} replicas, censored={int(s.censored.sum())}")
    return EXIT_OK


def cmd_traps(args) -> int:
    f = read_field(args.env)
    traps = detect_traps(f, args.n, args.c_strong)
    rows = [(t.strong_index, *t.strong_edge.tail, t.strong_edge.axis, t.strong_value, min(t.weak_values), max(t.weak_values)) for t in traps]
    header = ["edge_index", *[f"x{i}" for i in range(f.d)], "axis", "strong", "weak_min", "weak_max"]
    if args.out:
        write_csv(args.out, header, rows)
    print(f"{len(traps)} trap(s) at scale n={args.n}, c_strong={args.c_strong}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    flags = {
        "seed": args.seed,
        "d": args.dim,
        "law": args.law,
        "replicas": args.replicas,
        "envs": args.envs,
        "alpha": args.alpha,
        "xi": args.xi,
        "n": args.n,
        "threads": args.threads,
        "env_file": args.env,
    }
    cfg = resolve_config(args.config, args.kind, flags, args.set or [])
    if cfg.env_file and not Path(cfg.env_file).exists():
        raise FileNotFoundError(cfg.env_file)
    resolved = cfg.to_dict()
    h = config_hash(resolved)
    run_dir = Path(args.out_dir) / f"{cfg.kind}-{h}"
    result = run(cfg)
    csv_path = write_csv(run_dir / f"{cfg.kind}.csv", result.header, result.rows, comment=f"config_hash={h}")
    summary = dict(result.summary)
    summary["invariants"] = result.invariants
    write_manifest(run_dir / "manifest.json", resolved, summary)
    print(f"wrote {csv_path}")
    for name, held in result.invariants.items():
        print(f"invariant {name}: {'ok' if held else 'VIOLATED'}")
    if not result.ok:
        raise InvariantViolation(", ".join(result.failed()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcmwalk", description="Random walks among random conductances.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="sample an environment file")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--radius", type=int, required=True)
    g.add_argument("--law", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("inspect", help="summarise an environment file")
    i.add_argument("env")
    i.add_argument("--xi", type=float, default=0.5)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("clusters", help="cluster statistics at threshold xi")
    c.add_argument("env")
    c.add_argument("--xi", type=float, default=0.0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_clusters)

    k = sub.add_parser("kernel", help="exact return probabilities")
    k.add_argument("env")
    k.add_argument("--n-max", type=int, required=True)
    k.add_argument("--start")
    k.add_argument("--out", required=True)
    k.add_argument("--annulus-out")
    k.add_argument("--kmax", type=int, default=4)
    k.set_defaults(func=cmd_kernel)

    w = sub.add_parser("walk", help="Monte Carlo hitting and exit times")
    w.add_argument("env")
    w.add_argument("--radii", required=True)
    w.add_argument("--replicas", type=int, default=1000)
    w.add_argument("--xi", type=float, default=0.0)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--cap", type=int, default=10**7)
    w.add_argument("--trap-n", type=int)
    w.add_argument("--alpha", type=float, default=0.4)
    w.add_argument("--c-strong", type=float, default=0.5)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_walk)

    t = sub.add_parser("traps", help="list trap edges")
    t.add_argument("env")
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--c-strong", type=float, default=0.5)
    t.add_argument("--out")
    t.set_defaults(func=cmd_traps)

    e = sub.add_parser("experiment", help="run an experiment from a config file and/or flags")
    e.add_argument("config", nargs="?")
    e.add_argument("--kind", choices=KINDS)
    e.add_argument("--out-dir", default="runs")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    for name in ("seed", "dim", "replicas", "envs", "n", "threads"):
        e.add_argument(f"--{name}")
    for name in ("law", "alpha", "xi", "env"):
        e.add_argument(f"--{name}")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, EnvironmentFileError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, LawError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, BoxExit, ConditioningError) as exc:
        # bad parameters for this environment (start outside C_xi, box too small, ...)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
