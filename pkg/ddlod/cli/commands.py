"""
DDLOD command-line interface

Verbs: field gen|show, basis build|info, solve, sweep, validate.
Experiment flags mirror the keys of the config file; `--config` loads a
file, `--preset` starts from a named example and flags override both.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from ddlod import __version__
from ddlod.cli.experiments import basis_cache, make_field, run_single, run_sweep
from ddlod.cli.validation import run_validation
from ddlod.config import settings
from ddlod.config.experiment import PRESETS, CoefficientSpec, build_config, parse_assignments
from ddlod.core.assembly import assemble
from ddlod.core.coeff import load_field, save_field
from ddlod.core.grid import build_hierarchy
from ddlod.core.lod import load_basis, save_basis
from ddlod.exceptions import EXIT_IO, EXIT_OK, EXIT_SOLVER, ConfigError, DdlodError
from ddlod.utils.logger import get_logger, set_level

logger = get_logger(__name__)

# flag dest -> config key
EXPERIMENT_FLAGS: Dict[str, str] = {
    "name": "name",
    "nh": "nh",
    "nH": "nH",
    "nrho": "nrho",
    "space": "space",
    "k": "k",
    "j": "j",
    "gamma": "gamma",
    "y_d": "y_d",
    "phi1": "phi1",
    "phi2": "phi2",
    "method": "method",
    "tol": "tol",
    "max_iter": "max_iter",
    "output": "output",
    "cache": "cache",
    "coeff_kind": "coeff.kind",
    "seed": "coeff.seed",
    "eps": "coeff.eps",
    "blocks": "coeff.blocks",
    "lo": "coeff.lo",
    "hi": "coeff.hi",
    "field_path": "coeff.path",
    "param": "sweep.param",
    "values": "sweep.values",
    "mode": "sweep.mode",
}


def _add_coefficient_flags(parser, kinds=("identity", "heterogeneous", "oscillatory", "file")):
    parser.add_argument("--kind", dest="coeff_kind", choices=list(kinds))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--eps", type=float)
    parser.add_argument("--blocks", type=int)
    parser.add_argument("--lo", type=float)
    parser.add_argument("--hi", type=float)


def _experiment_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("experiment")
    group.add_argument("--config", type=Path, help="key=value experiment file")
    group.add_argument("--preset", choices=sorted(PRESETS), help="Start from a named example")
    group.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                       help="Override any config key (repeatable)")
    group.add_argument("--name")
    group.add_argument("--nh", type=int, help="Fine mesh denominator")
    group.add_argument("--nH", type=int, help="Coarse mesh denominator")
    group.add_argument("--nrho", type=int, help="Control mesh denominator")
    group.add_argument("--space", choices=["fine", "multiscale"])
    group.add_argument("--k", type=int, help="Corrector iterations")
    group.add_argument("--j", type=int, help="k = ceil(j ln(1/H))")
    group.add_argument("--gamma", type=float)
    group.add_argument("--y-d", dest="y_d", help="Constant or path to nodal values")
    group.add_argument("--phi1", help="Lower bound c0,c1,c2")
    group.add_argument("--phi2", help="Upper bound c0,c1,c2")
    group.add_argument("--method", choices=["pdas", "projected_gradient"])
    group.add_argument("--tol", type=float)
    group.add_argument("--max-iter", dest="max_iter", type=int)
    group.add_argument("--reference", action="store_true", default=None, help="Also solve on the fine space")
    group.add_argument("--output", help="Output directory")
    group.add_argument("--cache", help="Basis cache directory")
    group.add_argument("--rebuild", action="store_true", default=None, help="Rebuild unreadable or stale cached bases")
    group.add_argument("--field", dest="field_path", help="Coefficient field file (kind=file)")
    _add_coefficient_flags(group)
    return parent


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = {}
    for dest, key in EXPERIMENT_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = str(value)
    for dest in ("reference", "rebuild"):
        if getattr(args, dest, None):
            overrides[dest] = "true"
    overrides.update(parse_assignments(args.assignments))
    return overrides


def _load_config(args: argparse.Namespace):
    return build_config(preset=args.preset, path=args.config, overrides=_overrides(args))


def _print_rows(rows, header=("quantity", "value")):
    width = max([len(header[0])] + [len(str(name)) for name, _ in rows])
    print(f"{header[0]:<{width}}  {header[1]}")
    print("-" * (width + 2 + max([len(header[1])] + [len(str(v)) for _, v in rows])))
    for name, value in rows:
        print(f"{name:<{width}}  {value}")


def cmd_field_gen(args) -> int:
    given = {
        "kind": args.coeff_kind or "heterogeneous",
        "seed": args.seed,
        "eps": args.eps,
        "blocks": args.blocks,
        "lo": args.lo,
        "hi": args.hi,
    }
    try:
        spec = CoefficientSpec(**{key: value for key, value in given.items() if value is not None})
    except ValidationError as exc:
        raise ConfigError("; ".join(f"coeff.{e['loc'][0] if e['loc'] else 'kind'}: {e['msg']}" for e in exc.errors()))
    field = make_field(spec, args.n)
    path = save_field(field, args.out)
    print(f"✅ Wrote {field.kind.name.lower()} field n={field.n} (contrast {field.contrast:.4g}) to {path}")
    return EXIT_OK


def cmd_field_show(args) -> int:
    field = load_field(args.path)
    _print_rows([
        ("kind", field.kind.name.lower()),
        ("n", field.n),
        ("alpha", f"{field.alpha:.6g}"),
        ("beta", f"{field.beta:.6g}"),
        ("contrast", f"{field.contrast:.6g}"),
        ("seed", "" if field.seed is None else field.seed),
        ("eps", "" if field.epsilon is None else f"{field.epsilon:g}"),
        ("fingerprint", f"{field.fingerprint():016x}"),
    ])
    means = field.block_means(args.blocks)
    print(f"\nBlock means of (a11 + a22) / 2, top row first ({means.shape[0]}x{means.shape[1]}):")
    for row in means[::-1]:
        print(" ".join(f"{value:9.3g}" for value in row))
    return EXIT_OK


def cmd_basis_build(args) -> int:
    config = _load_config(args)
    field = make_field(config.coeff, config.nh)
    hier = build_hierarchy(config.nH, config.nh, config.nrho)
    ops = assemble(hier.fine, field, hier.control)
    cached = basis_cache(config, hier, ops, field)
    if args.out:
        save_basis(cached.basis, args.out)
    meta = cached.basis.meta
    _print_rows([
        ("path", args.out or cached.path),
        ("cache", "hit" if cached.hit else "miss"),
        ("nH", meta.nH),
        ("nh", meta.nh),
        ("k", meta.k),
        ("m", cached.basis.m),
        ("nnz", cached.basis.columns.nnz),
        ("support_radius", meta.support_radius),
    ])
    return EXIT_OK


def cmd_basis_info(args) -> int:
    basis = load_basis(args.path)
    meta = basis.meta
    _print_rows([
        ("nH", meta.nH),
        ("nh", meta.nh),
        ("k", meta.k),
        ("j", meta.j),
        ("m", basis.m),
        ("nnz", basis.columns.nnz),
        ("fingerprint", f"{meta.fingerprint:016x}"),
    ])
    return EXIT_OK


def cmd_solve(args) -> int:
    result = run_single(_load_config(args))
    _print_rows(result.quantities)
    print(f"\n✅ Results written to {result.output_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    result = run_sweep(_load_config(args))
    print(result.table.to_string(index=False))
    print("\nlog-log slopes: " + ", ".join(
        f"{name}={value:.3f}" for name, value in result.slopes.items() if np.isfinite(value)
    ))
    if result.jtilde_fine is not None:
        print(f"fine J~ = {result.jtilde_fine:.6e}")
    print(f"\n✅ Table written to {result.path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    results = run_validation(instances=args.instances, seed=args.seed, suites=args.suite)
    _print_rows([(r.name, f"{'PASS' if r.passed else 'FAIL'}  {r.detail}") for r in results], header=("check", "result"))
    if all(r.passed for r in results):
        print("\n✅ All checks passed")
        return EXIT_OK
    print("\n❌ Some checks failed")
    return EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddlod", description="DD-LOD multiscale optimal control experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, help="Worker threads for corrector builds")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    verbs = parser.add_subparsers(dest="command", required=True)
    experiment = _experiment_parent()

    field = verbs.add_parser("field", help="Coefficient field files")
    field_verbs = field.add_subparsers(dest="action", required=True)
    gen = field_verbs.add_parser("gen", help="Generate a coefficient field file")
    gen.add_argument("--n", type=int, required=True, help="Fine mesh denominator")
    gen.add_argument("--out", type=Path, required=True)
    _add_coefficient_flags(gen, kinds=("identity", "heterogeneous", "oscillatory"))
    gen.set_defaults(handler=cmd_field_gen)
    show = field_verbs.add_parser("show", help="Summarise a coefficient field file")
    show.add_argument("path", type=Path)
    show.add_argument("--blocks", type=int, default=8, help="Blocks per direction of the summary")
    show.set_defaults(handler=cmd_field_show)

    basis = verbs.add_parser("basis", help="Multiscale basis files")
    basis_verbs = basis.add_subparsers(dest="action", required=True)
    build = basis_verbs.add_parser("build", parents=[experiment], help="Build (or load from cache) a basis")
    build.add_argument("--out", type=Path, help="Also write the basis here")
    build.set_defaults(handler=cmd_basis_build)
    info = basis_verbs.add_parser("info", help="Print a basis file header")
    info.add_argument("path", type=Path)
    info.set_defaults(handler=cmd_basis_info)

    solve = verbs.add_parser("solve", parents=[experiment], help="Solve one experiment")
    solve.set_defaults(handler=cmd_solve)

    sweep = verbs.add_parser("sweep", parents=[experiment], help="Convergence sweep over H or rho")
    sweep.add_argument("--param", choices=["H", "rho"])
    sweep.add_argument("--values", help="Comma separated denominators, e.g. 10,20,40")
    sweep.add_argument("--mode", choices=["ocp", "elliptic"])
    sweep.set_defaults(handler=cmd_sweep)

    validate = verbs.add_parser("validate", help="Run the optimizer oracle and structural checks")
    validate.add_argument("--instances", type=int, default=20, help="Random instances for the oracle suite")
    validate.add_argument("--seed", type=int, default=0)
    validate.add_argument("--suite", action="append", choices=["oracles", "structure"])
    validate.set_defaults(handler=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        settings.log_level = args.log_level
        set_level(args.log_level)
    if args.threads is not None:
        settings.threads = max(1, args.threads)

    try:
        return args.handler(args)
    except DdlodError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        logger.error(f"I/O error: {exc}")
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_IO
