import dataclasses
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import psutil

from ddlod.config import settings
from ddlod.config.experiment import CoefficientSpec, ExperimentConfig, SpaceKind, SweepMode, SweepParam
from ddlod.core.assembly import FemOperators, assemble
from ddlod.core.coeff import CoefficientField, load_field, make_heterogeneous, make_identity, make_oscillatory
from ddlod.core.grid import MeshHierarchy, build_hierarchy
from ddlod.core.linalg import loglog_slope
from ddlod.core.lod import (
    MultiscaleBasis,
    basis_fingerprint,
    build_basis,
    corrector_iterations,
    load_basis,
    ms_operators,
    save_basis,
    solve_elliptic,
    support_radius,
)
from ddlod.core.ocp import (
    ErrorTable,
    KktReport,
    OcpProblem,
    OcpSolution,
    error_report,
    evaluate_j,
    kkt_report,
    lift_solution,
    ritz_gap,
    ritz_ratio,
    solve_pdas,
    solve_projected_gradient,
)
from ddlod.exceptions import BasisFormatError, ConfigError, ConvergenceError, DdlodError, StaleCacheError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)

SWEEP_COLUMNS = [
    "param", "rel_l2_u", "rel_l2_y", "rel_energy_y", "rel_l2_p", "jtilde", "ritz_gap", "ritz_ratio", "k", "seconds",
]


class PhaseTimer:
    """Wall seconds per phase and the largest resident set size seen at phase ends"""

    def __init__(self):
        self.seconds: Dict[str, float] = {}
        self.peak_rss = 0
        self._process = psutil.Process()

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start
            self.peak_rss = max(self.peak_rss, self._process.memory_info().rss)

    @property
    def total(self) -> float:
        return sum(self.seconds.values())

    def rows(self) -> List[Tuple[str, str]]:
        rows = [(f"seconds_{name}", f"{value:.3f}") for name, value in self.seconds.items()]
        rows.append(("peak_rss_mb", f"{self.peak_rss / 2 ** 20:.1f}"))
        return rows


def make_field(spec: CoefficientSpec, n: int) -> CoefficientField:
    if spec.kind == "identity":
        return make_identity(n)
    if spec.kind == "heterogeneous":
        return make_heterogeneous(spec.seed, spec.blocks, spec.lo, spec.hi, n)
    if spec.kind == "oscillatory":
        return make_oscillatory(spec.eps, n)
    return load_field(spec.path, expected_n=n)


def corrector_count(config: ExperimentConfig) -> int:
    return config.k if config.k is not None else corrector_iterations(config.nH, config.j)


def _cache_tag(spec: CoefficientSpec) -> str:
    if spec.kind == "heterogeneous":
        return f"s{spec.seed}"
    if spec.kind == "oscillatory":
        return f"e{spec.eps:g}"
    if spec.kind == "file":
        return Path(spec.path).stem
    return "1"


def basis_path(config: ExperimentConfig) -> Path:
    cache_dir = Path(config.cache or settings.cache_dir)
    name = f"{config.coeff.kind}-{_cache_tag(config.coeff)}-H{config.nH}-h{config.nh}-k{corrector_count(config)}.bin"
    return cache_dir / name


@dataclass
class CachedBasis:
    path: Path
    basis: MultiscaleBasis
    hit: bool


def basis_cache(
    config: ExperimentConfig,
    hier: MeshHierarchy,
    ops: FemOperators,
    field: CoefficientField,
) -> CachedBasis:
    """Load the basis for this config from the cache directory, building it on a miss.

    A file whose fingerprint does not match the field and sizes is refused
    with StaleCacheError; an unreadable one raises BasisFormatError. With
    config.rebuild both are rebuilt and overwritten instead.
    """
    k = corrector_count(config)
    path = basis_path(config)
    expected = basis_fingerprint(field, hier.coarse.n, hier.fine.n, k)

    if path.exists():
        try:
            basis = load_basis(path)
            if basis.meta.fingerprint != expected:
                raise StaleCacheError(
                    f"Cached basis {path} has fingerprint {basis.meta.fingerprint:016x}, "
                    f"expected {expected:016x}; rerun with rebuild=true"
                )
            logger.info(f"Basis cache hit: {path}")
            meta = dataclasses.replace(basis.meta, support_radius=support_radius(basis, hier))
            return CachedBasis(path, MultiscaleBasis(basis.columns, meta), True)
        except (BasisFormatError, StaleCacheError) as exc:
            if not config.rebuild:
                raise
            logger.warning(f"Rebuilding cached basis: {exc}")

    logger.info(f"Basis cache miss: {path}")
    basis = build_basis(hier, ops, field, k=k, j=None if config.k is not None else config.j)
    save_basis(basis, path)
    return CachedBasis(path, basis, False)


@dataclass
class SingleResult:
    config: ExperimentConfig
    solution: OcpSolution
    kkt: KktReport
    quantities: List[Tuple[str, str]]
    errors: Optional[ErrorTable] = None
    reference: Optional[OcpSolution] = None
    timer: PhaseTimer = dataclasses.field(default_factory=PhaseTimer)
    output_dir: Optional[Path] = None


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.12e}"


def _solve(prob: OcpProblem, config: ExperimentConfig) -> OcpSolution:
    if config.method == "projected_gradient":
        return solve_projected_gradient(prob, tol=config.tol, max_iter=config.max_iter)
    return solve_pdas(prob, tol=config.tol, max_iter=config.max_iter)


def build_problem(
    config: ExperimentConfig,
    hier: MeshHierarchy,
    ops: FemOperators,
    field: CoefficientField,
) -> Tuple[OcpProblem, Optional[CachedBasis]]:
    target = config.target_values(hier.fine.n_nodes)
    if config.space == SpaceKind.FINE:
        return OcpProblem.fine(ops, config.gamma, target, config.phi1, config.phi2), None
    cached = basis_cache(config, hier, ops, field)
    reduced = ms_operators(cached.basis, ops)
    return OcpProblem.multiscale(reduced, ops, config.gamma, target, config.phi1, config.phi2), cached


def solve_reference(config: ExperimentConfig, field: CoefficientField, timer: PhaseTimer) -> Tuple[FemOperators, OcpSolution]:
    """Fine-space solve with the control mesh equal to the fine mesh"""
    fine = build_hierarchy(config.nh, config.nh, config.nh)
    with timer.phase("reference"):
        ops = assemble(fine.fine, field, fine.control)
        prob = OcpProblem.fine(ops, config.gamma, config.target_values(fine.fine.n_nodes), config.phi1, config.phi2)
        solution = _solve(prob, config)
    logger.info(f"Fine reference solved: J~ = {solution.j_tilde:.6e} in {solution.solver_iterations} iterations")
    return ops, solution


def write_result_csv(path: Path, quantities: List[Tuple[str, str]]) -> Path:
    frame = pd.DataFrame(quantities, columns=["quantity", "value"])
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def write_active_sets(output_dir: Path, solution: OcpSolution) -> Tuple[Path, Path]:
    """n_rho x n_rho 0/1 grids, first line = bottom row of control cells"""
    paths = []
    for name, cells in (("active_lo.csv", solution.active_lo), ("active_hi.csv", solution.active_hi)):
        grid = np.zeros(solution.u.values.shape[0], dtype=int)
        grid[cells] = 1
        path = output_dir / name
        np.savetxt(path, grid.reshape(solution.u.n, solution.u.n), fmt="%d", delimiter=",")
        paths.append(path)
    return tuple(paths)


def write_fields(output_dir: Path, prob: OcpProblem, ops: FemOperators, solution: OcpSolution) -> Tuple[Path, Path]:
    """u.csv as an n_rho x n_rho grid and y.csv as fine nodal values on an (nh+1) x (nh+1) grid.

    Both grids use the row order of the active-set files: first line = bottom row.
    """
    u_path = output_dir / "u.csv"
    np.savetxt(u_path, solution.u.grid(), fmt="%.12e", delimiter=",")
    nodal = ops.extend(lift_solution(prob, solution).y)
    y_path = output_dir / "y.csv"
    np.savetxt(y_path, nodal.reshape(ops.mesh.n + 1, ops.mesh.n + 1), fmt="%.12e", delimiter=",")
    return u_path, y_path


def run_single(config: ExperimentConfig, write: bool = True) -> SingleResult:
    """Solve one experiment and write result.csv (plus active sets and timings.csv)"""
    config.bounds_check()
    timer = PhaseTimer()
    with timer.phase("assembly"):
        field = make_field(config.coeff, config.nh)
        hier = build_hierarchy(config.nH, config.nh, config.nrho)
        ops = assemble(hier.fine, field, hier.control)
    with timer.phase("basis"):
        prob, cached = build_problem(config, hier, ops, field)
    with timer.phase("solve"):
        solution = _solve(prob, config)
        kkt = kkt_report(prob, solution)

    quantities: List[Tuple[str, str]] = [
        ("name", config.name),
        ("space", config.space.value),
        ("method", config.method),
        ("nh", _fmt(config.nh)),
        ("nH", _fmt(config.nH)),
        ("nrho", _fmt(config.nrho)),
        ("k", _fmt(cached.basis.meta.k) if cached else ""),
        ("support_radius", _fmt(cached.basis.meta.support_radius) if cached else ""),
        ("gamma", _fmt(config.gamma)),
        ("alpha", _fmt(field.alpha)),
        ("beta", _fmt(field.beta)),
        ("jtilde", _fmt(solution.j_tilde)),
        ("j", _fmt(evaluate_j(prob, solution.y, solution.u))),
        ("iterations", _fmt(solution.solver_iterations)),
        ("converged", _fmt(solution.converged)),
        ("active_lo", _fmt(solution.active_lo.size)),
        ("active_hi", _fmt(solution.active_hi.size)),
        ("state_residual", _fmt(kkt.state_residual)),
        ("adjoint_residual", _fmt(kkt.adjoint_residual)),
        ("vi_violation", _fmt(kkt.vi_violation)),
        ("lambda1_neg_part", _fmt(kkt.lambda1_neg_part)),
        ("lambda2_pos_part", _fmt(kkt.lambda2_pos_part)),
        ("inactive_multiplier", _fmt(kkt.inactive_multiplier)),
        ("complementarity_gap", _fmt(kkt.complementarity_gap)),
    ]

    errors = reference = None
    if config.reference:
        ref_ops, reference = solve_reference(config, field, timer)
        errors = error_report(reference, lift_solution(prob, solution), ref_ops)
        quantities += [
            ("jtilde_fine", _fmt(reference.j_tilde)),
            ("rel_l2_u", _fmt(errors.rel_l2_u)),
            ("rel_l2_y", _fmt(errors.rel_l2_y)),
            ("rel_energy_y", _fmt(errors.rel_energy_y)),
            ("rel_l2_p", _fmt(errors.rel_l2_p)),
            ("rel_energy_p", _fmt(errors.rel_energy_p)),
            ("ritz_gap", _fmt(ritz_gap(prob, ref_ops, reference))),
            ("ritz_ratio", _fmt(ritz_ratio(prob, ref_ops, reference, lift_solution(prob, solution)))),
        ]

    result = SingleResult(config, solution, kkt, quantities, errors, reference, timer)
    if write:
        output_dir = Path(config.output)
        output_dir.mkdir(parents=True, exist_ok=True)
        write_result_csv(output_dir / "result.csv", quantities)
        write_result_csv(output_dir / "timings.csv", timer.rows())
        write_fields(output_dir, prob, ops, solution)
        if config.active_sets:
            write_active_sets(output_dir, solution)
        result.output_dir = output_dir
        logger.info(f"Wrote results of {config.name} to {output_dir}")

    if not solution.converged:
        raise ConvergenceError(
            f"{solution.method} did not converge in {solution.solver_iterations} iterations "
            f"(projection residual {solution.vi_violation:.2e}); partial results written"
        )
    return result


@dataclass
class SweepResult:
    table: pd.DataFrame
    slopes: Dict[str, float]
    jtilde_fine: Optional[float] = None
    path: Optional[Path] = None


def _point_config(config: ExperimentConfig, value: int) -> ExperimentConfig:
    if config.sweep.param == SweepParam.H:
        update = {"nH": value, "nrho": value}
    else:
        update = {"nrho": value}
    update["space"] = SpaceKind.MULTISCALE
    try:
        return config.with_updates(**update)
    except ConfigError as exc:
        raise ConfigError(f"sweep.values: point {value} is invalid: {exc}") from exc


def _param_value(point: ExperimentConfig, param: SweepParam) -> float:
    return 1.0 / (point.nH if param == SweepParam.H else point.nrho)


def _slopes(table: pd.DataFrame, jtilde_fine: Optional[float]) -> Dict[str, float]:
    slopes = {}
    for column in ("rel_l2_u", "rel_l2_y", "rel_energy_y", "rel_l2_p", "ritz_gap"):
        values = table[column].to_numpy(dtype=float)
        slopes[column] = loglog_slope(table["param"], values) if len(table) > 1 else float("nan")
    if jtilde_fine is not None and len(table) > 1:
        gaps = np.abs(table["jtilde"].to_numpy(dtype=float) - jtilde_fine)
        slopes["jtilde"] = loglog_slope(table["param"], gaps)
    else:
        slopes["jtilde"] = float("nan")
    return slopes


def write_sweep_csv(path: Path, table: pd.DataFrame, slopes: Dict[str, float], jtilde_fine: Optional[float]) -> Path:
    rows = table.copy()
    extra = []
    if jtilde_fine is not None:
        extra.append({"param": "reference", "jtilde": jtilde_fine})
    extra.append({"param": "slope", **{key: value for key, value in slopes.items() if np.isfinite(value)}})
    rows = pd.concat([rows, pd.DataFrame(extra)], ignore_index=True)
    rows["k"] = rows["k"].astype("Int64")
    rows.reindex(columns=SWEEP_COLUMNS).to_csv(path, index=False, float_format="%.10e", lineterminator="\n")
    return path


def _elliptic_row(point: ExperimentConfig, field: CoefficientField, param: float) -> Dict[str, float]:
    hier = build_hierarchy(point.nH, point.nh, point.nH)
    ops = assemble(hier.fine, field, hier.control)
    cached = basis_cache(point, hier, ops, field)
    comparison = solve_elliptic(ops, ms_operators(cached.basis, ops))
    return {
        "param": param,
        "rel_l2_y": comparison.l2_error / comparison.l2_norm,
        "rel_energy_y": comparison.energy_error / comparison.energy_norm,
        "k": cached.basis.meta.k,
    }


def run_sweep(config: ExperimentConfig, write: bool = True) -> SweepResult:
    """Convergence table over the swept H or rho values, points in the given order.

    A failing point flushes the rows computed so far to sweep.csv before the
    error propagates.
    """
    values = config.sweep.values
    if not values:
        raise ConfigError("sweep.values: at least one value is required")
    param = config.sweep.param
    if config.sweep.mode == SweepMode.ELLIPTIC and param == SweepParam.RHO:
        raise ConfigError("sweep.mode: elliptic sweeps have no control mesh, use sweep.param=H")
    field = make_field(config.coeff, config.nh)
    output_dir = Path(config.output)
    path = output_dir / "sweep.csv"
    rows: List[Dict[str, float]] = []
    jtilde_fine = None
    reference = ref_ops = None

    if config.sweep.mode == SweepMode.OCP:
        ref_ops, reference = solve_reference(config.with_updates(space=SpaceKind.FINE), field, PhaseTimer())
        jtilde_fine = reference.j_tilde

    def flush():
        table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
        slopes = _slopes(table, jtilde_fine)
        if write:
            output_dir.mkdir(parents=True, exist_ok=True)
            write_sweep_csv(path, table, slopes, jtilde_fine)
        return table, slopes

    try:
        for value in values:
            point = _point_config(config, value)
            point.bounds_check()
            start = time.perf_counter()
            x = _param_value(point, param)
            if config.sweep.mode == SweepMode.ELLIPTIC:
                row = _elliptic_row(point, field, x)
            else:
                hier = build_hierarchy(point.nH, point.nh, point.nrho)
                ops = assemble(hier.fine, field, hier.control)
                prob, cached = build_problem(point, hier, ops, field)
                solution = _solve(prob, point)
                if not solution.converged:
                    raise ConvergenceError(f"Sweep point {param.value}=1/{value} did not converge")
                lifted = lift_solution(prob, solution)
                errors = error_report(reference, lifted, ref_ops)
                row = {
                    "param": x,
                    "rel_l2_u": errors.rel_l2_u,
                    "rel_l2_y": errors.rel_l2_y,
                    "rel_energy_y": errors.rel_energy_y,
                    "rel_l2_p": errors.rel_l2_p,
                    "jtilde": solution.j_tilde,
                    "ritz_gap": ritz_gap(prob, ref_ops, reference),
                    "ritz_ratio": ritz_ratio(prob, ref_ops, reference, lifted),
                    "k": cached.basis.meta.k,
                }
            row["seconds"] = time.perf_counter() - start
            rows.append(row)
            logger.info(f"Sweep point {param.value}=1/{value}: {row}")
    except DdlodError:
        flush()
        logger.error(f"Sweep aborted after {len(rows)} of {len(values)} points; partial table in {path}")
        raise

    table, slopes = flush()
    logger.info(f"Sweep slopes: {slopes}")
    return SweepResult(table, slopes, jtilde_fine, path if write else None)
