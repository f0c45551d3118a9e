"""Self-checks behind `ddlod validate`: optimizer oracles and structural invariants."""

import itertools
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from ddlod.cli.experiments import run_single
from ddlod.config.experiment import build_config
from ddlod.core.assembly import AffineFunction, assemble, element_stiffness, q_rho_project
from ddlod.core.coeff import make_heterogeneous
from ddlod.core.grid import build_hierarchy
from ddlod.core.lod import build_basis, build_pi_h, check_localization, kernel_project
from ddlod.core.ocp import OcpProblem, kkt_report, solve_pdas, solve_projected_gradient
from ddlod.exceptions import LocalizationError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def reduced_hessian(prob: OcpProblem):
    """Dense gamma V + B^T K^-1 M K^-1 B and the linear term -B^T K^-1 (y_d, .)"""
    hessian = np.column_stack([prob.hessian_apply(e) for e in np.eye(prob.n_cells)])
    linear = prob.coupling.T @ prob.adjoint(np.zeros(prob.n_state))
    return 0.5 * (hessian + hessian.T), np.asarray(linear, dtype=float)


def enumerate_active_sets(prob: OcpProblem, tol: float = 1e-10) -> np.ndarray:
    """Minimiser over all 3^cells lower / upper / free assignments.

    Each assignment is solved as an equality constrained QP; candidates that
    violate the bounds or the multiplier signs are dropped and the cheapest
    survivor wins.
    """
    if prob.n_cells > 9:
        raise ValueError(f"Enumeration over {prob.n_cells} cells is too large")
    hessian, linear = reduced_hessian(prob)
    lower, upper, volumes = prob.lower.values, prob.upper.values, prob.cell_volumes
    scale = max(1.0, float(np.max(np.abs(np.concatenate([lower, upper])))))

    best, best_cost = None, np.inf
    for assignment in itertools.product((0, 1, 2), repeat=prob.n_cells):
        assignment = np.array(assignment)
        u = np.where(assignment == 0, lower, np.where(assignment == 1, upper, 0.0))
        free = assignment == 2
        if free.any():
            rhs = -(linear[free] + hessian[np.ix_(free, ~free)] @ u[~free])
            u[free] = np.linalg.solve(hessian[np.ix_(free, free)], rhs)
        if np.any(u < lower - tol * scale) or np.any(u > upper + tol * scale):
            continue
        multiplier = (hessian @ u + linear) / volumes
        at_lower = (assignment == 0) & (lower < upper)
        at_upper = (assignment == 1) & (lower < upper)
        if np.any(multiplier[at_lower] < -tol) or np.any(multiplier[at_upper] > tol):
            continue
        cost = 0.5 * u @ hessian @ u + linear @ u
        if cost < best_cost:
            best, best_cost = u, cost
    if best is None:
        raise ArithmeticError("No active-set assignment satisfies the optimality conditions")
    return best


def random_instance(rng: np.random.Generator, nh: int = 8, nrho: int = 2) -> OcpProblem:
    """Small heterogeneous problem with random feasible affine bounds and random y_d"""
    hier = build_hierarchy(nrho, nh, nrho)
    field = make_heterogeneous(int(rng.integers(0, 2 ** 31)), nrho, 1.0, 10.0, nh)
    ops = assemble(hier.fine, field, hier.control)
    lower = AffineFunction(rng.uniform(-0.05, 0.0), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02))
    width = rng.uniform(0.005, 0.05)
    upper = AffineFunction(lower.c0 + width, lower.c1, lower.c2)
    y_d = 10.0 * rng.standard_normal(hier.fine.n_nodes)
    return OcpProblem.fine(ops, float(rng.uniform(0.1, 1.0)), y_d, lower, upper)


def check_oracles(instances: int = 20, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_enum = worst_pg = worst_kkt = 0.0
    for _ in range(instances):
        prob = random_instance(rng, nh=int(rng.choice([4, 8])), nrho=2)
        solution = solve_pdas(prob)
        worst_enum = max(worst_enum, float(np.max(np.abs(solution.u.values - enumerate_active_sets(prob)))))
        gradient = solve_projected_gradient(prob, tol=1e-12, max_iter=20000)
        worst_pg = max(worst_pg, float(np.max(np.abs(solution.u.values - gradient.u.values))))
        worst_kkt = max(worst_kkt, kkt_report(prob, solution).max_violation)
    return [
        CheckResult("pdas_vs_enumeration", worst_enum <= 1e-9, f"max |du| = {worst_enum:.2e}"),
        CheckResult("pdas_vs_projected_gradient", worst_pg <= 1e-6, f"max |du| = {worst_pg:.2e}"),
        CheckResult("kkt_violations", worst_kkt <= 1e-9, f"max violation = {worst_kkt:.2e}"),
    ]


def check_structure(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    hier = build_hierarchy(4, 16, 4)
    pi = build_pi_h(hier)
    identity_error = float(np.abs((pi.matrix @ pi.embedding).toarray() - np.eye(pi.m)).max())
    results.append(CheckResult("pi_h_projection", identity_error <= 1e-12, f"max |Pi_H E - I| = {identity_error:.2e}"))

    v = rng.standard_normal(hier.fine.n_interior)
    once = kernel_project(pi, v)
    idempotence = float(np.abs(kernel_project(pi, once) - once).max())
    results.append(CheckResult("kernel_idempotence", idempotence <= 1e-12, f"max |P(Pv) - Pv| = {idempotence:.2e}"))

    hier = build_hierarchy(8, 32, 8)
    field = make_heterogeneous(seed, 8, 1.0, 10.0, 32)
    ops = assemble(hier.fine, field, hier.control)
    basis = build_basis(hier, ops, field, k=1)
    try:
        check_localization(basis, hier, 4)
        results.append(CheckResult("localization", True, f"support radius {basis.meta.support_radius} <= 4 layers"))
    except LocalizationError as exc:
        results.append(CheckResult("localization", False, str(exc)))

    root = rng.standard_normal((2, 2))
    local = element_stiffness(root @ root.T + np.eye(2), 1.0 / 32)
    row_sums = float(np.abs(local.sum(axis=1)).max())
    results.append(CheckResult("stiffness_row_sums", row_sums <= 1e-12, f"max |row sum| = {row_sums:.2e}"))

    affine = AffineFunction(*rng.standard_normal(3))
    x, y = hier.fine.node_coords(np.arange(hier.fine.n_nodes))
    nodal = q_rho_project(affine(x * hier.fine.h, y * hier.fine.h), hier.control, ops).values
    exact = q_rho_project(affine, hier.control).values
    centroid_error = float(np.abs(nodal - exact).max())
    results.append(CheckResult("q_rho_centroids", centroid_error <= 1e-12, f"max |Q_rho f - f(centroid)| = {centroid_error:.2e}"))

    results.append(check_csv_determinism())
    return results


def check_csv_determinism() -> CheckResult:
    with tempfile.TemporaryDirectory() as workdir:
        outputs = []
        for run in range(2):
            config = build_config(overrides={
                "nh": "16", "nH": "4", "coeff.kind": "heterogeneous", "coeff.blocks": "4",
                "phi1": "-0.01", "phi2": "0.01", "output": str(Path(workdir) / f"run{run}"),
                "cache": str(Path(workdir) / "cache"),
            })
            run_single(config)
            outputs.append((Path(config.output) / "result.csv").read_bytes())
    same = outputs[0] == outputs[1]
    return CheckResult("csv_determinism", same, "result.csv identical" if same else "result.csv differs between runs")


SUITES = {
    "oracles": check_oracles,
    "structure": check_structure,
}


def run_validation(instances: int = 20, seed: int = 0, suites: Optional[List[str]] = None) -> List[CheckResult]:
    results = []
    for name in suites or list(SUITES):
        suite: Callable = SUITES[name]
        logger.info(f"Running {name} checks")
        results += suite(instances=instances, seed=seed) if name == "oracles" else suite(seed=seed)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"Validation failures: {', '.join(failed)}")
    return results
