"""Discrete distributed optimal control with box constraints on piecewise constant controls.

The state lives in any conforming space V_* (fine Q1 or the DD-LOD space),
described by its stiffness K, mass M and control coupling B. Everything is
reduced to the control: y = K^-1 B u, p = K^-1 (M y - (y_d, .)), and the
L2(W_rho) gradient of the reduced cost is lambda = gamma u + Q_rho p.
"""

import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from ddlod.config import settings
from ddlod.core.assembly import AffineFunction, ControlFunction, FemOperators, prolong_control, q_rho_project
from ddlod.core.linalg import CholeskyFactor, SpdSolver, cg_solve
from ddlod.core.lod import ReducedOperators
from ddlod.exceptions import ConfigError, ConvergenceError, DimensionError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)

Target = Union[float, np.ndarray]
Bound = Union[AffineFunction, ControlFunction]


def _solver_for(stiffness):
    if sparse.issparse(stiffness):
        return SpdSolver(stiffness)
    return CholeskyFactor(np.asarray(stiffness))


def _nodal_target(ops: FemOperators, y_d: Target) -> np.ndarray:
    if np.isscalar(y_d):
        return np.full(ops.mesh.n_nodes, float(y_d))
    y_d = np.asarray(y_d, dtype=float)
    if y_d.shape != (ops.mesh.n_nodes,):
        raise DimensionError(f"Target state has {y_d.shape[0]} nodal values, mesh has {ops.mesh.n_nodes}")
    return y_d


def _as_control(bound: Bound, ops: FemOperators) -> ControlFunction:
    if isinstance(bound, ControlFunction):
        if bound.n != ops.control_mesh.n:
            raise DimensionError(f"Bound on control mesh 1/{bound.n}, problem uses 1/{ops.control_mesh.n}")
        return bound
    return q_rho_project(bound, ops.control_mesh)


@dataclass(frozen=True)
class OcpProblem:
    """min 1/2 ||y - y_d||^2 + gamma/2 ||u||^2, a(y, z) = (u, z), lower <= u <= upper"""

    stiffness: object
    mass: object
    coupling: object
    gamma: float
    yd_load: np.ndarray
    yd_norm2: float
    lower: ControlFunction
    upper: ControlFunction
    cell_volumes: np.ndarray
    lift: Optional[sparse.spmatrix] = None
    solver: object = dataclasses.field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.lower.n != self.upper.n or self.lower.values.shape != self.cell_volumes.shape:
            raise DimensionError("Bounds and cell volumes live on different control meshes")
        bad = np.flatnonzero(self.lower.values > self.upper.values)
        if bad.size:
            c = int(bad[0])
            raise ConfigError(
                f"Lower bound exceeds upper bound on {bad.size} control cells "
                f"(cell {c}: {self.lower.values[c]:.6g} > {self.upper.values[c]:.6g})"
            )
        if self.coupling.shape != (self.n_state, self.n_cells):
            raise DimensionError(f"Coupling {self.coupling.shape} for {self.n_state} states and {self.n_cells} cells")
        if self.solver is None:
            object.__setattr__(self, "solver", _solver_for(self.stiffness))

    @property
    def n_state(self) -> int:
        return self.stiffness.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cell_volumes.shape[0]

    @property
    def control_n(self) -> int:
        return self.lower.n

    @classmethod
    def fine(cls, ops: FemOperators, gamma: float, y_d: Target, lower: Bound, upper: Bound) -> "OcpProblem":
        """V_* = V_h with the control mesh of `ops`"""
        nodal = _nodal_target(ops, y_d)
        return cls(
            stiffness=ops.stiffness,
            mass=ops.mass,
            coupling=ops.control_coupling,
            gamma=gamma,
            yd_load=ops.nodal_load(nodal),
            yd_norm2=float(nodal @ (ops.mass_nodes @ nodal)),
            lower=_as_control(lower, ops),
            upper=_as_control(upper, ops),
            cell_volumes=ops.cell_volumes,
        )

    @classmethod
    def multiscale(
        cls,
        reduced: ReducedOperators,
        ops: FemOperators,
        gamma: float,
        y_d: Target,
        lower: Bound,
        upper: Bound,
    ) -> "OcpProblem":
        """V_* = DD-LOD space; `ops` are the fine operators the basis was built on"""
        nodal = _nodal_target(ops, y_d)
        return cls(
            stiffness=reduced.stiffness,
            mass=reduced.mass,
            coupling=reduced.control_coupling,
            gamma=gamma,
            yd_load=reduced.lift.T @ ops.nodal_load(nodal),
            yd_norm2=float(nodal @ (ops.mass_nodes @ nodal)),
            lower=_as_control(lower, ops),
            upper=_as_control(upper, ops),
            cell_volumes=ops.cell_volumes,
            lift=reduced.lift,
            solver=reduced.factor,
        )

    def state(self, u: np.ndarray) -> np.ndarray:
        return self.solver.solve(self.coupling @ u)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.solver.solve(self.mass @ y - self.yd_load)

    def cell_average(self, p: np.ndarray) -> np.ndarray:
        return (self.coupling.T @ p) / self.cell_volumes

    def gradient(self, u: np.ndarray, p: np.ndarray) -> np.ndarray:
        """L2(W_rho) gradient of the reduced cost: gamma u + Q_rho p"""
        return self.gamma * u + self.cell_average(p)

    def hessian_apply(self, v: np.ndarray) -> np.ndarray:
        """(gamma V + B^T K^-1 M K^-1 B) v"""
        y = self.solver.solve(self.coupling @ v)
        return self.gamma * self.cell_volumes * v + self.coupling.T @ self.solver.solve(self.mass @ y)


@dataclass(frozen=True)
class OcpSolution:
    y: np.ndarray
    u: ControlFunction
    p: np.ndarray
    j_tilde: float
    active_lo: np.ndarray
    active_hi: np.ndarray
    solver_iterations: int
    converged: bool = True
    method: str = "pdas"
    vi_violation: float = 0.0


@dataclass(frozen=True)
class KktReport:
    state_residual: float
    adjoint_residual: float
    vi_violation: float
    lam: ControlFunction
    lambda1_neg_part: float
    lambda2_pos_part: float
    inactive_multiplier: float
    bound_violation: float
    complementarity_gap: float

    @property
    def max_violation(self) -> float:
        return max(
            self.vi_violation, self.lambda1_neg_part, self.lambda2_pos_part,
            self.inactive_multiplier, self.bound_violation, self.complementarity_gap,
        )


def solve_state(stiffness, coupling, u: np.ndarray, solver=None) -> np.ndarray:
    """K y = B u"""
    solver = _solver_for(stiffness) if solver is None else solver
    return solver.solve(coupling @ np.asarray(u, dtype=float))


def solve_adjoint(stiffness, mass, y: np.ndarray, yd_load: np.ndarray, solver=None) -> np.ndarray:
    """K p = M y - (y_d, .); K is symmetric so the state factor is reused"""
    solver = _solver_for(stiffness) if solver is None else solver
    return solver.solve(mass @ y - yd_load)


def evaluate_j_tilde(prob: OcpProblem, y: np.ndarray, u: np.ndarray) -> float:
    """1/2 (||y||^2 + gamma ||u||^2) - (y, y_d)"""
    u = u.values if isinstance(u, ControlFunction) else np.asarray(u)
    return float(
        0.5 * (y @ (prob.mass @ y) + prob.gamma * np.sum(prob.cell_volumes * u * u))
        - y @ prob.yd_load
    )


def evaluate_j(prob: OcpProblem, y: np.ndarray, u: np.ndarray) -> float:
    return evaluate_j_tilde(prob, y, u) + 0.5 * prob.yd_norm2


def _projection_residual(prob: OcpProblem, u: np.ndarray, p: np.ndarray) -> float:
    target = np.clip(-prob.cell_average(p) / prob.gamma, prob.lower.values, prob.upper.values)
    return float(np.max(np.abs(u - target))) if u.size else 0.0


def _classify(prob: OcpProblem, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Active sets from the unconstrained minimiser -gamma^-1 Q_rho p; ties stay inactive"""
    lower, upper = prob.lower.values, prob.upper.values
    w = -prob.cell_average(p) / prob.gamma
    fixed = lower == upper
    active_lo = (w < lower) | (fixed & (w <= lower))
    active_hi = ((w > upper) | fixed) & ~active_lo
    return active_lo, active_hi


def _solve_inactive(prob: OcpProblem, active_lo: np.ndarray, active_hi: np.ndarray, tol: float) -> Tuple[np.ndarray, int]:
    """Minimise the reduced cost over the inactive cells with the active ones at their bounds"""
    u = np.zeros(prob.n_cells)
    u[active_lo] = prob.lower.values[active_lo]
    u[active_hi] = prob.upper.values[active_hi]
    inactive = ~(active_lo | active_hi)
    n_free = int(inactive.sum())
    if n_free == 0:
        return u, 0

    p = prob.adjoint(prob.state(u))
    rhs = -(prob.cell_volumes * prob.gradient(u, p))[inactive]

    def matvec(v):
        full = np.zeros(prob.n_cells)
        full[inactive] = v
        return prob.hessian_apply(full)[inactive]

    operator = spla.LinearOperator((n_free, n_free), matvec=matvec, dtype=float)
    diagonal = prob.gamma * prob.cell_volumes[inactive]
    free, report = cg_solve(operator, rhs, tol=tol, max_iter=max(50, 4 * n_free),
                            preconditioner=lambda r: r / diagonal)
    if not report.converged:
        logger.warning(f"Inactive-set CG stopped at relative residual {report.final_residual:.2e}")
    u[inactive] = free
    return u, report.iterations


def stopping_threshold(prob: OcpProblem, tol: float) -> float:
    """tol relative to the bound scale, never below tol itself"""
    bounds = np.concatenate([prob.lower.values, prob.upper.values])
    return tol * max(1.0, float(np.max(np.abs(bounds[np.isfinite(bounds)]), initial=0.0)))


def solve_pdas(prob: OcpProblem, tol: Optional[float] = None, max_iter: Optional[int] = None) -> OcpSolution:
    """Primal-dual active set method with c = gamma on the reduced problem.

    Stops when the active sets repeat and the projection residual
    |u - clamp(-Q_rho p / gamma)| is at most tol times max(1, max |bounds|). On max_iter the last
    iterate is returned with converged=False.
    """
    tol = settings.pdas_tol if tol is None else tol
    max_iter = settings.pdas_max_iter if max_iter is None else max_iter
    inner_tol = min(1e-12, 1e-2 * tol)
    threshold = stopping_threshold(prob, tol)

    u = np.clip(np.zeros(prob.n_cells), prob.lower.values, prob.upper.values)
    y = prob.state(u)
    p = prob.adjoint(y)
    active_lo, active_hi = _classify(prob, p)
    converged = False
    violation = _projection_residual(prob, u, p)
    iteration = 0

    for iteration in range(1, max_iter + 1):
        u, cg_iterations = _solve_inactive(prob, active_lo, active_hi, inner_tol)
        y = prob.state(u)
        p = prob.adjoint(y)
        new_lo, new_hi = _classify(prob, p)
        violation = _projection_residual(prob, u, p)
        changes = int(np.sum(new_lo != active_lo) + np.sum(new_hi != active_hi))
        logger.debug(
            f"PDAS iteration {iteration}: {int(new_lo.sum())} lower / {int(new_hi.sum())} upper active, "
            f"{changes} changes, {cg_iterations} CG steps, residual {violation:.2e}"
        )
        if changes == 0 and violation <= threshold:
            converged = True
            break
        active_lo, active_hi = new_lo, new_hi

    if converged:
        logger.info(f"PDAS converged in {iteration} iterations ({prob.n_cells} cells)")
    else:
        logger.warning(f"PDAS did not converge in {max_iter} iterations (residual {violation:.2e})")

    return OcpSolution(
        y=y,
        u=ControlFunction(u, prob.control_n),
        p=p,
        j_tilde=evaluate_j_tilde(prob, y, u),
        active_lo=np.flatnonzero(active_lo),
        active_hi=np.flatnonzero(active_hi),
        solver_iterations=iteration,
        converged=converged,
        method="pdas",
        vi_violation=violation,
    )


def estimate_operator_norm(prob: OcpProblem, iterations: int = 30, seed: int = 0) -> float:
    """Power iteration for ||S||^2, S: L2(W_rho) -> L2 the control-to-state map"""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(prob.n_cells)
    volumes = prob.cell_volumes
    v /= np.sqrt(np.sum(volumes * v * v))
    estimate = 0.0
    for _ in range(iterations):
        w = (prob.hessian_apply(v) - prob.gamma * volumes * v) / volumes
        norm = np.sqrt(np.sum(volumes * w * w))
        if norm == 0:
            return 0.0
        estimate = float(np.sum(volumes * v * w))
        v = w / norm
    return estimate


def solve_projected_gradient(
    prob: OcpProblem,
    tol: float = 1e-10,
    max_iter: int = 5000,
    step: Optional[float] = None,
) -> OcpSolution:
    """Fixed-step projected gradient, step 1 / (gamma + ||S||^2); raises if the cost increases"""
    lower, upper = prob.lower.values, prob.upper.values
    if step is None:
        step = 1.0 / (prob.gamma + estimate_operator_norm(prob))

    u = np.clip(np.zeros(prob.n_cells), lower, upper)
    y = prob.state(u)
    p = prob.adjoint(y)
    cost = evaluate_j_tilde(prob, y, u)
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        u_next = np.clip(u - step * prob.gradient(u, p), lower, upper)
        y = prob.state(u_next)
        p = prob.adjoint(y)
        cost_next = evaluate_j_tilde(prob, y, u_next)
        if cost_next > cost + 1e-12 * max(1.0, abs(cost)):
            raise ConvergenceError(
                f"Projected gradient diverging at iteration {iteration}: cost {cost:.6e} -> {cost_next:.6e} "
                f"with step {step:.3e}"
            )
        change = float(np.max(np.abs(u_next - u))) if u.size else 0.0
        u, cost = u_next, cost_next
        if change <= tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Projected gradient did not converge in {max_iter} iterations")
    active_lo, active_hi = _classify(prob, p)
    return OcpSolution(
        y=y,
        u=ControlFunction(u, prob.control_n),
        p=p,
        j_tilde=cost,
        active_lo=np.flatnonzero(active_lo),
        active_hi=np.flatnonzero(active_hi),
        solver_iterations=iteration,
        converged=converged,
        method="projected_gradient",
        vi_violation=_projection_residual(prob, u, p),
    )


def kkt_report(prob: OcpProblem, sol: OcpSolution) -> KktReport:
    u = sol.u.values
    lower, upper = prob.lower.values, prob.upper.values
    lam = prob.gradient(u, sol.p)

    load = prob.coupling @ u
    state_residual = np.linalg.norm(prob.stiffness @ sol.y - load) / max(np.linalg.norm(load), 1e-300)
    adjoint_load = prob.mass @ sol.y - prob.yd_load
    adjoint_residual = np.linalg.norm(prob.stiffness @ sol.p - adjoint_load) / max(np.linalg.norm(adjoint_load), 1e-300)

    fixed = lower == upper
    lo_mask = np.zeros(prob.n_cells, dtype=bool)
    hi_mask = np.zeros(prob.n_cells, dtype=bool)
    lo_mask[sol.active_lo] = True
    hi_mask[sol.active_hi] = True
    lo_mask &= ~fixed
    hi_mask &= ~fixed
    inactive = ~(lo_mask | hi_mask | fixed)

    def worst(values):
        return float(np.max(values)) if values.size else 0.0

    lambda1 = np.maximum(lam, 0.0)
    lambda2 = np.minimum(lam, 0.0)
    free = ~fixed
    return KktReport(
        state_residual=float(state_residual),
        adjoint_residual=float(adjoint_residual),
        vi_violation=_projection_residual(prob, u, sol.p),
        lam=ControlFunction(lam, prob.control_n),
        lambda1_neg_part=worst(np.maximum(-lam[lo_mask], 0.0)),
        lambda2_pos_part=worst(np.maximum(lam[hi_mask], 0.0)),
        inactive_multiplier=worst(np.abs(lam[inactive])),
        bound_violation=worst(np.maximum(np.maximum(lower - u, u - upper), 0.0)),
        complementarity_gap=worst(np.maximum(
            np.abs(lambda1[free] * (u[free] - lower[free])),
            np.abs(lambda2[free] * (upper[free] - u[free])),
        )),
    )


def ritz_project(stiffness, load: np.ndarray, solver=None) -> np.ndarray:
    """Solution of a(w_*, z_*) = load(z_*) for all z_* in the state space"""
    solver = _solver_for(stiffness) if solver is None else solver
    return solver.solve(load)


def lift_to_fine(prob: OcpProblem, v: np.ndarray) -> np.ndarray:
    return v if prob.lift is None else prob.lift @ v


def lift_solution(prob: OcpProblem, sol: OcpSolution) -> OcpSolution:
    """State and adjoint expressed in fine DOFs"""
    if prob.lift is None:
        return sol
    return dataclasses.replace(sol, y=prob.lift @ sol.y, p=prob.lift @ sol.p)


def _fine_lift(prob: OcpProblem, ops: FemOperators) -> sparse.spmatrix:
    return prob.lift if prob.lift is not None else sparse.identity(ops.n_dofs, format="csr")


def ritz_project_state(prob: OcpProblem, ops: FemOperators, reference: OcpSolution) -> np.ndarray:
    """y_dot in fine DOFs: a(y_dot, z) = (u_ref, z) for z in the state space.

    The fine state satisfies a(y_ref, z) = (u_ref, z) on all of V_h, so the
    load is assembled as a(y_ref, z).
    """
    lift = _fine_lift(prob, ops)
    return lift @ ritz_project(prob.stiffness, lift.T @ (ops.stiffness @ reference.y), prob.solver)


def ritz_project_adjoint(prob: OcpProblem, ops: FemOperators, reference: OcpSolution) -> np.ndarray:
    """p_dot in fine DOFs: a(q, p_dot) = (y_ref - y_d, q) for q in the state space"""
    lift = _fine_lift(prob, ops)
    return lift @ ritz_project(prob.stiffness, lift.T @ (ops.stiffness @ reference.p), prob.solver)


def _energy(ops: FemOperators, v: np.ndarray) -> float:
    return float(np.sqrt(max(v @ (ops.stiffness @ v), 0.0)))


def ritz_gap(prob: OcpProblem, ops: FemOperators, reference: OcpSolution) -> float:
    """||y_h - y_dot||_a + ||p_h - p_dot||_a"""
    dy = reference.y - ritz_project_state(prob, ops, reference)
    dp = reference.p - ritz_project_adjoint(prob, ops, reference)
    return _energy(ops, dy) + _energy(ops, dp)


def ritz_ratio(prob: OcpProblem, ops: FemOperators, reference: OcpSolution, candidate: OcpSolution) -> float:
    """ritz_gap over ||y_h - y_*||_a + ||p_h - p_*||_a for a lifted candidate.

    The Ritz projections are the energy-best approximations in the state
    space, so the ratio lies in [0, 1].
    """
    if candidate.y.shape != reference.y.shape:
        raise DimensionError(
            f"Candidate state of size {candidate.y.shape[0]} against reference of size {reference.y.shape[0]}"
        )
    errors = _energy(ops, candidate.y - reference.y) + _energy(ops, candidate.p - reference.p)
    if errors == 0.0:
        return 0.0
    return ritz_gap(prob, ops, reference) / errors


@dataclass(frozen=True)
class ErrorTable:
    rel_l2_u: float
    rel_l2_y: float
    rel_energy_y: float
    rel_l2_p: float
    rel_energy_p: float


def _relative(error: float, reference: float) -> float:
    if reference > 0:
        return error / reference
    return error


def error_report(reference: OcpSolution, candidate: OcpSolution, ops: FemOperators) -> ErrorTable:
    """Relative errors of a (lifted) candidate against a fine reference solution"""
    if candidate.y.shape != reference.y.shape or candidate.p.shape != reference.p.shape:
        raise DimensionError(
            f"Candidate state of size {candidate.y.shape[0]} against reference of size {reference.y.shape[0]}; "
            "lift the candidate to fine DOFs first"
        )
    if reference.y.shape[0] != ops.n_dofs:
        raise DimensionError(f"Reference has {reference.y.shape[0]} DOFs, operators {ops.n_dofs}")

    n_ref = reference.u.n
    u_candidate = candidate.u if candidate.u.n == n_ref else prolong_control(candidate.u, n_ref)
    volumes = np.full(n_ref * n_ref, 1.0 / (n_ref * n_ref))

    def l2(v):
        return float(np.sqrt(max(v @ (ops.mass @ v), 0.0)))

    def energy(v):
        return float(np.sqrt(max(v @ (ops.stiffness @ v), 0.0)))

    du = u_candidate.values - reference.u.values
    dy = candidate.y - reference.y
    dp = candidate.p - reference.p
    return ErrorTable(
        rel_l2_u=_relative(float(np.sqrt(np.sum(volumes * du * du))),
                           float(np.sqrt(np.sum(volumes * reference.u.values ** 2)))),
        rel_l2_y=_relative(l2(dy), l2(reference.y)),
        rel_energy_y=_relative(energy(dy), energy(reference.y)),
        rel_l2_p=_relative(l2(dp), l2(reference.p)),
        rel_energy_p=_relative(energy(dp), energy(reference.p)),
    )
