from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from ddlod.config import settings
from ddlod.exceptions import BreakdownError, DimensionError, FactorizationError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)

SparseMatrix = sparse.csr_matrix
Operator = Union[sparse.spmatrix, spla.LinearOperator, np.ndarray]
Preconditioner = Callable[[np.ndarray], np.ndarray]

ABSOLUTE_TOL = 1e-14


class TripletBuilder:
    """Coordinate-triplet accumulator; duplicates are summed on build"""

    def __init__(self, n_rows: int, n_cols: int):
        self.shape = (n_rows, n_cols)
        self._rows = []
        self._cols = []
        self._values = []

    def add(self, rows, cols, values):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if not (rows.size == cols.size == values.size):
            raise DimensionError(
                f"Triplet lengths differ: {rows.size} rows, {cols.size} cols, {values.size} values"
            )
        self._rows.append(rows)
        self._cols.append(cols)
        self._values.append(values)

    def build(self) -> SparseMatrix:
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            values = np.concatenate(self._values)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            values = np.zeros(0)
        matrix = sparse.coo_matrix((values, (rows, cols)), shape=self.shape)
        return canonicalize(matrix)


def canonicalize(matrix) -> SparseMatrix:
    """CSR with summed duplicates and strictly increasing columns per row"""
    csr = sparse.csr_matrix(matrix, dtype=float)
    csr.sum_duplicates()
    csr.sort_indices()
    return csr


def is_symmetric(matrix: SparseMatrix, samples: int = 1000, seed: int = 0) -> bool:
    """Check |a_ij - a_ji| <= 1e-12 max(1, |a_ij|) on sampled stored entries"""
    if matrix.shape[0] != matrix.shape[1]:
        return False
    coo = matrix.tocoo()
    if coo.nnz == 0:
        return True
    rng = np.random.default_rng(seed)
    picks = rng.choice(coo.nnz, size=min(samples, coo.nnz), replace=False)
    csr = sparse.csr_matrix(matrix)
    for idx in picks:
        i, j, value = coo.row[idx], coo.col[idx], coo.data[idx]
        if abs(value - csr[j, i]) > 1e-12 * max(1.0, abs(value)):
            return False
    return True


def spmv(matrix: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product with a dimension check"""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != matrix.shape[1]:
        raise DimensionError(
            f"spmv: vector of length {x.shape[0]} for a {matrix.shape[0]}x{matrix.shape[1]} matrix"
        )
    return matrix @ x


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    tol: float
    residual_history: Tuple[float, ...] = field(default=(), repr=False)


def _as_operator(A: Operator) -> spla.LinearOperator:
    return spla.aslinearoperator(A)


def jacobi(matrix: SparseMatrix) -> Preconditioner:
    diagonal = np.asarray(matrix.diagonal(), dtype=float)
    if np.any(diagonal <= 0):
        raise FactorizationError(
            "Jacobi preconditioner needs a positive diagonal",
            pivot=int(np.argmax(diagonal <= 0)),
        )
    inverse = 1.0 / diagonal
    return lambda r: inverse * r


def cg_solve(
    A: Operator,
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 1000,
    preconditioner: Optional[Preconditioner] = None,
    x0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradient for SPD operators.

    Stops when ||b - Ax|| <= tol ||b|| (or <= 1e-14 when b = 0). A
    non-positive curvature p^T A p or a negative r^T M r raises
    BreakdownError naming the iterate.
    """
    if tol <= 0:
        raise ValueError(f"cg_solve: tol must be positive, got {tol}")
    op = _as_operator(A)
    b = np.asarray(b, dtype=float)
    if op.shape[0] != op.shape[1] or b.shape[0] != op.shape[0]:
        raise DimensionError(f"cg_solve: operator {op.shape} with right-hand side {b.shape}")

    b_norm = np.linalg.norm(b)
    threshold = tol * b_norm if b_norm > 0 else ABSOLUTE_TOL
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - op.matvec(x) if x0 is not None else b.copy()
    scale = b_norm if b_norm > 0 else 1.0

    history = [np.linalg.norm(r) / scale]
    if np.linalg.norm(r) <= threshold:
        return x, SolveReport(0, history[-1], True, tol, tuple(history))

    z = preconditioner(r) if preconditioner else r.copy()
    p = z.copy()
    rz = float(r @ z)
    if rz <= 0:
        raise BreakdownError("cg_solve: preconditioner is not positive definite at iterate 0", 0)

    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        Ap = op.matvec(p)
        curvature = float(p @ Ap)
        if curvature <= 0:
            raise BreakdownError(
                f"cg_solve: p^T A p = {curvature:.3e} <= 0 at iterate {iterations}; "
                "operator is not positive definite",
                iterations,
            )
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * Ap
        residual = np.linalg.norm(r)
        history.append(residual / scale)
        logger.debug(f"cg iterate {iterations}: relative residual {history[-1]:.3e}")
        if residual <= threshold:
            converged = True
            break
        z = preconditioner(r) if preconditioner else r.copy()
        rz_new = float(r @ z)
        if rz_new <= 0:
            raise BreakdownError(
                f"cg_solve: preconditioned residual r^T z = {rz_new:.3e} at iterate {iterations}",
                iterations,
            )
        p = z + (rz_new / rz) * p
        rz = rz_new

    if not converged:
        logger.warning(
            f"cg_solve did not reach tol {tol:.1e} in {max_iter} iterations "
            f"(residual {history[-1]:.3e})"
        )
    return x, SolveReport(iterations, history[-1], converged, tol, tuple(history))


class CholeskyFactor:
    """Reusable factorization of an SPD matrix.

    Small systems use dense LAPACK Cholesky; larger sparse systems use a
    SuperLU factorization with diagonal pivoting and a symmetric ordering,
    whose U diagonal are the Cholesky pivots and are checked for positivity.
    """

    def __init__(self, matrix, dense_limit: Optional[int] = None):
        dense_limit = settings.dense_solver_limit if dense_limit is None else dense_limit
        n_rows, n_cols = matrix.shape
        if n_rows != n_cols:
            raise DimensionError(f"Cholesky needs a square matrix, got {n_rows}x{n_cols}")
        self.n = n_rows
        self._dense = None
        self._lu = None

        diagonal = matrix.diagonal() if sparse.issparse(matrix) else np.diag(matrix)
        bad = np.flatnonzero(np.asarray(diagonal) <= 0)
        if bad.size:
            raise FactorizationError(
                f"Non-positive diagonal pivot {diagonal[bad[0]]:.3e} at index {bad[0]}",
                pivot=int(bad[0]),
            )

        if self.n <= dense_limit or not sparse.issparse(matrix):
            dense = matrix.toarray() if sparse.issparse(matrix) else np.array(matrix, dtype=float)
            factor, info = scipy.linalg.lapack.dpotrf(dense, lower=True, clean=True)
            if info > 0:
                raise FactorizationError(
                    f"Matrix is not positive definite: pivot {info - 1} failed", pivot=info - 1
                )
            if info < 0:
                raise FactorizationError(f"LAPACK dpotrf rejected argument {-info}")
            self._dense = factor
        else:
            try:
                lu = spla.splu(
                    sparse.csc_matrix(matrix),
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as exc:
                raise FactorizationError(f"Sparse factorization failed: {exc}") from exc
            pivots = lu.U.diagonal()
            bad = np.flatnonzero(pivots <= 0)
            if bad.size:
                original = int(np.argsort(lu.perm_c)[bad[0]])
                raise FactorizationError(
                    f"Matrix is not positive definite: pivot {original} is {pivots[bad[0]]:.3e}",
                    pivot=original,
                )
            self._lu = lu

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise DimensionError(f"Factor of size {self.n} applied to {b.shape}")
        if self._dense is not None:
            return scipy.linalg.cho_solve((self._dense, True), b)
        return self._lu.solve(b)


def cholesky_factor(matrix, dense_limit: Optional[int] = None) -> CholeskyFactor:
    return CholeskyFactor(matrix, dense_limit=dense_limit)


def cholesky_solve(handle: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    return handle.solve(b)


class SpdSolver:
    """Direct factorization up to `direct_limit` unknowns, Jacobi-PCG beyond"""

    def __init__(self, matrix, direct_limit: Optional[int] = None, tol: Optional[float] = None):
        self.matrix = matrix
        self.n = matrix.shape[0]
        self.direct_limit = settings.direct_solver_limit if direct_limit is None else direct_limit
        self.tol = settings.iterative_tol if tol is None else tol
        self.last_report: Optional[SolveReport] = None
        if self.n <= self.direct_limit:
            self._factor = CholeskyFactor(matrix)
            self._precond = None
        else:
            logger.info(f"System of size {self.n} above direct limit; using Jacobi-PCG")
            self._factor = None
            self._precond = jacobi(sparse.csr_matrix(matrix))

    @property
    def is_direct(self) -> bool:
        return self._factor is not None

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._factor is not None:
            return self._factor.solve(b)
        b = np.asarray(b, dtype=float)
        if b.ndim == 2:
            return np.column_stack([self.solve(column) for column in b.T])
        x, report = cg_solve(
            self.matrix, b, tol=self.tol, max_iter=settings.iterative_max_iter,
            preconditioner=self._precond,
        )
        self.last_report = report
        return x


def loglog_slope(params: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(values) against log(params)"""
    params = np.asarray(params, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = (params > 0) & (values > 0)
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(params[keep]), np.log(values[keep]), 1)
    return float(slope)
