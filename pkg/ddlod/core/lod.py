"""DD-LOD machinery: quasi-interpolation, kernel projection, additive Schwarz
preconditioned corrector iterations and the localized multiscale basis."""

import dataclasses
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sparse

from ddlod.config import settings
from ddlod.core.assembly import FemOperators
from ddlod.core.coeff import CoefficientField
from ddlod.core.grid import MeshHierarchy, expand_patch
from ddlod.core.linalg import CholeskyFactor, SparseMatrix, SpdSolver, TripletBuilder
from ddlod.exceptions import (
    BasisFormatError,
    BreakdownError,
    DimensionError,
    FactorizationError,
    LocalizationError,
    MeshError,
)
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)

BASIS_MAGIC = b"MSLODB1\0"
BASIS_HEADER_DTYPE = np.dtype([
    ("magic", "S8"),
    ("nH", "<u4"),
    ("nh", "<u4"),
    ("k", "<u4"),
    ("j", "<u4"),
    ("fingerprint", "<u8"),
    ("m", "<u4"),
])
BASIS_ENTRY_DTYPE = np.dtype([("id", "<u4"), ("value", "<f8")])

# a column is frozen once r^T z falls this far below its initial value
_FREEZE_RTOL = 1e-20
# r^T z below -_NEGATIVE_RTOL times its initial value is a loss of
# definiteness; anything above that is round-off of a converged column
_NEGATIVE_RTOL = 1e-10

# vertex-star kernels are trivial for refinement ratios below this
MIN_REFINEMENT = 3


def corrector_iterations(nH: int, j: float) -> int:
    """k = ceil(-j ln H) for H = 1/nH"""
    return max(1, math.ceil(j * math.log(nH) - 1e-12))


def basis_fingerprint(field: CoefficientField, nH: int, nh: int, k: int) -> int:
    digest = hashlib.blake2b(digest_size=8)
    digest.update(field.to_bytes())
    digest.update(np.array([nH, nh, k], dtype="<u4").tobytes())
    return int.from_bytes(digest.digest(), "little")


@dataclass(frozen=True)
class QuasiInterpolant:
    """Pi_H (fine interior DOFs -> coarse interior DOFs) and the nodal embedding V_H -> V_h"""

    matrix: SparseMatrix
    embedding: SparseMatrix

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def _prolongation_1d(nH: int, nh: int) -> SparseMatrix:
    """Values of the coarse 1D hats at the fine nodes, (nh+1) x (nH+1)"""
    r = nh // nH
    fine = np.arange(nh + 1)
    left = np.minimum(fine // r, nH - 1)
    t = (fine - left * r) / r
    builder = TripletBuilder(nh + 1, nH + 1)
    builder.add(fine, left, 1.0 - t)
    builder.add(fine, left + 1, t)
    return builder.build()


def _averaged_projection_1d(nH: int, nh: int) -> SparseMatrix:
    """1D local L2 projections onto P1 per coarse element, averaged at the vertices"""
    r = nh // nH
    t = np.arange(r + 1) / r
    hats = np.column_stack([1.0 - t, t])
    fine_mass = np.zeros((r + 1, r + 1))
    for e in range(r):
        fine_mass[e:e + 2, e:e + 2] += np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    coarse_mass = hats.T @ fine_mass @ hats
    local = np.linalg.solve(coarse_mass, hats.T @ fine_mass)

    count = np.full(nH + 1, 2.0)
    count[[0, -1]] = 1.0
    builder = TripletBuilder(nH + 1, nh + 1)
    fine_local = np.arange(r + 1)
    for element in range(nH):
        for a in range(2):
            vertex = element + a
            builder.add(np.full(r + 1, vertex), element * r + fine_local, local[a] / count[vertex])
    return builder.build()


def build_pi_h(hier: MeshHierarchy) -> QuasiInterpolant:
    """Averages of local L2 projections onto bilinears per coarse element.

    The coarse mass, the fine mass restricted to a coarse element and the
    vertex averaging weights all factor over the two coordinates on a
    uniform square mesh, so the 2D operator is the Kronecker product of the
    1D one. Boundary coarse vertices are dropped (their value is zero).
    """
    nH, nh = hier.coarse.n, hier.fine.n
    projection_1d = _averaged_projection_1d(nH, nh)
    prolongation_1d = _prolongation_1d(nH, nh)

    coarse_interior = hier.coarse.interior_node_ids
    fine_interior = hier.fine.interior_node_ids
    matrix = sparse.kron(projection_1d, projection_1d, format="csr")[coarse_interior][:, fine_interior]
    embedding = sparse.kron(prolongation_1d, prolongation_1d, format="csr")[fine_interior][:, coarse_interior]

    matrix = sparse.csr_matrix(matrix)
    matrix.eliminate_zeros()
    embedding = sparse.csr_matrix(embedding)
    embedding.eliminate_zeros()
    return QuasiInterpolant(matrix=matrix, embedding=embedding)


def kernel_project(pi: QuasiInterpolant, v: np.ndarray) -> np.ndarray:
    """P v = v - embedding(Pi_H v); works column-wise on 2D arrays"""
    return v - pi.embedding @ (pi.matrix @ v)


@dataclass
class LocalSolve:
    """Exact solve on the kernel functions supported in one vertex star.

    Minimises 1/2 z^T K z - r^T z subject to C z = 0, where C holds the rows
    of Pi_H touching the local DOFs, through the Schur complement
    S = C K^-1 C^T (pseudo-inverted when rows of C are dependent).
    """

    vertex: int
    dofs: np.ndarray
    factor: CholeskyFactor
    constraint: np.ndarray
    coupling: np.ndarray
    schur_pinv: np.ndarray

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        y = self.factor.solve(rhs)
        if self.constraint.shape[0]:
            y = y - self.coupling @ (self.schur_pinv @ (self.constraint @ y))
        return y


class SchwarzPreconditioner:
    """One-level additive Schwarz over the vertex stars omega_i (patch layers=0)"""

    def __init__(self, hier: MeshHierarchy, ops: FemOperators, pi: QuasiInterpolant):
        if hier.r_hH < MIN_REFINEMENT:
            raise MeshError(
                f"H/h = {hier.r_hH} is too small for vertex-star patches: the local kernels of Pi_H are "
                f"trivial, use nh >= {MIN_REFINEMENT} * nH"
            )
        self.n = ops.n_dofs
        self.local_solves: List[LocalSolve] = []
        pi_csc = sparse.csc_matrix(pi.matrix)
        covered = np.zeros(self.n, dtype=bool)

        for dof in range(hier.m):
            vertex = hier.coarse_vertex(dof)
            patch = expand_patch(hier, vertex, 0)
            dofs = patch.fine_dofs
            local_stiffness = ops.stiffness[dofs][:, dofs]
            try:
                factor = CholeskyFactor(local_stiffness)
            except FactorizationError as exc:
                raise FactorizationError(f"Local stiffness of vertex {vertex} is not SPD: {exc}", exc.pivot)

            block = pi_csc[:, dofs]
            rows = np.unique(block.nonzero()[0])
            constraint = block[rows].toarray()
            if rows.size:
                if np.linalg.matrix_rank(constraint) >= dofs.size:
                    raise MeshError(f"Vertex star of {vertex} holds no kernel function of Pi_H")
                coupling = factor.solve(constraint.T)
                schur = constraint @ coupling
                schur_pinv = scipy.linalg.pinvh(0.5 * (schur + schur.T))
            else:
                coupling = np.zeros((dofs.size, 0))
                schur_pinv = np.zeros((0, 0))

            self.local_solves.append(LocalSolve(vertex, dofs, factor, constraint, coupling, schur_pinv))
            covered[dofs] = True

        if not covered.all():
            raise LocalizationError(f"Vertex stars leave {int((~covered).sum())} fine DOFs uncovered")
        logger.info(
            f"Schwarz preconditioner: {len(self.local_solves)} patches of "
            f"{max(s.dofs.size for s in self.local_solves) if self.local_solves else 0} DOFs"
        )

    def apply(self, residual: np.ndarray, pattern: Optional[np.ndarray] = None) -> np.ndarray:
        """Sum of local kernel solves.

        Patches are skipped where `pattern` (the residual itself by default)
        vanishes, so the result is supported on the stars it touches.
        """
        residual = np.asarray(residual, dtype=float)
        single = residual.ndim == 1
        block = residual[:, None] if single else residual
        pattern = block if pattern is None else np.asarray(pattern).reshape(block.shape)
        result = np.zeros_like(block)

        for local in self.local_solves:
            columns = np.flatnonzero(np.any(pattern[local.dofs] != 0.0, axis=0))
            if columns.size == 0:
                continue
            result[np.ix_(local.dofs, columns)] += local.solve(block[np.ix_(local.dofs, columns)])

        return result[:, 0] if single else result


def _precondition(prec: SchwarzPreconditioner, pi: QuasiInterpolant, residual: np.ndarray):
    """Preconditioned residual z and r^T z per column.

    Local solves see r only through its action on kernel functions, so they
    are fed P^T r, whose round-off shrinks with the kernel residual. Patches
    are still selected by the nonzero pattern of r.
    """
    projected = residual - pi.matrix.T @ (pi.embedding.T @ residual)
    z = prec.apply(projected, pattern=residual)
    support = z != 0.0
    # entries outside the patch union only carry round-off from the embedding
    z = np.where(support, kernel_project(pi, z), 0.0)
    return z, _column_dot(projected, z)


def _column_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", a, b)


def _block_corrector_pcg(
    ops: FemOperators,
    pi: QuasiInterpolant,
    prec: SchwarzPreconditioner,
    hats: Sequence[int],
    k: int,
) -> np.ndarray:
    """k PCG iterations from 0 for a(C phi_i, w) = a(phi_i, w) on ker Pi_H, one column per hat"""
    stiffness = ops.stiffness
    hats = np.asarray(hats, dtype=np.int64)
    corrections = np.zeros((ops.n_dofs, hats.size))
    if k == 0 or hats.size == 0:
        return corrections

    residual = stiffness @ pi.embedding[:, hats].toarray()
    z, rz = _precondition(prec, pi, residual)
    if np.any(rz < 0):
        bad = int(hats[np.argmax(rz < 0)])
        raise BreakdownError(f"Corrector for hat {bad}: preconditioner gave a non-descent direction", 0)
    rz_initial = rz.copy()
    active = rz > 0
    direction = np.where(active, z, 0.0)

    for iteration in range(1, k + 1):
        if not active.any():
            logger.debug(f"All {hats.size} correctors converged after {iteration - 1} iterations")
            break
        stiff_direction = stiffness @ direction
        curvature = _column_dot(direction, stiff_direction)
        if np.any(curvature[active] <= 0):
            bad = int(hats[np.flatnonzero(active & (curvature <= 0))[0]])
            raise BreakdownError(
                f"Corrector for hat {bad}: non-positive curvature at iterate {iteration}", iteration
            )
        step = np.where(active, rz / np.where(active, curvature, 1.0), 0.0)
        corrections += direction * step
        residual -= stiff_direction * step
        if iteration == k:
            break

        columns = np.flatnonzero(active)
        z = np.zeros_like(residual)
        rz_next = np.zeros_like(rz)
        z[:, columns], rz_next[columns] = _precondition(prec, pi, residual[:, columns])
        negative = active & (rz_next < -_NEGATIVE_RTOL * rz_initial)
        if negative.any():
            bad = int(hats[np.flatnonzero(negative)[0]])
            raise BreakdownError(
                f"Corrector for hat {bad}: preconditioner gave a non-descent direction at iterate {iteration}",
                iteration,
            )
        converged = active & (rz_next <= _FREEZE_RTOL * rz_initial)
        if converged.any():
            logger.debug(f"{int(converged.sum())} corrector(s) converged at iterate {iteration}")
            active &= ~converged
        beta = np.where(active, rz_next / np.where(active, rz, 1.0), 0.0)
        direction = np.where(active, z + direction * beta, 0.0)
        rz = np.where(active, rz_next, 0.0)

    # drop the drift out of ker Pi_H accumulated over the updates
    return np.where(corrections != 0.0, kernel_project(pi, corrections), 0.0)


def corrector_pcg(
    ops: FemOperators,
    pi: QuasiInterpolant,
    prec: SchwarzPreconditioner,
    phi_i: int,
    k: int,
) -> np.ndarray:
    """C_{h,k} phi_i: k preconditioned CG iterations with initial guess 0"""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    if not 0 <= phi_i < pi.m:
        raise DimensionError(f"Coarse hat id {phi_i} outside [0, {pi.m})")
    return _block_corrector_pcg(ops, pi, prec, [phi_i], k)[:, 0]


@dataclass(frozen=True)
class BasisMeta:
    nH: int
    nh: int
    k: int
    j: int  # 0 when k was given directly
    fingerprint: int
    omega_layers: int = 0
    support_radius: int = -1


@dataclass(frozen=True)
class MultiscaleBasis:
    """Columns phi_i - C_{h,k} phi_i over the fine interior DOFs (CSC, N x m)"""

    columns: sparse.csc_matrix
    meta: BasisMeta

    @property
    def m(self) -> int:
        return self.columns.shape[1]

    def support(self, i: int) -> np.ndarray:
        start, stop = self.columns.indptr[i], self.columns.indptr[i + 1]
        return self.columns.indices[start:stop]

    @property
    def support_masks(self) -> List[np.ndarray]:
        return [self.support(i) for i in range(self.m)]


def support_radius(basis: MultiscaleBasis, hier: MeshHierarchy) -> int:
    """Smallest layer count whose patch contains every column's support"""
    r, nh = hier.r_hH, hier.fine.n
    radius = 0
    for i in range(basis.m):
        rows = basis.support(i)
        if rows.size == 0:
            continue
        vx, vy = hier.coarse.node_coords(hier.coarse_vertex(i))
        fx, fy = rows % (nh - 1) + 1, rows // (nh - 1) + 1
        layers = np.maximum(np.abs(fx - r * vx) // r, np.abs(fy - r * vy) // r)
        radius = max(radius, int(layers.max()))
    return radius


def check_localization(basis: MultiscaleBasis, hier: MeshHierarchy, layers: int):
    for i in range(basis.m):
        allowed = expand_patch(hier, hier.coarse_vertex(i), layers).fine_dofs
        outside = np.setdiff1d(basis.support(i), allowed, assume_unique=True)
        if outside.size:
            raise LocalizationError(
                f"Basis column {i} has {outside.size} nonzeros outside its {layers}-layer patch"
            )


def build_basis(
    hier: MeshHierarchy,
    ops: FemOperators,
    field: CoefficientField,
    k: Optional[int] = None,
    j: Optional[int] = None,
    threads: Optional[int] = None,
    chunk_size: Optional[int] = None,
    pi: Optional[QuasiInterpolant] = None,
    prec: Optional[SchwarzPreconditioner] = None,
) -> MultiscaleBasis:
    """Localized DD-LOD basis; k given directly or as ceil(-j ln H)"""
    if k is None:
        j = settings.corrector_j if j is None else j
        k = corrector_iterations(hier.coarse.n, j)
    else:
        j = 0
    if k < 1:
        raise ValueError(f"build_basis needs k >= 1, got {k}")
    if ops.mesh.n != hier.fine.n:
        raise DimensionError(f"Operators on 1/{ops.mesh.n} do not match fine mesh 1/{hier.fine.n}")

    threads = settings.threads if threads is None else threads
    chunk_size = settings.basis_chunk_size if chunk_size is None else chunk_size
    pi = build_pi_h(hier) if pi is None else pi
    prec = SchwarzPreconditioner(hier, ops, pi) if prec is None else prec

    logger.info(
        f"Building DD-LOD basis H=1/{hier.coarse.n}, h=1/{hier.fine.n}, k={k}, j={j}: "
        f"{hier.m} correctors on {threads} thread(s)"
    )
    chunks = [np.arange(start, min(start + chunk_size, hier.m)) for start in range(0, hier.m, chunk_size)]

    def run_chunk(hats: np.ndarray) -> sparse.csc_matrix:
        corrections = _block_corrector_pcg(ops, pi, prec, hats, k)
        return sparse.csc_matrix(pi.embedding[:, hats].toarray() - corrections)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        blocks = list(executor.map(run_chunk, chunks))

    columns = sparse.hstack(blocks, format="csc") if blocks else sparse.csc_matrix((ops.n_dofs, 0))
    columns.sort_indices()
    meta = BasisMeta(hier.coarse.n, hier.fine.n, k, int(j), basis_fingerprint(field, hier.coarse.n, hier.fine.n, k))
    basis = MultiscaleBasis(columns, meta)

    check_localization(basis, hier, 2 * k + 2)
    radius = support_radius(basis, hier)
    basis = MultiscaleBasis(columns, dataclasses.replace(meta, support_radius=radius))
    logger.info(f"Basis built: {basis.m} columns, {columns.nnz} nonzeros, support radius {radius} layers")
    return basis


def save_basis(basis: MultiscaleBasis, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.zeros(1, dtype=BASIS_HEADER_DTYPE)
    header["magic"] = BASIS_MAGIC
    header["nH"], header["nh"] = basis.meta.nH, basis.meta.nh
    header["k"], header["j"] = basis.meta.k, basis.meta.j
    header["fingerprint"] = basis.meta.fingerprint
    header["m"] = basis.m

    with path.open("wb") as handle:
        handle.write(header.tobytes())
        for i in range(basis.m):
            start, stop = basis.columns.indptr[i], basis.columns.indptr[i + 1]
            entries = np.zeros(stop - start, dtype=BASIS_ENTRY_DTYPE)
            entries["id"] = basis.columns.indices[start:stop]
            entries["value"] = basis.columns.data[start:stop]
            handle.write(np.array([stop - start], dtype="<u4").tobytes())
            handle.write(entries.tobytes())
    return path


def read_basis_header(data: bytes) -> np.void:
    if len(data) < BASIS_HEADER_DTYPE.itemsize:
        raise BasisFormatError(f"Basis file truncated: {len(data)} bytes")
    header = np.frombuffer(data[: BASIS_HEADER_DTYPE.itemsize], dtype=BASIS_HEADER_DTYPE)[0]
    if bytes(header["magic"]).ljust(8, b"\0") != BASIS_MAGIC:
        raise BasisFormatError(f"Bad basis magic {bytes(header['magic'])!r}")
    return header


def load_basis(path: Union[str, Path]) -> MultiscaleBasis:
    data = Path(path).read_bytes()
    header = read_basis_header(data)
    nH, nh, m = int(header["nH"]), int(header["nh"]), int(header["m"])
    n_dofs = (nh - 1) ** 2
    if m != (nH - 1) ** 2:
        raise BasisFormatError(f"Basis header has m={m} columns, expected {(nH - 1) ** 2} for nH={nH}")

    offset = BASIS_HEADER_DTYPE.itemsize
    indptr = [0]
    indices, values = [], []
    for i in range(m):
        if offset + 4 > len(data):
            raise BasisFormatError(f"Basis file truncated in column {i}")
        nnz = int(np.frombuffer(data, dtype="<u4", count=1, offset=offset)[0])
        offset += 4
        size = nnz * BASIS_ENTRY_DTYPE.itemsize
        if offset + size > len(data):
            raise BasisFormatError(f"Basis file truncated in column {i}")
        entries = np.frombuffer(data, dtype=BASIS_ENTRY_DTYPE, count=nnz, offset=offset)
        offset += size
        if nnz and int(entries["id"].max()) >= n_dofs:
            raise BasisFormatError(f"Column {i} references DOF {int(entries['id'].max())} >= {n_dofs}")
        indices.append(entries["id"].astype(np.int64))
        values.append(entries["value"].astype(float))
        indptr.append(indptr[-1] + nnz)
    if offset != len(data):
        raise BasisFormatError(f"{len(data) - offset} trailing bytes after {m} columns")

    columns = sparse.csc_matrix(
        (
            np.concatenate(values) if values else np.zeros(0),
            np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
            np.array(indptr),
        ),
        shape=(n_dofs, m),
    )
    meta = BasisMeta(nH, nh, int(header["k"]), int(header["j"]), int(header["fingerprint"]))
    return MultiscaleBasis(columns, meta)


@dataclass(frozen=True)
class ReducedOperators:
    """Operators of the DD-LOD space: G^T K G, G^T M G, G^T B with G the basis"""

    stiffness: np.ndarray
    mass: np.ndarray
    control_coupling: np.ndarray
    cell_volumes: np.ndarray
    lift: sparse.csc_matrix
    factor: CholeskyFactor = dataclasses.field(repr=False)

    @property
    def m(self) -> int:
        return self.stiffness.shape[0]


def _symmetric(matrix) -> np.ndarray:
    dense = matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix)
    return 0.5 * (dense + dense.T)


def ms_operators(basis: MultiscaleBasis, ops: FemOperators) -> ReducedOperators:
    G = basis.columns
    if G.shape[0] != ops.n_dofs:
        raise DimensionError(f"Basis has {G.shape[0]} fine rows, operators have {ops.n_dofs} DOFs")
    stiffness = _symmetric(G.T @ (ops.stiffness @ G))
    mass = _symmetric(G.T @ (ops.mass @ G))
    coupling = G.T @ ops.control_coupling
    coupling = coupling.toarray() if sparse.issparse(coupling) else np.asarray(coupling)
    try:
        factor = CholeskyFactor(stiffness)
    except FactorizationError as exc:
        raise FactorizationError(f"Reduced stiffness is rank deficient: {exc}", exc.pivot) from exc
    return ReducedOperators(stiffness, mass, coupling, ops.cell_volumes, G, factor)


@dataclass(frozen=True)
class EllipticComparison:
    y_fine: np.ndarray
    y_ms: np.ndarray
    l2_error: float
    energy_error: float
    l2_norm: float
    energy_norm: float


def solve_elliptic(ops: FemOperators, reduced: ReducedOperators, load: Optional[np.ndarray] = None) -> EllipticComparison:
    """Fine and DD-LOD solutions of a(y, z) = (f, z); `load` defaults to f = 1"""
    if load is None:
        load = ops.nodal_load(np.ones(ops.mesh.n_nodes))
    y_fine = SpdSolver(ops.stiffness).solve(load)
    y_ms = reduced.lift @ reduced.factor.solve(reduced.lift.T @ load)
    error = y_fine - y_ms
    return EllipticComparison(
        y_fine=y_fine,
        y_ms=y_ms,
        l2_error=float(np.sqrt(error @ (ops.mass @ error))),
        energy_error=float(np.sqrt(error @ (ops.stiffness @ error))),
        l2_norm=float(np.sqrt(y_fine @ (ops.mass @ y_fine))),
        energy_norm=float(np.sqrt(y_fine @ (ops.stiffness @ y_fine))),
    )
