from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np
import scipy.sparse as sparse

from ddlod.core.coeff import CoefficientField
from ddlod.core.grid import StructuredMesh, parent_elements
from ddlod.core.linalg import SparseMatrix, TripletBuilder
from ddlod.exceptions import DimensionError, MeshError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)

# 2x2 Gauss points on the reference square [0, 1]^2
_GAUSS_1D = 0.5 + np.array([-1.0, 1.0]) / (2.0 * np.sqrt(3.0))
_GAUSS_WEIGHT = 0.25

MASS_REFERENCE = np.array([
    [4.0, 2.0, 1.0, 2.0],
    [2.0, 4.0, 2.0, 1.0],
    [1.0, 2.0, 4.0, 2.0],
    [2.0, 1.0, 2.0, 4.0],
]) / 36.0


def _reference_gradients(xi: float, eta: float) -> np.ndarray:
    """Gradients (4 x 2) of the Q1 shape functions on the unit square, ccw from (0, 0)"""
    return np.array([
        [-(1 - eta), -(1 - xi)],
        [(1 - eta), -xi],
        [eta, xi],
        [-eta, (1 - xi)],
    ])


def _gradient_products() -> np.ndarray:
    """G[d, e] = sum_q w_q grad_d phi_a grad_e phi_b on the unit square"""
    products = np.zeros((2, 2, 4, 4))
    for xi in _GAUSS_1D:
        for eta in _GAUSS_1D:
            grads = _reference_gradients(xi, eta)
            for d in range(2):
                for e in range(2):
                    products[d, e] += _GAUSS_WEIGHT * np.outer(grads[:, d], grads[:, e])
    return products


GRADIENT_PRODUCTS = _gradient_products()


def element_stiffness(A_elem: np.ndarray, h: float) -> np.ndarray:
    """Integral of A grad(phi_b) . grad(phi_a) over an h x h square (independent of h in 2D)"""
    A_elem = np.asarray(A_elem, dtype=float)
    if A_elem.shape != (2, 2):
        raise DimensionError(f"Element coefficient must be 2x2, got {A_elem.shape}")
    # derivatives scale by 1/h, the area by h^2
    return np.einsum("de,deab->ab", A_elem, GRADIENT_PRODUCTS)


def element_mass(h: float) -> np.ndarray:
    return h * h * MASS_REFERENCE


@dataclass(frozen=True)
class ControlFunction:
    """Piecewise constant function on the n x n control mesh, cells row-major"""

    values: np.ndarray
    n: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.n * self.n,):
            raise DimensionError(f"Control has {values.shape} values for a {self.n}x{self.n} mesh")
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float, n: int) -> "ControlFunction":
        return cls(np.full(n * n, float(value)), n)

    def grid(self) -> np.ndarray:
        """Values as an (n, n) array, row 0 = bottom cell row"""
        return self.values.reshape(self.n, self.n)


@dataclass(frozen=True)
class AffineFunction:
    """c0 + c1 x1 + c2 x2"""

    c0: float
    c1: float = 0.0
    c2: float = 0.0

    def __call__(self, x1, x2):
        return self.c0 + self.c1 * np.asarray(x1) + self.c2 * np.asarray(x2)

    @classmethod
    def parse(cls, text: str) -> "AffineFunction":
        parts = [float(p) for p in str(text).replace(" ", "").split(",") if p != ""]
        if not 1 <= len(parts) <= 3:
            raise ValueError(f"Affine function needs 1 to 3 coefficients, got {text!r}")
        return cls(*parts)

    def __str__(self):
        return f"{self.c0!r},{self.c1!r},{self.c2!r}"


@dataclass(frozen=True)
class FemOperators:
    """Q1 operators over the interior DOFs of `mesh`.

    `mass_full` keeps interior rows and all node columns so loads of functions
    with non-zero boundary values (such as a constant target state) are exact;
    `mass_nodes` is the mass matrix over all nodes.
    """

    mesh: StructuredMesh
    control_mesh: StructuredMesh
    stiffness: SparseMatrix
    mass: SparseMatrix
    control_coupling: SparseMatrix
    cell_volumes: np.ndarray
    mass_full: SparseMatrix
    coupling_full: SparseMatrix
    mass_nodes: SparseMatrix

    @property
    def n_dofs(self) -> int:
        return self.stiffness.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cell_volumes.shape[0]

    def nodal_load(self, nodal_values: np.ndarray) -> np.ndarray:
        """Vector of integrals of (Q1 function with these nodal values) times each interior hat"""
        nodal_values = np.asarray(nodal_values, dtype=float)
        if nodal_values.shape[0] != self.mesh.n_nodes:
            raise DimensionError(
                f"Nodal function has {nodal_values.shape[0]} values, mesh has {self.mesh.n_nodes} nodes"
            )
        return self.mass_full @ nodal_values

    def extend(self, dof_values: np.ndarray) -> np.ndarray:
        """Interior DOF vector to all nodes, zero on the boundary"""
        nodal = np.zeros(self.mesh.n_nodes)
        nodal[self.mesh.interior_node_ids] = dof_values
        return nodal


def _global_element_matrices(mesh: StructuredMesh, field: CoefficientField) -> np.ndarray:
    return (
        field.a11[:, None, None] * GRADIENT_PRODUCTS[0, 0]
        + field.a12[:, None, None] * (GRADIENT_PRODUCTS[0, 1] + GRADIENT_PRODUCTS[1, 0])
        + field.a22[:, None, None] * GRADIENT_PRODUCTS[1, 1]
    )


def _assemble_nodes(mesh: StructuredMesh, local: np.ndarray) -> SparseMatrix:
    nodes = mesh.element_nodes
    rows = np.repeat(nodes, 4, axis=1)
    cols = np.tile(nodes, (1, 4))
    if local.ndim == 2:
        local = np.broadcast_to(local, (mesh.n_elements, 4, 4))
    builder = TripletBuilder(mesh.n_nodes, mesh.n_nodes)
    builder.add(rows, cols, local.reshape(mesh.n_elements, 16))
    return builder.build()


def assemble_full_stiffness(mesh: StructuredMesh, field: CoefficientField) -> SparseMatrix:
    return _assemble_nodes(mesh, _global_element_matrices(mesh, field))


def assemble(mesh: StructuredMesh, field: CoefficientField, control_mesh: StructuredMesh) -> FemOperators:
    if field.n != mesh.n:
        raise MeshError(f"Coefficient field resolution {field.n} differs from mesh resolution {mesh.n}")
    if mesh.n % control_mesh.n:
        raise MeshError(f"Control resolution {control_mesh.n} does not divide mesh resolution {mesh.n}")

    interior = mesh.interior_node_ids
    stiffness_full = _assemble_nodes(mesh, _global_element_matrices(mesh, field))
    mass_all = _assemble_nodes(mesh, element_mass(mesh.h))

    # int_{cell c} phi_i: every fine element adds h^2/4 to each of its nodes
    cells = parent_elements(mesh.n, control_mesh.n)
    builder = TripletBuilder(mesh.n_nodes, control_mesh.n_elements)
    builder.add(
        mesh.element_nodes,
        np.repeat(cells[:, None], 4, axis=1),
        np.full((mesh.n_elements, 4), 0.25 * mesh.h * mesh.h),
    )
    coupling_full = builder.build()

    ops = FemOperators(
        mesh=mesh,
        control_mesh=control_mesh,
        stiffness=stiffness_full[interior][:, interior].tocsr(),
        mass=mass_all[interior][:, interior].tocsr(),
        control_coupling=coupling_full[interior].tocsr(),
        cell_volumes=np.full(control_mesh.n_elements, control_mesh.h ** 2),
        mass_full=mass_all[interior].tocsr(),
        coupling_full=coupling_full,
        mass_nodes=mass_all,
    )
    logger.info(
        f"Assembled Q1 operators on h=1/{mesh.n}: {ops.n_dofs} DOFs, "
        f"{ops.stiffness.nnz} stiffness nonzeros, {ops.n_cells} control cells"
    )
    return ops


def _cell_quadrature(control_mesh: StructuredMesh, f, points: int) -> np.ndarray:
    """Cell averages of a callable by a points x points tensor Gauss rule"""
    nodes, weights = np.polynomial.legendre.leggauss(points)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    rho = 1.0 / control_mesh.n
    corners = control_mesh.element_centroids - 0.5 * rho
    averages = np.zeros(control_mesh.n_elements)
    for xi, wx in zip(nodes, weights):
        for eta, wy in zip(nodes, weights):
            values = f(corners[:, 0] + rho * xi, corners[:, 1] + rho * eta)
            averages += wx * wy * np.broadcast_to(values, averages.shape)
    return averages


def q_rho_project(
    f: Union[AffineFunction, Callable, np.ndarray],
    control_mesh: StructuredMesh,
    ops: FemOperators = None,
    quadrature_points: int = 4,
) -> ControlFunction:
    """L2 projection onto piecewise constants, i.e. cell averages on the control mesh.

    Affine functions are averaged exactly by evaluation at cell centroids;
    other callables are integrated with a tensor Gauss rule of
    `quadrature_points` per direction. Arrays are Q1 nodal values on
    `ops.mesh` (all nodes) and averaged exactly through the coupling matrix.
    """
    if isinstance(f, AffineFunction):
        centroids = control_mesh.element_centroids
        values = f(centroids[:, 0], centroids[:, 1])
        return ControlFunction(np.broadcast_to(values, (control_mesh.n_elements,)).astype(float), control_mesh.n)
    if callable(f):
        return ControlFunction(_cell_quadrature(control_mesh, f, quadrature_points), control_mesh.n)
    if ops is None:
        raise ValueError("q_rho_project needs FemOperators for nodal input")
    if ops.control_mesh.n != control_mesh.n:
        raise MeshError(f"Operators were assembled for control mesh 1/{ops.control_mesh.n}, not 1/{control_mesh.n}")
    nodal = np.asarray(f, dtype=float)
    return ControlFunction(ops.coupling_full.T @ nodal / ops.cell_volumes, control_mesh.n)


def cell_average_dofs(ops: FemOperators, v: np.ndarray) -> np.ndarray:
    """Cell averages of an interior-DOF Q1 function (B^T v / |cell|)"""
    return ops.control_coupling.T @ v / ops.cell_volumes


def prolong_control(u: ControlFunction, to_n: int) -> ControlFunction:
    """Inject a piecewise constant control into a finer nested control mesh"""
    if to_n % u.n:
        raise MeshError(f"Control mesh 1/{u.n} is not nested in 1/{to_n}")
    return ControlFunction(u.values[parent_elements(to_n, u.n)], to_n)


def norms(ops: FemOperators, v: np.ndarray) -> Tuple[float, float]:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != ops.n_dofs:
        raise DimensionError(f"Vector of length {v.shape[0]} for {ops.n_dofs} DOFs")
    l2 = float(np.sqrt(max(v @ (ops.mass @ v), 0.0)))
    energy = float(np.sqrt(max(v @ (ops.stiffness @ v), 0.0)))
    return l2, energy


def control_l2(u: np.ndarray, cell_volumes: np.ndarray) -> float:
    return float(np.sqrt(np.sum(cell_volumes * np.asarray(u) ** 2)))


def restrict(matrix: SparseMatrix, keep: np.ndarray) -> SparseMatrix:
    return sparse.csr_matrix(matrix)[keep][:, keep]
