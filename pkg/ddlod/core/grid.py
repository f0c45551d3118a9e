"""Structured meshes of the unit square and the nested hierarchy T_H / T_h / T_rho.

Numbering is implicit: node (i, j) at (i/n, j/n) has id i + j*(n+1); element
(ex, ey) has id ex + ey*n with nodes listed counterclockwise from its lower
left corner. Interior nodes get a separate DOF numbering (i-1) + (j-1)*(n-1);
boundary nodes carry no DOF.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np

from ddlod.exceptions import MeshError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class StructuredMesh:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise MeshError(f"Mesh needs at least one subdivision, got n={self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 2

    @property
    def n_elements(self) -> int:
        return self.n ** 2

    @property
    def n_interior(self) -> int:
        return (self.n - 1) ** 2

    def node_id(self, i, j):
        return np.asarray(i) + np.asarray(j) * (self.n + 1)

    def node_coords(self, node):
        node = np.asarray(node)
        return node % (self.n + 1), node // (self.n + 1)

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """(n^2, 4) node ids of every element, counterclockwise"""
        ex, ey = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="xy")
        ex, ey = ex.ravel(), ey.ravel()
        return np.column_stack([
            self.node_id(ex, ey),
            self.node_id(ex + 1, ey),
            self.node_id(ex + 1, ey + 1),
            self.node_id(ex, ey + 1),
        ])

    @cached_property
    def element_centroids(self) -> np.ndarray:
        ex, ey = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="xy")
        return np.column_stack([(ex.ravel() + 0.5) * self.h, (ey.ravel() + 0.5) * self.h])

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        i, j = self.node_coords(np.arange(self.n_nodes))
        return (i == 0) | (j == 0) | (i == self.n) | (j == self.n)

    @cached_property
    def interior_node_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def node_to_dof(self) -> np.ndarray:
        """DOF index of every node, -1 on the boundary"""
        mapping = np.full(self.n_nodes, -1, dtype=np.int64)
        mapping[self.interior_node_ids] = np.arange(self.n_interior)
        return mapping

    def is_interior(self, node: int) -> bool:
        if not 0 <= node < self.n_nodes:
            return False
        return not self.boundary_mask[node]


@dataclass(frozen=True)
class MeshHierarchy:
    coarse: StructuredMesh
    fine: StructuredMesh
    control: StructuredMesh

    @property
    def r_hH(self) -> int:
        return self.fine.n // self.coarse.n

    @property
    def r_hrho(self) -> int:
        return self.fine.n // self.control.n

    @property
    def m(self) -> int:
        """Number of coarse interior vertices (multiscale basis size)"""
        return self.coarse.n_interior

    def coarse_vertex(self, dof: int) -> int:
        """Coarse node id of the coarse interior DOF `dof`"""
        return int(self.coarse.interior_node_ids[dof])


def build_hierarchy(nH: int, nh: int, nrho: int) -> MeshHierarchy:
    for name, value in (("nH", nH), ("nh", nh), ("nrho", nrho)):
        if value < 1:
            raise MeshError(f"{name} must be positive, got {value}")
    if nh % nH:
        raise MeshError(f"Fine resolution nh={nh} is not divisible by coarse resolution nH={nH}")
    if nh % nrho:
        raise MeshError(f"Fine resolution nh={nh} is not divisible by control resolution nrho={nrho}")
    hierarchy = MeshHierarchy(StructuredMesh(nH), StructuredMesh(nh), StructuredMesh(nrho))
    logger.debug(f"Built hierarchy H=1/{nH}, h=1/{nh}, rho=1/{nrho}")
    return hierarchy


def children(coarse_n: int, fine_n: int, element: int) -> np.ndarray:
    """Fine element ids tiling one element of a nested coarser mesh"""
    if not 0 <= element < coarse_n ** 2:
        raise MeshError(f"Element id {element} out of range for a {coarse_n}x{coarse_n} mesh")
    ratio = fine_n // coarse_n
    ex, ey = element % coarse_n, element // coarse_n
    fx, fy = np.meshgrid(np.arange(ratio) + ex * ratio, np.arange(ratio) + ey * ratio, indexing="xy")
    return (fx + fy * fine_n).ravel()


def coarse_to_fine_elements(hier: MeshHierarchy, coarse_element: int) -> np.ndarray:
    return children(hier.coarse.n, hier.fine.n, coarse_element)


def parent_elements(fine_n: int, coarse_n: int) -> np.ndarray:
    """Coarse element id containing each fine element"""
    ratio = fine_n // coarse_n
    fx, fy = np.meshgrid(np.arange(fine_n), np.arange(fine_n), indexing="xy")
    return ((fx // ratio) + (fy // ratio) * coarse_n).ravel()


@dataclass(frozen=True)
class Patch:
    center_vertex: int
    layers: int
    coarse_elements: np.ndarray
    fine_dofs: np.ndarray
    box: Tuple[int, int, int, int]  # coarse element range [x0, x1) x [y0, y1)

    @property
    def side(self) -> Tuple[int, int]:
        x0, x1, y0, y1 = self.box
        return x1 - x0, y1 - y0


def patch_box(nH: int, vertex: int, layers: int) -> Tuple[int, int, int, int]:
    vx, vy = vertex % (nH + 1), vertex // (nH + 1)
    x0, x1 = max(vx - 1 - layers, 0), min(vx + 1 + layers, nH)
    y0, y1 = max(vy - 1 - layers, 0), min(vy + 1 + layers, nH)
    return x0, x1, y0, y1


def expand_patch(hier: MeshHierarchy, vertex: int, layers: int) -> Patch:
    """Vertex star grown by `layers` rings of coarse elements (Moore neighborhood)"""
    if layers < 0:
        raise MeshError(f"layers must be non-negative, got {layers}")
    if not hier.coarse.is_interior(vertex):
        raise MeshError(f"Vertex {vertex} is not a coarse interior node")

    nH, r = hier.coarse.n, hier.r_hH
    x0, x1, y0, y1 = patch_box(nH, vertex, layers)
    ex, ey = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="xy")
    coarse_elements = np.sort((ex + ey * nH).ravel())

    # fine nodes strictly inside the patch closure, boundary nodes excluded
    fx = np.arange(max(x0 * r + 1, 1), min(x1 * r, hier.fine.n))
    fy = np.arange(max(y0 * r + 1, 1), min(y1 * r, hier.fine.n))
    gx, gy = np.meshgrid(fx, fy, indexing="xy")
    fine_dofs = np.sort(((gx - 1) + (gy - 1) * (hier.fine.n - 1)).ravel())

    return Patch(vertex, layers, coarse_elements, fine_dofs, (x0, x1, y0, y1))
