import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from background_mesh import BOUNDARY, HEX_REFERENCE_NODES, BackgroundMesh
from cut_geometry import CutSurface
from errors import ContractViolation
from level_set import COMPONENT_INDEX, ActiveMesh, DirichletSet, Selector
from tangential_ops import plane_stress_lame, projector

logger = logging.getLogger(__name__)

CHUNK = 4096
FLUSH_TRIPLETS = 5_000_000

VectorField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MembraneMaterial:
    """
    Membrane material with plane-stress Lame parameters.

    E = 0 is accepted and describes a membrane that adds no stiffness.
    """

    E: float
    nu: float
    t: float = 1.0

    def __post_init__(self):
        if self.E < 0:
            raise ValueError(f"Membrane Young's modulus must be nonnegative, got {self.E}")
        if not -1.0 < self.nu < 1.0:
            raise ValueError(f"Membrane Poisson ratio must lie in (-1, 1), got {self.nu}")
        if self.t <= 0:
            raise ValueError(f"Membrane thickness must be positive, got {self.t}")

    @property
    def mu(self) -> float:
        return plane_stress_lame(self.E, self.nu)[0]

    @property
    def lam(self) -> float:
        return plane_stress_lame(self.E, self.nu)[1]


@dataclass(frozen=True)
class BulkMaterial:
    E: float
    nu: float

    def __post_init__(self):
        if self.E <= 0:
            raise ValueError(f"Bulk Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Bulk Poisson ratio must lie in (-1, 0.5), got {self.nu}")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))


@dataclass(frozen=True)
class StabilizationParams:
    tau0: float = 1.0

    def __post_init__(self):
        if self.tau0 < 0:
            raise ValueError(f"Stabilization constant must be nonnegative, got {self.tau0}")


@dataclass(frozen=True)
class LoadField:
    """Surface load per unit area and body force per unit volume."""

    surface: Optional[VectorField] = None
    body: Optional[VectorField] = None


class DofMap:
    """
    Three displacement dofs per node, numbered 3 * local_node + component.

    Args:
        mesh: Background mesh the nodes belong to
        nodes: Global vertex indices carried by the map
        dirichlet: Constraint sets; every constrained node must be in ``nodes``
    """

    def __init__(self, mesh: BackgroundMesh, nodes: np.ndarray, dirichlet: Iterable[DirichletSet] = ()):
        self.mesh = mesh
        self.nodes = np.unique(np.asarray(nodes, dtype=int))
        self.node_to_local = np.full(mesh.n_vertices, -1, dtype=int)
        self.node_to_local[self.nodes] = np.arange(len(self.nodes))
        self.dirichlet = list(dirichlet)

        constrained = []
        for selection in self.dirichlet:
            local = self.node_to_local[selection.nodes]
            if np.any(local < 0):
                raise ContractViolation(f"Dirichlet set '{selection.tag}' contains nodes outside the dof map")
            for comp in selection.components:
                constrained.append(3 * local + COMPONENT_INDEX[comp])
        self.constrained = np.unique(np.concatenate(constrained)) if constrained else np.zeros(0, dtype=int)

    @classmethod
    def for_band(cls, active: ActiveMesh, dirichlet: Iterable[DirichletSet] = ()) -> "DofMap":
        """Space V_h: the nodes of the active cells."""
        return cls(active.mesh, active.nodes, dirichlet)

    @classmethod
    def for_mesh(cls, mesh: BackgroundMesh, dirichlet: Iterable[DirichletSet] = ()) -> "DofMap":
        """Space W_h: every node of the background mesh."""
        return cls(mesh, np.arange(mesh.n_vertices), dirichlet)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dofs(self) -> int:
        return 3 * len(self.nodes)

    @property
    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.constrained] = False
        return mask

    @property
    def coordinates(self) -> np.ndarray:
        return self.mesh.vertices[self.nodes]

    def cell_dofs(self, cell_nodes: np.ndarray) -> np.ndarray:
        local = self.node_to_local[np.asarray(cell_nodes)]
        if np.any(local < 0):
            raise IndexError("Cell references nodes outside the dof map")
        return (3 * local[..., None] + np.arange(3)).reshape(local.shape[:-1] + (3 * local.shape[-1],))

    def interpolate(self, field: VectorField) -> np.ndarray:
        """Nodal interpolant of a vector field as a dof vector."""
        return np.asarray(field(self.coordinates), dtype=float).reshape(-1)

    def same_space(self, other: "DofMap") -> bool:
        return self is other or (
            self.mesh is other.mesh
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.constrained, other.constrained)
        )

    def __repr__(self) -> str:
        return f"DofMap(nodes={self.n_nodes}, dofs={self.n_dofs}, constrained={len(self.constrained)})"


class SparseSystem:
    """
    Stiffness matrix and load vector over a DofMap.

    Element blocks are buffered as triplets and compressed into CSR (summing
    duplicates) whenever the buffer grows large or the matrix is requested.
    """

    def __init__(self, dofs: DofMap, matrix: Optional[sp.csr_matrix] = None, rhs: Optional[np.ndarray] = None):
        self.dofs = dofs
        shape = (dofs.n_dofs, dofs.n_dofs)
        self._compressed = sp.csr_matrix(shape) if matrix is None else sp.csr_matrix(matrix)
        self.rhs = np.zeros(dofs.n_dofs) if rhs is None else np.asarray(rhs, dtype=float).copy()
        self._rows: List[np.ndarray] = []
        self._cols: List[np.ndarray] = []
        self._vals: List[np.ndarray] = []
        self._buffered = 0

    @property
    def shape(self) -> tuple:
        return self._compressed.shape

    @property
    def matrix(self) -> sp.csr_matrix:
        self._flush()
        return self._compressed

    def add_blocks(self, dof_index: np.ndarray, blocks: np.ndarray):
        """Accumulate dense element blocks (m, n, n) at dof indices (m, n)."""
        if len(dof_index) == 0:
            return
        n = dof_index.shape[1]
        rows = np.broadcast_to(dof_index[:, :, None], (len(dof_index), n, n))
        cols = np.broadcast_to(dof_index[:, None, :], (len(dof_index), n, n))
        self.add_triplets(rows.ravel(), cols.ravel(), blocks.ravel())

    def add_triplets(self, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray):
        self._rows.append(np.asarray(rows))
        self._cols.append(np.asarray(cols))
        self._vals.append(np.asarray(vals, dtype=float))
        self._buffered += len(vals)
        if self._buffered >= FLUSH_TRIPLETS:
            self._flush()

    def add_matrix(self, matrix: sp.spmatrix):
        self._flush()
        self._compressed = (self._compressed + sp.csr_matrix(matrix)).tocsr()

    def add_rhs(self, dof_index: np.ndarray, values: np.ndarray):
        np.add.at(self.rhs, np.asarray(dof_index).ravel(), np.asarray(values, dtype=float).ravel())

    def _flush(self):
        if not self._vals:
            return
        batch = sp.coo_matrix(
            (np.concatenate(self._vals), (np.concatenate(self._rows), np.concatenate(self._cols))),
            shape=self._compressed.shape,
        ).tocsr()
        self._compressed = (self._compressed + batch).tocsr()
        self._rows, self._cols, self._vals = [], [], []
        self._buffered = 0

    def copy(self) -> "SparseSystem":
        return SparseSystem(self.dofs, self.matrix.copy(), self.rhs)

    def energy(self, v: np.ndarray) -> float:
        return float(v @ (self.matrix @ v))

    def symmetry_error(self) -> float:
        """max |A - A^T| relative to max |A|."""
        A = self.matrix
        scale = abs(A).max() if A.nnz else 0.0
        if scale == 0.0:
            return 0.0
        diff = A - A.T
        return float(abs(diff).max() / scale) if diff.nnz else 0.0


@dataclass(frozen=True, eq=False)
class SolutionField:
    """Nodal displacement vector u_h on a DofMap."""

    dofs: DofMap
    values: np.ndarray

    def nodal(self) -> np.ndarray:
        return self.values.reshape(-1, 3)

    def cell_values(self, cell_nodes: np.ndarray) -> np.ndarray:
        """Displacements of the nodes of each cell, shape (m, k, 3)."""
        return self.values[self.dofs.cell_dofs(cell_nodes)].reshape(cell_nodes.shape + (3,))


def _elasticity_blocks(T: np.ndarray, P: Optional[np.ndarray], mu: float, lam: float, weights: np.ndarray) -> np.ndarray:
    """
    Pointwise blocks 2 mu eps(N_i e_a):eps(N_j e_b) + lam div(N_i e_a) div(N_j e_b).

    With tangential gradients T = P grad N and the surface projector P this is
    the membrane integrand; with P = I and T = grad N it is 3D elasticity.
    """
    q, k, _ = T.shape
    TT = np.einsum("qic,qjc->qij", T, T)
    if P is None:
        first = np.einsum("qij,ab->qiajb", TT, np.eye(3))
    else:
        first = np.einsum("qij,qab->qiajb", TT, P)
    blocks = mu * first
    blocks += mu * np.einsum("qib,qja->qiajb", T, T)
    blocks += lam * np.einsum("qia,qjb->qiajb", T, T)
    blocks *= weights[:, None, None, None, None]
    return blocks.reshape(q, 3 * k, 3 * k)


def _sum_by_cell(cells: np.ndarray, blocks: np.ndarray) -> tuple:
    order = np.argsort(cells, kind="stable")
    unique, starts = np.unique(cells[order], return_index=True)
    return unique, np.add.reduceat(blocks[order], starts, axis=0)


def assemble_membrane(surface: CutSurface, mat: MembraneMaterial, dofs: DofMap, system: SparseSystem):
    """
    Add t * a_h over the cut surface to the system matrix.

    Args:
        surface: Cut surface with quadrature
        mat: Membrane material; the form is scaled by its thickness
        dofs: Dof map covering every parent cell of the surface
        system: System to accumulate into
    """
    if mat.E == 0.0 or surface.n_triangles == 0:
        return
    mesh = dofs.mesh
    basis = mesh.basis
    parents = surface.qp_parents
    for start in range(0, len(parents), CHUNK):
        sl = slice(start, start + CHUNK)
        cells = parents[sl]
        _, grads, _ = basis.physical_gradients(mesh.cell_coordinates(cells), surface.qp_reference[sl])
        P = projector(surface.qp_normals[sl])
        T = np.einsum("qij,qaj->qai", P, grads)
        blocks = _elasticity_blocks(T, P, mat.mu, mat.lam, mat.t * surface.qp_weights[sl])
        unique, summed = _sum_by_cell(cells, blocks)
        system.add_blocks(dofs.cell_dofs(mesh.cells[unique]), summed)


def _face_quadrature(mesh: BackgroundMesh, faces: np.ndarray, side: int) -> tuple:
    """
    Gauss points of hex faces in the reference coordinates of one neighbour.

    Returns the reference points (f, 4, 3) in cell ``face_cells[:, side]``,
    physical points (f, 4, 3), area weights (f, 4) and unnormalised normals.
    """
    g, w = np.polynomial.legendre.leggauss(2)
    s, t = np.meshgrid(g, g, indexing="ij")
    s, t = s.ravel(), t.ravel()
    weights = np.outer(w, w).ravel()
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    n2d = 0.25 * (1 + s[:, None] * corners[:, 0]) * (1 + t[:, None] * corners[:, 1])
    dn_ds = 0.25 * corners[:, 0] * (1 + t[:, None] * corners[:, 1])
    dn_dt = 0.25 * corners[:, 1] * (1 + s[:, None] * corners[:, 0])

    cycle = mesh.face_vertices[faces]
    xyz = mesh.vertices[cycle]
    points = np.einsum("pc,fci->fpi", n2d, xyz)
    normal = np.cross(np.einsum("pc,fci->fpi", dn_ds, xyz), np.einsum("pc,fci->fpi", dn_dt, xyz))
    area = np.linalg.norm(normal, axis=-1) * weights

    cell_nodes = mesh.cells[mesh.face_cells[faces, side]]
    local = np.argmax(cycle[:, :, None] == cell_nodes[:, None, :], axis=2)
    reference = np.einsum("pc,fci->fpi", n2d, HEX_REFERENCE_NODES[local])
    return reference, points, area, normal


def assemble_stabilization(active: ActiveMesh, params: StabilizationParams, dofs: DofMap, system: SparseSystem):
    """
    Add j_h: tau0 times the jump of the normal derivative of each displacement
    component, integrated over the full interior faces of the band.

    Args:
        active: Active mesh providing F_h and oriented face normals
        params: Stabilization constant
        dofs: Dof map covering the band
        system: System to accumulate into
    """
    faces = active.faces
    if params.tau0 == 0.0 or len(faces) == 0:
        return
    mesh = active.mesh
    if np.any(mesh.face_cells[faces, 1] == BOUNDARY):
        raise ContractViolation("Stabilization faces must have two neighbour cells")
    basis = mesh.basis
    n_local = basis.n_nodes

    for start in range(0, len(faces), CHUNK):
        chunk = faces[start:start + CHUNK]
        orient = active.face_normals[start:start + CHUNK]
        plus, minus = mesh.face_cells[chunk, 0], mesh.face_cells[chunk, 1]
        if mesh.cell_kind == "tet4":
            centroid = np.full(3, 0.25)
            _, g_plus, _ = basis.physical_gradients(mesh.cell_coordinates(plus), centroid)
            _, g_minus, _ = basis.physical_gradients(mesh.cell_coordinates(minus), centroid)
            tri = mesh.vertices[mesh.face_vertices[chunk]]
            area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            jump = np.concatenate([g_plus @ orient[:, :, None], -(g_minus @ orient[:, :, None])], axis=1)[..., 0]
            scalar = params.tau0 * area[:, None, None] * jump[:, :, None] * jump[:, None, :]
        else:
            ref_plus, _, area, normal = _face_quadrature(mesh, chunk, 0)
            ref_minus, _, _, _ = _face_quadrature(mesh, chunk, 1)
            normal = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
            normal *= np.sign(np.einsum("fpi,fi->fp", normal, orient))[..., None]
            coords_plus = np.repeat(mesh.cell_coordinates(plus)[:, None], 4, axis=1)
            coords_minus = np.repeat(mesh.cell_coordinates(minus)[:, None], 4, axis=1)
            _, g_plus, _ = basis.physical_gradients(coords_plus, ref_plus)
            _, g_minus, _ = basis.physical_gradients(coords_minus, ref_minus)
            jump = np.concatenate([
                np.einsum("fpai,fpi->fpa", g_plus, normal),
                -np.einsum("fpai,fpi->fpa", g_minus, normal),
            ], axis=2)
            scalar = params.tau0 * np.einsum("fp,fpa,fpb->fab", area, jump, jump)

        nodes = np.concatenate([mesh.cells[plus], mesh.cells[minus]], axis=1)
        local = dofs.node_to_local[nodes]
        if np.any(local < 0):
            raise IndexError("Stabilization face references nodes outside the dof map")
        rows = np.broadcast_to(local[:, :, None], scalar.shape).ravel()
        cols = np.broadcast_to(local[:, None, :], scalar.shape).ravel()
        node_matrix = sp.coo_matrix((scalar.ravel(), (rows, cols)), shape=(dofs.n_nodes, dofs.n_nodes))
        system.add_matrix(sp.kron(node_matrix, sp.identity(3), format="csr"))
    logger.debug("Stabilization assembled over %d faces (%d local nodes per face)", len(faces), 2 * n_local)


def assemble_membrane_load(surface: CutSurface, load: LoadField, dofs: DofMap, system: SparseSystem):
    """Add l_h(v) = (f, v) over the cut surface to the right-hand side."""
    if load.surface is None or surface.n_triangles == 0:
        return
    mesh = dofs.mesh
    basis = mesh.basis
    parents = surface.qp_parents
    values = basis.shape(surface.qp_reference)
    f = np.asarray(load.surface(surface.qp_points), dtype=float).reshape(-1, 3)
    contrib = surface.qp_weights[:, None, None] * values[:, :, None] * f[:, None, :]
    system.add_rhs(dofs.cell_dofs(mesh.cells[parents]), contrib)


def _volume_quadrature(kind: str) -> tuple:
    if kind == "tet4":
        return np.full((1, 3), 0.25), np.array([1.0 / 6.0])
    g, w = np.polynomial.legendre.leggauss(2)
    points = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    weights = np.prod(np.array(np.meshgrid(w, w, w, indexing="ij")).reshape(3, -1).T, axis=1)
    return points, weights


def assemble_bulk(mesh: BackgroundMesh, mat: BulkMaterial, dofs: DofMap, system: SparseSystem,
                  body_force: Optional[VectorField] = None):
    """
    Add 3D linear elasticity a_Omega (and l_Omega for a body force) over all cells.

    Args:
        mesh: Background mesh
        mat: Bulk material, using the 3D Lame parameter lambda_Omega
        dofs: Dof map covering every mesh node
        system: System to accumulate into
        body_force: Force per unit volume, or None
    """
    basis = mesh.basis
    points, weights = _volume_quadrature(mesh.cell_kind)
    for start in range(0, mesh.n_cells, CHUNK):
        cells = np.arange(start, min(start + CHUNK, mesh.n_cells))
        coords = mesh.cell_coordinates(cells)
        dof_index = dofs.cell_dofs(mesh.cells[cells])
        n = dof_index.shape[1]
        blocks = np.zeros((len(cells), n, n))
        for xi, w in zip(points, weights):
            values, grads, det = basis.physical_gradients(coords, xi)
            blocks += _elasticity_blocks(grads, None, mat.mu, mat.lam, w * det)
            if body_force is not None:
                x = np.einsum("ca,cai->ci", values, coords)
                f = np.asarray(body_force(x), dtype=float)
                system.add_rhs(dof_index, (w * det)[:, None, None] * values[:, :, None] * f[:, None, :])
        system.add_blocks(dof_index, blocks)


def assemble_boundary_traction(mesh: BackgroundMesh, selector: Selector, traction: Sequence[float],
                               dofs: DofMap, system: SparseSystem) -> float:
    """
    Add a constant traction on the box faces whose vertices all satisfy ``selector``.

    Returns:
        The loaded area
    """
    traction = np.asarray(traction, dtype=float)
    boundary = np.flatnonzero(mesh.face_cells[:, 1] == BOUNDARY)
    tol = 1e-9 * float(np.max(mesh.box[1] - mesh.box[0]))
    cycles = mesh.face_vertices[boundary]
    inside = selector(mesh.vertices[cycles.ravel()], tol).reshape(cycles.shape)
    loaded = boundary[np.all(inside, axis=1)]
    if len(loaded) == 0:
        logger.warning("Traction selector %s matched no boundary faces", selector)
        return 0.0

    cycles = mesh.face_vertices[loaded]
    xyz = mesh.vertices[cycles]
    if mesh.cell_kind == "tet4":
        area = 0.5 * np.linalg.norm(np.cross(xyz[:, 1] - xyz[:, 0], xyz[:, 2] - xyz[:, 0]), axis=1)
        nodal = np.repeat(area[:, None] / 3.0, 3, axis=1)
    else:
        _, _, area_w, _ = _face_quadrature(mesh, loaded, 0)
        g, _ = np.polynomial.legendre.leggauss(2)
        s, t = np.meshgrid(g, g, indexing="ij")
        corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        n2d = 0.25 * (1 + s.ravel()[:, None] * corners[:, 0]) * (1 + t.ravel()[:, None] * corners[:, 1])
        nodal = np.einsum("fp,pc->fc", area_w, n2d)
        area = area_w.sum(axis=1)
    system.add_rhs(dofs.cell_dofs(cycles), nodal[:, :, None] * traction[None, None, :])
    return float(area.sum())


def couple(bulk: SparseSystem, membranes: Sequence[SparseSystem]) -> SparseSystem:
    """Sum bulk and membrane systems assembled on the same dof map."""
    coupled = bulk.copy()
    for membrane in membranes:
        if not membrane.dofs.same_space(bulk.dofs):
            raise ContractViolation("Membrane system was assembled on a different dof map than the bulk")
        coupled.add_matrix(membrane.matrix)
        coupled.rhs += membrane.rhs
    return coupled


def apply_dirichlet(system: SparseSystem, dofs: Optional[DofMap] = None,
                    values: Optional[np.ndarray] = None) -> SparseSystem:
    """
    Symmetric elimination of the constrained dofs.

    Constrained rows and columns are zeroed with a unit diagonal. The
    prescribed values (zero unless ``values`` is given) are lifted into the
    right-hand side, so the solution takes them exactly.

    Args:
        system: Assembled system
        dofs: Dof map carrying the constraints, the system's own by default
        values: Full-length dof vector; only its constrained entries are used
    """
    dofs = dofs or system.dofs
    if len(dofs.constrained) == 0:
        return system.copy()
    if len(dofs.constrained) == dofs.n_dofs:
        logger.warning("Every dof is constrained; the system reduces to the identity")
    free = dofs.free_mask.astype(float)
    keep = sp.diags(free)
    matrix = keep @ system.matrix @ keep + sp.diags(1.0 - free)
    rhs = system.rhs * free
    if values is not None:
        lifted = np.asarray(values, dtype=float) * (1.0 - free)
        rhs = (rhs - system.matrix @ lifted) * free + lifted
    return SparseSystem(dofs, matrix.tocsr(), rhs)


def rigid_body_modes(dofs: DofMap) -> np.ndarray:
    """Orthonormal basis (n_dofs, 6) of the infinitesimal rigid motions on the dof map."""
    x = dofs.coordinates - dofs.coordinates.mean(axis=0)
    modes = np.zeros((dofs.n_nodes, 3, 6))
    for a in range(3):
        modes[:, a, a] = 1.0
        e = np.zeros(3)
        e[a] = 1.0
        modes[:, :, 3 + a] = np.cross(e, x)
    q, _ = np.linalg.qr(modes.reshape(dofs.n_dofs, 6))
    return q
