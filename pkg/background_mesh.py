import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np

from errors import ContractViolation, GeometryError

logger = logging.getLogger(__name__)

CellKind = Literal["tet4", "hex8"]

BOUNDARY = -1

# Hex nodes follow the VTK ordering on the reference cube [-1, 1]^3.
HEX_REFERENCE_NODES = np.array([
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
])
TET_REFERENCE_NODES = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
])

HEX_EDGES = np.array([
    [0, 1], [1, 2], [2, 3], [3, 0],
    [4, 5], [5, 6], [6, 7], [7, 4],
    [0, 4], [1, 5], [2, 6], [3, 7],
])
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

# Face vertex cycles; hex faces are listed counter-clockwise seen from outside.
HEX_FACES = np.array([
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [1, 2, 6, 5],
    [2, 3, 7, 6],
    [3, 0, 4, 7],
])
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])

# Six tets per hex along the monotone paths from local node 0 to node 6. Every
# hex face is split along the diagonal through its lowest corner, which keeps
# neighbouring hexes conforming.
_KUHN_TETS = np.array([
    [0, 1, 2, 6],
    [0, 1, 5, 6],
    [0, 3, 2, 6],
    [0, 3, 7, 6],
    [0, 4, 5, 6],
    [0, 4, 7, 6],
])


def _orient_kuhn_tets() -> np.ndarray:
    unit = (HEX_REFERENCE_NODES + 1.0) / 2.0
    tets = _KUHN_TETS.copy()
    for row in tets:
        p = unit[row]
        if np.linalg.det(np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])) < 0:
            row[[2, 3]] = row[[3, 2]]
    return tets


KUHN_TETS = _orient_kuhn_tets()


@dataclass(frozen=True)
class ReferenceBasis:
    """Linear tet or trilinear hex shape functions on the reference cell."""

    kind: CellKind

    def __post_init__(self):
        if self.kind not in ("tet4", "hex8"):
            raise ValueError(f"Unknown cell kind '{self.kind}'")

    @property
    def n_nodes(self) -> int:
        return 4 if self.kind == "tet4" else 8

    @property
    def reference_nodes(self) -> np.ndarray:
        return TET_REFERENCE_NODES if self.kind == "tet4" else HEX_REFERENCE_NODES

    @property
    def edges(self) -> np.ndarray:
        return TET_EDGES if self.kind == "tet4" else HEX_EDGES

    @property
    def faces(self) -> np.ndarray:
        return TET_FACES if self.kind == "tet4" else HEX_FACES

    def contains(self, xi: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.kind == "tet4":
            return np.all(xi >= -tol, axis=-1) & (xi.sum(axis=-1) <= 1.0 + tol)
        return np.all(np.abs(xi) <= 1.0 + tol, axis=-1)

    def shape(self, xi: np.ndarray) -> np.ndarray:
        """Shape function values, shape (..., n_nodes)."""
        xi = np.asarray(xi, dtype=float)
        if self.kind == "tet4":
            return np.concatenate([1.0 - xi.sum(axis=-1, keepdims=True), xi], axis=-1)
        signs = HEX_REFERENCE_NODES
        factors = 1.0 + xi[..., None, :] * signs
        return 0.125 * np.prod(factors, axis=-1)

    def shape_derivatives(self, xi: np.ndarray) -> np.ndarray:
        """Reference derivatives dN_a/dxi_j, shape (..., n_nodes, 3)."""
        xi = np.asarray(xi, dtype=float)
        if self.kind == "tet4":
            d = np.vstack([-np.ones(3), np.eye(3)])
            return np.broadcast_to(d, xi.shape[:-1] + (4, 3)).copy()
        signs = HEX_REFERENCE_NODES
        factors = 1.0 + xi[..., None, :] * signs
        out = np.empty(xi.shape[:-1] + (8, 3))
        for j in range(3):
            others = [k for k in range(3) if k != j]
            out[..., j] = 0.125 * signs[:, j] * factors[..., others[0]] * factors[..., others[1]]
        return out

    def jacobian(self, coords: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """dx_i/dxi_j for cell vertex coordinates (..., n_nodes, 3)."""
        d_ref = self.shape_derivatives(xi)
        return np.einsum("...ai,...aj->...ij", coords, d_ref)

    def map_to_physical(self, coords: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return np.einsum("...a,...ai->...i", self.shape(xi), coords)

    def physical_gradients(self, coords: np.ndarray, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Evaluate shape functions and their physical gradients.

        Args:
            coords: Cell vertex coordinates, shape (..., n_nodes, 3)
            xi: Reference points, shape (..., 3)

        Returns:
            Tuple of values (..., n_nodes), gradients (..., n_nodes, 3) and det J (...)
        """
        coords = np.asarray(coords, dtype=float)
        xi = np.broadcast_to(np.asarray(xi, dtype=float), coords.shape[:-2] + (3,))
        d_ref = self.shape_derivatives(xi)
        jac = np.einsum("...ai,...aj->...ij", coords, d_ref)
        det = np.linalg.det(jac)
        scale = np.max(np.abs(jac), axis=(-2, -1)) ** 3
        if np.any(np.abs(det) <= 1e-14 * np.maximum(scale, np.finfo(float).tiny)):
            raise GeometryError("Singular Jacobian in degenerate cell")
        inv = np.linalg.inv(jac)
        grads = np.einsum("...aj,...ji->...ai", d_ref, inv)
        return self.shape(xi), grads, det

    def reference_coordinates(self, coords: np.ndarray, points: np.ndarray,
                              tol: float = 1e-12, max_iter: int = 20) -> np.ndarray:
        """
        Invert the geometric map of each cell for the given physical points.

        Tets are inverted in closed form; hexes by Newton iteration on the
        trilinear map starting from the cell centre.

        Args:
            coords: Cell vertex coordinates, shape (q, n_nodes, 3)
            points: Physical points, shape (q, 3)
            tol: Newton step tolerance in reference units
            max_iter: Newton iteration limit

        Returns:
            Reference coordinates, shape (q, 3)
        """
        coords = np.asarray(coords, dtype=float)
        points = np.asarray(points, dtype=float)
        if self.kind == "tet4":
            edges = (coords[:, 1:, :] - coords[:, :1, :]).transpose(0, 2, 1)
            return np.linalg.solve(edges, (points - coords[:, 0, :])[..., None])[..., 0]

        xi = np.zeros_like(points)
        converged = np.zeros(len(points), dtype=bool)
        for _ in range(max_iter):
            active = ~converged
            if not np.any(active):
                break
            residual = self.map_to_physical(coords[active], xi[active]) - points[active]
            step = np.linalg.solve(self.jacobian(coords[active], xi[active]), residual[..., None])[..., 0]
            xi[active] -= step
            done = np.linalg.norm(step, axis=-1) < tol
            idx = np.flatnonzero(active)
            converged[idx[done]] = True
        if not np.all(converged):
            raise GeometryError(
                f"Newton inversion of the trilinear map did not converge for {np.count_nonzero(~converged)} point(s)"
            )
        return xi


def eval_basis(basis: ReferenceBasis, coords: np.ndarray, xi: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate shape functions and physical gradients of one cell at one point.

    Args:
        basis: Reference basis of the cell kind
        coords: Vertex coordinates of the cell, shape (n_nodes, 3)
        xi: Reference point inside the reference cell

    Returns:
        Tuple (values, gradients) with shapes (n_nodes,) and (n_nodes, 3)
    """
    xi = np.asarray(xi, dtype=float)
    if not basis.contains(xi):
        raise ContractViolation(f"Reference point {xi} lies outside the {basis.kind} reference cell")
    values, grads, _ = basis.physical_gradients(np.asarray(coords, dtype=float), xi)
    return values, grads


@dataclass(frozen=True, eq=False)
class BackgroundMesh:
    """
    Structured background mesh of an axis-aligned box.

    Faces are stored as arrays: ``face_vertices`` holds each face's vertex
    cycle as seen from ``face_cells[:, 0]`` (cell+), and ``face_cells[:, 1]``
    is cell- or ``BOUNDARY``.
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_kind: CellKind
    face_vertices: np.ndarray
    face_cells: np.ndarray
    face_local: np.ndarray
    box: np.ndarray
    spacing: np.ndarray
    divisions: Tuple[int, int, int]
    _face_map: Dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def basis(self) -> ReferenceBasis:
        return ReferenceBasis(self.cell_kind)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def interior_face_mask(self) -> np.ndarray:
        return self.face_cells[:, 1] != BOUNDARY

    @property
    def faces(self) -> Dict[Tuple[int, ...], Tuple[int, int]]:
        """Map from sorted face vertex key to (cell+, cell- or BOUNDARY)."""
        if not self._face_map:
            keys = np.sort(self.face_vertices, axis=1)
            for key, (plus, minus) in zip(map(tuple, keys.tolist()), self.face_cells.tolist()):
                self._face_map[key] = (plus, minus)
        return self._face_map

    def cell_coordinates(self, cell_ids: Optional[np.ndarray] = None) -> np.ndarray:
        cells = self.cells if cell_ids is None else self.cells[cell_ids]
        return self.vertices[cells]

    def cell_volumes(self) -> np.ndarray:
        return cell_volumes(self.vertices, self.cells, self.cell_kind)

    def boundary_vertex_mask(self, tol: float = 1e-12) -> np.ndarray:
        span = self.box[1] - self.box[0]
        on_low = np.abs(self.vertices - self.box[0]) <= tol * span
        on_high = np.abs(self.vertices - self.box[1]) <= tol * span
        return np.any(on_low | on_high, axis=1)

    def with_vertices(self, vertices: np.ndarray) -> "BackgroundMesh":
        return BackgroundMesh(
            vertices=vertices,
            cells=self.cells,
            cell_kind=self.cell_kind,
            face_vertices=self.face_vertices,
            face_cells=self.face_cells,
            face_local=self.face_local,
            box=self.box,
            spacing=self.spacing,
            divisions=self.divisions,
        )

    def __str__(self) -> str:
        return f"BackgroundMesh({self.cell_kind}, nno={self.n_vertices}, cells={self.n_cells})"


def cell_volumes(vertices: np.ndarray, cells: np.ndarray, kind: CellKind) -> np.ndarray:
    coords = vertices[cells]
    if kind == "tet4":
        edges = coords[:, 1:, :] - coords[:, :1, :]
        return np.linalg.det(edges) / 6.0
    basis = ReferenceBasis("hex8")
    points, weights = np.polynomial.legendre.leggauss(2)
    gauss = np.array(np.meshgrid(points, points, points, indexing="ij")).reshape(3, -1).T
    gauss_w = np.prod(np.array(np.meshgrid(weights, weights, weights, indexing="ij")).reshape(3, -1).T, axis=1)
    jac = basis.jacobian(coords[:, None, :, :], gauss[None, :, :])
    return np.linalg.det(jac) @ gauss_w


def positively_oriented(vertices: np.ndarray, cells: np.ndarray, kind: CellKind) -> np.ndarray:
    """Per-cell flag: positive tet volume, or positive hex det J at all 8 corners."""
    if kind == "tet4":
        return cell_volumes(vertices, cells, kind) > 0.0
    basis = ReferenceBasis("hex8")
    jac = basis.jacobian(vertices[cells][:, None, :, :], HEX_REFERENCE_NODES[None, :, :])
    return np.all(np.linalg.det(jac) > 0.0, axis=1)


def _build_faces(cells: np.ndarray, kind: CellKind) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    local_faces = TET_FACES if kind == "tet4" else HEX_FACES
    n_cells, n_local = len(cells), len(local_faces)
    cycles = cells[:, local_faces].reshape(n_cells * n_local, -1)
    keys = np.sort(cycles, axis=1)
    _, first_index, inverse, counts = np.unique(
        keys, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.ravel()
    if np.any(counts > 2):
        raise GeometryError("Non-manifold face shared by more than two cells")

    owner = np.repeat(np.arange(n_cells), n_local)
    local = np.tile(np.arange(n_local), n_cells)

    # The second occurrence of each face is the one not listed in first_index.
    is_first = np.zeros(len(keys), dtype=bool)
    is_first[first_index] = True
    second_index = np.full(len(counts), -1)
    second_index[inverse[~is_first]] = np.flatnonzero(~is_first)

    face_cells = np.column_stack([owner[first_index], np.where(second_index >= 0, owner[second_index], BOUNDARY)])
    face_local = np.column_stack([local[first_index], np.where(second_index >= 0, local[second_index], BOUNDARY)])
    return cycles[first_index], face_cells, face_local


def build_structured(box: Sequence[Sequence[float]], nx: int, ny: int, nz: int,
                     kind: CellKind = "tet4") -> BackgroundMesh:
    """
    Build a structured tet or hex mesh of an axis-aligned box.

    Args:
        box: Lower and upper corners ((x0, y0, z0), (x1, y1, z1))
        nx, ny, nz: Number of hex subdivisions per axis
        kind: "hex8", or "tet4" for six conforming tets per hex

    Returns:
        The background mesh with complete face topology
    """
    box = np.asarray(box, dtype=float)
    if box.shape != (2, 3):
        raise ValueError(f"Box must be given as two 3D corners, got shape {box.shape}")
    if np.any(box[1] <= box[0]):
        raise ValueError(f"Degenerate box {box.tolist()}")
    divisions = (int(nx), int(ny), int(nz))
    if min(divisions) < 1 or (nx, ny, nz) != divisions:
        raise ValueError(f"Subdivision counts must be positive integers, got {(nx, ny, nz)}")
    if kind not in ("tet4", "hex8"):
        raise ValueError(f"Unknown cell kind '{kind}'")

    axes = [np.linspace(box[0, d], box[1, d], divisions[d] + 1) for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    vertices = np.column_stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")])

    sx, sy = nx + 1, (nx + 1) * (ny + 1)
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    base = (i + sx * j + sy * k).ravel(order="F")
    offsets = np.array([0, 1, 1 + sx, sx, sy, 1 + sy, 1 + sx + sy, sx + sy])
    hexes = base[:, None] + offsets[None, :]

    if kind == "hex8":
        cells = hexes
    else:
        cells = hexes[:, KUHN_TETS].reshape(-1, 4)

    face_vertices, face_cells, face_local = _build_faces(cells, kind)
    spacing = (box[1] - box[0]) / np.array(divisions)
    mesh = BackgroundMesh(
        vertices=vertices,
        cells=cells,
        cell_kind=kind,
        face_vertices=face_vertices,
        face_cells=face_cells,
        face_local=face_local,
        box=box,
        spacing=spacing,
        divisions=divisions,
    )
    logger.debug("Built %s", mesh)
    return mesh


def jitter_interior(mesh: BackgroundMesh, magnitude: float, seed: int, max_retries: int = 100) -> BackgroundMesh:
    """
    Perturb interior vertices to break the structured alignment.

    Each interior vertex moves by up to ``magnitude`` times the local grid
    spacing per axis. Vertices of cells that lose positive orientation are
    resampled until every cell is valid again.

    Args:
        mesh: Mesh to perturb
        magnitude: Perturbation as a fraction of the spacing, 0 <= magnitude < 0.5
        seed: Seed of the random generator
        max_retries: Resampling rounds before giving up

    Returns:
        A new mesh sharing the topology of the input
    """
    if not 0.0 <= magnitude < 0.5:
        raise ValueError(f"Jitter magnitude must lie in [0, 0.5), got {magnitude}")
    if magnitude == 0.0:
        return mesh

    rng = np.random.default_rng(seed)
    movable = ~mesh.boundary_vertex_mask()
    amplitude = magnitude * mesh.spacing

    def sample(count: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(count, 3)) * amplitude

    vertices = mesh.vertices.copy()
    vertices[movable] += sample(np.count_nonzero(movable))
    for attempt in range(max_retries):
        bad = ~positively_oriented(vertices, mesh.cells, mesh.cell_kind)
        if not np.any(bad):
            break
        redo = np.zeros(mesh.n_vertices, dtype=bool)
        redo[np.unique(mesh.cells[bad])] = True
        redo &= movable
        logger.debug("Jitter attempt %d: resampling %d vertices of %d inverted cells",
                     attempt + 1, np.count_nonzero(redo), np.count_nonzero(bad))
        vertices[redo] = mesh.vertices[redo] + sample(np.count_nonzero(redo))
    else:
        raise GeometryError(f"Could not keep all cells positively oriented after {max_retries} retries")

    return mesh.with_vertices(vertices)


def mesh_size(mesh: BackgroundMesh) -> float:
    """h := 1 / cbrt(number of mesh vertices)."""
    if mesh.n_vertices == 0:
        raise ValueError("Mesh has no vertices")
    return float(1.0 / np.cbrt(mesh.n_vertices))
