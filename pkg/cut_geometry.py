import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from background_mesh import ReferenceBasis, mesh_size
from errors import ContractViolation, DegenerateCutError, GeometryError, MultiComponentCutError
from level_set import ActiveMesh

logger = logging.getLogger(__name__)

QuadratureRule = Literal["auto", "centroid", "3-point"]

AREA_TOL_FACTOR = 1e-12


@dataclass(frozen=True, eq=False)
class CutPolygon:
    parent: int
    points: np.ndarray
    n_phi: np.ndarray
    edges: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class QuadratureSet:
    points: np.ndarray
    reference: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class SurfaceTriangle:
    vertices: np.ndarray
    area: float
    normal: np.ndarray
    parent: int
    quadrature: Optional[QuadratureSet] = None


@dataclass(frozen=True, eq=False)
class CutSurface:
    """
    Triangulated zero level set, stored as flat arrays.

    Quadrature point q belongs to triangle ``qp_triangle[q]``, whose parent
    cell is ``parents[qp_triangle[q]]``.
    """

    vertices: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    parents: np.ndarray
    qp_points: np.ndarray
    qp_reference: np.ndarray
    qp_weights: np.ndarray
    qp_triangle: np.ndarray
    cell_kind: str
    skipped: Tuple[Tuple[int, str], ...] = field(default_factory=tuple)

    @property
    def n_triangles(self) -> int:
        return len(self.areas)

    @property
    def total_area(self) -> float:
        return float(np.sum(self.areas))

    @property
    def qp_parents(self) -> np.ndarray:
        return self.parents[self.qp_triangle]

    @property
    def qp_normals(self) -> np.ndarray:
        return self.normals[self.qp_triangle]

    def triangles(self) -> List[SurfaceTriangle]:
        out = []
        for t in range(self.n_triangles):
            sel = self.qp_triangle == t
            quad = QuadratureSet(self.qp_points[sel], self.qp_reference[sel], self.qp_weights[sel])
            out.append(SurfaceTriangle(self.vertices[t], float(self.areas[t]), self.normals[t], int(self.parents[t]), quad))
        return out


def empty_surface(cell_kind: str) -> CutSurface:
    return CutSurface(
        vertices=np.zeros((0, 3, 3)),
        normals=np.zeros((0, 3)),
        areas=np.zeros(0),
        parents=np.zeros(0, dtype=int),
        qp_points=np.zeros((0, 3)),
        qp_reference=np.zeros((0, 3)),
        qp_weights=np.zeros(0),
        qp_triangle=np.zeros(0, dtype=int),
        cell_kind=cell_kind,
    )


def edge_cut_point(xm: Sequence[float], xn: Sequence[float], phi_m: float, phi_n: float) -> np.ndarray:
    """Zero of the linear interpolant of phi along the edge [xm, xn]."""
    if not phi_m * phi_n < 0.0:
        raise ContractViolation(f"Edge is not cut: phi values {phi_m} and {phi_n} have the same sign")
    xm, xn = np.asarray(xm, dtype=float), np.asarray(xn, dtype=float)
    # Interpolate from the negative end so swapped inputs give identical bits.
    if phi_m > 0.0:
        xm, xn, phi_m, phi_n = xn, xm, phi_n, phi_m
    t = phi_m / (phi_m - phi_n)
    return xm + t * (xn - xm)


def _cut_edges(basis: ReferenceBasis, values: np.ndarray) -> np.ndarray:
    edges = basis.edges
    return np.flatnonzero(values[edges[:, 0]] * values[edges[:, 1]] < 0.0)


def orientation_vector(coords: np.ndarray, values: np.ndarray, basis: ReferenceBasis) -> np.ndarray:
    """
    Sum over cut edges of (positive end - negative end).

    Falls back to the gradient of the least-squares linear fit of phi when the
    edge vectors cancel.
    """
    coords, values = np.asarray(coords, dtype=float), np.asarray(values, dtype=float)
    edges = basis.edges[_cut_edges(basis, values)]
    if len(edges) == 0:
        raise ContractViolation("Orientation vector requested for a cell that is not cut")
    a, b = edges[:, 0], edges[:, 1]
    positive_first = values[a] > 0.0
    high = np.where(positive_first, a, b)
    low = np.where(positive_first, b, a)
    n_phi = np.sum(coords[high] - coords[low], axis=0)

    scale = np.max(np.linalg.norm(coords - coords.mean(axis=0), axis=1))
    if np.linalg.norm(n_phi) <= 1e-12 * scale:
        design = np.column_stack([coords, np.ones(len(coords))])
        fit, *_ = np.linalg.lstsq(design, values, rcond=None)
        n_phi = fit[:3]
    return n_phi


@lru_cache(maxsize=None)
def _face_edge_table(kind: str) -> Tuple[Tuple[int, ...], ...]:
    basis = ReferenceBasis(kind)
    lookup = {frozenset(edge): i for i, edge in enumerate(basis.edges.tolist())}
    table = []
    for cycle in basis.faces.tolist():
        table.append(tuple(lookup[frozenset((cycle[i], cycle[(i + 1) % len(cycle)]))] for i in range(len(cycle))))
    return tuple(table)


def _count_components(cut: np.ndarray, kind: str) -> int:
    """Connected pieces of the cut polygon; two cut points connect through a shared face."""
    position = {edge: i for i, edge in enumerate(cut.tolist())}
    parent = list(range(len(cut)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for face_edges in _face_edge_table(kind):
        on_face = [position[e] for e in face_edges if e in position]
        if len(on_face) == 4:
            return -1
        if len(on_face) == 2:
            parent[find(on_face[0])] = find(on_face[1])
    return len({find(i) for i in range(len(cut))})


def cut_polygon(coords: np.ndarray, values: np.ndarray, basis: ReferenceBasis, parent: int = -1) -> CutPolygon:
    """
    Cut points of the linear interpolant of phi on every sign-change edge.

    Args:
        coords: Vertex coordinates of the cell
        values: Nodal level-set values of the cell
        basis: Reference basis of the cell kind
        parent: Index of the cell in the background mesh

    Returns:
        The unordered cut polygon with its orientation vector
    """
    coords, values = np.asarray(coords, dtype=float), np.asarray(values, dtype=float)
    cut = _cut_edges(basis, values)
    if len(cut) < 3:
        raise DegenerateCutError(f"Cell {parent} has {len(cut)} cut edges", cell=parent)
    if basis.kind == "hex8":
        components = _count_components(cut, basis.kind)
        if components != 1:
            raise MultiComponentCutError(
                f"Cell {parent} is cut into {'an ambiguous face pattern' if components < 0 else f'{components} polygons'}",
                cell=parent,
            )
    edges = basis.edges[cut]
    points = np.array([
        edge_cut_point(coords[a], coords[b], values[a], values[b]) for a, b in edges
    ])
    return CutPolygon(parent=parent, points=points, n_phi=orientation_vector(coords, values, basis), edges=cut)


def _plane_basis(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = helper - np.dot(helper, d) * d
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def tessellate(poly: CutPolygon, area_tol: float = 0.0) -> List[SurfaceTriangle]:
    """
    Split a cut polygon into oriented triangles.

    The points are projected onto the plane orthogonal to n_phi, ordered by a
    2D convex hull and fan-triangulated from the first hull point. The
    triangles keep the original 3D points.

    Args:
        poly: Cut polygon with at least three points
        area_tol: Triangles with area at or below this value are dropped

    Returns:
        Triangles whose normals agree with n_phi
    """
    if poly.n_points < 3:
        raise DegenerateCutError(f"Cell {poly.parent} has a polygon with {poly.n_points} points", cell=poly.parent)
    u, w = _plane_basis(poly.n_phi)
    centered = poly.points - poly.points.mean(axis=0)
    planar = np.column_stack([centered @ u, centered @ w])

    if poly.n_points == 3:
        cross = (planar[1, 0] - planar[0, 0]) * (planar[2, 1] - planar[0, 1]) \
            - (planar[2, 0] - planar[0, 0]) * (planar[1, 1] - planar[0, 1])
        scale = np.max(np.abs(planar)) ** 2
        if abs(cross) <= 1e-14 * scale:
            raise DegenerateCutError(f"Cell {poly.parent} has collinear cut points", cell=poly.parent)
        order = [0, 1, 2]
    else:
        try:
            order = ConvexHull(planar).vertices.tolist()
        except QhullError as e:
            raise DegenerateCutError(f"Cell {poly.parent} has collinear cut points: {e}", cell=poly.parent) from e
        if len(order) < poly.n_points:
            logger.debug("Cell %d: %d cut points off the hull", poly.parent, poly.n_points - len(order))

    triangles = []
    anchor = poly.points[order[0]]
    for second, third in zip(order[1:-1], order[2:]):
        b, c = poly.points[second], poly.points[third]
        normal = np.cross(b - anchor, c - anchor)
        length = np.linalg.norm(normal)
        area = 0.5 * length
        if area <= area_tol:
            continue
        normal = normal / length
        if np.dot(normal, poly.n_phi) < 0.0:
            b, c = c, b
            normal = -normal
        triangles.append(SurfaceTriangle(
            vertices=np.array([anchor, b, c]), area=float(area), normal=normal, parent=poly.parent
        ))
    return triangles


def _rule_points(vertices: np.ndarray, areas: np.ndarray, rule: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadrature points, weights and owning triangle for stacked triangles (T, 3, 3)."""
    if rule == "centroid":
        return vertices.mean(axis=1), areas.copy(), np.arange(len(areas))
    if rule == "3-point":
        mids = 0.5 * (vertices + np.roll(vertices, -1, axis=1))
        return mids.reshape(-1, 3), np.repeat(areas / 3.0, 3), np.repeat(np.arange(len(areas)), 3)
    raise ValueError(f"Unknown quadrature rule '{rule}'")


def default_rule(kind: str) -> str:
    return "centroid" if kind == "tet4" else "3-point"


def _reference_points(basis: ReferenceBasis, cell_coords: np.ndarray, points: np.ndarray,
                      parents: np.ndarray) -> np.ndarray:
    try:
        reference = basis.reference_coordinates(cell_coords, points)
    except GeometryError as e:
        raise GeometryError(f"{e} (cells {np.unique(parents).tolist()[:10]})") from e
    outside = ~basis.contains(reference, tol=1e-9)
    if np.any(outside):
        raise ContractViolation(f"Quadrature points lie outside their parent cells {np.unique(parents[outside]).tolist()[:10]}")
    return reference


def surface_quadrature(tri: SurfaceTriangle, cell_coords: np.ndarray, basis: ReferenceBasis,
                       rule: str = "centroid") -> QuadratureSet:
    """
    Quadrature for one surface triangle with reference coordinates in its parent.

    Args:
        tri: Surface triangle
        cell_coords: Vertex coordinates of the parent cell
        basis: Reference basis of the parent cell
        rule: "centroid" or "3-point"

    Returns:
        Physical points, parent reference coordinates and weights
    """
    points, weights, _ = _rule_points(tri.vertices[None], np.array([tri.area]), rule)
    coords = np.broadcast_to(np.asarray(cell_coords, dtype=float), (len(points),) + np.shape(cell_coords))
    reference = _reference_points(basis, coords, points, np.full(len(points), tri.parent))
    return QuadratureSet(points=points, reference=reference, weights=weights)


def extract_surface(active: ActiveMesh, rule: QuadratureRule = "auto") -> CutSurface:
    """
    Extract the discrete surface Gamma_h from every active cell.

    Cells whose cut is degenerate or splits into several polygons are skipped
    with a warning and listed in ``CutSurface.skipped``.

    Args:
        active: Classified active mesh
        rule: Surface quadrature rule; "auto" picks the default for the cell kind

    Returns:
        The cut surface with quadrature in deterministic cell order
    """
    mesh = active.mesh
    basis = mesh.basis
    rule = default_rule(mesh.cell_kind) if rule == "auto" else rule
    area_tol = AREA_TOL_FACTOR * mesh_size(mesh) ** 2
    values = active.phi.values

    vertices, normals, areas, parents, skipped = [], [], [], [], []
    for cell in active.cells.tolist():
        nodes = mesh.cells[cell]
        try:
            poly = cut_polygon(mesh.vertices[nodes], values[nodes], basis, parent=cell)
            triangles = tessellate(poly, area_tol)
        except DegenerateCutError as e:
            logger.warning("Skipping cell %d: %s", cell, e)
            skipped.append((cell, str(e)))
            continue
        for tri in triangles:
            vertices.append(tri.vertices)
            normals.append(tri.normal)
            areas.append(tri.area)
            parents.append(cell)

    if not areas:
        surface = empty_surface(mesh.cell_kind)
        return CutSurface(**{**surface.__dict__, "skipped": tuple(skipped)})

    vertices = np.array(vertices)
    areas = np.array(areas)
    parents = np.array(parents)
    points, weights, owner = _rule_points(vertices, areas, rule)
    reference = _reference_points(basis, mesh.cell_coordinates(parents[owner]), points, parents[owner])

    surface = CutSurface(
        vertices=vertices,
        normals=np.array(normals),
        areas=areas,
        parents=parents,
        qp_points=points,
        qp_reference=reference,
        qp_weights=weights,
        qp_triangle=owner,
        cell_kind=mesh.cell_kind,
        skipped=tuple(skipped),
    )
    logger.debug("Extracted %d triangles (area %.6g) from %d cells", surface.n_triangles, surface.total_area, len(active.cells))
    return surface
