import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Sequence, Union

import numpy as np

from background_mesh import BOUNDARY, BackgroundMesh, mesh_size
from errors import ContractViolation, SurfaceMissesMeshError

logger = logging.getLogger(__name__)

Axis = Literal["x", "y", "z"]
AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
COMPONENT_INDEX = AXIS_INDEX

TIE_FACTOR = 1e-12


class LevelSet:
    """Analytic level set; negative inside, positive outside."""

    kind: str = "abstract"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def normal(self, x: np.ndarray) -> np.ndarray:
        g = self.gradient(x)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


@dataclass(frozen=True)
class CylinderLevelSet(LevelSet):
    """Infinite circular cylinder; ``center`` lives in the plane orthogonal to ``axis``."""

    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    axis: Axis = "z"
    kind: str = "cylinder"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"Cylinder radius must be positive, got {self.radius}")
        if self.axis not in AXIS_INDEX:
            raise ValueError(f"Unknown cylinder axis '{self.axis}'")

    @property
    def radial_axes(self) -> list:
        return [d for d in range(3) if d != AXIS_INDEX[self.axis]]

    def _radial(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        radial = np.zeros_like(x)
        radial[..., self.radial_axes] = x[..., self.radial_axes] - np.asarray(self.center, dtype=float)
        return radial

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self._radial(x), axis=-1) - self.radius

    def gradient(self, x: np.ndarray) -> np.ndarray:
        radial = self._radial(x)
        return radial / np.linalg.norm(radial, axis=-1, keepdims=True)


@dataclass(frozen=True)
class OblateLevelSet(LevelSet):
    """Oblate spheroid x^2 + y^2 + (2z)^2 - 1 (not a distance function)."""

    kind: str = "oblate"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., 0] ** 2 + x[..., 1] ** 2 + (2.0 * x[..., 2]) ** 2 - 1.0

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([2.0 * x[..., 0], 2.0 * x[..., 1], 8.0 * x[..., 2]], axis=-1)

    def closest_point(self, x: np.ndarray, tol: float = 1e-13, max_iter: int = 50) -> np.ndarray:
        """Move points onto the zero set by Newton steps along the gradient."""
        p = np.array(x, dtype=float)
        for _ in range(max_iter):
            value = self(p)
            if np.all(np.abs(value) <= tol):
                break
            g = self.gradient(p)
            p = p - (value / np.sum(g * g, axis=-1))[..., None] * g
        return p


@dataclass(frozen=True)
class PlaneLevelSet(LevelSet):
    """n . x - d with the normal scaled to unit length."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0
    kind: str = "plane"

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        length = np.linalg.norm(n)
        if length == 0:
            raise ValueError("Plane normal must be nonzero")
        object.__setattr__(self, "normal", tuple((n / length).tolist()))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ np.asarray(self.normal) - self.offset

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.normal), x.shape).copy()


@dataclass(frozen=True)
class SphereLevelSet(LevelSet):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    kind: str = "sphere"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(self.center), axis=-1) - self.radius

    def gradient(self, x: np.ndarray) -> np.ndarray:
        d = np.asarray(x, dtype=float) - np.asarray(self.center)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class TranslatedLevelSet(LevelSet):
    """The inner level set shifted by a constant vector."""

    inner: LevelSet = field(default_factory=OblateLevelSet)
    shift: tuple = (0.0, 0.0, 0.0)
    kind: str = "translated"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.inner(np.asarray(x, dtype=float) - np.asarray(self.shift))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.inner.gradient(np.asarray(x, dtype=float) - np.asarray(self.shift))


def make_level_set(kind: str, **params) -> LevelSet:
    """
    Create a level set from its kind and keyword parameters.

    Args:
        kind: "cylinder", "oblate", "plane" or "sphere"
        **params: Parameters of that kind; ``shift`` wraps the result in a
            TranslatedLevelSet

    Returns:
        The level set
    """
    shift = params.pop("shift", None)
    params = {key: value for key, value in params.items() if value is not None}
    if kind == "cylinder":
        ls = CylinderLevelSet(
            center=tuple(params.get("center", (0.0, 0.0))),
            radius=float(params.get("radius", 1.0)),
            axis=params.get("axis", "z"),
        )
    elif kind == "oblate":
        ls = OblateLevelSet()
    elif kind == "plane":
        ls = PlaneLevelSet(normal=tuple(params.get("normal", (0.0, 0.0, 1.0))), offset=float(params.get("offset", 0.0)))
    elif kind == "sphere":
        ls = SphereLevelSet(center=tuple(params.get("center", (0.0, 0.0, 0.0))), radius=float(params.get("radius", 1.0)))
    else:
        raise ValueError(f"Unknown level set kind '{kind}'")
    if shift is not None and np.any(np.asarray(shift, dtype=float) != 0.0):
        ls = TranslatedLevelSet(inner=ls, shift=tuple(shift))
    return ls


def eval_levelset(ls: LevelSet, x: Sequence[float]) -> Union[float, np.ndarray]:
    value = ls(np.asarray(x, dtype=float))
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True, eq=False)
class DiscreteLevelSet:
    mesh: BackgroundMesh
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.mesh.n_vertices:
            raise ContractViolation(
                f"Level set has {len(self.values)} values for {self.mesh.n_vertices} mesh vertices"
            )

    def __neg__(self) -> "DiscreteLevelSet":
        return DiscreteLevelSet(self.mesh, -self.values)


def discretize(ls: LevelSet, mesh: BackgroundMesh) -> DiscreteLevelSet:
    """Nodal interpolant of ``ls``; exact zeros become +1e-12 h."""
    values = np.asarray(ls(mesh.vertices), dtype=float).copy()
    zeros = values == 0.0
    if np.any(zeros):
        values[zeros] = TIE_FACTOR * mesh_size(mesh)
        logger.debug("Replaced %d zero level-set values by the tie value", np.count_nonzero(zeros))
    return DiscreteLevelSet(mesh, values)


@dataclass(frozen=True)
class DirichletSet:
    tag: str
    nodes: np.ndarray
    components: tuple

    @property
    def empty(self) -> bool:
        return len(self.nodes) == 0


@dataclass(eq=False)
class ActiveMesh:
    """
    Active cells T_h of a discrete level set, their interior faces F_h and the
    boundary faces of the band Omega_h.
    """

    phi: DiscreteLevelSet
    cells: np.ndarray
    cell_mask: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray
    boundary_faces: np.ndarray
    dirichlet: Dict[str, DirichletSet] = field(default_factory=dict)

    @property
    def mesh(self) -> BackgroundMesh:
        return self.phi.mesh

    @property
    def nodes(self) -> np.ndarray:
        return np.unique(self.mesh.cells[self.cells])

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.mesh.face_vertices[self.boundary_faces])

    def band_volume(self) -> float:
        return float(np.sum(self.mesh.cell_volumes()[self.cells]))


def face_geometry(mesh: BackgroundMesh, faces: np.ndarray) -> tuple:
    """Centroid and unit normal of each face, oriented from cell+ towards cell-."""
    cycles = mesh.vertices[mesh.face_vertices[faces]]
    centroid = cycles.mean(axis=1)
    if cycles.shape[1] == 3:
        normal = np.cross(cycles[:, 1] - cycles[:, 0], cycles[:, 2] - cycles[:, 0])
    else:
        normal = np.cross(cycles[:, 2] - cycles[:, 0], cycles[:, 3] - cycles[:, 1])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    plus_center = mesh.vertices[mesh.cells[mesh.face_cells[faces, 0]]].mean(axis=1)
    flip = np.einsum("ij,ij->i", centroid - plus_center, normal) < 0
    normal[flip] *= -1.0
    return centroid, normal


def classify(phi: DiscreteLevelSet) -> ActiveMesh:
    """
    Classify cells and faces of the background mesh against the discrete surface.

    Args:
        phi: Nodal level-set values on the mesh

    Returns:
        The active mesh: cut cells, their shared faces and band boundary faces
    """
    mesh = phi.mesh
    cell_values = phi.values[mesh.cells]
    cell_mask = (cell_values.min(axis=1) < 0.0) & (cell_values.max(axis=1) > 0.0)
    if not np.any(cell_mask):
        raise SurfaceMissesMeshError("The zero level set does not cut any cell of the background mesh")

    plus_active = cell_mask[mesh.face_cells[:, 0]]
    has_minus = mesh.face_cells[:, 1] != BOUNDARY
    minus_active = np.zeros_like(plus_active)
    minus_active[has_minus] = cell_mask[mesh.face_cells[has_minus, 1]]

    faces = np.flatnonzero(plus_active & minus_active)
    boundary_faces = np.flatnonzero(plus_active ^ minus_active)
    _, normals = face_geometry(mesh, faces) if len(faces) else (None, np.zeros((0, 3)))

    active = ActiveMesh(
        phi=phi,
        cells=np.flatnonzero(cell_mask),
        cell_mask=cell_mask,
        faces=faces,
        face_normals=normals,
        boundary_faces=boundary_faces,
    )
    logger.debug("Active mesh: %d cells, %d interior faces, %d boundary faces",
                 len(active.cells), len(faces), len(boundary_faces))
    return active


@dataclass(frozen=True)
class PlaneSelector:
    """Nodes with coordinate ``axis`` equal to ``value``."""

    axis: Axis
    value: float

    def __call__(self, points: np.ndarray, tol: float) -> np.ndarray:
        return np.abs(points[:, AXIS_INDEX[self.axis]] - self.value) <= tol


@dataclass(frozen=True)
class BoxSelector:
    """Nodes inside the closed box [lower, upper]."""

    lower: tuple
    upper: tuple

    def __call__(self, points: np.ndarray, tol: float) -> np.ndarray:
        return np.all((points >= np.asarray(self.lower) - tol) & (points <= np.asarray(self.upper) + tol), axis=1)


Selector = Union[PlaneSelector, BoxSelector]


def dirichlet_nodes(domain: Union[ActiveMesh, BackgroundMesh], predicate: Selector,
                    components: Sequence[str] = ("x", "y", "z"), tag: Optional[str] = None) -> DirichletSet:
    """
    Select constrained nodes geometrically.

    For an ActiveMesh the candidates are the nodes on the band boundary; for a
    BackgroundMesh they are the nodes on the box boundary.

    Args:
        domain: Active band (membrane mode) or full background mesh (coupled mode)
        predicate: Geometric node selector
        components: Displacement components to constrain
        tag: Name of the constraint; stored on the ActiveMesh when given

    Returns:
        The selected nodes with their component mask
    """
    unknown = set(components) - set(COMPONENT_INDEX)
    if unknown:
        raise ValueError(f"Unknown displacement components {sorted(unknown)}")
    if isinstance(domain, ActiveMesh):
        mesh = domain.mesh
        candidates = domain.boundary_nodes
    else:
        mesh = domain
        candidates = np.flatnonzero(mesh.boundary_vertex_mask())

    tol = 1e-9 * float(np.max(mesh.box[1] - mesh.box[0]))
    selected = candidates[predicate(mesh.vertices[candidates], tol)]
    tag = tag or f"{predicate}"
    result = DirichletSet(tag=tag, nodes=np.sort(selected), components=tuple(sorted(set(components), key="xyz".index)))
    if result.empty:
        logger.warning("Dirichlet selection '%s' matched no nodes", tag)
    if isinstance(domain, ActiveMesh):
        domain.dirichlet[tag] = result
    return result
