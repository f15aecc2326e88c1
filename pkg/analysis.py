"""
Exact solutions, stress recovery, error norms and convergence rates for the
membrane benchmarks.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from assembly import MembraneMaterial, SolutionField
from background_mesh import BackgroundMesh, mesh_size
from cut_geometry import CutSurface, extract_surface
from errors import ContractViolation
from level_set import LevelSet, OblateLevelSet, classify, discretize
from tangential_ops import membrane_stress, plane_stress_lame, projector, surface_strain

logger = logging.getLogger(__name__)

OBLATE_SURFACE_TOL = 1e-6
FD_STEP = 1e-5

TensorField = Callable[[np.ndarray, np.ndarray], np.ndarray]


def exact_cylinder_stress(x: Union[float, np.ndarray], F: float, r: float, t: float, L: float) -> Union[float, np.ndarray]:
    """Axial stress F (1 - (x/L)^2) / (4 pi r t) of the pulled cylinder."""
    x = np.asarray(x, dtype=float)
    slack = 1e-9 * L
    if np.any(x < -slack) or np.any(x > L + slack):
        raise ContractViolation(f"Axial coordinate outside [0, {L}]")
    sigma = F * (1.0 - (x / L) ** 2) / (4.0 * np.pi * r * t)
    return float(sigma) if sigma.ndim == 0 else sigma


def cylinder_load(x: np.ndarray, F: float, r: float, L: float, axis: int = 0) -> np.ndarray:
    """
    Axial surface load F x / (2 pi r L^2) per unit area.

    Args:
        x: Points (..., 3)
        F: Total end force
        r: Cylinder radius
        L: Cylinder length
        axis: Index of the cylinder axis

    Returns:
        Load vectors (..., 3)
    """
    x = np.asarray(x, dtype=float)
    f = np.zeros_like(x)
    f[..., axis] = F / (2.0 * np.pi * r) * x[..., axis] / L ** 2
    return f


def cylinder_exact_tensor(points: np.ndarray, normals: np.ndarray, F: float, r: float, t: float, L: float,
                          axis: int = 0) -> np.ndarray:
    """Uniaxial stress sigma(x) a (x) a with a the axis projected onto the tangent plane."""
    P = projector(normals)
    a = P[..., axis]
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    x = np.clip(points[..., axis], 0.0, L)
    sigma = exact_cylinder_stress(x, F, r, t, L)
    return np.asarray(sigma)[..., None, None] * a[..., :, None] * a[..., None, :]


OBLATE = OblateLevelSet()


def _oblate_stress(points: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Membrane stress of u = (x, 0, 0) with the normal field of the level set at ``points``."""
    P = projector(OBLATE.normal(points))
    J = np.zeros(points.shape[:-1] + (3, 3))
    J[..., 0, 0] = 1.0
    return membrane_stress(surface_strain(J, P), P, mu, lam)


def _tangent_frame(n: np.ndarray) -> tuple:
    helper = np.where(np.abs(n[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    return t1, np.cross(n, t1)


def oblate_manufactured(points: np.ndarray, E: float = 1.0, nu: float = 0.5, step: float = FD_STEP) -> tuple:
    """
    Manufactured solution u = (x, 0, 0) on the oblate spheroid.

    The load f = -div_Gamma sigma is formed by central differences of the
    stress along two tangent directions.

    Args:
        points: Points on the surface, (3,) or (q, 3)
        E: Young's modulus
        nu: Poisson ratio
        step: Finite-difference step

    Returns:
        (displacement, stress tensor, load) at the points
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    x = np.atleast_2d(points)
    if np.any(np.abs(OBLATE(x)) > OBLATE_SURFACE_TOL):
        raise ContractViolation("Oblate manufactured solution evaluated away from the surface")
    mu, lam = plane_stress_lame(E, nu)

    u = np.zeros_like(x)
    u[:, 0] = x[:, 0]
    sigma = _oblate_stress(x, mu, lam)

    t1, t2 = _tangent_frame(OBLATE.normal(x))
    divergence = np.zeros_like(x)
    for tangent in (t1, t2):
        forward = _oblate_stress(x + step * tangent, mu, lam)
        backward = _oblate_stress(x - step * tangent, mu, lam)
        derivative = (forward - backward) / (2.0 * step)
        divergence += np.einsum("qij,qj->qi", derivative, tangent)
    f = -divergence
    if single:
        return u[0], sigma[0], f[0]
    return u, sigma, f


def oblate_load(points: np.ndarray, E: float = 1.0, nu: float = 0.5) -> np.ndarray:
    """Manufactured load at the closest surface points of ``points``."""
    return oblate_manufactured(OBLATE.closest_point(points), E, nu)[2]


def oblate_exact_tensor(points: np.ndarray, normals: np.ndarray, E: float = 1.0, nu: float = 0.5) -> np.ndarray:
    return oblate_manufactured(OBLATE.closest_point(points), E, nu)[1]


def displacement_jacobians(u_h: SolutionField, surface: CutSurface) -> np.ndarray:
    """Full 3D displacement Jacobians du_i/dx_j at the surface quadrature points."""
    mesh = u_h.dofs.mesh
    cells = surface.qp_parents
    _, grads, _ = mesh.basis.physical_gradients(mesh.cell_coordinates(cells), surface.qp_reference)
    nodal = u_h.cell_values(mesh.cells[cells])
    return np.einsum("qka,qkj->qaj", nodal, grads)


def displacement_at(u_h: SolutionField, surface: CutSurface) -> np.ndarray:
    mesh = u_h.dofs.mesh
    values = mesh.basis.shape(surface.qp_reference)
    return np.einsum("qk,qka->qa", values, u_h.cell_values(mesh.cells[surface.qp_parents]))


def recover_stress(u_h: SolutionField, surface: CutSurface, mat: MembraneMaterial) -> np.ndarray:
    """sigma_Gamma(u_h) at every surface quadrature point, using the triangle normals."""
    if surface.n_triangles == 0:
        return np.zeros((0, 3, 3))
    P = projector(surface.qp_normals)
    J = displacement_jacobians(u_h, surface)
    return membrane_stress(surface_strain(J, P), P, mat.mu, mat.lam)


def stress_error_L2(recovered: np.ndarray, exact: Union[np.ndarray, TensorField], surface: CutSurface) -> float:
    """
    L2 norm over Gamma_h of the Frobenius stress error.

    Args:
        recovered: Stress tensors at the quadrature points
        exact: Tensors at the quadrature points, or a callable (points, normals) -> tensors
        surface: Cut surface providing the quadrature

    Returns:
        sqrt(sum_q w_q |sigma(x_q) - sigma_h(x_q)|^2)
    """
    if callable(exact):
        exact = exact(surface.qp_points, surface.qp_normals)
    diff = np.asarray(exact) - np.asarray(recovered)
    return float(np.sqrt(np.sum(surface.qp_weights * np.einsum("qij,qij->q", diff, diff))))


def stress_norm_L2(tensors: np.ndarray, surface: CutSurface) -> float:
    return float(np.sqrt(np.sum(surface.qp_weights * np.einsum("qij,qij->q", tensors, tensors))))


@dataclass
class ConvergenceRow:
    level: int
    h: float
    nno: int
    ndof: int
    error: Optional[float]
    rate: Optional[float] = None
    iterations: int = 0
    converged: bool = True
    success: bool = True
    message: str = ""

    def to_csv_dict(self) -> dict:
        return {"h": self.h, "nno": self.nno, "ndof": self.ndof, "error": self.error, "rate": self.rate,
                "message": self.message}

    def to_dict(self) -> dict:
        return asdict(self)


def convergence_rates(h: Sequence[float], errors: Sequence[Optional[float]]) -> List[Optional[float]]:
    """ln(e_prev / e) / ln(h_prev / h) for every row after the first; None where undefined."""
    rates: List[Optional[float]] = [None]
    for k in range(1, len(h)):
        e_prev, e = errors[k - 1], errors[k]
        if e_prev is None or e is None or e_prev <= 0 or e <= 0 or h[k - 1] == h[k]:
            rates.append(None)
            continue
        rates.append(float(np.log(e_prev / e) / np.log(h[k - 1] / h[k])))
    return rates


def attach_rates(rows: List[ConvergenceRow]) -> List[ConvergenceRow]:
    rates = convergence_rates([row.h for row in rows], [row.error if row.success else None for row in rows])
    for k, (row, rate) in enumerate(zip(rows, rates)):
        row.rate = rate
        if k > 0 and row.success and rate is None and not row.message:
            row.message = f"rate undefined: level {rows[k - 1].level} has no error"
    return rows


def fit_rate(h: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    slope, _ = np.polyfit(np.log(np.asarray(h, dtype=float)), np.log(np.asarray(errors, dtype=float)), 1)
    return float(slope)


def surface_area_study(level_set: LevelSet, meshes: Sequence[BackgroundMesh], exact_area: float) -> dict:
    """
    Area of Gamma_h over a sequence of meshes.

    Returns:
        Dictionary with per-mesh h, area and relative error, and the fitted rate
    """
    h, areas, errors = [], [], []
    for mesh in meshes:
        surface = extract_surface(classify(discretize(level_set, mesh)))
        h.append(mesh_size(mesh))
        areas.append(surface.total_area)
        errors.append(abs(surface.total_area - exact_area) / exact_area)
        logger.info("h=%.4f area=%.6f relative error=%.3e", h[-1], areas[-1], errors[-1])
    return {"h": h, "area": areas, "relative_error": errors, "rate": fit_rate(h, errors)}
