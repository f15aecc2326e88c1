"""
Pointwise tangential calculus on surfaces with a given unit normal.

Tensors are full 3x3 matrices in global coordinates; no local tangent frames
are built. All functions broadcast over leading axes.
"""

import numpy as np

from errors import ContractViolation

NORMAL_TOL = 1e-10


def projector(n: np.ndarray) -> np.ndarray:
    """P = I - n (x) n for unit normals of shape (..., 3)."""
    n = np.asarray(n, dtype=float)
    if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) >= NORMAL_TOL):
        raise ContractViolation("Projector requires unit normals")
    return np.eye(3) - n[..., :, None] * n[..., None, :]


def tangential_gradient(g: np.ndarray, P: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", P, g)


def surface_strain(J: np.ndarray, P: np.ndarray) -> np.ndarray:
    """
    In-plane strain P eps P of a displacement Jacobian.

    Args:
        J: Displacement Jacobian, J[i, j] = du_i/dx_j
        P: Tangent projector

    Returns:
        The projected symmetric strain
    """
    J = np.asarray(J, dtype=float)
    eps = 0.5 * (J + np.swapaxes(J, -1, -2))
    return P @ eps @ P


def surface_divergence(J: np.ndarray, P: np.ndarray) -> np.ndarray:
    return np.trace(P @ np.asarray(J, dtype=float), axis1=-2, axis2=-1)


def membrane_stress(eps_gamma: np.ndarray, P: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """sigma = 2 mu eps + lam tr(eps) P for an already projected strain."""
    trace = np.trace(eps_gamma, axis1=-2, axis2=-1)
    return 2.0 * mu * eps_gamma + lam * trace[..., None, None] * P


def plane_stress_lame(E: float, nu: float) -> tuple:
    """Plane-stress Lame parameters (mu, lambda)."""
    return E / (2.0 * (1.0 + nu)), E * nu / (1.0 - nu ** 2)
