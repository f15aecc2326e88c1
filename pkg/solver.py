"""
Linear solvers for the assembled systems: Jacobi-preconditioned conjugate
gradients with optional kernel deflation, a direct fallback, and power /
inverse iteration estimates of the spectral condition number.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from assembly import SparseSystem
from errors import ContractViolation

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
MAX_ITER_FACTOR = 20

MatrixLike = Union[SparseSystem, sp.spmatrix, np.ndarray]


@dataclass
class SolveReport:
    """
    Outcome of a linear solve.

    ``residual_history`` holds ||b - A x_k|| / ||b|| after every iteration and
    ``energy_history`` the quadratic functional 1/2 x'Ax - b'x, which CG
    decreases monotonically.
    """

    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    method: str = "cg"
    residual_history: List[float] = field(default_factory=list)
    energy_history: List[float] = field(default_factory=list)
    elapsed: float = 0.0

    def summary(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "elapsed": round(self.elapsed, 4),
        }


@dataclass(frozen=True)
class ConditionEstimate:
    lambda_max: float
    lambda_min: float
    kappa: float
    lower_bound: bool = False

    @property
    def kappa_or_inf(self) -> float:
        """kappa, or infinity when only a lower bound was obtained."""
        return float("inf") if self.lower_bound else self.kappa


def _as_matrix(system: MatrixLike) -> sp.csr_matrix:
    if isinstance(system, SparseSystem):
        return system.matrix
    return sp.csr_matrix(system)


def _jacobi(A: sp.csr_matrix) -> np.ndarray:
    diag = A.diagonal()
    inverse = np.ones_like(diag)
    positive = diag > 0
    inverse[positive] = 1.0 / diag[positive]
    return inverse


def _deflate(v: np.ndarray, nullspace: Optional[np.ndarray]) -> np.ndarray:
    if nullspace is None:
        return v
    return v - nullspace @ (nullspace.T @ v)


def pcg(A: sp.csr_matrix, b: np.ndarray, tol: float = DEFAULT_TOL, max_iter: Optional[int] = None,
        nullspace: Optional[np.ndarray] = None, x0: Optional[np.ndarray] = None) -> SolveReport:
    """
    Jacobi-preconditioned conjugate gradients.

    Args:
        A: Symmetric positive (semi)definite matrix
        b: Right-hand side
        tol: Relative residual ||b - Ax|| / ||b|| to reach
        max_iter: Iteration cap, 20 * n by default
        nullspace: Orthonormal columns spanning ker(A); b and the iterates are
            kept orthogonal to them
        x0: Initial guess, zero by default

    Returns:
        SolveReport; ``converged`` is False when the cap was reached
    """
    start = time.time()
    n = A.shape[0]
    max_iter = MAX_ITER_FACTOR * n if max_iter is None else max_iter
    b = _deflate(np.asarray(b, dtype=float), nullspace)
    x = np.zeros(n) if x0 is None else _deflate(np.asarray(x0, dtype=float).copy(), nullspace)

    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return SolveReport(np.zeros(n), 0, 0.0, True, elapsed=time.time() - start)

    inv_diag = _jacobi(A)
    r = b - A @ x
    z = _deflate(inv_diag * r, nullspace)
    p = z.copy()
    rho = r @ z
    residuals, energies = [], []
    relres = np.linalg.norm(r) / b_norm

    iteration = 0
    while iteration < max_iter and relres > tol:
        iteration += 1
        q = A @ p
        curvature = p @ q
        if curvature <= 0.0:
            logger.warning("CG met non-positive curvature %.3e at iteration %d", curvature, iteration)
            break
        alpha = rho / curvature
        x += alpha * p
        r -= alpha * q
        relres = np.linalg.norm(r) / b_norm
        residuals.append(float(relres))
        energies.append(float(-0.5 * x @ (b + r)))
        z = _deflate(inv_diag * r, nullspace)
        rho_next = r @ z
        p = z + (rho_next / rho) * p
        rho = rho_next

    x = _deflate(x, nullspace)
    converged = relres <= tol
    if not converged:
        logger.warning("CG stopped after %d iterations at relative residual %.3e", iteration, relres)
    else:
        logger.debug("CG converged in %d iterations (relative residual %.3e)", iteration, relres)
    return SolveReport(x, iteration, float(relres), bool(converged), "cg", residuals, energies, time.time() - start)


def solve_cg(system: SparseSystem, tol: float = DEFAULT_TOL, max_iter: Optional[int] = None,
             nullspace: Optional[np.ndarray] = None) -> SolveReport:
    """Solve a system whose Dirichlet constraints were already applied."""
    return pcg(system.matrix, system.rhs, tol=tol, max_iter=max_iter, nullspace=nullspace)


def solve_direct(system: SparseSystem, nullspace: Optional[np.ndarray] = None) -> SolveReport:
    """
    Sparse direct solve. A kernel basis is handled by bordering the matrix with
    it, which selects the solution orthogonal to the kernel.
    """
    start = time.time()
    A, b = system.matrix, system.rhs
    if nullspace is None:
        x = spsolve(A.tocsc(), b)
    else:
        m = nullspace.shape[1]
        bordered = sp.bmat([[A, sp.csr_matrix(nullspace)], [sp.csr_matrix(nullspace.T), None]], format="csc")
        x = spsolve(bordered, np.concatenate([_deflate(b, nullspace), np.zeros(m)]))[: A.shape[0]]
    x = np.asarray(x, dtype=float)
    b_norm = np.linalg.norm(_deflate(b, nullspace))
    residual = np.linalg.norm(_deflate(b, nullspace) - A @ x) / b_norm if b_norm > 0 else 0.0
    converged = bool(np.all(np.isfinite(x)))
    if not converged:
        logger.warning("Direct solve produced non-finite values")
    return SolveReport(x, 1, float(residual), converged, "direct", [float(residual)], [], time.time() - start)


def solve(system: SparseSystem, method: str = "cg", tol: float = DEFAULT_TOL, max_iter: Optional[int] = None,
          nullspace: Optional[np.ndarray] = None) -> SolveReport:
    if method == "cg":
        return solve_cg(system, tol=tol, max_iter=max_iter, nullspace=nullspace)
    if method == "direct":
        return solve_direct(system, nullspace=nullspace)
    raise ValueError(f"Unknown solver method '{method}'")


def estimate_condition(system: MatrixLike, iters: int = 200, tol: float = 1e-8,
                       nullspace: Optional[np.ndarray] = None, seed: int = 0,
                       inner_tol: float = 1e-12, inner_max_iter: Optional[int] = None) -> ConditionEstimate:
    """
    Estimate lambda_max by power iteration and lambda_min by inverse iteration
    with CG inner solves, restricted to the complement of ``nullspace``.

    Args:
        system: Symmetric positive definite matrix (on the deflated space)
        iters: Iteration cap for each of the two eigenvalue iterations
        tol: Relative change in the eigenvalue estimate that stops an iteration
        nullspace: Orthonormal kernel basis to deflate
        seed: Seed of the random start vector
        inner_tol: Relative residual of the inner CG solves
        inner_max_iter: Iteration cap of the inner CG solves

    Returns:
        ConditionEstimate; ``lower_bound`` is set when an inner solve failed
    """
    A = _as_matrix(system)
    if A.shape[0] != A.shape[1]:
        raise ContractViolation("Condition estimation needs a square matrix")
    rng = np.random.default_rng(seed)
    start = _deflate(rng.standard_normal(A.shape[0]), nullspace)
    start /= np.linalg.norm(start)

    v = start.copy()
    lambda_max = 0.0
    for _ in range(iters):
        w = _deflate(A @ v, nullspace)
        estimate = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        if abs(estimate - lambda_max) <= tol * abs(estimate):
            lambda_max = estimate
            break
        lambda_max = estimate

    v = start.copy()
    lambda_min = lambda_max
    lower_bound = False
    for _ in range(iters):
        report = pcg(A, v, tol=inner_tol, max_iter=inner_max_iter, nullspace=nullspace)
        if not report.converged:
            lower_bound = True
            logger.warning("Inverse iteration solve failed; condition number is a lower bound")
            break
        y = report.x
        estimate = 1.0 / float(v @ y)
        v = y / np.linalg.norm(y)
        if abs(estimate - lambda_min) <= tol * abs(estimate):
            lambda_min = estimate
            break
        lambda_min = estimate

    kappa = lambda_max / lambda_min if lambda_min > 0 else float("inf")
    return ConditionEstimate(float(lambda_max), float(lambda_min), float(kappa), lower_bound)
