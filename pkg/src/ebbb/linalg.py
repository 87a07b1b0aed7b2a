"""Dense complex linear algebra shared by the simulation modules.

Everything here works on plain ``numpy`` arrays. Index conventions follow
``numpy.kron``: the left factor carries the slow index.
"""
from __future__ import annotations

from functools import reduce

import numpy as np
import scipy.linalg as sla

UNITARY_TOL = 1e-10
HERMITIAN_TOL = 1e-12
STATE_TOL = 1e-10
BRANCH_TOL = 1e-12


class BranchCutError(ValueError):
    """An eigenphase sits on the branch cut of the matrix logarithm."""


def is_unitary(u: np.ndarray, tol: float = UNITARY_TOL) -> bool:
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        return False
    return bool(np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) < tol)


def is_hermitian(h: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        return False
    return bool(np.max(np.abs(h - h.conj().T), initial=0.0) < tol)


def is_state(psi: np.ndarray, tol: float = STATE_TOL) -> bool:
    return bool(abs(np.vdot(psi, psi).real - 1.0) < tol)


def tensor_product(*factors: np.ndarray) -> np.ndarray:
    """Kronecker product of one or more matrices (or vectors), left factor slowest."""
    if not factors:
        raise ValueError("tensor_product needs at least one factor")
    return reduce(np.kron, factors)


def hermitian_eig(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvector columns of a Hermitian matrix."""
    h = np.asarray(h)
    if not is_hermitian(h):
        raise ValueError("hermitian_eig: input is not Hermitian to 1e-12")
    return np.linalg.eigh(h)


def evolution_from_hamiltonian(h: np.ndarray, eps: float) -> np.ndarray:
    """Return ``exp(-i h eps)`` through the eigendecomposition of ``h``."""
    if not eps > 0:
        raise ValueError(f"time step must be positive, got {eps!r}")
    w, v = hermitian_eig(h)
    return (v * np.exp(-1j * w * eps)) @ v.conj().T


def unitary_eig(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenphases in (-pi, pi] and orthonormal eigenvectors of a unitary matrix.

    A complex Schur form is used instead of a general eigensolver so that
    degenerate eigenspaces still come back with orthonormal vectors.
    """
    t, z = sla.schur(np.asarray(u, dtype=complex), output="complex")
    phases = np.angle(np.diag(t))
    # (-pi, pi]: rounding can land a -1 eigenvalue just below the cut
    phases = np.where(phases <= -np.pi + BRANCH_TOL, np.pi, phases)
    return phases, z


def unitary_root(u: np.ndarray, n_steps: int, strict: bool = False) -> np.ndarray:
    """Principal ``n_steps``-th root of a unitary matrix.

    Eigenphases are taken in (-pi, pi]. An eigenvalue at -1 is assigned the
    phase +pi; with ``strict=True`` it raises :class:`BranchCutError` instead,
    for callers that need the root to agree with ``exp(-i H T / n)``.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps!r}")
    u = np.asarray(u, dtype=complex)
    if not is_unitary(u):
        raise ValueError("unitary_root: input is not unitary to 1e-10")
    if n_steps == 1:
        return u.copy()
    phases, z = unitary_eig(u)
    if strict and np.any(np.abs(phases - np.pi) < BRANCH_TOL):
        raise BranchCutError("eigenphase on the branch cut at -pi; perturb or change n_steps")
    return (z * np.exp(1j * phases / n_steps)) @ z.conj().T
