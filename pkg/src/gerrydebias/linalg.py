"""Dense linear-algebra kernels for nullspace debiasing.

Every function is pure and returns fresh arrays. Projectors are wrapped in a
small :class:`Projector` record that carries the rank alongside the matrix.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateBiasError, InvalidInputError

# Singular values at or below RANK_RTOL * sigma_max count as zero.
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Projector:
    matrix: np.ndarray
    rank: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)


def _as_matrix(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def _fix_signs(u, vt):
    # make the largest-magnitude entry of every right singular vector positive
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(m):
    """Thin SVD ``m = U @ diag(S) @ V.T``.

    Returns ``(U, S, V)`` with singular vectors as the *columns* of ``U`` and
    ``V``. Signs are normalised so that each right singular vector has its
    largest-magnitude entry positive.
    """
    a = _as_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    u, vt = _fix_signs(u, vt)
    return u, s, vt.T


def matrix_rank(m, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(_as_matrix(m), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def rowspace_basis(w, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (as rows) of the row space of ``w``."""
    _, s, v = svd(w)
    if s[0] == 0.0:
        return np.zeros((0, v.shape[0]))
    r = int(np.sum(s > rtol * s[0]))
    return v[:, :r].T


def nullspace_projector(w) -> Projector:
    """Orthogonal projector onto the nullspace of ``w``.

    Stacking several classifiers' weight rows into ``w`` gives the projector
    onto the intersection of their nullspaces.
    """
    a = _as_matrix(w, "w")
    basis = rowspace_basis(a)
    d = a.shape[1]
    p = np.eye(d) - basis.T @ basis
    p = 0.5 * (p + p.T)
    return Projector(p, d - basis.shape[0])


def principal_direction(w) -> np.ndarray:
    """Top right-singular vector of ``w`` (unit norm, sign-normalised)."""
    a = _as_matrix(w, "w")
    if not np.any(a):
        raise DegenerateBiasError("bias matrix is identically zero")
    _, _, v = svd(a)
    return v[:, 0].copy()


def principal_directions(w, count: int) -> np.ndarray:
    """Top ``count`` right-singular vectors of ``w`` as rows, limited by rank."""
    a = _as_matrix(w, "w")
    if not np.any(a):
        raise DegenerateBiasError("bias matrix is identically zero")
    basis = rowspace_basis(a)
    return basis[:count].copy()


def rank_one_projector(v) -> Projector:
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise InvalidInputError("direction must be a finite, non-empty vector")
    if abs(np.linalg.norm(v) - 1.0) > 1e-8:
        raise InvalidInputError(f"direction must have unit norm, got {np.linalg.norm(v)!r}")
    return Projector(np.outer(v, v), 1)


def nullspace_of_sum(projector_sum) -> Projector:
    """Projector onto the nullspace of a symmetric PSD sum of projectors."""
    s = _as_matrix(projector_sum, "projector_sum")
    if s.shape[0] != s.shape[1]:
        raise InvalidInputError(f"projector_sum must be square, got {s.shape}")
    if np.max(np.abs(s - s.T)) > 1e-6:
        raise InvalidInputError("projector_sum is not symmetric")
    d = s.shape[0]
    evals, evecs = np.linalg.eigh(0.5 * (s + s.T))
    top = np.max(np.abs(evals))
    if top == 0.0:
        return Projector(np.eye(d), d)
    keep = evals > RANK_RTOL * top
    u = evecs[:, keep]
    p = np.eye(d) - u @ u.T
    p = 0.5 * (p + p.T)
    return Projector(p, d - int(keep.sum()))


def gram_schmidt(v, basis) -> tuple:
    """Orthogonalise ``v`` against the orthonormal rows of ``basis``.

    Returns ``(unit_vector, residual_norm)``; two passes for stability. The
    unit vector is ``None`` when the residual is numerically zero.
    """
    v = np.asarray(v, dtype=float).ravel().copy()
    norm0 = np.linalg.norm(v)
    if basis is not None and len(basis):
        b = np.asarray(basis, dtype=float)
        for _ in range(2):
            v -= b.T @ (b @ v)
    res = np.linalg.norm(v)
    if norm0 == 0.0 or res < 1e-8 * max(norm0, 1.0):
        return None, res
    v /= res
    i = np.argmax(np.abs(v))
    if v[i] < 0:
        v = -v
    return v, res
