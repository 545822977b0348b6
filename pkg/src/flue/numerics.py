"""Dense linear-algebra helpers used by the coding and spectral code."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NonConvergent

RANK_TOL = 1e-10


def as_matrix(m) -> np.ndarray:
    """Return ``m`` as a finite 2-D float array (complex input is kept complex)."""
    arr = np.asarray(m)
    if arr.dtype.kind not in "fc":
        arr = arr.astype(float)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return arr


def pseudoinverse(m) -> np.ndarray:
    """Moore-Penrose pseudoinverse with the package-wide relative rank cutoff."""
    m = as_matrix(m)
    if m.size == 0 or not np.any(m):
        return np.zeros(m.shape[::-1], dtype=m.dtype)
    return np.linalg.pinv(m, rcond=RANK_TOL)


def rank(m, tol: float = RANK_TOL) -> int:
    """Numerical rank: singular values below ``tol * s_max`` count as zero."""
    m = as_matrix(m)
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s >= tol * s[0]))


def left_null_basis(m, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis (as rows) of ``{v : v^T m = 0}``.

    Parameters
    ----------
    m : array_like, shape (r, c)
    tol : float
        Relative singular-value cutoff used to decide the rank.

    Returns
    -------
    ndarray, shape (r - rank(m), r)
        Empty (zero rows) when ``m`` has full row rank.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = as_matrix(m)
    u, s, _ = np.linalg.svd(m, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        r = 0
    else:
        r = int(np.sum(s >= tol * s[0]))
    return u[:, r:].T.copy()


def norm_2inf(m) -> float:
    """Largest Euclidean norm over the rows of ``m``."""
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(m, axis=1)))


def spectral_radius(m) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(as_matrix(m)))))


def _eig_order(values: np.ndarray) -> np.ndarray:
    # round so conjugate pairs and repeated roots tie instead of flipping on noise
    mod = np.round(np.abs(values), 12)
    re = np.round(values.real, 12)
    im = np.round(values.imag, 12)
    return np.lexsort((-im, -re, -mod))


@dataclass(frozen=True)
class EigenSummary:
    """Eigenvalues sorted by descending modulus, then real part, then imaginary part.

    ``right_vectors[:, i]`` and ``left_vectors[:, i]`` belong to ``values[i]``;
    left vectors satisfy ``v^H m = lambda v^H``.
    """

    values: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray

    @property
    def moduli(self) -> np.ndarray:
        return np.abs(self.values)


def eigen_summary(m) -> EigenSummary:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError("eigen_summary needs a square matrix")
    w, vl, vr = scipy.linalg.eig(m, left=True, right=True)
    order = _eig_order(w)
    return EigenSummary(values=w[order], right_vectors=vr[:, order], left_vectors=vl[:, order])


def _check_power_limit_spectrum(m: np.ndarray, tol: float) -> None:
    values = np.linalg.eigvals(m)
    radius = float(np.max(np.abs(values)))
    if radius > 1.0 + max(tol, 1e-8):
        raise ValueError(f"spectral radius {radius:.3e} exceeds 1; powers diverge")
    peripheral = values[np.abs(values) > 1.0 - 1e-10]
    if np.any(np.abs(peripheral - 1.0) > 1e-6):
        # unit-modulus eigenvalues other than 1 make the power sequence oscillate
        raise NonConvergent("peripheral eigenvalue other than 1; no power limit exists")


def matrix_power_until_fixed(m, tol: float = 1e-12, max_doublings: int = 64,
                             return_history: bool = False):
    """Square ``m`` repeatedly until ``||m^{2k} - m^k||_F <= tol``.

    Returns ``(power, doublings)``, or ``(power, doublings, gaps)`` with
    ``return_history=True`` where ``gaps[i]`` is the Frobenius gap after
    doubling ``i + 1``.

    Raises
    ------
    NonConvergent
        If the gap stops shrinking after the first three doublings, if the
        budget runs out, or if the spectrum has unit-modulus eigenvalues
        other than 1.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError("matrix_power_until_fixed needs a square matrix")
    _check_power_limit_spectrum(m, tol)
    power = m.copy()
    gaps: list[float] = []
    for d in range(1, max_doublings + 1):
        nxt = power @ power
        gap = float(np.linalg.norm(nxt - power))
        if not np.isfinite(gap):
            raise NonConvergent("matrix powers overflowed")
        gaps.append(gap)
        power = nxt
        if gap <= tol:
            return (power, d, gaps) if return_history else (power, d)
        if d > 3 and gap >= gaps[-2]:
            raise NonConvergent(f"Frobenius gap stopped decreasing at doubling {d} (gap {gap:.3e})")
    raise NonConvergent(f"no fixed power within {max_doublings} doublings (last gap {gaps[-1]:.3e})")


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (radians) between the column spaces of ``a`` and ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[1] == 0 or b.shape[1] == 0:
        return np.zeros(0)
    return scipy.linalg.subspace_angles(a, b)
