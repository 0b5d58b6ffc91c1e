"""
Spectral substrate: thin SVD of weight matrices, projections onto the
global/core bases u_i v_j^T, and change rates of core-direction coordinates.

Matrices are plain ``numpy`` float64 arrays (rows x cols). Factor objects are
frozen dataclasses whose arrays are marked read-only, so they can be shared
between threads without copying.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidMatrix, ShapeMismatch

Matrix = np.ndarray

DEFAULT_EPSILON = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def as_matrix(a, name: str = "matrix") -> Matrix:
    """
    Coerce input to a finite float64 2-D array.

    Args:
        a: Array-like input
        name: Name used in error messages

    Returns:
        The input as a float64 ndarray (no copy when already conforming)
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidMatrix(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidMatrix(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD W = u diag(sigma) vt with canonical signs."""

    u: Matrix          # n x k, columns u_i
    sigma: np.ndarray  # k, non-increasing
    vt: Matrix         # k x m, rows v_i^T
    vt_full: Matrix    # m x m, first k rows equal vt

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    @property
    def shape(self):
        return (self.u.shape[0], self.vt.shape[1])

    @property
    def v(self) -> Matrix:
        return self.vt.T

    def core_basis(self, i: int) -> Matrix:
        """Rank-one core basis u_i v_i^T."""
        return np.outer(self.u[:, i], self.vt[i])

    def global_basis(self, i: int, j: int) -> Matrix:
        """Rank-one global basis u_i v_j^T (j may exceed k, up to m-1)."""
        return np.outer(self.u[:, i], self.vt_full[j])

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.vt


@dataclass(frozen=True)
class ProjectionCoeffs:
    """Coordinates p_ij = u_i^T A v_j of a matrix on the global bases."""

    coeffs: Matrix  # k x m

    def diagonal(self) -> np.ndarray:
        """Rectangle diagonal, i.e. the core-basis coordinates."""
        return np.diagonal(self.coeffs).copy()


@dataclass(frozen=True)
class ChangeRates:
    """Change rates of the core-direction coordinates under an update."""

    delta: np.ndarray   # |delta_i|
    signed: np.ndarray  # delta_i before taking the absolute value
    epsilon: float
    ranking: np.ndarray  # indices ordering delta non-increasing, ties by index

    def __len__(self) -> int:
        return self.delta.shape[0]


def svd(w: Matrix) -> SvdFactors:
    """
    Thin SVD with sign canonicalization.

    The entry of largest magnitude in every left singular vector u_i is made
    positive (first such entry on ties); the paired v_i flips with it.

    Args:
        w: Weight matrix (n x m)

    Returns:
        SvdFactors with k = min(n, m)
    """
    w = as_matrix(w, "w")
    n, m = w.shape
    k = min(n, m)

    u_full, sigma, vt_full = np.linalg.svd(w, full_matrices=True)
    u = u_full[:, :k].copy()
    vt_full = vt_full.copy()

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    u *= signs
    vt_full[:k] *= signs[:, None]

    return SvdFactors(
        u=_frozen(u),
        sigma=_frozen(sigma),
        vt=_frozen(vt_full[:k]),
        vt_full=_frozen(vt_full),
    )


def _check_shape(f: SvdFactors, a: Matrix, name: str) -> Matrix:
    a = as_matrix(a, name)
    if a.shape != f.shape:
        raise ShapeMismatch(f"{name} has shape {a.shape}, factors describe {f.shape}")
    return a


def project_global(f: SvdFactors, a: Matrix) -> ProjectionCoeffs:
    """
    Project a matrix onto the global bases of W.

    Args:
        f: Factors of W
        a: Matrix with W's shape

    Returns:
        ProjectionCoeffs with coeffs = U^T a V (k x m)
    """
    a = _check_shape(f, a, "a")
    return ProjectionCoeffs(coeffs=_frozen(f.u.T @ a @ f.vt_full.T))


def change_rates(f: SvdFactors, delta_w: Matrix, epsilon: float = DEFAULT_EPSILON) -> ChangeRates:
    """
    Change rates delta_i = u_i^T dW v_i / (sigma_i + epsilon).

    Computed in matrix form as the rectangle diagonal of U^T dW V scaled by
    1 / (sigma + epsilon).

    Args:
        f: Factors of the pretrained W
        delta_w: Update dW with W's shape
        epsilon: Positive regularizer of the denominator

    Returns:
        ChangeRates with the absolute rates and their ranking
    """
    if not epsilon > 0:
        raise InvalidArgument(f"epsilon must be positive, got {epsilon}")
    coeffs = project_global(f, delta_w).coeffs
    signed = np.diagonal(coeffs) / (f.sigma + epsilon)
    delta = np.abs(signed)
    ranking = np.argsort(-delta, kind="stable")
    ranking.setflags(write=False)
    return ChangeRates(
        delta=_frozen(delta),
        signed=_frozen(signed),
        epsilon=float(epsilon),
        ranking=ranking,
    )


def top_k(cr: ChangeRates, k: int) -> List[int]:
    """First k directions of the ranking (highest change rates)."""
    if not 1 <= k <= len(cr):
        raise InvalidArgument(f"k must lie in [1, {len(cr)}], got {k}")
    return [int(i) for i in cr.ranking[:k]]


def scaled_rate(delta: float) -> float:
    """Plot scaling ln(delta + 1) / 3."""
    if delta < 0:
        raise InvalidArgument(f"change rate must be non-negative, got {delta}")
    return math.log1p(delta) / 3.0


def scaled_rates(delta: Sequence[float]) -> np.ndarray:
    arr = np.asarray(delta, dtype=np.float64)
    if np.any(arr < 0):
        raise InvalidArgument("change rates must be non-negative")
    return np.log1p(arr) / 3.0


def frob_norm(a: Matrix) -> float:
    """Frobenius norm."""
    a = as_matrix(a, "a")
    return float(np.sqrt(np.sum(a * a)))


def core_energy_fraction(f: SvdFactors, a: Matrix) -> float:
    """
    Share of the squared global-basis coordinates of ``a`` that sits on the
    core bases (rectangle diagonal). Returns 0 for the zero matrix.
    """
    coeffs = project_global(f, a).coeffs
    total = float(np.sum(coeffs * coeffs))
    if total == 0.0:
        return 0.0
    diag = np.diagonal(coeffs)
    return float(np.sum(diag * diag)) / total
