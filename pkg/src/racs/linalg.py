"""Right pseudoinverse of a wide matrix via its Gram Cholesky factor.

All routines work in float64 regardless of the input dtype; callers cast
the result back if they train in float32.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionError, RangeError, SingularityError

log = logging.getLogger(__name__)

RIDGE_SCALE = 1e-6
DEPENDENCE_TOL = 1e-12


@dataclass(frozen=True)
class PinvState:
    """Cached factorization of ``Phi_r Phi_r^T`` and the tied decoder ``psi``.

    ``psi`` is ``Phi_r^T (Phi_r Phi_r^T + ridge I)^{-1}`` with shape (n, r).
    """

    r: int
    rows: np.ndarray
    gram_chol: np.ndarray
    psi: np.ndarray
    ridge: float = 0.0

    @property
    def n(self) -> int:
        return self.rows.shape[1]


def _cholesky(gram: np.ndarray) -> np.ndarray:
    # numpy happily factors numerically singular matrices; tiny pivots count as failure
    L = np.linalg.cholesky(gram)
    diag = np.diag(L)
    if np.any(diag**2 <= DEPENDENCE_TOL * np.maximum(np.diag(gram), np.finfo(float).tiny)):
        raise np.linalg.LinAlgError("near-zero pivot")
    return L


def _as_rows(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[None, :]
    if phi.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {phi.shape}")
    r, n = phi.shape
    if r < 1 or r > n:
        raise DimensionError(f"need 1 <= r <= n, got r={r}, n={n}")
    return phi


def pinv_rows(phi, ridge: float | None = None) -> PinvState:
    """Factor ``phi phi^T`` and form the right pseudoinverse of ``phi``.

    With ``ridge=None`` an unregularized factorization is attempted first and
    a ridge of ``1e-6 * trace / r`` is added only if it fails. An explicit
    ``ridge`` skips the first attempt.
    """
    phi = _as_rows(phi)
    r = phi.shape[0]
    if not np.any(phi):
        raise SingularityError("measurement rows are all zero")
    gram = phi @ phi.T
    L = None
    if ridge is None:
        try:
            L = _cholesky(gram)
            ridge = 0.0
        except np.linalg.LinAlgError:
            ridge = RIDGE_SCALE * np.trace(gram) / r
            log.warning("Gram matrix of %d rows not positive definite; ridge %.3g applied", r, ridge)
    if L is None:
        try:
            L = _cholesky(gram + ridge * np.eye(r))
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"Cholesky failed with ridge {ridge:.3g}") from exc
    psi = cho_solve((L, True), phi).T
    if ridge == 0.0:
        # one refinement step: residual E = I - phi psi shrinks to E^2
        psi = psi + psi @ (np.eye(r) - phi @ psi)
    return PinvState(r=r, rows=phi, gram_chol=L, psi=np.ascontiguousarray(psi), ridge=float(ridge))


def pinv_append_row(state: PinvState, new_row) -> PinvState:
    """Extend ``state`` by one measurement row in O(n r) work.

    The Cholesky factor is bordered with the new row's Gram column. If the
    Schur complement shows the row is (numerically) in the span of the
    existing rows, the whole prefix is refactored with a ridge instead.
    """
    v = np.asarray(new_row, dtype=np.float64).reshape(-1)
    if v.shape[0] != state.n:
        raise DimensionError(f"row length {v.shape[0]} != n={state.n}")
    if state.r + 1 > state.n:
        raise RangeError(f"cannot append row {state.r + 1} to a matrix with n={state.n}")
    rows = np.vstack([state.rows, v])
    if state.ridge > 0:
        return pinv_rows(rows)

    g = state.rows @ v
    c = float(v @ v)
    l = solve_triangular(state.gram_chol, g, lower=True)
    schur = c - float(l @ l)
    if schur <= DEPENDENCE_TOL * c:
        gram_trace = np.einsum("ij,ij->", rows, rows)
        ridge = RIDGE_SCALE * gram_trace / (state.r + 1)
        log.warning("appended row %d is dependent on earlier rows; refactoring with ridge %.3g",
                    state.r + 1, ridge)
        return pinv_rows(rows, ridge=ridge)

    r = state.r
    L = np.zeros((r + 1, r + 1))
    L[:r, :r] = state.gram_chol
    L[r, :r] = l
    L[r, r] = np.sqrt(schur)

    coef = state.psi.T @ v  # G^{-1} Phi_r v
    resid = v - state.psi @ g  # component of v orthogonal to the row space
    resid = resid - state.psi @ (state.rows @ resid)  # second pass restores orthogonality
    col = resid / (resid @ resid)
    psi = np.empty((state.n, r + 1))
    psi[:, :r] = state.psi - np.outer(col, coef)
    psi[:, r] = col
    return PinvState(r=r + 1, rows=rows, gram_chol=L, psi=psi, ridge=0.0)


def pinv_grad(phi, state: PinvState, grad_psi) -> np.ndarray:
    """Pull a gradient on ``psi`` (n x r) back to ``phi`` (r x n).

    Differentiates ``Phi -> Phi^T G^{-1}`` with ``G = Phi Phi^T + ridge I``
    using ``d(G^{-1}) = -G^{-1} dG G^{-1}``. A nonzero ridge is treated as a
    constant of the map.
    """
    phi = _as_rows(phi)
    grad_psi = np.asarray(grad_psi, dtype=np.float64)
    if grad_psi.shape != (phi.shape[1], phi.shape[0]):
        raise DimensionError(f"grad_psi shape {grad_psi.shape} does not match psi {state.psi.shape}")
    ginv_gt = cho_solve((state.gram_chol, True), grad_psi.T)
    M = ginv_gt @ state.psi
    return ginv_gt - (M + M.T) @ phi
