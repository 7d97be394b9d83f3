"""NumPy reference implementation of the residual-power kernel.

Semantics must stay in lockstep with the Cython twin (``_qcore.pyx``):
both build the steering matrix, form the normal equations and bail out
with status 1 when the Cholesky pivot ratio suggests a near-singular
Gram matrix, leaving the rank-revealing fallback to the caller.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

# Pivot-ratio proxy for cond(A*A); roughly the 1e10 condition threshold.
PIVOT_RATIO_LIMIT = 1e10

STATUS_OK = 0
STATUS_ILL_CONDITIONED = 1


def steer(x, y, u, v):
    """Steering matrix with entries exp(-j(x_k u_i + y_k v_i))."""
    return np.exp(-1j * (np.outer(x, u) + np.outer(y, v)))


def _chol_pivot_check(s_mat):
    try:
        chol = np.linalg.cholesky(s_mat)
    except np.linalg.LinAlgError:
        return None
    piv = np.diagonal(chol).real ** 2
    if piv.min() <= 0.0 or not np.isfinite(piv).all():
        return None
    if piv.max() / piv.min() > PIVOT_RATIO_LIMIT:
        return None
    return chol

def _solve_chol(chol, rhs):
    fwd = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.conj().T, fwd)


def q_eval(x, y, u, v, z, want_grad):
    """Residual power, fitted amplitudes and optionally the gradient.

    Returns ``(q, bhat, grad_u, grad_v, status)``.  With status 1 the
    Gram matrix is numerically rank deficient and no values are filled.
    """
    a_mat = steer(x, y, u, v)
    s_mat = a_mat.conj().T @ a_mat
    chol = _chol_pivot_check(s_mat)
    if chol is None:
        return 0.0, None, None, None, STATUS_ILL_CONDITIONED
    beams = a_mat.conj().T @ z
    bhat = _solve_chol(chol, beams)
    q = float(np.real(z.conj() @ z) - np.real(beams.conj() @ bhat))
    if q < 0.0:
        q = 0.0
    if not want_grad:
        return q, bhat, None, None, STATUS_OK
    dx = a_mat.conj().T @ (x * z)
    tx = a_mat.conj().T @ (x[:, None] * a_mat)
    grad_u = 2.0 * np.imag(bhat.conj() * (dx - tx @ bhat))
    dy = a_mat.conj().T @ (y * z)
    ty = a_mat.conj().T @ (y[:, None] * a_mat)
    grad_v = 2.0 * np.imag(bhat.conj() * (dy - ty @ bhat))
    return q, bhat, grad_u, grad_v, STATUS_OK


def q_batch(x, y, u, v, snapshots):
    """Residual power for many snapshots at fixed directions.

    ``snapshots`` is (K, N); returns ``(q_values, status)``.  The Gram
    factorization is reused across snapshots.
    """
    a_mat = steer(x, y, u, v)
    s_mat = a_mat.conj().T @ a_mat
    chol = _chol_pivot_check(s_mat)
    if chol is None:
        return None, STATUS_ILL_CONDITIONED
    beams = a_mat.conj().T @ snapshots.T
    half = np.linalg.solve(chol, beams)
    q = np.einsum("kn,kn->k", snapshots.conj(), snapshots).real
    q -= np.einsum("mk,mk->k", half.conj(), half).real
    return np.maximum(q, 0.0), STATUS_OK
