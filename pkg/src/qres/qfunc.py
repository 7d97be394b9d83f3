"""Residual-power core: projector, Q value, gradient, moments and curvature.

Q(dirs) = min_b ||z - A(dirs) b||^2 = z* Gamma z with the orthogonal
projector Gamma = I - A (A*A)^{-1} A*.  The well-conditioned path solves
the normal equations in the selected kernel backend; near the singular
set of coincident directions a rank-revealing Householder reduction takes
over so Q stays continuous there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr as _qr

from . import _kernels
from .geometry import ArrayGeometry, DirectionSet, transfer_matrix

#: cond(A*A) beyond which the normal-equation path is abandoned.
CONDITION_LIMIT = 1e10

#: relative singular-value cutoff for dropping dependent steering columns.
QR_RANK_TOLERANCE = 1e-8


class IllConditioned(ValueError):
    """Steering Gram matrix numerically singular (coincident directions)."""

    def __init__(self, condition: float):
        super().__init__(f"A*A condition number {condition:.3e} exceeds {CONDITION_LIMIT:.0e}")
        self.condition = condition


@dataclass
class QEvaluation:
    """Q value with fitted amplitudes and optional gradient/beam outputs.

    ``gradient`` is ordered u_1..u_M for linear arrays and
    u_1..u_M, v_1..v_M for planar ones.
    """

    q: float
    amplitudes: np.ndarray
    gradient: np.ndarray | None = None
    condition: float | None = None
    degenerate: bool = False
    sum_beams: np.ndarray | None = None
    diff_beams_x: np.ndarray | None = None
    diff_beams_y: np.ndarray | None = None


def _gram_condition(a_mat: np.ndarray) -> float:
    evals = np.linalg.eigvalsh(a_mat.conj().T @ a_mat)
    if evals[-1] <= 0:
        return np.inf
    return np.inf if evals[0] <= 0 else float(evals[-1] / evals[0])


def projector(geom: ArrayGeometry, dirs: DirectionSet) -> np.ndarray:
    """Orthogonal projector onto the complement of the steering span.

    Raises IllConditioned when cond(A*A) exceeds the threshold, which
    signals (nearly) coincident directions.
    """
    if dirs.m == 0:
        return np.eye(geom.n_elements, dtype=complex)
    a_mat = transfer_matrix(geom, dirs)
    cond = _gram_condition(a_mat)
    if cond > CONDITION_LIMIT:
        raise IllConditioned(cond)
    s_mat = a_mat.conj().T @ a_mat
    gamma = np.eye(geom.n_elements, dtype=complex) - a_mat @ np.linalg.solve(s_mat, a_mat.conj().T)
    return 0.5 * (gamma + gamma.conj().T)


def _q_qr(a_mat: np.ndarray, z: np.ndarray):
    """Rank-revealing fallback: Q from a pivoted Householder reduction.

    Dependent steering columns are dropped, so the value agrees with the
    lower-order Q of the distinct directions and is continuous across the
    singular set.
    """
    q_fac, r_fac, piv = _qr(a_mat, mode="economic", pivoting=True)
    diag = np.abs(np.diagonal(r_fac))
    rank = int(np.sum(diag > QR_RANK_TOLERANCE * diag[0])) if diag[0] > 0 else 0
    coeffs = q_fac.conj().T @ z
    q = float(np.real(z.conj() @ z) - np.real(coeffs[:rank].conj() @ coeffs[:rank]))
    bhat = np.zeros(a_mat.shape[1], dtype=complex)
    if rank > 0:
        bhat_piv = np.linalg.solve(r_fac[:rank, :rank], coeffs[:rank])
        bhat[piv[:rank]] = bhat_piv
    return max(q, 0.0), bhat


def q_from_matrix(a_mat: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Residual power and amplitude fit for an explicit column matrix.

    Same path selection as ``q_value``; useful when steering columns are
    modified (element patterns, coupling studies).
    """
    a_mat = np.asarray(a_mat, dtype=complex)
    z = np.asarray(z, dtype=complex)
    s_mat = a_mat.conj().T @ a_mat
    try:
        chol = np.linalg.cholesky(s_mat)
        piv = np.diagonal(chol).real ** 2
        if piv.min() > 0 and piv.max() / piv.min() <= _kernels.PIVOT_RATIO_LIMIT:
            beams = a_mat.conj().T @ z
            bhat = np.linalg.solve(chol.conj().T, np.linalg.solve(chol, beams))
            q = float(np.real(z.conj() @ z) - np.real(beams.conj() @ bhat))
            return max(q, 0.0), bhat
    except np.linalg.LinAlgError:
        pass
    return _q_qr(a_mat, z)


def q_value(z, geom: ArrayGeometry, dirs: DirectionSet, with_condition: bool = False) -> QEvaluation:
    """Residual power and least-squares amplitude fit at ``dirs``.

    Coincident directions are absorbed (degenerate flag set) instead of
    raising; Q is then the value with duplicated columns removed.
    """
    z = np.asarray(z, dtype=complex)
    q, bhat, _, _, status = _kernels.q_eval(geom.x, geom.y, dirs.u, dirs.v, z, False)
    degenerate = status != _kernels.STATUS_OK
    if degenerate:
        a_mat = transfer_matrix(geom, dirs)
        q, bhat = _q_qr(a_mat, z)
    cond = None
    if with_condition or degenerate:
        cond = _gram_condition(transfer_matrix(geom, dirs))
    return QEvaluation(q=q, amplitudes=bhat, condition=cond, degenerate=degenerate)


def q_gradient(z, geom: ArrayGeometry, dirs: DirectionSet, with_beams: bool = True) -> QEvaluation:
    """Analytic Q gradient from simultaneous sum and difference beams.

    Component i is 2 Im b_i* (a_i* D z - a_i* D A b) with D = diag(x_k)
    for u and diag(y_k) for v, evaluated with the fitted amplitudes b.
    """
    z = np.asarray(z, dtype=complex)
    q, bhat, grad_u, grad_v, status = _kernels.q_eval(geom.x, geom.y, dirs.u, dirs.v, z, True)
    if status != _kernels.STATUS_OK:
        raise IllConditioned(_gram_condition(transfer_matrix(geom, dirs)))
    grad = grad_u if geom.kind == "linear" else np.concatenate([grad_u, grad_v])
    out = QEvaluation(q=q, amplitudes=bhat, gradient=grad)
    if with_beams:
        a_mat = transfer_matrix(geom, dirs)
        out.sum_beams = a_mat.conj().T @ z
        out.diff_beams_x = a_mat.conj().T @ (geom.x * z)
        if geom.kind == "planar":
            out.diff_beams_y = a_mat.conj().T @ (geom.y * z)
    return out


def q_batch(snapshots, geom: ArrayGeometry, dirs: DirectionSet) -> np.ndarray:
    """Q values of many snapshots at fixed directions (vectorized)."""
    snapshots = np.atleast_2d(np.asarray(snapshots, dtype=complex))
    values, status = _kernels.q_batch(geom.x, geom.y, dirs.u, dirs.v, snapshots)
    if status != _kernels.STATUS_OK:
        a_mat = transfer_matrix(geom, dirs)
        values = np.array([_q_qr(a_mat, z)[0] for z in snapshots])
    return values


# ---------------------------------------------------------------------------
# moments


def _noise_trace(gamma: np.ndarray, noise_cov) -> float:
    n = gamma.shape[0]
    if noise_cov is None:
        noise_cov = 1.0
    if np.isscalar(noise_cov):
        return float(noise_cov) * float(np.trace(gamma).real)
    noise_cov = np.asarray(noise_cov)
    if noise_cov.shape != (n, n):
        raise ValueError("noise covariance has wrong dimensions")
    return float(np.trace(gamma @ noise_cov).real)


def expected_q(
    geom: ArrayGeometry,
    dirs: DirectionSet,
    dirs_ex: DirectionSet,
    amplitude_cov: np.ndarray,
    noise_cov=None,
) -> float:
    """E{Q(dirs)} = trace(A_ex* Gamma A_ex B) + trace(Gamma R).

    ``amplitude_cov`` is the (possibly rank-1) Hermitian B at the true
    directions; ``noise_cov`` defaults to the identity (sigma^2 = 1).
    """
    b_cov = np.asarray(amplitude_cov)
    if b_cov.shape != (dirs_ex.m, dirs_ex.m):
        raise ValueError("amplitude covariance has wrong dimensions")
    gamma = projector(geom, dirs)
    a_ex = transfer_matrix(geom, dirs_ex)
    signal = float(np.trace(a_ex.conj().T @ gamma @ a_ex @ b_cov).real)
    return signal + _noise_trace(gamma, noise_cov)


def var_q(geom: ArrayGeometry, dirs: DirectionSet, noise_cov) -> float:
    """var{Q} = trace(Gamma R Gamma R) for zero-mean z with covariance R."""
    gamma = projector(geom, dirs)
    r_mat = np.asarray(noise_cov)
    if r_mat.shape != gamma.shape:
        raise ValueError("covariance has wrong dimensions")
    gr = gamma @ r_mat
    return float(np.trace(gr @ gr).real)


# ---------------------------------------------------------------------------
# curvature at the minimum


def direction_parameters(geom: ArrayGeometry, m: int) -> list[tuple[int, str]]:
    """(target index, axis) layout of the direction parameter vector."""
    params = [(i, "x") for i in range(m)]
    if geom.kind == "planar":
        params += [(i, "y") for i in range(m)]
    return params


def expected_hessian_at_min(geom: ArrayGeometry, dirs_ex: DirectionSet, amplitude) -> np.ndarray:
    """E{Q_ww} at the true directions under white unit noise.

    ``amplitude`` is either a deterministic complex vector b (the dyad
    b b* is used) or a Hermitian covariance B.  Entry (p, q) equals
    2 Re(a_tq* D_axq Gamma D_axp a_tp * B[tp, tq]); for diagonal B and a
    linear array the matrix is diagonal.
    """
    amplitude = np.asarray(amplitude)
    b_cov = np.outer(amplitude, amplitude.conj()) if amplitude.ndim == 1 else amplitude
    if b_cov.shape != (dirs_ex.m, dirs_ex.m):
        raise ValueError("amplitude data has wrong dimensions")
    a_mat = transfer_matrix(geom, dirs_ex)
    gamma = projector(geom, dirs_ex)
    d_cols = {"x": geom.x[:, None] * a_mat, "y": geom.y[:, None] * a_mat}
    cross = {
        (beta, alpha): d_cols[beta].conj().T @ gamma @ d_cols[alpha]
        for alpha in ("x", "y")
        for beta in ("x", "y")
    }
    params = direction_parameters(geom, dirs_ex.m)
    n_par = len(params)
    hess = np.empty((n_par, n_par))
    for p, (ti, ax_p) in enumerate(params):
        for q, (tk, ax_q) in enumerate(params):
            c = cross[(ax_q, ax_p)][tk, ti]
            hess[p, q] = 2.0 * np.real(c * b_cov[ti, tk])
    return 0.5 * (hess + hess.T)


# ---------------------------------------------------------------------------
# projector derivatives (internal helpers, validated against finite
# differences; only their contractions feed the public operations)


def _column_derivative(geom, a_mat, target, axis):
    d = geom.x if axis == "x" else geom.y
    return -1j * d * a_mat[:, target]


def projector_first_derivatives(geom: ArrayGeometry, dirs: DirectionSet) -> list[np.ndarray]:
    """List of d Gamma / d w_p, ordered like direction_parameters."""
    a_mat = transfer_matrix(geom, dirs)
    gamma = projector(geom, dirs)
    s_mat = a_mat.conj().T @ a_mat
    pseudo = np.linalg.solve(s_mat, a_mat.conj().T)  # (A*A)^{-1} A*
    out = []
    for target, axis in direction_parameters(geom, dirs.m):
        col = _column_derivative(geom, a_mat, target, axis)
        term = gamma @ np.outer(col, pseudo[target])
        out.append(-(term + term.conj().T))
    return out


def projector_second_derivative(
    geom: ArrayGeometry, dirs: DirectionSet, p: int, q: int
) -> np.ndarray:
    """Full second derivative of Gamma for parameters p, q."""
    a_mat = transfer_matrix(geom, dirs)
    gamma = projector(geom, dirs)
    m = dirs.m
    s_mat = a_mat.conj().T @ a_mat
    s_inv = np.linalg.inv(s_mat)
    params = direction_parameters(geom, m)
    ti, ax_i = params[p]
    tk, ax_k = params[q]

    def col_matrix(target, axis):
        out = np.zeros_like(a_mat)
        out[:, target] = _column_derivative(geom, a_mat, target, axis)
        return out

    a_i = col_matrix(ti, ax_i)
    a_k = col_matrix(tk, ax_k)
    a_ik = np.zeros_like(a_mat)
    if ti == tk:
        d_i = geom.x if ax_i == "x" else geom.y
        d_k = geom.x if ax_k == "x" else geom.y
        a_ik[:, ti] = -d_i * d_k * a_mat[:, ti]
    ah = a_mat.conj().T
    term1 = -gamma @ (a_i @ s_inv @ a_k.conj().T + a_k @ s_inv @ a_i.conj().T) @ gamma
    term2 = a_mat @ s_inv @ (a_k.conj().T @ gamma @ a_i + a_i.conj().T @ gamma @ a_k) @ s_inv @ ah
    term3 = -gamma @ (a_ik - a_i @ s_inv @ ah @ a_k) @ s_inv @ ah
    term4 = term3.conj().T
    term5 = gamma @ a_k @ s_inv @ ah @ a_i @ s_inv @ ah
    term6 = term5.conj().T
    return term1 + term2 + term3 + term4 + term5 + term6
